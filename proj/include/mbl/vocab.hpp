#pragma once

#include <array>
#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mbl/error.hpp"

namespace mbl {

enum class WordClass : std::uint8_t {
  punct,
  pronoun,      // gendered pronouns
  gender_noun,  // gentleman, lady, man, woman, male, female
  noun,
  modifier,     // determiners and quantifiers that precede a noun
  adjective,
  verb,
  function,
};

struct Word {
  std::string_view text;
  WordClass cls;
};

/// The closed caption vocabulary. Ids are indices into this table and rows of
/// every token-embedding matrix; the table is sized to kVocabRows.
inline constexpr std::array<Word, 52> kWords = {{
    {".", WordClass::punct},
    {",", WordClass::punct},
    {"he", WordClass::pronoun},
    {"she", WordClass::pronoun},
    {"his", WordClass::pronoun},
    {"her", WordClass::pronoun},
    {"him", WordClass::pronoun},
    {"gentleman", WordClass::gender_noun},
    {"lady", WordClass::gender_noun},
    {"man", WordClass::gender_noun},
    {"woman", WordClass::gender_noun},
    {"male", WordClass::gender_noun},
    {"female", WordClass::gender_noun},
    {"this", WordClass::modifier},
    {"the", WordClass::modifier},
    {"a", WordClass::modifier},
    {"no", WordClass::modifier},
    {"some", WordClass::modifier},
    {"thick", WordClass::modifier},
    {"big", WordClass::modifier},
    {"any", WordClass::modifier},
    {"young", WordClass::adjective},
    {"old", WordClass::adjective},
    {"middle-aged", WordClass::adjective},
    {"very", WordClass::adjective},
    {"has", WordClass::verb},
    {"is", WordClass::verb},
    {"looks", WordClass::verb},
    {"suit", WordClass::verb},
    {"wears", WordClass::verb},
    {"and", WordClass::function},
    {"on", WordClass::function},
    {"at", WordClass::function},
    {"all", WordClass::function},
    {"there", WordClass::function},
    {"with", WordClass::function},
    {"person", WordClass::noun},
    {"face", WordClass::noun},
    {"bangs", WordClass::noun},
    {"beard", WordClass::noun},
    {"smile", WordClass::noun},
    {"eyeglasses", WordClass::noun},
    {"engineer", WordClass::noun},
    {"mechanic", WordClass::noun},
    {"pilot", WordClass::noun},
    {"surgeon", WordClass::noun},
    {"nurse", WordClass::noun},
    {"secretary", WordClass::noun},
    {"receptionist", WordClass::noun},
    {"hairdresser", WordClass::noun},
    {"desk", WordClass::noun},
    {"client", WordClass::noun},
}};

inline constexpr std::size_t kVocabRows = 64;
static_assert(kWords.size() <= kVocabRows);

using TokenId = std::uint16_t;

inline std::optional<TokenId> find_token(std::string_view word) {
  for (std::size_t i = 0; i < kWords.size(); ++i) {
    if (kWords[i].text == word) return static_cast<TokenId>(i);
  }
  return std::nullopt;
}

inline TokenId token_id(std::string_view word) {
  if (auto id = find_token(word)) return *id;
  throw VocabularyError("word '" + std::string(word) + "' is not in the vocabulary");
}

inline std::string_view token_text(TokenId id) {
  if (id >= kWords.size()) throw VocabularyError("token id " + std::to_string(id) + " is outside the vocabulary");
  return kWords[id].text;
}

inline WordClass token_class(TokenId id) {
  if (id >= kWords.size()) throw VocabularyError("token id " + std::to_string(id) + " is outside the vocabulary");
  return kWords[id].cls;
}

// ---------------------------------------------------------------------------
// Occupations
// ---------------------------------------------------------------------------

inline constexpr std::size_t kOccupations = 8;

/// First half male-coded, second half female-coded.
inline constexpr std::array<std::string_view, kOccupations> kOccupationNames = {
    "engineer", "mechanic", "pilot", "surgeon", "nurse", "secretary", "receptionist", "hairdresser"};

inline bool occupation_is_female_coded(std::size_t occ) { return occ >= kOccupations / 2; }

inline std::size_t occupation_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kOccupations; ++i) {
    if (kOccupationNames.at(i) == s) return i;
  }
  throw VocabularyError("unknown occupation '" + std::string(s) + "'");
}

}  // namespace mbl
