#pragma once

#include "mbl/error.hpp"
#include "mbl/rng.hpp"
#include "mbl/tensor.hpp"
#include "mbl/nn.hpp"
#include "mbl/vocab.hpp"
#include "mbl/data.hpp"
#include "mbl/model.hpp"
#include "mbl/checkpoint.hpp"
#include "mbl/eval.hpp"
#include "mbl/debias.hpp"
#include "mbl/config.hpp"
#include "mbl/runner.hpp"
