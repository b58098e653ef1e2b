#pragma once

#include "diagrnn/cells.hpp"
#include "diagrnn/dataset.hpp"
#include "diagrnn/errors.hpp"
#include "diagrnn/harness.hpp"
#include "diagrnn/model.hpp"
#include "diagrnn/optimizers.hpp"
#include "diagrnn/rng.hpp"
#include "diagrnn/tape.hpp"
#include "diagrnn/tensor.hpp"
