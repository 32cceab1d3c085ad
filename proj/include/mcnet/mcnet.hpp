#pragma once

#include "checkpoint.hpp"
#include "common.hpp"
#include "config.hpp"
#include "data.hpp"
#include "gradcheck.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "objective.hpp"
#include "ops.hpp"
#include "pcg32.hpp"
#include "pgm.hpp"
#include "tensor.hpp"
#include "train.hpp"
#include "uncertainty.hpp"
