#pragma once

#include "error.hpp"
#include "tensor.hpp"
#include "ops.hpp"
#include "nn.hpp"
#include "attention.hpp"
#include "encoder.hpp"
#include "mask.hpp"
#include "model.hpp"
#include "data.hpp"
#include "metrics.hpp"
#include "io.hpp"
#include "dataset.hpp"
#include "train.hpp"
#include "config.hpp"
#include "checks.hpp"
