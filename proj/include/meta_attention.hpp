// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header for the Bayesian meta-attention library.

#pragma once

#include "meta_attention/analysis.hpp"
#include "meta_attention/checkpoint.hpp"
#include "meta_attention/controller.hpp"
#include "meta_attention/data.hpp"
#include "meta_attention/errors.hpp"
#include "meta_attention/experts.hpp"
#include "meta_attention/harness.hpp"
#include "meta_attention/model.hpp"
#include "meta_attention/optim.hpp"
#include "meta_attention/parameter.hpp"
#include "meta_attention/rng.hpp"
#include "meta_attention/special.hpp"
#include "meta_attention/tensor.hpp"
