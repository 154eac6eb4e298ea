// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>

namespace meta_attention {

/// Operand shapes are incompatible.
class dimension_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke an API precondition (non-scalar loss, grad mode on where forbidden, ...).
class contract_error : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Bad user-supplied data: corpus, tokens, config values, scenario files.
class input_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A Dirichlet prior with a non-positive concentration.
class degenerate_prior_error : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace meta_attention
