// SPDX-License-Identifier: Apache-2.0
//
// Byte-level corpus: every byte is a token, the first 95% of the file is the
// training region and the rest is held out for validation.

#pragma once

#include "meta_attention/errors.hpp"
#include "meta_attention/model.hpp"
#include "meta_attention/rng.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace meta_attention {

inline constexpr double kTrainFraction = 0.95;

class Corpus {
 public:
  /// `window` is the sample length T + 1; both regions must hold at least one.
  static Corpus from_bytes(std::vector<unsigned char> bytes, std::size_t window, std::string source = "<memory>") {
    if (window < 2) throw input_error("corpus window must be at least 2 bytes");
    if (bytes.size() < window)
      throw input_error("corpus " + source + " holds " + std::to_string(bytes.size()) + " bytes; need at least T+1 = " + std::to_string(window));
    Corpus c;
    c.source_ = std::move(source);
    c.window_ = window;
    c.bytes_ = std::move(bytes);
    c.split_ = static_cast<std::size_t>(static_cast<double>(c.bytes_.size()) * kTrainFraction);
    // A tiny file still needs one full window on each side.
    c.split_ = std::clamp(c.split_, std::min(window, c.bytes_.size()), c.bytes_.size() >= 2 * window ? c.bytes_.size() - window : c.bytes_.size());
    return c;
  }

  static Corpus load(const std::string& path, std::size_t window) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw input_error("cannot open corpus " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_bytes(std::move(bytes), window, path);
  }

  const std::string& source() const { return source_; }
  std::size_t size() const { return bytes_.size(); }
  std::size_t window() const { return window_; }
  std::size_t train_size() const { return split_; }
  /// Empty when the file is too small to hold out a full window.
  std::size_t validation_size() const { return bytes_.size() - split_; }
  bool has_validation() const { return validation_size() >= window_; }

  /// `batch` random windows from the training region.
  TokenBatch sample_train(std::size_t batch, Rng& rng) const {
    TokenBatch b{batch, window_, {}};
    b.tokens.reserve(batch * window_);
    const std::size_t starts = split_ - window_ + 1;
    for (std::size_t i = 0; i < batch; ++i) {
      const std::size_t s = static_cast<std::size_t>(rng.below(starts));
      for (std::size_t j = 0; j < window_; ++j) b.tokens.push_back(bytes_[s + j]);
    }
    return b;
  }

  /// Non-overlapping windows tiling the validation region in order (at most max_windows).
  std::vector<TokenBatch> validation_batches(std::size_t batch, std::size_t max_windows = 0) const {
    std::vector<TokenBatch> out;
    if (!has_validation()) return out;
    std::size_t n = validation_size() / window_;
    if (max_windows) n = std::min(n, max_windows);
    for (std::size_t w = 0; w < n; w += batch) {
      const std::size_t rows = std::min(batch, n - w);
      TokenBatch b{rows, window_, {}};
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t s = split_ + (w + r) * window_;
        for (std::size_t j = 0; j < window_; ++j) b.tokens.push_back(bytes_[s + j]);
      }
      out.push_back(std::move(b));
    }
    return out;
  }

 private:
  std::string source_;
  std::size_t window_ = 0;
  std::size_t split_ = 0;
  std::vector<unsigned char> bytes_;
};

}  // namespace meta_attention
