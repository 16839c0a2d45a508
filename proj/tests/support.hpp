// Random instances and small builders shared by the test binaries.
#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "docground/numeric.hpp"
#include "docground/span_decoding.hpp"
#include "docground/span_heads.hpp"
#include "docground/windowing.hpp"

namespace testsupport {

using docground::CharRange;
using docground::GaussianSource;
using docground::RestrictionMask;
using docground::TokenPair;
using docground::WindowDescriptor;

// Document token t covers characters [3t, 3t + 2).
inline CharRange doc_token_chars(std::size_t t) { return CharRange{3 * t, 3 * t + 2}; }

/// Window over document tokens [begin, end) with `context` special tokens before the slice.
inline WindowDescriptor make_window(const std::string& sample_id, std::size_t index, std::size_t begin,
                                    std::size_t end, std::size_t context, std::size_t doc_tokens) {
  WindowDescriptor w;
  w.window_id = sample_id + "#" + std::to_string(index);
  w.sample_id = sample_id;
  w.doc_id = "doc";
  auto push = [&w](int id, CharRange span, bool special) {
    w.alignment.tokens.push_back(id);
    w.alignment.char_spans.push_back(span);
    w.alignment.special_mask.push_back(special ? 1 : 0);
  };
  push(docground::kBosId, {}, true);
  for (std::size_t i = 0; i < context; ++i) push(docground::kFirstWordId + static_cast<int>(i), {}, true);
  push(docground::kSepId, {}, true);
  w.doc_token_begin = w.alignment.size();
  for (std::size_t t = begin; t < end; ++t) push(docground::kFirstWordId + 100 + static_cast<int>(t), doc_token_chars(t), false);
  w.doc_token_end = w.alignment.size();
  push(docground::kSepId, {}, true);
  w.window_char_offset = begin == 0 ? 0 : doc_token_chars(begin).start;
  w.window_char_end = end == doc_tokens ? 3 * doc_tokens - 1 : doc_token_chars(end).start;
  return w;
}

inline Eigen::MatrixXd random_hidden(GaussianSource& rng, std::size_t rows, std::size_t dim, double scale = 1.0) {
  Eigen::MatrixXd h(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    for (Eigen::Index j = 0; j < h.cols(); ++j) h(i, j) = scale * rng.normal();
  }
  return h;
}

/// Random phrase-style mask: `phrases` random document pairs of at most max_len tokens.
inline RestrictionMask random_mask(GaussianSource& rng, const WindowDescriptor& w, std::size_t phrases,
                                   std::size_t max_len) {
  RestrictionMask m;
  const std::size_t n = w.slice_length();
  for (std::size_t p = 0; p < phrases && n > 0; ++p) {
    const std::size_t s = w.doc_token_begin + rng.below(n);
    const std::size_t room = std::min(max_len, w.doc_token_end - s);
    const std::size_t e = s + rng.below(room);
    m.add_pair(TokenPair{s, e});
  }
  m.canonicalize();
  return m;
}

inline docground::SpanHead random_head(GaussianSource& rng, docground::HeadKind kind, std::size_t dim,
                                       double scale = 1.0) {
  if (kind == docground::HeadKind::Independent) {
    auto h = docground::IndependentHead::zeros(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      h.w_start[static_cast<Eigen::Index>(i)] = scale * rng.normal();
      h.w_end[static_cast<Eigen::Index>(i)] = scale * rng.normal();
    }
    h.b_start = rng.normal();
    h.b_end = rng.normal();
    return h;
  }
  auto h = docground::BiaffineHead::zeros(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = 0; j < dim; ++j) h.U(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = scale * rng.normal();
    h.v_start[static_cast<Eigen::Index>(i)] = scale * rng.normal();
    h.v_end[static_cast<Eigen::Index>(i)] = scale * rng.normal();
  }
  h.b = rng.normal();
  return h;
}

/// Several overlapping windows over one document, with features and masks.
struct DecodeInstance {
  std::vector<WindowDescriptor> descriptors;
  std::vector<Eigen::MatrixXd> hidden;
  std::vector<docground::DecodeWindow> windows;
  std::size_t doc_tokens = 0;

  [[nodiscard]] std::size_t valid_pairs(docground::HeadKind kind) const {
    std::size_t total = 0;
    for (const auto& w : windows) {
      total += kind == docground::HeadKind::Biaffine ? w.mask.valid_pairs.size()
                                                     : docground::independent_candidates(*w.descriptor, w.mask).size() + 1;
    }
    return total;
  }
};

/// `phrase_mode` draws document-level phrases and maps them into each window; otherwise
/// every window gets a full mask. `quantized` rounds features to multiples of 0.5 so that ties occur.
inline DecodeInstance random_decode_instance(GaussianSource& rng, std::size_t dim, bool phrase_mode, bool quantized) {
  DecodeInstance x;
  x.doc_tokens = 2 + rng.below(24);
  const std::size_t context = rng.below(3);
  const std::size_t capacity = 1 + rng.below(std::min<std::size_t>(x.doc_tokens, 10));
  const std::size_t stride = 1 + rng.below(capacity);
  std::vector<std::size_t> starts{0};
  while (starts.back() + capacity < x.doc_tokens) starts.push_back(starts.back() + stride);

  std::vector<TokenPair> phrases;  // document token coordinates
  for (std::size_t p = 0, count = 1 + rng.below(8); p < count; ++p) {
    const std::size_t s = rng.below(x.doc_tokens);
    phrases.push_back({s, std::min(x.doc_tokens - 1, s + rng.below(4))});
  }
  const std::size_t max_span = 1 + rng.below(6);
  for (std::size_t k = 0; k < starts.size(); ++k) {
    const std::size_t end = std::min(starts[k] + capacity, x.doc_tokens);
    x.descriptors.push_back(make_window("inst", k, starts[k], end, context, x.doc_tokens));
    Eigen::MatrixXd h = random_hidden(rng, x.descriptors.back().alignment.size(), dim);
    if (quantized) h = (h.array() * 2.0).round() / 2.0;
    x.hidden.push_back(std::move(h));
  }
  for (std::size_t k = 0; k < starts.size(); ++k) {
    const auto& w = x.descriptors[k];
    RestrictionMask m;
    if (phrase_mode) {
      for (const auto& p : phrases) {
        if (p.start >= starts[k] && p.end < starts[k] + w.slice_length()) {
          m.add_pair({w.doc_token_begin + p.start - starts[k], w.doc_token_begin + p.end - starts[k]});
        }
      }
      m.canonicalize();
    } else {
      m = docground::full_mask(w, max_span);
    }
    x.windows.push_back({&x.descriptors[k], &x.hidden[k], std::move(m)});
  }
  return x;
}

}  // namespace testsupport
