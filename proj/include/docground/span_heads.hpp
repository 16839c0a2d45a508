#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "docground/corpus.hpp"
#include "docground/windowing.hpp"

namespace docground {

enum class HeadKind { Independent, Biaffine };

std::string to_string(HeadKind kind);
HeadKind parse_head_kind(const std::string& s);

/// Positions a span head may score in one window. valid_pairs always contains kBosSpan, and
/// token 0 is always a valid start and end.
struct RestrictionMask {
  std::vector<std::size_t> valid_starts;
  std::vector<std::size_t> valid_ends;
  std::vector<TokenPair> valid_pairs;
  /// Longest span, in tokens, the independent head may combine from starts x ends.
  std::size_t max_span_tokens = std::numeric_limits<std::size_t>::max();

  /// Sorts, deduplicates and inserts the BOS entries.
  void canonicalize();
  [[nodiscard]] bool has_start(std::size_t i) const;
  [[nodiscard]] bool has_end(std::size_t i) const;
  [[nodiscard]] bool has_pair(TokenPair p) const;
  /// Adds a pair along with its start and end.
  void add_pair(TokenPair p);
};

/// Phrase-boundary restriction: for each phrase lying inside the slice, its covering start
/// token, end token and the pair.
RestrictionMask phrase_mask(const WindowDescriptor& window, const GroundedDocument& doc);
/// Every document token as start and end; pairs up to max_span_tokens long.
RestrictionMask full_mask(const WindowDescriptor& window, std::size_t max_span_tokens);

/// Non-BOS document pairs the independent head decodes: valid_starts x valid_ends with
/// start <= end and at most max_span_tokens tokens.
std::vector<TokenPair> independent_candidates(const WindowDescriptor& window, const RestrictionMask& mask);

/// Start/end linear projections.
struct IndependentHead {
  Eigen::VectorXd w_start;
  Eigen::VectorXd w_end;
  double b_start = 0.0;
  double b_end = 0.0;

  static IndependentHead zeros(std::size_t feature_dim);
  [[nodiscard]] std::size_t feature_dim() const { return static_cast<std::size_t>(w_start.size()); }
};

/// score(s, e) = h_s' U h_e + v_start' h_s + v_end' h_e + b
struct BiaffineHead {
  Eigen::MatrixXd U;
  Eigen::VectorXd v_start;
  Eigen::VectorXd v_end;
  double b = 0.0;

  static BiaffineHead zeros(std::size_t feature_dim);
  [[nodiscard]] std::size_t feature_dim() const { return static_cast<std::size_t>(v_start.size()); }
};

using SpanHead = std::variant<IndependentHead, BiaffineHead>;

HeadKind kind_of(const SpanHead& head);
std::size_t feature_dim_of(const SpanHead& head);

/// Parameters in a fixed order. Independent: w_start, w_end, b_start, b_end.
/// Biaffine: U (row-major), v_start, v_end, b.
std::vector<double> flatten(const SpanHead& head);
void unflatten(SpanHead& head, std::span<const double> params);
std::size_t parameter_count(HeadKind kind, std::size_t feature_dim);

struct StartEndLogprobs {
  Eigen::VectorXd start;
  Eigen::VectorXd end;
};

/// Log-softmax of the start and end projections, over every token or, when restricted,
/// over the mask's starts and ends only (other entries are -inf).
StartEndLogprobs score_independent(const IndependentHead& head, const Eigen::MatrixXd& hidden,
                                   const RestrictionMask& mask, bool restricted);

/// start_logprobs[s] + end_logprobs[e].
double span_logprob_independent(const StartEndLogprobs& logprobs, TokenPair pair);

/// Log-softmax of biaffine scores over mask.valid_pairs, aligned with that vector.
std::vector<double> score_biaffine(const BiaffineHead& head, const Eigen::MatrixXd& hidden,
                                   const RestrictionMask& mask);

/// Unnormalized biaffine score of one pair.
double biaffine_logit(const BiaffineHead& head, const Eigen::MatrixXd& hidden, TokenPair pair);

struct HeadGradient {
  double loss = 0.0;
  /// Same layout as flatten().
  std::vector<double> params;
};

/// Gradient of -log p(target) for the independent head.
HeadGradient gradients(const IndependentHead& head, const Eigen::MatrixXd& hidden, const RestrictionMask& mask,
                       bool restricted, TokenPair target);
/// Gradient of -log p(target) for the biaffine head; target must be in mask.valid_pairs.
HeadGradient gradients(const BiaffineHead& head, const Eigen::MatrixXd& hidden, const RestrictionMask& mask,
                       TokenPair target);
/// Dispatches on the head kind; `restricted` only affects the independent head.
HeadGradient gradients(const SpanHead& head, const Eigen::MatrixXd& hidden, const RestrictionMask& mask,
                       bool restricted, TokenPair target);

/// Negative log-likelihood of target without gradients.
double target_nll(const SpanHead& head, const Eigen::MatrixXd& hidden, const RestrictionMask& mask,
                  bool restricted, TokenPair target);

/// Highest-probability pair among the decodable candidates plus BOS; ties go to the
/// lexicographically smaller pair.
TokenPair predict_pair(const SpanHead& head, const WindowDescriptor& window, const Eigen::MatrixXd& hidden,
                       const RestrictionMask& mask, bool restricted);

struct TrainingExample {
  const Eigen::MatrixXd* hidden = nullptr;
  RestrictionMask mask;
  TokenPair target;
  std::string window_id;
};

struct TrainConfig {
  double lr = 1e-2;
  double momentum = 0.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
  bool restricted = true;
  double init_stddev = 0.02;
  bool shuffle = true;
};

struct TrainResult {
  SpanHead head;
  /// Mean cross-entropy per epoch, accumulated over the epoch's batches.
  std::vector<double> epoch_loss;
};

/// Seeded initialisation: biaffine U = 0, every vector ~ N(0, init_stddev^2), biases 0.
SpanHead initial_head(HeadKind kind, std::size_t feature_dim, const TrainConfig& config);

/// Mini-batch gradient descent with optional momentum and gradient clipping. Throws
/// NumericError on a non-finite loss and ConfigError on a target outside its mask.
TrainResult train_head(HeadKind kind, std::span<const TrainingExample> examples, std::size_t feature_dim,
                       const TrainConfig& config);
TrainResult train_head(SpanHead initial, std::span<const TrainingExample> examples, const TrainConfig& config);

struct HeadCheckpoint {
  SpanHead head;
  bool restricted = true;
};

/*
 * Head checkpoint (little-endian): char[4] "SGHC", u32 version (1), u32 head_kind
 * (0 independent, 1 biaffine), u32 feature_dim, u8 restricted, u64 parameter count,
 * f64[count] parameters in flatten() order.
 */
void write_checkpoint(const std::filesystem::path& path, const HeadCheckpoint& checkpoint);
HeadCheckpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace docground
