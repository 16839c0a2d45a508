#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "docground/corpus.hpp"
#include "docground/span_heads.hpp"
#include "docground/windowing.hpp"

namespace docground {

struct SpanHypothesis {
  CharRange char_span;
  std::vector<std::string> phrase_ids;
  double logprob = 0.0;
  std::string source_window;
  std::string text;
};

/// Hypotheses sorted by (logprob desc, start asc, end asc).
struct SpanPosterior {
  std::string sample_id;
  std::vector<SpanHypothesis> hypotheses;
  bool normalized = false;

  [[nodiscard]] double total_probability() const;
  [[nodiscard]] bool empty() const { return hypotheses.empty(); }
};

/// The decoding order: higher logprob first, then smaller start, then smaller end.
bool ranks_before(const SpanHypothesis& a, const SpanHypothesis& b);

/// Sorts with ranks_before, keeps the first n and renormalizes over them.
void truncate_and_renormalize(SpanPosterior& posterior, std::size_t n);

struct DecodeWindow {
  const WindowDescriptor* descriptor = nullptr;
  const Eigen::MatrixXd* hidden = nullptr;
  RestrictionMask mask;
};

/// How scores of the same character span from overlapping windows are combined.
enum class DuplicateRule { Max, SumProbability };

DuplicateRule parse_duplicate_rule(const std::string& s);
std::string to_string(DuplicateRule rule);

struct DecodeOptions {
  std::size_t n = 20;
  /// Independent head only: normalize start/end over the mask instead of over all tokens.
  bool restricted = true;
  DuplicateRule duplicates = DuplicateRule::Max;
};

/// Document-level n-best over all windows of one sample. BOS hypotheses never appear in the
/// output; throws DataError when no window has a decodable span. `doc` (optional) fills in
/// text and covered phrase ids.
SpanPosterior decode_document(const SpanHead& head, std::span<const DecodeWindow> windows,
                              const GroundedDocument* doc, const DecodeOptions& options);

/// Exhaustive enumeration of every candidate pair of every window; reference for decode_document.
SpanPosterior nbest_oracle(const SpanHead& head, std::span<const DecodeWindow> windows,
                           const GroundedDocument* doc, const DecodeOptions& options);

struct EnsembleMember {
  std::string model_id;
  double f1 = 0.0;
};

struct EnsembleConfig {
  std::vector<EnsembleMember> members;
  std::size_t n = 20;

  /// softmax(log f1) over members; throws ConfigError when any f1 <= 0.
  [[nodiscard]] std::vector<double> priors() const;

  static EnsembleConfig from_json(const nlohmann::json& j);
  [[nodiscard]] nlohmann::json to_json() const;
};

std::vector<double> model_priors(std::span<const double> f1_scores);

/// Bayesian model averaging: p(a) = sum_h p_h(a) p(h), with p_h(a) = 0 for spans missing
/// from member h's list. Member lists are renormalized first; the result keeps the top n.
SpanPosterior bma_ensemble(std::span<const SpanPosterior> posteriors, const EnsembleConfig& config, std::size_t n);

/// N-best file: [{sample_id, hypotheses: [{start, end, text, logprob, phrase_ids}]}].
nlohmann::json nbest_to_json(const std::vector<SpanPosterior>& posteriors);
std::vector<SpanPosterior> nbest_from_json(const nlohmann::json& j);
void write_nbest(const std::filesystem::path& path, const std::vector<SpanPosterior>& posteriors);
std::vector<SpanPosterior> read_nbest(const std::filesystem::path& path);

}  // namespace docground
