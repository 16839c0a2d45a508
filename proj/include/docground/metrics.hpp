#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "docground/span_decoding.hpp"

namespace docground::metrics {

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse whitespace.
std::string normalize_answer(std::string_view text);
std::vector<std::string> normalized_tokens(std::string_view text);

int exact_match(std::string_view prediction, std::string_view reference);
double token_f1(std::string_view prediction, std::string_view reference);

/// 1 iff one of the first k hypotheses is an exact match.
int em_at_k(const SpanPosterior& nbest, std::string_view reference, std::size_t k = 5);

/// mteval-v13a tokenization as done by SacreBLEU.
std::vector<std::string> tokenize_13a(std::string_view segment);

enum class BleuSmoothing { None, Exp };

BleuSmoothing parse_bleu_smoothing(const std::string& s);
std::string to_string(BleuSmoothing s);

struct BleuOptions {
  BleuSmoothing smoothing = BleuSmoothing::None;
  bool lowercase = false;
};

struct BleuResult {
  double score = 0.0;
  std::array<std::size_t, 4> counts{};
  std::array<std::size_t, 4> totals{};
  std::array<double, 4> precisions{};
  double bp = 0.0;
  std::size_t sys_len = 0;
  std::size_t ref_len = 0;
  std::string signature;
};

std::string bleu_signature(const BleuOptions& options);

/// Corpus BLEU-4, one reference per hypothesis. Throws DataError on an empty corpus
/// or a length mismatch.
BleuResult corpus_bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
                       const BleuOptions& options = {});

/// Per-turn averages, in percent.
struct SpanScores {
  double f1 = 0.0;
  double em = 0.0;
  double em_at_5 = 0.0;
  double em_at_1 = 0.0;
  std::size_t n = 0;
};

/// `nbest[i]` is scored against `references[i]`; rank 1 is the prediction.
SpanScores score_spans(const std::vector<SpanPosterior>& nbest, const std::vector<std::string>& references);

struct EvaluationReport {
  double f1 = 0.0;
  double em = 0.0;
  double em_at_5 = 0.0;
  double bleu = 0.0;
  std::size_t n_samples = 0;
  std::string bleu_signature;
};

nlohmann::json to_json(const EvaluationReport& report);

}  // namespace docground::metrics
