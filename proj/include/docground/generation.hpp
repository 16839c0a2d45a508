#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "docground/corpus.hpp"
#include "docground/span_decoding.hpp"

namespace docground {

inline constexpr std::string_view kSeparatorToken = "<sep>";
inline constexpr std::string_view kStartState = "<s>";

/// Generator input: context, title and grounding, one separator between consecutive segments.
struct GenerationInput {
  std::vector<std::string> context;
  std::vector<std::string> title;
  std::vector<std::string> grounding;
  /// Untokenized grounding text (span or document) before any truncation.
  std::string grounding_text;

  [[nodiscard]] std::vector<std::string> tokens() const;
  [[nodiscard]] std::size_t size() const { return context.size() + title.size() + grounding.size() + 2; }
};

enum class GroundingMode { ReferenceSpan, PredictedSpan, FullDocument };

GroundingMode parse_grounding_mode(const std::string& s);
std::string to_string(GroundingMode mode);

struct InputOptions {
  /// Whole-input token limit; only full_document mode truncates, from the document tail.
  std::size_t max_input_tokens = 1024;
};

/// Serialized dialog context: "<user>"/"<agent>" followed by the turn's word forms.
std::vector<std::string> serialize_context(const std::vector<Turn>& context);

/// predicted_span mode uses the top hypothesis of `nbest`, which must be non-null and non-empty.
GenerationInput build_input(const DialogSample& sample, const GroundedDocument& doc, GroundingMode mode,
                            const SpanPosterior* nbest, const InputOptions& options = {});

/// Same context and title, with `text` as grounding.
GenerationInput with_grounding(const GenerationInput& base, const std::string& text);

class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::vector<std::string> tokens, const std::string& eos);

  [[nodiscard]] std::size_t size() const { return tokens_.size(); }
  [[nodiscard]] int eos_id() const { return eos_id_; }
  [[nodiscard]] const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  [[nodiscard]] std::optional<int> id(const std::string& token) const;
  [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int eos_id_ = 0;
};

/// p(next token | input, prefix). Implementations return normalized log-distributions over
/// the vocabulary; -inf marks impossible tokens.
class GenerationModel {
 public:
  virtual ~GenerationModel() = default;
  [[nodiscard]] virtual const Vocabulary& vocabulary() const = 0;
  [[nodiscard]] virtual std::vector<double> next_token_logprobs(const GenerationInput& input,
                                                                std::span<const int> prefix) const = 0;
};

/// Explicit conditional tables keyed by grounding text ("*" is the fallback) and by the
/// last `order` prefix tokens joined by spaces ("<s>"-padded; "*" is the fallback state).
/// Unlisted states fall back to uniform. Listed probabilities are normalized on load.
class TableModel final : public GenerationModel {
 public:
  static TableModel from_json(const nlohmann::json& j);

  [[nodiscard]] const Vocabulary& vocabulary() const override { return vocab_; }
  [[nodiscard]] std::vector<double> next_token_logprobs(const GenerationInput& input,
                                                        std::span<const int> prefix) const override;
  [[nodiscard]] nlohmann::json to_json() const;

 private:
  using Distribution = std::vector<double>;
  Vocabulary vocab_;
  std::size_t order_ = 1;
  std::unordered_map<std::string, std::unordered_map<std::string, Distribution>> tables_;
};

struct NgramWeights {
  double grounding = 0.5;
  double response = 0.4;
  double uniform = 0.1;
};

/// Interpolated bigram generator: a bigram over the grounding tokens (so the output tends to
/// copy the span), a bigram estimated from training responses, and a uniform floor.
class NgramModel final : public GenerationModel {
 public:
  NgramModel(Vocabulary vocab, NgramWeights weights);

  /// Counts response bigrams; the vocabulary is every response and grounding token.
  static NgramModel train(const std::vector<std::vector<std::string>>& responses,
                          const std::vector<std::vector<std::string>>& extra_vocabulary, NgramWeights weights = {});
  static NgramModel from_json(const nlohmann::json& j);
  [[nodiscard]] nlohmann::json to_json() const;

  [[nodiscard]] const Vocabulary& vocabulary() const override { return vocab_; }
  [[nodiscard]] std::vector<double> next_token_logprobs(const GenerationInput& input,
                                                        std::span<const int> prefix) const override;

 private:
  void add_response(const std::vector<int>& ids);

  Vocabulary vocab_;
  NgramWeights weights_;
  // Start state is keyed by -1.
  std::unordered_map<int, std::unordered_map<int, double>> bigrams_;
  std::vector<double> unigrams_;
  double unigram_total_ = 0.0;
};

std::unique_ptr<GenerationModel> generation_model_from_json(const nlohmann::json& j);
std::unique_ptr<GenerationModel> load_generation_model(const std::filesystem::path& path);

/// Token ids of `text`'s word forms followed by EOS. Throws DataError listing OOV tokens.
std::vector<int> encode_response(const Vocabulary& vocab, const std::string& text);
/// Space-joined tokens, EOS dropped.
std::string decode_response(const Vocabulary& vocab, std::span<const int> ids);

/// For every token already in `prefix`: score * theta if negative, score / theta if positive;
/// then log-renormalized. theta == 1 returns the input unchanged.
std::vector<double> apply_repetition_penalty(std::span<const double> logprobs, std::span<const int> prefix,
                                             double theta);

struct BeamOptions {
  std::size_t beam = 4;
  std::size_t max_len = 64;
  double rep_penalty = 1.0;
  bool length_normalize = false;
};

struct BeamHypothesis {
  std::vector<int> tokens;
  double score = 0.0;
  bool finished = false;
};

struct BeamResult {
  /// Sorted by score (ties: lexicographically smaller token sequence first); size <= beam.
  std::vector<BeamHypothesis> nbest;
  [[nodiscard]] const BeamHypothesis& best() const { return nbest.front(); }
};

/// Beam search over summed (penalized) log-probabilities. Hypotheses end at EOS or max_len.
/// Throws NumericError when the model emits NaN or +inf.
BeamResult beam_search(const GenerationModel& model, const GenerationInput& input, const BeamOptions& options);

/// Sum of penalized log-probabilities of a fixed token sequence.
double score_sequence(const GenerationModel& model, const GenerationInput& input, std::span<const int> tokens,
                      double rep_penalty = 1.0);

/// -sum log p(token | input, prefix) over `tokens` (include EOS to score termination).
double sequence_nll(const GenerationModel& model, const GenerationInput& input, std::span<const int> tokens);

/// The top-k spans of a posterior with renormalized probabilities.
struct SpanMixtureState {
  std::vector<std::string> span_texts;
  std::vector<CharRange> spans;
  std::vector<double> probabilities;

  static SpanMixtureState from_posterior(const SpanPosterior& posterior, std::size_t k = 5);
  [[nodiscard]] std::size_t size() const { return probabilities.size(); }
};

/// log sum_s p(s) p(token | input_s, prefix), one input per mixture component.
std::vector<double> marginalized_step(const GenerationModel& model, std::span<const GenerationInput> inputs,
                                      const SpanMixtureState& mixture, std::span<const int> prefix);

/// -sum_i log sum_s p(s) p(tokens_i | input_s, tokens_<i).
double marginalized_training_loss(const GenerationModel& model, std::span<const GenerationInput> inputs,
                                  const SpanMixtureState& mixture, std::span<const int> tokens);

/// Builds one input per top-k span and scores the sample's target utterance (plus EOS).
double marginalized_training_loss(const GenerationModel& model, const DialogSample& sample,
                                  const GroundedDocument& doc, const SpanPosterior& nbest, std::size_t k = 5,
                                  const InputOptions& options = {});

/// Presents the span mixture as a single generation model (shared prefix across spans);
/// the input passed to next_token_logprobs is ignored.
class MarginalizedModel final : public GenerationModel {
 public:
  MarginalizedModel(const GenerationModel& base, std::vector<GenerationInput> inputs, SpanMixtureState mixture);

  [[nodiscard]] const Vocabulary& vocabulary() const override { return base_.vocabulary(); }
  [[nodiscard]] std::vector<double> next_token_logprobs(const GenerationInput& input,
                                                        std::span<const int> prefix) const override;

 private:
  const GenerationModel& base_;
  std::vector<GenerationInput> inputs_;
  SpanMixtureState mixture_;
};

}  // namespace docground
