#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "docground/corpus.hpp"
#include "docground/features.hpp"
#include "docground/generation.hpp"
#include "docground/metrics.hpp"
#include "docground/span_decoding.hpp"
#include "docground/span_heads.hpp"
#include "docground/windowing.hpp"

namespace docground::pipeline {

inline constexpr std::string_view kVersion = "docground-1";

struct PathsConfig {
  std::string documents = "data/documents.json";
  std::string train_dialogs = "data/dialogs_train.json";
  std::string eval_dialogs = "data/dialogs_eval.json";
  std::string work_dir = "work";
};

struct HeadConfig {
  HeadKind kind = HeadKind::Independent;
  TrainConfig train;
  /// Span length cap for unrestricted masks.
  std::size_t max_span_tokens = 30;
};

struct DecodeConfig {
  std::size_t n_best = 20;
  DuplicateRule duplicates = DuplicateRule::Max;
};

struct EnsembleMemberConfig {
  std::string model_id;
  double f1 = 0.0;
  std::string nbest;
};

struct EnsembleSection {
  std::vector<EnsembleMemberConfig> members;
  std::size_t n = 20;
};

struct GenerationConfig {
  GroundingMode mode = GroundingMode::PredictedSpan;
  BeamOptions beam;
  /// 0 decodes from the top span only; k > 0 mixes over the top-k spans.
  std::size_t marginalize_k = 0;
  InputOptions input;
  NgramWeights weights;
};

struct EvalConfig {
  metrics::BleuOptions bleu;
  std::size_t k = 5;
};

struct PipelineConfig {
  PathsConfig paths;
  ExtractOptions corpus;
  WindowParams windowing;
  EncoderOptions encoder;
  HeadConfig head;
  DecodeConfig decode;
  EnsembleSection ensemble;
  GenerationConfig generation;
  EvalConfig eval;
  std::size_t workers = 1;

  /// Missing keys keep their defaults; unknown keys and out-of-range values throw ConfigError.
  static PipelineConfig from_json(const nlohmann::json& j);
  [[nodiscard]] nlohmann::json to_json() const;
  void validate() const;
};

/// Sets dotted keys ("head.lr") in `config`, parsing each value as the type already there.
nlohmann::json apply_overrides(nlohmann::json config,
                               const std::vector<std::pair<std::string, std::string>>& overrides);

/// Dotted names of every scalar config entry.
std::vector<std::string> config_keys(const nlohmann::json& config);

PipelineConfig load_config(const std::optional<std::filesystem::path>& file,
                           const std::vector<std::pair<std::string, std::string>>& overrides = {});

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

std::filesystem::path manifest_path(const std::filesystem::path& artifact);

/// `<artifact>.manifest.json`: command, version, config, and content hashes of the
/// inputs and of the artifact itself.
void write_manifest(const std::filesystem::path& artifact, const std::string& command, const nlohmann::json& config,
                    const std::vector<std::filesystem::path>& inputs);

/// Throws DataError telling the user which command produces the missing file.
void require_artifact(const std::filesystem::path& path, const std::string& producer);

/// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception is rethrown.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

/// Default artifact locations under paths.work_dir.
struct ArtifactLayout {
  std::filesystem::path work;

  [[nodiscard]] std::filesystem::path features(const std::string& split) const {
    return work / ("features_" + split + ".sgf");
  }
  [[nodiscard]] std::filesystem::path checkpoint(HeadKind kind) const {
    return work / ("head_" + to_string(kind) + ".ckpt");
  }
  [[nodiscard]] std::filesystem::path generator() const { return work / "generator.json"; }
  [[nodiscard]] std::filesystem::path nbest(const std::string& name) const {
    return work / ("nbest_" + name + ".json");
  }
  [[nodiscard]] std::filesystem::path generations() const { return work / "generations.json"; }
  [[nodiscard]] std::filesystem::path report() const { return work / "report.json"; }
};

ArtifactLayout layout(const PipelineConfig& config);

// ---- in-memory stages ----

struct SampleIndex {
  std::vector<DialogSample> samples;
  std::unordered_map<std::string, std::size_t> by_id;

  explicit SampleIndex(std::vector<DialogSample> s);
  [[nodiscard]] const DialogSample& at(const std::string& sample_id) const;
};

struct PreparedFeatures {
  FeatureSet features;
  std::size_t samples = 0;
  std::size_t truncated_turns = 0;
  SkipReport skipped;
};

/// Windows and lexical features for every sample, in sample order.
PreparedFeatures prepare_features(const Corpus& corpus, const std::vector<DialogSample>& samples,
                                  const PipelineConfig& config, const SkipReport& skipped = {});

/// Groups windows by sample, preserving file order.
std::vector<std::pair<std::string, std::vector<const FeatureWindow*>>> windows_by_sample(const FeatureSet& features);

RestrictionMask window_mask(const WindowDescriptor& window, const GroundedDocument& doc, bool restricted,
                            std::size_t max_span_tokens);

/// One example per window. Targets outside the mask are added to that window's mask.
std::vector<TrainingExample> training_examples(const FeatureSet& features, const Corpus& corpus,
                                               const SampleIndex& samples, HeadKind kind, bool restricted,
                                               std::size_t max_span_tokens);

HeadCheckpoint train_span_head(const FeatureSet& features, const Corpus& corpus, const SampleIndex& samples,
                               const HeadConfig& config);

std::vector<SpanPosterior> decode_features(const HeadCheckpoint& checkpoint, const FeatureSet& features,
                                           const Corpus& corpus, const PipelineConfig& config);

NgramModel train_generator(const Corpus& corpus, const std::vector<DialogSample>& samples, NgramWeights weights);

struct GeneratedResponse {
  std::string sample_id;
  std::string response;
  double score = 0.0;
  std::string span_used;
};

std::vector<GeneratedResponse> generate_responses(const GenerationModel& model, const Corpus& corpus,
                                                  const std::vector<DialogSample>& samples,
                                                  const std::vector<SpanPosterior>* nbest,
                                                  const PipelineConfig& config);

nlohmann::json generations_to_json(const std::vector<GeneratedResponse>& responses, const GenerationConfig& config);
std::vector<GeneratedResponse> generations_from_json(const nlohmann::json& j);

/// Span metrics over every sample; BLEU when generations are given.
metrics::EvaluationReport evaluate(const Corpus& corpus, const std::vector<DialogSample>& samples,
                                   const std::vector<SpanPosterior>& nbest,
                                   const std::vector<GeneratedResponse>* generations, const EvalConfig& config,
                                   metrics::SpanScores* span_scores = nullptr);

// ---- commands: artifact I/O and manifests around the stages ----

struct CommandPaths {
  std::optional<std::filesystem::path> features;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> model;
  std::optional<std::filesystem::path> nbest;
  std::optional<std::filesystem::path> generations;
  std::optional<std::filesystem::path> out;
};

void cmd_fixtures(const std::filesystem::path& out_dir, const std::string& kind, std::uint64_t seed);
void cmd_prepare(const PipelineConfig& config, const std::string& split, const CommandPaths& paths);
void cmd_train(const PipelineConfig& config, const std::string& kind, const CommandPaths& paths);
void cmd_decode(const PipelineConfig& config, const CommandPaths& paths);
void cmd_ensemble(const PipelineConfig& config, const CommandPaths& paths);
void cmd_generate(const PipelineConfig& config, const CommandPaths& paths);
metrics::EvaluationReport cmd_eval(const PipelineConfig& config, const CommandPaths& paths);

}  // namespace docground::pipeline
