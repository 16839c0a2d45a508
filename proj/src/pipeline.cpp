#include "docground/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iterator>
#include <mutex>
#include <set>
#include <thread>

#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include "docground/errors.hpp"
#include "docground/fixtures.hpp"
#include "docground/numeric.hpp"
#include "docground/text.hpp"

namespace docground::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config ----

nlohmann::json PipelineConfig::to_json() const {
  json members = json::array();
  for (const auto& m : ensemble.members) members.push_back({{"model_id", m.model_id}, {"f1", m.f1}, {"nbest", m.nbest}});
  return {
      {"paths",
       {{"documents", paths.documents},
        {"train_dialogs", paths.train_dialogs},
        {"eval_dialogs", paths.eval_dialogs},
        {"work_dir", paths.work_dir}}},
      {"corpus", {{"include_followups", corpus.include_followups}, {"strict_contiguous", corpus.strict_contiguous}}},
      {"windowing", {{"max_len", windowing.max_len}, {"stride", windowing.stride}}},
      {"encoder", {{"feature_dim", encoder.feature_dim}, {"seed", encoder.seed}}},
      {"head",
       {{"kind", to_string(head.kind)},
        {"restricted", head.train.restricted},
        {"lr", head.train.lr},
        {"momentum", head.train.momentum},
        {"epochs", head.train.epochs},
        {"batch_size", head.train.batch_size},
        {"seed", head.train.seed},
        {"clip_norm", head.train.clip_norm},
        {"init_stddev", head.train.init_stddev},
        {"shuffle", head.train.shuffle},
        {"max_span_tokens", head.max_span_tokens}}},
      {"decode", {{"n_best", decode.n_best}, {"duplicates", to_string(decode.duplicates)}}},
      {"ensemble", {{"members", members}, {"n", ensemble.n}}},
      {"generation",
       {{"mode", to_string(generation.mode)},
        {"beam", generation.beam.beam},
        {"max_len", generation.beam.max_len},
        {"rep_penalty", generation.beam.rep_penalty},
        {"length_normalize", generation.beam.length_normalize},
        {"marginalize_k", generation.marginalize_k},
        {"max_input_tokens", generation.input.max_input_tokens},
        {"weights",
         {{"grounding", generation.weights.grounding},
          {"response", generation.weights.response},
          {"uniform", generation.weights.uniform}}}}},
      {"eval",
       {{"bleu_smoothing", metrics::to_string(eval.bleu.smoothing)}, {"lowercase", eval.bleu.lowercase}, {"k", eval.k}}},
      {"workers", workers},
  };
}

namespace {

bool compatible(const json& def, const json& value) {
  if (def.is_number_unsigned()) {
    return value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0);
  }
  if (def.is_number()) return value.is_number();
  return def.type() == value.type();
}

const char* type_name(const json& def) {
  if (def.is_number_unsigned()) return "non-negative integer";
  if (def.is_number()) return "number";
  if (def.is_boolean()) return "boolean";
  if (def.is_string()) return "string";
  if (def.is_array()) return "array";
  return "object";
}

void merge_checked(json& base, const json& input, const std::string& prefix) {
  if (!input.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
  for (const auto& [key, value] : input.items()) {
    const std::string name = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + name + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_checked(slot, value, name);
    } else if (!compatible(slot, value)) {
      throw ConfigError("config key '" + name + "' must be a " + type_name(slot));
    } else {
      slot = value;
    }
  }
}

template <class T>
T get(const json& j, const char* section, const char* key) {
  return j.at(section).at(key).get<T>();
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const json& input) {
  json j = PipelineConfig{}.to_json();
  merge_checked(j, input, "");
  PipelineConfig c;
  c.paths.documents = get<std::string>(j, "paths", "documents");
  c.paths.train_dialogs = get<std::string>(j, "paths", "train_dialogs");
  c.paths.eval_dialogs = get<std::string>(j, "paths", "eval_dialogs");
  c.paths.work_dir = get<std::string>(j, "paths", "work_dir");
  c.corpus.include_followups = get<bool>(j, "corpus", "include_followups");
  c.corpus.strict_contiguous = get<bool>(j, "corpus", "strict_contiguous");
  c.windowing.max_len = get<std::size_t>(j, "windowing", "max_len");
  c.windowing.stride = get<std::size_t>(j, "windowing", "stride");
  c.encoder.feature_dim = get<std::size_t>(j, "encoder", "feature_dim");
  c.encoder.seed = get<std::uint64_t>(j, "encoder", "seed");
  c.head.kind = parse_head_kind(get<std::string>(j, "head", "kind"));
  c.head.train.restricted = get<bool>(j, "head", "restricted");
  c.head.train.lr = get<double>(j, "head", "lr");
  c.head.train.momentum = get<double>(j, "head", "momentum");
  c.head.train.epochs = get<std::size_t>(j, "head", "epochs");
  c.head.train.batch_size = get<std::size_t>(j, "head", "batch_size");
  c.head.train.seed = get<std::uint64_t>(j, "head", "seed");
  c.head.train.clip_norm = get<double>(j, "head", "clip_norm");
  c.head.train.init_stddev = get<double>(j, "head", "init_stddev");
  c.head.train.shuffle = get<bool>(j, "head", "shuffle");
  c.head.max_span_tokens = get<std::size_t>(j, "head", "max_span_tokens");
  c.decode.n_best = get<std::size_t>(j, "decode", "n_best");
  c.decode.duplicates = parse_duplicate_rule(get<std::string>(j, "decode", "duplicates"));
  for (const auto& m : j.at("ensemble").at("members")) {
    try {
      c.ensemble.members.push_back(
          {m.at("model_id").get<std::string>(), m.at("f1").get<double>(), m.value("nbest", std::string())});
    } catch (const json::exception& e) {
      throw ConfigError(std::string("ensemble.members: ") + e.what());
    }
  }
  c.ensemble.n = get<std::size_t>(j, "ensemble", "n");
  c.generation.mode = parse_grounding_mode(get<std::string>(j, "generation", "mode"));
  c.generation.beam.beam = get<std::size_t>(j, "generation", "beam");
  c.generation.beam.max_len = get<std::size_t>(j, "generation", "max_len");
  c.generation.beam.rep_penalty = get<double>(j, "generation", "rep_penalty");
  c.generation.beam.length_normalize = get<bool>(j, "generation", "length_normalize");
  c.generation.marginalize_k = get<std::size_t>(j, "generation", "marginalize_k");
  c.generation.input.max_input_tokens = get<std::size_t>(j, "generation", "max_input_tokens");
  const auto& w = j.at("generation").at("weights");
  c.generation.weights = {w.at("grounding").get<double>(), w.at("response").get<double>(),
                          w.at("uniform").get<double>()};
  c.eval.bleu.smoothing = metrics::parse_bleu_smoothing(get<std::string>(j, "eval", "bleu_smoothing"));
  c.eval.bleu.lowercase = get<bool>(j, "eval", "lowercase");
  c.eval.k = get<std::size_t>(j, "eval", "k");
  c.workers = j.at("workers").get<std::size_t>();
  c.validate();
  return c;
}

void PipelineConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
  };
  require(windowing.max_len > 4, "windowing.max_len must exceed 4");
  require(windowing.stride > 0 && windowing.stride <= windowing.max_len,
          "windowing.stride must be in [1, windowing.max_len]");
  require(encoder.feature_dim >= LexicalEncoder::kIndicatorDims,
          "encoder.feature_dim must be at least " + std::to_string(LexicalEncoder::kIndicatorDims));
  require(head.train.lr > 0.0 && std::isfinite(head.train.lr), "head.lr must be positive");
  require(head.train.momentum >= 0.0 && head.train.momentum < 1.0, "head.momentum must be in [0, 1)");
  require(head.train.epochs >= 1, "head.epochs must be at least 1");
  require(head.train.batch_size >= 1, "head.batch_size must be at least 1");
  require(head.train.clip_norm >= 0.0, "head.clip_norm must be >= 0 (0 disables clipping)");
  require(head.train.init_stddev >= 0.0, "head.init_stddev must be >= 0");
  require(head.max_span_tokens >= 1, "head.max_span_tokens must be at least 1");
  require(decode.n_best >= 1, "decode.n_best must be at least 1");
  require(ensemble.n >= 1, "ensemble.n must be at least 1");
  for (const auto& m : ensemble.members) require(m.f1 > 0.0, "ensemble member f1 must be positive");
  require(generation.beam.beam >= 1, "generation.beam must be at least 1");
  require(generation.beam.max_len >= 1, "generation.max_len must be at least 1");
  require(generation.beam.rep_penalty >= 1.0, "generation.rep_penalty must be >= 1");
  require(generation.input.max_input_tokens >= 1, "generation.max_input_tokens must be at least 1");
  require(eval.k >= 1, "eval.k must be at least 1");
  require(workers >= 1, "workers must be at least 1");
}

namespace {

json* find_dotted(json& j, const std::string& key) {
  json* node = &j;
  std::size_t pos = 0;
  while (true) {
    const auto dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (!node->is_object() || !node->contains(part)) return nullptr;
    node = &(*node)[part];
    if (dot == std::string::npos) return node;
    pos = dot + 1;
  }
}

void collect_keys(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [key, value] : j.items()) {
    const std::string name = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object()) {
      collect_keys(value, name, out);
    } else if (!value.is_array()) {
      out.push_back(name);
    }
  }
}

}  // namespace

json apply_overrides(json config, const std::vector<std::pair<std::string, std::string>>& overrides) {
  for (const auto& [key, raw] : overrides) {
    json* slot = find_dotted(config, key);
    if (slot == nullptr || slot->is_object() || slot->is_array()) {
      throw ConfigError("unknown config flag --" + key);
    }
    if (slot->is_string()) {
      *slot = raw;
      continue;
    }
    if (slot->is_boolean()) {
      if (raw == "true" || raw == "1") {
        *slot = true;
      } else if (raw == "false" || raw == "0") {
        *slot = false;
      } else {
        throw ConfigError("--" + key + " expects true or false, got '" + raw + "'");
      }
      continue;
    }
    json parsed = json::parse(raw, nullptr, false);
    if (parsed.is_discarded() || !compatible(*slot, parsed)) {
      throw ConfigError("--" + key + " expects a " + type_name(*slot) + ", got '" + raw + "'");
    }
    *slot = parsed;
  }
  return config;
}

std::vector<std::string> config_keys(const json& config) {
  std::vector<std::string> out;
  collect_keys(config, "", out);
  return out;
}

PipelineConfig load_config(const std::optional<fs::path>& file,
                           const std::vector<std::pair<std::string, std::string>>& overrides) {
  json base = PipelineConfig{}.to_json();
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot open config file " + file->string());
    json loaded = json::parse(in, nullptr, false);
    if (loaded.is_discarded()) throw ConfigError("config file " + file->string() + " is not valid JSON");
    merge_checked(base, loaded, "");
  }
  return PipelineConfig::from_json(apply_overrides(std::move(base), overrides));
}

// ---- hashing, manifests ----

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

fs::path manifest_path(const fs::path& artifact) {
  fs::path p = artifact;
  p += ".manifest.json";
  return p;
}

void write_manifest(const fs::path& artifact, const std::string& command, const json& config,
                    const std::vector<fs::path>& inputs) {
  json in = json::array();
  for (const auto& p : inputs) in.push_back({{"path", p.generic_string()}, {"sha256", sha256_file(p)}});
  const json manifest = {{"artifact", artifact.filename().generic_string()},
                         {"sha256", sha256_file(artifact)},
                         {"command", command},
                         {"version", kVersion},
                         {"config", config},
                         {"inputs", in}};
  std::ofstream out(manifest_path(artifact), std::ios::binary);
  if (!out) throw DataError("cannot write " + manifest_path(artifact).string());
  out << manifest.dump(2) << '\n';
}

void require_artifact(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) {
    throw DataError("missing input " + path.string() + "; produce it with `docground " + producer + "`");
  }
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min(std::max<std::size_t>(workers, 1), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

ArtifactLayout layout(const PipelineConfig& config) { return ArtifactLayout{fs::path(config.paths.work_dir)}; }

// ---- stages ----

SampleIndex::SampleIndex(std::vector<DialogSample> s) : samples(std::move(s)) {
  for (std::size_t i = 0; i < samples.size(); ++i) by_id.emplace(samples[i].sample_id, i);
}

const DialogSample& SampleIndex::at(const std::string& sample_id) const {
  const auto it = by_id.find(sample_id);
  if (it == by_id.end()) throw DataError("unknown sample '" + sample_id + "'");
  return samples[it->second];
}

PreparedFeatures prepare_features(const Corpus& corpus, const std::vector<DialogSample>& samples,
                                  const PipelineConfig& config, const SkipReport& skipped) {
  const BasicTokenizer tokenizer;
  const LexicalEncoder encoder(config.encoder);
  std::vector<std::vector<FeatureWindow>> per_sample(samples.size());
  std::vector<std::size_t> truncated(samples.size(), 0);
  parallel_for(samples.size(), config.workers, [&](std::size_t i) {
    const auto& doc = corpus.document(samples[i].doc_id);
    auto result = make_windows(samples[i], doc, tokenizer, config.windowing);
    truncated[i] = result.truncated_turns;
    for (auto& w : result.windows) {
      Eigen::MatrixXd hidden = encoder.encode(w, samples[i]);
      per_sample[i].push_back(FeatureWindow{std::move(w), std::move(hidden)});
    }
  });

  PreparedFeatures out;
  out.features.model_id = "lexical-v1";
  out.features.tokenizer_fingerprint = tokenizer.fingerprint();
  out.features.feature_dim = encoder.feature_dim();
  out.features.params = {{"max_len", config.windowing.max_len},
                         {"stride", config.windowing.stride},
                         {"encoder", encoder.describe()}};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.truncated_turns += truncated[i];
    for (auto& w : per_sample[i]) out.features.windows.push_back(std::move(w));
  }
  out.samples = samples.size();
  out.skipped = skipped;
  return out;
}

std::vector<std::pair<std::string, std::vector<const FeatureWindow*>>> windows_by_sample(const FeatureSet& features) {
  std::vector<std::pair<std::string, std::vector<const FeatureWindow*>>> out;
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& w : features.windows) {
    const auto [it, inserted] = index.emplace(w.descriptor.sample_id, out.size());
    if (inserted) out.emplace_back(w.descriptor.sample_id, std::vector<const FeatureWindow*>{});
    out[it->second].second.push_back(&w);
  }
  return out;
}

RestrictionMask window_mask(const WindowDescriptor& window, const GroundedDocument& doc, bool restricted,
                            std::size_t max_span_tokens) {
  return restricted ? phrase_mask(window, doc) : full_mask(window, max_span_tokens);
}

std::vector<TrainingExample> training_examples(const FeatureSet& features, const Corpus& corpus,
                                               const SampleIndex& samples, HeadKind kind, bool restricted,
                                               std::size_t max_span_tokens) {
  std::vector<TrainingExample> out;
  std::size_t extended = 0;
  for (const auto& w : features.windows) {
    const auto& sample = samples.at(w.descriptor.sample_id);
    const auto& doc = corpus.document(sample.doc_id);
    TrainingExample ex;
    ex.hidden = &w.hidden_states;
    ex.mask = window_mask(w.descriptor, doc, restricted, max_span_tokens);
    ex.target = assign_targets(w.descriptor, sample.reference_span);
    ex.window_id = w.descriptor.window_id;
    const bool covered = kind == HeadKind::Biaffine
                             ? ex.mask.has_pair(ex.target)
                             : ex.mask.has_start(ex.target.start) && ex.mask.has_end(ex.target.end);
    if (!covered) {
      ex.mask.add_pair(ex.target);
      ++extended;
    }
    out.push_back(std::move(ex));
  }
  if (extended > 0) {
    spdlog::info("{} training window(s) had a reference outside the candidate set; added to their masks", extended);
  }
  return out;
}

HeadCheckpoint train_span_head(const FeatureSet& features, const Corpus& corpus, const SampleIndex& samples,
                               const HeadConfig& config) {
  const auto examples = training_examples(features, corpus, samples, config.kind, config.train.restricted,
                                          config.max_span_tokens);
  if (examples.empty()) throw DataError("no training windows");
  auto result = train_head(config.kind, examples, features.feature_dim, config.train);
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
    spdlog::info("epoch {}: mean loss {:.6f}", e + 1, result.epoch_loss[e]);
  }
  return HeadCheckpoint{std::move(result.head), config.train.restricted};
}

std::vector<SpanPosterior> decode_features(const HeadCheckpoint& checkpoint, const FeatureSet& features,
                                           const Corpus& corpus, const PipelineConfig& config) {
  if (features.feature_dim != feature_dim_of(checkpoint.head)) {
    throw DataError("feature dimension " + std::to_string(features.feature_dim) + " does not match the checkpoint's " +
                    std::to_string(feature_dim_of(checkpoint.head)));
  }
  const auto groups = windows_by_sample(features);
  DecodeOptions opts;
  opts.n = config.decode.n_best;
  opts.restricted = checkpoint.restricted;
  opts.duplicates = config.decode.duplicates;
  std::vector<SpanPosterior> out(groups.size());
  parallel_for(groups.size(), config.workers, [&](std::size_t i) {
    const auto& doc = corpus.document(groups[i].second.front()->descriptor.doc_id);
    std::vector<DecodeWindow> windows;
    for (const auto* w : groups[i].second) {
      windows.push_back(DecodeWindow{&w->descriptor, &w->hidden_states,
                                     window_mask(w->descriptor, doc, checkpoint.restricted,
                                                 config.head.max_span_tokens)});
    }
    out[i] = decode_document(checkpoint.head, windows, &doc, opts);
    out[i].sample_id = groups[i].first;
  });
  return out;
}

NgramModel train_generator(const Corpus& corpus, const std::vector<DialogSample>& samples, NgramWeights weights) {
  std::vector<std::vector<std::string>> responses;
  for (const auto& s : samples) responses.push_back(word_forms(s.target_utterance));
  std::vector<std::vector<std::string>> extra;
  for (const auto& d : corpus.documents()) extra.push_back(word_forms(d.text()));
  for (const auto& d : corpus.dialogs()) {
    for (const auto& t : d.turns) extra.push_back(word_forms(t.utterance));
  }
  return NgramModel::train(responses, extra, weights);
}

namespace {

std::unordered_map<std::string, const SpanPosterior*> index_nbest(const std::vector<SpanPosterior>& nbest) {
  std::unordered_map<std::string, const SpanPosterior*> out;
  for (const auto& p : nbest) {
    if (!out.emplace(p.sample_id, &p).second) throw DataError("duplicate n-best entry for sample '" + p.sample_id + "'");
  }
  return out;
}

const SpanPosterior* lookup(const std::unordered_map<std::string, const SpanPosterior*>& index,
                            const std::string& sample_id) {
  const auto it = index.find(sample_id);
  return it == index.end() ? nullptr : it->second;
}

}  // namespace

std::vector<GeneratedResponse> generate_responses(const GenerationModel& model, const Corpus& corpus,
                                                  const std::vector<DialogSample>& samples,
                                                  const std::vector<SpanPosterior>* nbest,
                                                  const PipelineConfig& config) {
  const auto& gen = config.generation;
  const bool needs_nbest = gen.mode == GroundingMode::PredictedSpan || gen.marginalize_k > 0;
  if (needs_nbest && nbest == nullptr) throw DataError("generation needs an n-best file for this configuration");
  const auto index = nbest ? index_nbest(*nbest) : std::unordered_map<std::string, const SpanPosterior*>{};

  std::vector<GeneratedResponse> out(samples.size());
  parallel_for(samples.size(), config.workers, [&](std::size_t i) {
    const auto& sample = samples[i];
    const auto& doc = corpus.document(sample.doc_id);
    const SpanPosterior* posterior = nbest ? lookup(index, sample.sample_id) : nullptr;
    if (needs_nbest && (posterior == nullptr || posterior->empty())) {
      throw DataError("no n-best entry for sample '" + sample.sample_id + "'");
    }
    GeneratedResponse r;
    r.sample_id = sample.sample_id;
    BeamResult result;
    if (gen.marginalize_k > 0) {
      const auto mixture = SpanMixtureState::from_posterior(*posterior, gen.marginalize_k);
      const auto base = build_input(sample, doc, GroundingMode::ReferenceSpan, nullptr, gen.input);
      std::vector<GenerationInput> inputs;
      for (std::size_t s = 0; s < mixture.size(); ++s) {
        inputs.push_back(with_grounding(
            base, mixture.span_texts[s].empty() ? doc.slice(mixture.spans[s]) : mixture.span_texts[s]));
      }
      r.span_used = inputs.front().grounding_text;
      const MarginalizedModel mixed(model, std::move(inputs), mixture);
      result = beam_search(mixed, base, gen.beam);
    } else {
      const auto input = build_input(sample, doc, gen.mode, posterior, gen.input);
      if (gen.mode != GroundingMode::FullDocument) r.span_used = input.grounding_text;
      result = beam_search(model, input, gen.beam);
    }
    r.response = decode_response(model.vocabulary(), result.best().tokens);
    r.score = result.best().score;
    out[i] = std::move(r);
  });
  return out;
}

json generations_to_json(const std::vector<GeneratedResponse>& responses, const GenerationConfig& config) {
  json out = json::array();
  for (const auto& r : responses) {
    out.push_back({{"sample_id", r.sample_id},
                   {"response", r.response},
                   {"score", r.score},
                   {"beam", config.beam.beam},
                   {"rep_penalty", config.beam.rep_penalty},
                   {"grounding_mode", to_string(config.mode)},
                   {"marginalize_k", config.marginalize_k},
                   {"span_used", r.span_used}});
  }
  return out;
}

std::vector<GeneratedResponse> generations_from_json(const json& j) {
  std::vector<GeneratedResponse> out;
  try {
    for (const auto& e : j) {
      out.push_back({e.at("sample_id").get<std::string>(), e.at("response").get<std::string>(),
                     e.at("score").get<double>(), e.value("span_used", std::string())});
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("generations file: ") + e.what());
  }
  return out;
}

metrics::EvaluationReport evaluate(const Corpus& corpus, const std::vector<DialogSample>& samples,
                                   const std::vector<SpanPosterior>& nbest,
                                   const std::vector<GeneratedResponse>* generations, const EvalConfig& config,
                                   metrics::SpanScores* span_scores) {
  if (samples.empty()) throw DataError("evaluation over an empty sample set");
  const auto index = index_nbest(nbest);
  std::vector<SpanPosterior> ordered;
  std::vector<std::string> references;
  for (const auto& s : samples) {
    const auto* p = lookup(index, s.sample_id);
    if (p == nullptr) throw DataError("no n-best entry for sample '" + s.sample_id + "'");
    SpanPosterior truncated = *p;
    if (truncated.hypotheses.size() > config.k) truncated.hypotheses.resize(config.k);
    ordered.push_back(std::move(truncated));
    references.push_back(corpus.document(s.doc_id).slice(s.reference_span));
  }
  auto scores = metrics::score_spans(ordered, references);
  if (config.k != 5) {
    double hits = 0.0;
    for (std::size_t i = 0; i < ordered.size(); ++i) hits += metrics::em_at_k(ordered[i], references[i], config.k);
    scores.em_at_5 = 100.0 * hits / static_cast<double>(ordered.size());
  }
  if (scores.em_at_5 < scores.em_at_1) throw NumericError("EM@k fell below EM@1");

  metrics::EvaluationReport report;
  report.f1 = scores.f1;
  report.em = scores.em;
  report.em_at_5 = scores.em_at_5;
  report.n_samples = scores.n;
  report.bleu_signature = metrics::bleu_signature(config.bleu);
  if (generations != nullptr) {
    std::unordered_map<std::string, const GeneratedResponse*> gen_index;
    for (const auto& g : *generations) gen_index.emplace(g.sample_id, &g);
    std::vector<std::string> hyps;
    std::vector<std::string> refs;
    for (const auto& s : samples) {
      const auto it = gen_index.find(s.sample_id);
      if (it == gen_index.end()) throw DataError("no generated response for sample '" + s.sample_id + "'");
      hyps.push_back(it->second->response);
      refs.push_back(s.target_utterance);
    }
    report.bleu = metrics::corpus_bleu(hyps, refs, config.bleu).score;
  } else {
    report.bleu = std::numeric_limits<double>::quiet_NaN();
  }
  if (span_scores != nullptr) *span_scores = scores;
  return report;
}

// ---- commands ----

namespace {

Corpus load_split(const PipelineConfig& config, const std::string& split) {
  const fs::path docs = config.paths.documents;
  const fs::path dialogs = split == "train" ? config.paths.train_dialogs : config.paths.eval_dialogs;
  require_artifact(docs, "fixtures");
  require_artifact(dialogs, "fixtures");
  return load_corpus(docs, dialogs);
}

fs::path dialogs_path(const PipelineConfig& config, const std::string& split) {
  return split == "train" ? config.paths.train_dialogs : config.paths.eval_dialogs;
}

/// Training keeps the follow-up setting; evaluation scores every grounded agent turn.
std::vector<DialogSample> split_samples(const Corpus& corpus, const PipelineConfig& config, const std::string& split,
                                        SkipReport* skipped = nullptr) {
  ExtractOptions opts = config.corpus;
  if (split != "train") opts.include_followups = true;
  auto result = extract_samples(corpus, opts);
  if (skipped) *skipped = result.skipped;
  return std::move(result.samples);
}

void prepare_dir(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

void write_json(const fs::path& path, const json& j) {
  prepare_dir(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw DataError(path.string() + " is not valid JSON");
  return j;
}

}  // namespace

void cmd_fixtures(const fs::path& out_dir, const std::string& kind, std::uint64_t seed) {
  fixtures::FixtureCorpus fixture;
  if (kind == "synthetic") {
    fixtures::SyntheticOptions opts;
    opts.seed = seed;
    fixture = fixtures::synthetic_corpus(opts);
  } else if (kind == "two_phrase") {
    fixture = fixtures::two_phrase_corpus(4, seed);
  } else if (kind == "adversarial") {
    fixture = fixtures::adversarial_corpus(seed);
  } else {
    throw ConfigError("unknown fixture kind '" + kind + "' (expected synthetic, two_phrase or adversarial)");
  }
  fixtures::write_fixture(fixture, out_dir);
  spdlog::info("wrote {} documents, {} train and {} eval dialogs to {}", fixture.documents.size(),
               fixture.train_dialogs.size(), fixture.eval_dialogs.size(), out_dir.string());
}

void cmd_prepare(const PipelineConfig& config, const std::string& split, const CommandPaths& paths) {
  if (split != "train" && split != "eval") throw ConfigError("--split must be train or eval");
  const Corpus corpus = load_split(config, split);
  SkipReport skipped;
  const auto samples = split_samples(corpus, config, split, &skipped);
  if (samples.empty()) throw DataError("split '" + split + "' has no grounded agent turns");
  const auto prepared = prepare_features(corpus, samples, config, skipped);
  const fs::path out = paths.out.value_or(layout(config).features(split));
  prepare_dir(out);
  write_feature_file(out, prepared.features);
  write_manifest(out, "prepare", config.to_json(), {config.paths.documents, dialogs_path(config, split)});
  spdlog::info("{}: {} samples, {} windows ({} skipped without grounding, {} follow-ups excluded, {} context turns "
               "truncated)",
               split, prepared.samples, prepared.features.windows.size(), skipped.empty_grounding,
               skipped.followups_excluded, prepared.truncated_turns);
}

void cmd_train(const PipelineConfig& config, const std::string& kind, const CommandPaths& paths) {
  const auto l = layout(config);
  if (kind == "ngram") {
    const Corpus corpus = load_split(config, "train");
    const auto samples = split_samples(corpus, config, "train");
    const auto model = train_generator(corpus, samples, config.generation.weights);
    const fs::path out = paths.out.value_or(l.generator());
    write_json(out, model.to_json());
    write_manifest(out, "train", config.to_json(), {config.paths.documents, config.paths.train_dialogs});
    spdlog::info("n-gram generator: {} vocabulary entries from {} responses", model.vocabulary().size(),
                 samples.size());
    return;
  }
  HeadConfig head = config.head;
  head.kind = parse_head_kind(kind);
  const fs::path features_path = paths.features.value_or(l.features("train"));
  require_artifact(features_path, "prepare --split train");
  const Corpus corpus = load_split(config, "train");
  const FeatureSet features = read_feature_file(features_path);
  validate_against(features, corpus);
  const SampleIndex samples(split_samples(corpus, config, "train"));
  const auto checkpoint = train_span_head(features, corpus, samples, head);
  const fs::path out = paths.out.value_or(l.checkpoint(head.kind));
  prepare_dir(out);
  write_checkpoint(out, checkpoint);
  json cfg = config.to_json();
  cfg["head"]["kind"] = to_string(head.kind);
  write_manifest(out, "train", cfg, {features_path, config.paths.documents, config.paths.train_dialogs});
}

void cmd_decode(const PipelineConfig& config, const CommandPaths& paths) {
  const auto l = layout(config);
  const fs::path ckpt = paths.checkpoint.value_or(l.checkpoint(config.head.kind));
  const fs::path features_path = paths.features.value_or(l.features("eval"));
  require_artifact(ckpt, "train --kind " + to_string(config.head.kind));
  require_artifact(features_path, "prepare --split eval");
  const Corpus corpus = load_split(config, "eval");
  const FeatureSet features = read_feature_file(features_path);
  validate_against(features, corpus);
  const auto checkpoint = read_checkpoint(ckpt);
  const auto posteriors = decode_features(checkpoint, features, corpus, config);
  const fs::path out = paths.out.value_or(l.nbest(to_string(kind_of(checkpoint.head))));
  prepare_dir(out);
  write_nbest(out, posteriors);
  write_manifest(out, "decode", config.to_json(), {ckpt, features_path, config.paths.documents});
}

void cmd_ensemble(const PipelineConfig& config, const CommandPaths& paths) {
  const auto& members = config.ensemble.members;
  if (members.empty()) throw ConfigError("ensemble.members is empty; give --member ID:F1:NBEST at least once");
  EnsembleConfig ens;
  ens.n = config.ensemble.n;
  std::vector<std::vector<SpanPosterior>> lists;
  std::vector<fs::path> inputs;
  for (const auto& m : members) {
    const fs::path p = m.nbest.empty() ? layout(config).nbest(m.model_id) : fs::path(m.nbest);
    require_artifact(p, "decode");
    ens.members.push_back({m.model_id, m.f1});
    lists.push_back(read_nbest(p));
    inputs.push_back(p);
  }
  std::vector<std::unordered_map<std::string, const SpanPosterior*>> indexes;
  for (const auto& l : lists) indexes.push_back(index_nbest(l));

  const auto& order = lists.front();
  std::vector<SpanPosterior> out(order.size());
  parallel_for(order.size(), config.workers, [&](std::size_t i) {
    std::vector<SpanPosterior> per_member;
    for (std::size_t h = 0; h < lists.size(); ++h) {
      const auto* p = lookup(indexes[h], order[i].sample_id);
      if (p == nullptr) {
        throw DataError("member '" + members[h].model_id + "' has no n-best entry for sample '" +
                        order[i].sample_id + "'");
      }
      per_member.push_back(*p);
    }
    out[i] = bma_ensemble(per_member, ens, ens.n);
    out[i].sample_id = order[i].sample_id;
  });
  for (std::size_t h = 1; h < lists.size(); ++h) {
    if (lists[h].size() != order.size()) {
      throw DataError("member '" + members[h].model_id + "' covers a different sample set");
    }
  }
  const fs::path o = paths.out.value_or(layout(config).nbest("ensemble"));
  prepare_dir(o);
  write_nbest(o, out);
  write_manifest(o, "ensemble", config.to_json(), inputs);
}

void cmd_generate(const PipelineConfig& config, const CommandPaths& paths) {
  const auto l = layout(config);
  const fs::path model_path = paths.model.value_or(l.generator());
  require_artifact(model_path, "train --kind ngram");
  const Corpus corpus = load_split(config, "eval");
  const auto samples = split_samples(corpus, config, "eval");
  const auto model = load_generation_model(model_path);
  std::vector<fs::path> inputs{model_path, config.paths.documents, config.paths.eval_dialogs};
  std::optional<std::vector<SpanPosterior>> nbest;
  if (config.generation.mode == GroundingMode::PredictedSpan || config.generation.marginalize_k > 0) {
    const fs::path p = paths.nbest.value_or(l.nbest("ensemble"));
    require_artifact(p, "decode (or ensemble)");
    nbest = read_nbest(p);
    inputs.push_back(p);
  }
  const auto responses = generate_responses(*model, corpus, samples, nbest ? &*nbest : nullptr, config);
  const fs::path out = paths.out.value_or(l.generations());
  write_json(out, generations_to_json(responses, config.generation));
  write_manifest(out, "generate", config.to_json(), inputs);
}

metrics::EvaluationReport cmd_eval(const PipelineConfig& config, const CommandPaths& paths) {
  const auto l = layout(config);
  const fs::path nbest_path = paths.nbest.value_or(l.nbest("ensemble"));
  require_artifact(nbest_path, "decode (or ensemble)");
  const Corpus corpus = load_split(config, "eval");
  const auto samples = split_samples(corpus, config, "eval");
  const auto nbest = read_nbest(nbest_path);
  std::vector<fs::path> inputs{nbest_path, config.paths.documents, config.paths.eval_dialogs};
  std::optional<std::vector<GeneratedResponse>> generations;
  std::optional<fs::path> gen_path = paths.generations;
  if (!gen_path && fs::exists(l.generations())) gen_path = l.generations();
  if (gen_path) {
    require_artifact(*gen_path, "generate");
    generations = generations_from_json(read_json(*gen_path));
    inputs.push_back(*gen_path);
  }
  const auto report = evaluate(corpus, samples, nbest, generations ? &*generations : nullptr, config.eval);
  json j = metrics::to_json(report);
  if (!generations) j["bleu"] = nullptr;
  const fs::path out = paths.out.value_or(l.report());
  write_json(out, j);
  write_manifest(out, "eval", config.to_json(), inputs);
  return report;
}

}  // namespace docground::pipeline
