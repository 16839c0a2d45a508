#include "docground/generation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <spdlog/spdlog.h>

#include "docground/errors.hpp"
#include "docground/numeric.hpp"
#include "docground/text.hpp"
#include "docground/windowing.hpp"

namespace docground {

std::vector<std::string> GenerationInput::tokens() const {
  std::vector<std::string> out;
  out.reserve(size());
  out.insert(out.end(), context.begin(), context.end());
  out.emplace_back(kSeparatorToken);
  out.insert(out.end(), title.begin(), title.end());
  out.emplace_back(kSeparatorToken);
  out.insert(out.end(), grounding.begin(), grounding.end());
  return out;
}

GroundingMode parse_grounding_mode(const std::string& s) {
  if (s == "reference_span") return GroundingMode::ReferenceSpan;
  if (s == "predicted_span") return GroundingMode::PredictedSpan;
  if (s == "full_document") return GroundingMode::FullDocument;
  throw ConfigError("unknown grounding mode '" + s + "' (expected reference_span, predicted_span or full_document)");
}

std::string to_string(GroundingMode mode) {
  switch (mode) {
    case GroundingMode::ReferenceSpan: return "reference_span";
    case GroundingMode::PredictedSpan: return "predicted_span";
    case GroundingMode::FullDocument: return "full_document";
  }
  return "?";
}

std::vector<std::string> serialize_context(const std::vector<Turn>& context) {
  std::vector<std::string> out;
  for (const auto& t : context) {
    out.emplace_back(t.role == Role::User ? "<user>" : "<agent>");
    for (auto& w : word_forms(t.utterance)) out.push_back(std::move(w));
  }
  return out;
}

GenerationInput with_grounding(const GenerationInput& base, const std::string& text) {
  GenerationInput in;
  in.context = base.context;
  in.title = base.title;
  in.grounding_text = text;
  in.grounding = word_forms(text);
  return in;
}

GenerationInput build_input(const DialogSample& sample, const GroundedDocument& doc, GroundingMode mode,
                            const SpanPosterior* nbest, const InputOptions& options) {
  GenerationInput base;
  base.context = serialize_context(sample.context);
  base.title = word_forms(doc.title());
  switch (mode) {
    case GroundingMode::ReferenceSpan:
      return with_grounding(base, doc.slice(sample.reference_span));
    case GroundingMode::PredictedSpan: {
      if (nbest == nullptr || nbest->hypotheses.empty()) {
        throw DataError("no n-best entry for sample '" + sample.sample_id + "'");
      }
      const auto& top = nbest->hypotheses.front();
      return with_grounding(base, top.text.empty() ? doc.slice(top.char_span) : top.text);
    }
    case GroundingMode::FullDocument: {
      GenerationInput in = with_grounding(base, doc.text());
      if (in.size() > options.max_input_tokens) {
        const std::size_t fixed = in.size() - in.grounding.size();
        const std::size_t keep = options.max_input_tokens > fixed ? options.max_input_tokens - fixed : 0;
        if (keep == 0) spdlog::warn("sample {}: context and title alone exceed the input limit", sample.sample_id);
        in.grounding.resize(std::min(keep, in.grounding.size()));
      }
      return in;
    }
  }
  throw ConfigError("unknown grounding mode");
}

Vocabulary::Vocabulary(std::vector<std::string> tokens, const std::string& eos) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw DataError("duplicate vocabulary entry '" + tokens_[i] + "'");
    }
  }
  const auto it = index_.find(eos);
  if (it == index_.end()) throw DataError("EOS token '" + eos + "' is not in the vocabulary");
  eos_id_ = it->second;
}

std::optional<int> Vocabulary::id(const std::string& token) const {
  const auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

namespace {

std::vector<double> uniform_logprobs(std::size_t n) {
  return std::vector<double>(n, -std::log(static_cast<double>(n)));
}

std::string history_key(const Vocabulary& vocab, std::span<const int> prefix, std::size_t order) {
  std::vector<std::string> parts;
  for (std::size_t k = order; k > 0; --k) {
    if (prefix.size() >= k) {
      parts.push_back(vocab.token(prefix[prefix.size() - k]));
    } else {
      parts.emplace_back(kStartState);
    }
  }
  return text::join(parts, " ");
}

}  // namespace

TableModel TableModel::from_json(const nlohmann::json& j) {
  TableModel m;
  try {
    m.vocab_ = Vocabulary(j.at("vocab").get<std::vector<std::string>>(), j.at("eos").get<std::string>());
    m.order_ = j.value("order", std::size_t{1});
    if (m.order_ == 0) throw DataError("table model order must be >= 1");
    for (const auto& [key, states] : j.at("tables").items()) {
      for (const auto& [state, dist] : states.items()) {
        Distribution lp(m.vocab_.size(), kNegInf);
        double total = 0.0;
        std::vector<std::pair<int, double>> entries;
        for (const auto& [token, p] : dist.items()) {
          const auto id = m.vocab_.id(token);
          if (!id) throw DataError("table '" + key + "' state '" + state + "': token '" + token + "' not in vocab");
          const double v = p.get<double>();
          if (!(v >= 0.0) || !std::isfinite(v)) throw DataError("table probabilities must be finite and >= 0");
          entries.emplace_back(*id, v);
          total += v;
        }
        if (!(total > 0.0)) throw DataError("table '" + key + "' state '" + state + "' has no probability mass");
        for (const auto& [id, v] : entries) lp[static_cast<std::size_t>(id)] = v > 0.0 ? std::log(v / total) : kNegInf;
        m.tables_[key][state] = std::move(lp);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("table model: ") + e.what());
  }
  return m;
}

nlohmann::json TableModel::to_json() const {
  nlohmann::json tables = nlohmann::json::object();
  for (const auto& [key, states] : tables_) {
    for (const auto& [state, lp] : states) {
      nlohmann::json dist = nlohmann::json::object();
      for (std::size_t i = 0; i < lp.size(); ++i) {
        if (std::isfinite(lp[i])) dist[vocab_.token(static_cast<int>(i))] = std::exp(lp[i]);
      }
      tables[key][state] = dist;
    }
  }
  return {{"type", "table"},
          {"vocab", vocab_.tokens()},
          {"eos", vocab_.token(vocab_.eos_id())},
          {"order", order_},
          {"tables", tables}};
}

std::vector<double> TableModel::next_token_logprobs(const GenerationInput& input, std::span<const int> prefix) const {
  auto table = tables_.find(input.grounding_text);
  if (table == tables_.end()) table = tables_.find("*");
  if (table == tables_.end()) return uniform_logprobs(vocab_.size());
  auto state = table->second.find(history_key(vocab_, prefix, order_));
  if (state == table->second.end()) state = table->second.find("*");
  if (state == table->second.end()) return uniform_logprobs(vocab_.size());
  return state->second;
}

NgramModel::NgramModel(Vocabulary vocab, NgramWeights weights)
    : vocab_(std::move(vocab)), weights_(weights), unigrams_(vocab_.size(), 0.0) {
  const double sum = weights_.grounding + weights_.response + weights_.uniform;
  if (!(weights_.grounding >= 0 && weights_.response >= 0 && weights_.uniform > 0) || std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("n-gram interpolation weights must be non-negative, uniform > 0, and sum to 1");
  }
}

void NgramModel::add_response(const std::vector<int>& ids) {
  int prev = -1;
  for (int id : ids) {
    bigrams_[prev][id] += 1.0;
    unigrams_[static_cast<std::size_t>(id)] += 1.0;
    unigram_total_ += 1.0;
    prev = id;
  }
}

NgramModel NgramModel::train(const std::vector<std::vector<std::string>>& responses,
                             const std::vector<std::vector<std::string>>& extra_vocabulary, NgramWeights weights) {
  std::set<std::string> words;
  for (const auto& r : responses) words.insert(r.begin(), r.end());
  for (const auto& r : extra_vocabulary) words.insert(r.begin(), r.end());
  words.erase("</s>");
  std::vector<std::string> tokens{"</s>"};
  tokens.insert(tokens.end(), words.begin(), words.end());
  NgramModel m(Vocabulary(std::move(tokens), "</s>"), weights);
  for (const auto& r : responses) {
    std::vector<int> ids;
    for (const auto& w : r) ids.push_back(*m.vocab_.id(w));
    ids.push_back(m.vocab_.eos_id());
    m.add_response(ids);
  }
  return m;
}

nlohmann::json NgramModel::to_json() const {
  nlohmann::json bigrams = nlohmann::json::object();
  std::map<std::string, std::map<std::string, double>> ordered;
  for (const auto& [prev, next] : bigrams_) {
    const std::string key = prev < 0 ? std::string(kStartState) : vocab_.token(prev);
    for (const auto& [id, c] : next) ordered[key][vocab_.token(id)] = c;
  }
  for (const auto& [k, v] : ordered) bigrams[k] = v;
  return {{"type", "ngram"},
          {"vocab", vocab_.tokens()},
          {"eos", vocab_.token(vocab_.eos_id())},
          {"weights", {{"grounding", weights_.grounding}, {"response", weights_.response}, {"uniform", weights_.uniform}}},
          {"bigrams", bigrams}};
}

NgramModel NgramModel::from_json(const nlohmann::json& j) {
  try {
    NgramWeights w;
    w.grounding = j.at("weights").at("grounding").get<double>();
    w.response = j.at("weights").at("response").get<double>();
    w.uniform = j.at("weights").at("uniform").get<double>();
    NgramModel m(Vocabulary(j.at("vocab").get<std::vector<std::string>>(), j.at("eos").get<std::string>()), w);
    for (const auto& [prev, next] : j.at("bigrams").items()) {
      int p = -1;
      if (prev != kStartState) {
        const auto id = m.vocab_.id(prev);
        if (!id) throw DataError("n-gram model: unknown token '" + prev + "'");
        p = *id;
      }
      for (const auto& [tok, c] : next.items()) {
        const auto id = m.vocab_.id(tok);
        if (!id) throw DataError("n-gram model: unknown token '" + tok + "'");
        const double count = c.get<double>();
        if (!(count >= 0.0)) throw DataError("n-gram model: negative count");
        m.bigrams_[p][*id] += count;
        m.unigrams_[static_cast<std::size_t>(*id)] += count;
        m.unigram_total_ += count;
      }
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("n-gram model: ") + e.what());
  }
}

std::vector<double> NgramModel::next_token_logprobs(const GenerationInput& input, std::span<const int> prefix) const {
  const std::size_t v = vocab_.size();
  const int prev = prefix.empty() ? -1 : prefix.back();
  std::vector<double> p(v, weights_.uniform / static_cast<double>(v));

  // Grounding component: bigram over the grounding tokens followed by EOS.
  std::vector<int> g{-1};
  for (const auto& w : input.grounding) {
    if (const auto id = vocab_.id(w)) g.push_back(*id);
  }
  g.push_back(vocab_.eos_id());
  std::vector<double> gdist(v, 0.0);
  double gtotal = 0.0;
  for (std::size_t i = 0; i + 1 < g.size(); ++i) {
    if (g[i] == prev) {
      gdist[static_cast<std::size_t>(g[i + 1])] += 1.0;
      gtotal += 1.0;
    }
  }
  if (gtotal == 0.0) {
    for (std::size_t i = 1; i < g.size(); ++i) gdist[static_cast<std::size_t>(g[i])] += 1.0;
    gtotal = static_cast<double>(g.size() - 1);
  }
  for (std::size_t i = 0; i < v; ++i) p[i] += weights_.grounding * gdist[i] / gtotal;

  // Response component: bigram with unigram backoff, uniform without training data.
  const auto it = bigrams_.find(prev);
  if (it != bigrams_.end()) {
    double total = 0.0;
    for (const auto& [id, c] : it->second) total += c;
    for (const auto& [id, c] : it->second) p[static_cast<std::size_t>(id)] += weights_.response * c / total;
  } else if (unigram_total_ > 0.0) {
    for (std::size_t i = 0; i < v; ++i) p[i] += weights_.response * unigrams_[i] / unigram_total_;
  } else {
    for (std::size_t i = 0; i < v; ++i) p[i] += weights_.response / static_cast<double>(v);
  }

  std::vector<double> lp(v);
  for (std::size_t i = 0; i < v; ++i) lp[i] = std::log(p[i]);
  const double z = logsumexp(lp);
  for (double& x : lp) x -= z;
  return lp;
}

std::unique_ptr<GenerationModel> generation_model_from_json(const nlohmann::json& j) {
  const std::string type = j.value("type", std::string());
  if (type == "table") return std::make_unique<TableModel>(TableModel::from_json(j));
  if (type == "ngram") return std::make_unique<NgramModel>(NgramModel::from_json(j));
  throw DataError("generation model: unknown type '" + type + "'");
}

std::unique_ptr<GenerationModel> load_generation_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open generation model " + path.string());
  try {
    return generation_model_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::vector<int> encode_response(const Vocabulary& vocab, const std::string& text) {
  std::vector<int> ids;
  std::vector<std::string> oov;
  for (const auto& w : word_forms(text)) {
    if (const auto id = vocab.id(w)) {
      ids.push_back(*id);
    } else {
      oov.push_back(w);
    }
  }
  if (!oov.empty()) throw DataError("out-of-vocabulary tokens: " + text::join(oov, ", "));
  ids.push_back(vocab.eos_id());
  return ids;
}

std::string decode_response(const Vocabulary& vocab, std::span<const int> ids) {
  std::vector<std::string> words;
  for (int id : ids) {
    if (id != vocab.eos_id()) words.push_back(vocab.token(id));
  }
  return text::join(words, " ");
}

std::vector<double> apply_repetition_penalty(std::span<const double> logprobs, std::span<const int> prefix,
                                             double theta) {
  std::vector<double> out(logprobs.begin(), logprobs.end());
  if (theta == 1.0 || prefix.empty()) return out;
  std::vector<bool> seen(out.size(), false);
  for (int t : prefix) {
    const auto i = static_cast<std::size_t>(t);
    if (i >= out.size() || seen[i]) continue;
    seen[i] = true;
    if (out[i] < 0.0) {
      out[i] *= theta;
    } else if (out[i] > 0.0) {
      out[i] /= theta;
    }
  }
  const double z = logsumexp(out);
  for (double& v : out) v -= z;
  return out;
}

namespace {

void check_logprobs(const std::vector<double>& lp, std::size_t vocab_size) {
  if (lp.size() != vocab_size) throw NumericError("generation model returned a distribution of the wrong size");
  for (double v : lp) {
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
      throw NumericError("generation model emitted a non-finite log-probability");
    }
  }
}

bool hypothesis_before(const BeamHypothesis& a, const BeamHypothesis& b, bool normalize) {
  auto key = [normalize](const BeamHypothesis& h) {
    return normalize && !h.tokens.empty() ? h.score / static_cast<double>(h.tokens.size()) : h.score;
  };
  const double ka = key(a);
  const double kb = key(b);
  if (ka != kb) return ka > kb;
  return a.tokens < b.tokens;
}

}  // namespace

BeamResult beam_search(const GenerationModel& model, const GenerationInput& input, const BeamOptions& options) {
  if (options.beam == 0) throw ConfigError("beam size must be at least 1");
  if (!(options.rep_penalty >= 1.0)) throw ConfigError("repetition penalty must be >= 1");
  const auto& vocab = model.vocabulary();
  const int eos = vocab.eos_id();

  std::vector<BeamHypothesis> alive{BeamHypothesis{}};
  std::vector<BeamHypothesis> finished;
  auto by_rank = [&](const BeamHypothesis& a, const BeamHypothesis& b) {
    return hypothesis_before(a, b, options.length_normalize);
  };

  for (std::size_t step = 0; step < options.max_len && !alive.empty(); ++step) {
    std::vector<BeamHypothesis> candidates;
    for (const auto& h : alive) {
      const auto raw = model.next_token_logprobs(input, h.tokens);
      check_logprobs(raw, vocab.size());
      const auto lp = apply_repetition_penalty(raw, h.tokens, options.rep_penalty);
      for (std::size_t t = 0; t < lp.size(); ++t) {
        if (lp[t] == kNegInf) continue;
        BeamHypothesis c{h.tokens, h.score + lp[t], false};
        c.tokens.push_back(static_cast<int>(t));
        candidates.push_back(std::move(c));
      }
    }
    std::sort(candidates.begin(), candidates.end(), by_rank);
    std::vector<BeamHypothesis> next;
    for (std::size_t r = 0; r < candidates.size() && next.size() < options.beam; ++r) {
      auto& c = candidates[r];
      if (c.tokens.back() == eos) {
        if (r < options.beam) {
          c.finished = true;
          finished.push_back(std::move(c));
        }
      } else {
        next.push_back(std::move(c));
      }
    }
    alive = std::move(next);

    if (!options.length_normalize && finished.size() >= options.beam && !alive.empty()) {
      // Scores only decrease, so no alive hypothesis can enter the finished top-beam.
      std::sort(finished.begin(), finished.end(), by_rank);
      if (alive.front().score <= finished[options.beam - 1].score) break;
    }
  }

  BeamResult result;
  result.nbest = std::move(finished);
  for (auto& h : alive) result.nbest.push_back(std::move(h));
  std::sort(result.nbest.begin(), result.nbest.end(), by_rank);
  if (result.nbest.size() > options.beam) result.nbest.resize(options.beam);
  if (result.nbest.empty()) throw NumericError("beam search produced no hypothesis");
  return result;
}

double score_sequence(const GenerationModel& model, const GenerationInput& input, std::span<const int> tokens,
                      double rep_penalty) {
  double score = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto prefix = tokens.first(i);
    const auto raw = model.next_token_logprobs(input, prefix);
    check_logprobs(raw, model.vocabulary().size());
    score += apply_repetition_penalty(raw, prefix, rep_penalty)[static_cast<std::size_t>(tokens[i])];
  }
  return score;
}

double sequence_nll(const GenerationModel& model, const GenerationInput& input, std::span<const int> tokens) {
  return -score_sequence(model, input, tokens, 1.0);
}

SpanMixtureState SpanMixtureState::from_posterior(const SpanPosterior& posterior, std::size_t k) {
  if (k == 0) throw ConfigError("mixture size k must be at least 1");
  if (posterior.hypotheses.empty()) throw DataError("empty span list for sample '" + posterior.sample_id + "'");
  SpanPosterior top = posterior;
  truncate_and_renormalize(top, k);
  SpanMixtureState state;
  for (const auto& h : top.hypotheses) {
    state.span_texts.push_back(h.text);
    state.spans.push_back(h.char_span);
    state.probabilities.push_back(std::exp(h.logprob));
  }
  return state;
}

std::vector<double> marginalized_step(const GenerationModel& model, std::span<const GenerationInput> inputs,
                                      const SpanMixtureState& mixture, std::span<const int> prefix) {
  if (mixture.size() == 0) throw DataError("marginalized step over an empty span list");
  if (inputs.size() != mixture.size()) throw ConfigError("one generation input per mixture component is required");
  const std::size_t v = model.vocabulary().size();
  std::vector<std::vector<double>> components;
  components.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto lp = model.next_token_logprobs(in, prefix);
    check_logprobs(lp, v);
    components.push_back(std::move(lp));
  }
  std::vector<double> out(v);
  std::vector<double> terms(mixture.size());
  for (std::size_t t = 0; t < v; ++t) {
    for (std::size_t s = 0; s < mixture.size(); ++s) terms[s] = std::log(mixture.probabilities[s]) + components[s][t];
    out[t] = logsumexp(terms);
  }
  return out;
}

double marginalized_training_loss(const GenerationModel& model, std::span<const GenerationInput> inputs,
                                  const SpanMixtureState& mixture, std::span<const int> tokens) {
  double loss = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    loss -= marginalized_step(model, inputs, mixture, tokens.first(i))[static_cast<std::size_t>(tokens[i])];
  }
  return loss;
}

double marginalized_training_loss(const GenerationModel& model, const DialogSample& sample,
                                  const GroundedDocument& doc, const SpanPosterior& nbest, std::size_t k,
                                  const InputOptions& options) {
  const auto mixture = SpanMixtureState::from_posterior(nbest, k);
  const GenerationInput base = build_input(sample, doc, GroundingMode::ReferenceSpan, nullptr, options);
  std::vector<GenerationInput> inputs;
  for (std::size_t s = 0; s < mixture.size(); ++s) {
    const std::string& t = mixture.span_texts[s];
    inputs.push_back(with_grounding(base, t.empty() ? doc.slice(mixture.spans[s]) : t));
  }
  const auto tokens = encode_response(model.vocabulary(), sample.target_utterance);
  return marginalized_training_loss(model, inputs, mixture, tokens);
}

MarginalizedModel::MarginalizedModel(const GenerationModel& base, std::vector<GenerationInput> inputs,
                                     SpanMixtureState mixture)
    : base_(base), inputs_(std::move(inputs)), mixture_(std::move(mixture)) {
  if (mixture_.size() == 0) throw DataError("marginalized model over an empty span list");
  if (inputs_.size() != mixture_.size()) throw ConfigError("one generation input per mixture component is required");
}

std::vector<double> MarginalizedModel::next_token_logprobs(const GenerationInput&, std::span<const int> prefix) const {
  return marginalized_step(base_, inputs_, mixture_, prefix);
}

}  // namespace docground
