#include "docground/span_decoding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <queue>
#include <set>
#include <unordered_map>

#include "docground/errors.hpp"
#include "docground/numeric.hpp"

namespace docground {

double SpanPosterior::total_probability() const {
  double s = 0.0;
  for (const auto& h : hypotheses) s += std::exp(h.logprob);
  return s;
}

bool ranks_before(const SpanHypothesis& a, const SpanHypothesis& b) {
  if (a.logprob != b.logprob) return a.logprob > b.logprob;
  if (a.char_span.start != b.char_span.start) return a.char_span.start < b.char_span.start;
  return a.char_span.end < b.char_span.end;
}

void truncate_and_renormalize(SpanPosterior& posterior, std::size_t n) {
  auto& hyps = posterior.hypotheses;
  std::stable_sort(hyps.begin(), hyps.end(), ranks_before);
  if (hyps.size() > n) hyps.resize(n);
  std::vector<double> lps;
  lps.reserve(hyps.size());
  for (const auto& h : hyps) lps.push_back(h.logprob);
  const double z = logsumexp(lps);
  if (std::isfinite(z)) {
    for (auto& h : hyps) h.logprob = std::min(0.0, h.logprob - z);
  }
  posterior.normalized = true;
}

DuplicateRule parse_duplicate_rule(const std::string& s) {
  if (s == "max") return DuplicateRule::Max;
  if (s == "sum") return DuplicateRule::SumProbability;
  throw ConfigError("unknown duplicate rule '" + s + "' (expected max or sum)");
}

std::string to_string(DuplicateRule rule) { return rule == DuplicateRule::Max ? "max" : "sum"; }

namespace {

struct Candidate {
  CharRange span;
  double logprob;
  std::size_t window;
};

bool candidate_before(const Candidate& a, const Candidate& b) {
  if (a.logprob != b.logprob) return a.logprob > b.logprob;
  return a.span < b.span;
}

void check_windows(std::span<const DecodeWindow> windows, const DecodeOptions& options) {
  if (options.n == 0) throw ConfigError("n-best size must be at least 1");
  for (const auto& w : windows) {
    if (w.descriptor == nullptr || w.hidden == nullptr) throw ConfigError("decode window without features");
  }
  for (const auto& w : windows) {
    if (w.descriptor->sample_id != windows.front().descriptor->sample_id) {
      throw ConfigError("decode_document windows belong to different samples");
    }
  }
}

// Best-first enumeration over start x end sorted by logprob: pops pairs in non-increasing
// score order, skipping pairs that are not decodable, until the n-th score is settled.
std::vector<Candidate> top_independent(const StartEndLogprobs& lp, const DecodeWindow& w, std::size_t wi,
                                       std::size_t n) {
  const auto& d = *w.descriptor;
  auto sorted_positions = [&](const std::vector<std::size_t>& positions, const Eigen::VectorXd& scores) {
    std::vector<std::size_t> out;
    for (std::size_t p : positions) {
      if (d.is_document_token(p) && std::isfinite(scores(static_cast<Eigen::Index>(p)))) out.push_back(p);
    }
    std::stable_sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) {
      return scores(static_cast<Eigen::Index>(a)) > scores(static_cast<Eigen::Index>(b));
    });
    return out;
  };
  const auto starts = sorted_positions(w.mask.valid_starts, lp.start);
  const auto ends = sorted_positions(w.mask.valid_ends, lp.end);
  std::vector<Candidate> found;
  if (starts.empty() || ends.empty()) return found;

  using Item = std::pair<double, std::pair<std::size_t, std::size_t>>;
  auto score = [&](std::size_t i, std::size_t j) {
    return lp.start(static_cast<Eigen::Index>(starts[i])) + lp.end(static_cast<Eigen::Index>(ends[j]));
  };
  std::priority_queue<Item> heap;
  std::set<std::pair<std::size_t, std::size_t>> seen;
  heap.push({score(0, 0), {0, 0}});
  seen.insert({0, 0});
  double threshold = kNegInf;
  while (!heap.empty()) {
    const auto [value, ij] = heap.top();
    if (found.size() >= n && value < threshold) break;
    heap.pop();
    const auto [i, j] = ij;
    const std::size_t s = starts[i];
    const std::size_t e = ends[j];
    if (s <= e && e - s < w.mask.max_span_tokens) {
      found.push_back({pair_char_span(d, {s, e}), value, wi});
      if (found.size() == n) threshold = value;
    }
    if (i + 1 < starts.size() && seen.insert({i + 1, j}).second) heap.push({score(i + 1, j), {i + 1, j}});
    if (j + 1 < ends.size() && seen.insert({i, j + 1}).second) heap.push({score(i, j + 1), {i, j + 1}});
  }
  std::stable_sort(found.begin(), found.end(), candidate_before);
  if (found.size() > n) found.resize(n);
  return found;
}

std::vector<Candidate> window_candidates_exhaustive(const SpanHead& head, const DecodeWindow& w, std::size_t wi,
                                                    bool restricted) {
  const auto& d = *w.descriptor;
  std::vector<Candidate> out;
  if (const auto* h = std::get_if<IndependentHead>(&head)) {
    const auto lp = score_independent(*h, *w.hidden, w.mask, restricted);
    for (std::size_t s : w.mask.valid_starts) {
      for (std::size_t e : w.mask.valid_ends) {
        if (!d.is_document_token(s) || !d.is_document_token(e) || e < s || e - s >= w.mask.max_span_tokens) continue;
        const double v = span_logprob_independent(lp, {s, e});
        if (std::isfinite(v)) out.push_back({pair_char_span(d, {s, e}), v, wi});
      }
    }
  } else {
    const auto lp = score_biaffine(std::get<BiaffineHead>(head), *w.hidden, w.mask);
    for (std::size_t k = 0; k < lp.size(); ++k) {
      const auto& p = w.mask.valid_pairs[k];
      if (p.is_bos() || !d.is_document_token(p.start) || !d.is_document_token(p.end) || p.end < p.start) continue;
      if (std::isfinite(lp[k])) out.push_back({pair_char_span(d, p), lp[k], wi});
    }
  }
  return out;
}

SpanPosterior assemble(std::vector<Candidate> merged, std::span<const DecodeWindow> windows,
                       const GroundedDocument* doc, std::size_t n) {
  if (merged.empty()) {
    throw DataError("sample '" + windows.front().descriptor->sample_id + "': no decodable phrase in any window (a larger windowing.max_len leaves more room next to the context)");
  }
  std::stable_sort(merged.begin(), merged.end(), candidate_before);
  if (merged.size() > n) merged.resize(n);
  SpanPosterior post;
  post.sample_id = windows.front().descriptor->sample_id;
  for (const auto& c : merged) {
    SpanHypothesis h;
    h.char_span = c.span;
    h.logprob = c.logprob;
    h.source_window = windows[c.window].descriptor->window_id;
    if (doc != nullptr) {
      h.text = doc->slice(c.span);
      h.phrase_ids = doc->phrases_within(c.span);
    }
    post.hypotheses.push_back(std::move(h));
  }
  truncate_and_renormalize(post, n);
  return post;
}

std::vector<Candidate> merge(const std::vector<std::vector<Candidate>>& per_window, DuplicateRule rule) {
  // Ties between windows keep the earliest window.
  std::map<CharRange, Candidate> best;
  std::map<CharRange, std::vector<double>> sums;
  for (const auto& list : per_window) {
    for (const auto& c : list) {
      if (rule == DuplicateRule::SumProbability) sums[c.span].push_back(c.logprob);
      auto [it, inserted] = best.try_emplace(c.span, c);
      if (!inserted && c.logprob > it->second.logprob) it->second = c;
    }
  }
  std::vector<Candidate> out;
  out.reserve(best.size());
  for (auto& [span, c] : best) {
    if (rule == DuplicateRule::SumProbability) c.logprob = std::min(0.0, logsumexp(sums[span]));
    out.push_back(c);
  }
  return out;
}

}  // namespace

SpanPosterior decode_document(const SpanHead& head, std::span<const DecodeWindow> windows,
                              const GroundedDocument* doc, const DecodeOptions& options) {
  if (windows.empty()) throw DataError("decode_document: no windows");
  check_windows(windows, options);
  std::vector<std::vector<Candidate>> per_window;
  per_window.reserve(windows.size());
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    const auto& w = windows[wi];
    if (options.duplicates == DuplicateRule::SumProbability) {
      per_window.push_back(window_candidates_exhaustive(head, w, wi, options.restricted));
      continue;
    }
    if (const auto* h = std::get_if<IndependentHead>(&head)) {
      per_window.push_back(top_independent(score_independent(*h, *w.hidden, w.mask, options.restricted), w, wi, options.n));
    } else {
      auto all = window_candidates_exhaustive(head, w, wi, options.restricted);
      const std::size_t keep = std::min(options.n, all.size());
      std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), candidate_before);
      all.resize(keep);
      per_window.push_back(std::move(all));
    }
  }
  return assemble(merge(per_window, options.duplicates), windows, doc, options.n);
}

SpanPosterior nbest_oracle(const SpanHead& head, std::span<const DecodeWindow> windows, const GroundedDocument* doc,
                           const DecodeOptions& options) {
  if (windows.empty()) throw DataError("nbest_oracle: no windows");
  check_windows(windows, options);
  std::vector<std::vector<Candidate>> per_window;
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    per_window.push_back(window_candidates_exhaustive(head, windows[wi], wi, options.restricted));
  }
  return assemble(merge(per_window, options.duplicates), windows, doc, options.n);
}

std::vector<double> model_priors(std::span<const double> f1) {
  if (f1.empty()) throw ConfigError("ensemble has no members");
  std::vector<double> logs;
  logs.reserve(f1.size());
  for (double v : f1) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("ensemble member F1 must be positive (log undefined)");
    logs.push_back(std::log(v));
  }
  const double z = logsumexp(logs);
  std::vector<double> priors;
  priors.reserve(logs.size());
  for (double l : logs) priors.push_back(std::exp(l - z));
  return priors;
}

std::vector<double> EnsembleConfig::priors() const {
  std::vector<double> f1;
  f1.reserve(members.size());
  for (const auto& m : members) f1.push_back(m.f1);
  return model_priors(f1);
}

EnsembleConfig EnsembleConfig::from_json(const nlohmann::json& j) {
  EnsembleConfig c;
  try {
    for (const auto& m : j.at("members")) c.members.push_back({m.at("model_id").get<std::string>(), m.at("f1").get<double>()});
    if (j.contains("n")) c.n = j.at("n").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ensemble config: ") + e.what());
  }
  if (c.n == 0) throw ConfigError("ensemble config: n must be at least 1");
  (void)c.priors();
  return c;
}

nlohmann::json EnsembleConfig::to_json() const {
  nlohmann::json members_json = nlohmann::json::array();
  for (const auto& m : members) members_json.push_back({{"model_id", m.model_id}, {"f1", m.f1}});
  return {{"members", members_json}, {"n", n}};
}

SpanPosterior bma_ensemble(std::span<const SpanPosterior> posteriors, const EnsembleConfig& config, std::size_t n) {
  if (posteriors.size() != config.members.size()) {
    throw ConfigError("ensemble: " + std::to_string(posteriors.size()) + " posteriors for " +
                      std::to_string(config.members.size()) + " members");
  }
  if (n == 0) throw ConfigError("ensemble: n must be at least 1");
  const auto priors = config.priors();

  struct Mixed {
    double probability = 0.0;
    SpanHypothesis first_seen;
  };
  std::map<CharRange, Mixed> mixed;
  for (std::size_t h = 0; h < posteriors.size(); ++h) {
    SpanPosterior member = posteriors[h];
    if (member.sample_id != posteriors.front().sample_id) throw ConfigError("ensemble: posteriors for different samples");
    truncate_and_renormalize(member, member.hypotheses.size());
    for (const auto& hyp : member.hypotheses) {
      auto [it, inserted] = mixed.try_emplace(hyp.char_span);
      if (inserted) {
        it->second.first_seen = hyp;
        it->second.first_seen.source_window = config.members[h].model_id + ":" + hyp.source_window;
      }
      it->second.probability += priors[h] * std::exp(hyp.logprob);
    }
  }
  SpanPosterior out;
  out.sample_id = posteriors.empty() ? std::string() : posteriors.front().sample_id;
  for (auto& [span, m] : mixed) {
    if (!(m.probability > 0.0)) continue;
    SpanHypothesis h = std::move(m.first_seen);
    h.logprob = std::log(m.probability);
    out.hypotheses.push_back(std::move(h));
  }
  truncate_and_renormalize(out, n);
  return out;
}

nlohmann::json nbest_to_json(const std::vector<SpanPosterior>& posteriors) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : posteriors) {
    nlohmann::json hyps = nlohmann::json::array();
    for (const auto& h : p.hypotheses) {
      hyps.push_back({{"start", h.char_span.start},
                      {"end", h.char_span.end},
                      {"text", h.text},
                      {"logprob", h.logprob},
                      {"phrase_ids", h.phrase_ids},
                      {"source", h.source_window}});
    }
    out.push_back({{"sample_id", p.sample_id}, {"hypotheses", std::move(hyps)}});
  }
  return out;
}

std::vector<SpanPosterior> nbest_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw DataError("n-best file: top level must be an array");
  std::vector<SpanPosterior> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    SpanPosterior p;
    try {
      p.sample_id = j[i].at("sample_id").get<std::string>();
      for (const auto& h : j[i].at("hypotheses")) {
        SpanHypothesis hyp;
        hyp.char_span = {h.at("start").get<std::size_t>(), h.at("end").get<std::size_t>()};
        hyp.text = h.value("text", std::string());
        hyp.logprob = h.at("logprob").get<double>();
        if (h.contains("phrase_ids")) hyp.phrase_ids = h["phrase_ids"].get<std::vector<std::string>>();
        hyp.source_window = h.value("source", std::string());
        if (hyp.char_span.start > hyp.char_span.end || hyp.logprob > 0.0 || std::isnan(hyp.logprob)) {
          throw DataError("invalid hypothesis");
        }
        p.hypotheses.push_back(std::move(hyp));
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError("n-best entry " + std::to_string(i) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("n-best entry " + std::to_string(i) + ": " + e.what());
    }
    p.normalized = std::abs(p.total_probability() - 1.0) < 1e-9;
    out.push_back(std::move(p));
  }
  return out;
}

void write_nbest(const std::filesystem::path& path, const std::vector<SpanPosterior>& posteriors) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << nbest_to_json(posteriors).dump(1) << '\n';
}

std::vector<SpanPosterior> read_nbest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open n-best file " + path.string());
  try {
    return nbest_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace docground
