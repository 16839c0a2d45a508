// Reference computations written straight from the definitions, shared by the unit
// tests and the acceptance binary.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "docground/generation.hpp"
#include "docground/numeric.hpp"
#include "docground/span_decoding.hpp"
#include "docground/span_heads.hpp"
#include "support.hpp"

namespace testsupport::oracles {

using namespace docground;
using nlohmann::json;

inline double naive_lse(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double row_dot(const Eigen::MatrixXd& h, std::size_t r, std::span<const double> w) {
  double s = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) s += h(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) * w[j];
  return s;
}

// Loss straight from the definitions, evaluated on a flat parameter vector.
inline double oracle_loss(HeadKind kind, std::span<const double> p, const Eigen::MatrixXd& h, const RestrictionMask& m,
                   bool restricted, TokenPair target) {
  const auto d = static_cast<std::size_t>(h.cols());
  const auto n = static_cast<std::size_t>(h.rows());
  if (kind == HeadKind::Independent) {
    const auto ws = p.subspan(0, d);
    const auto we = p.subspan(d, d);
    std::vector<std::size_t> starts(n);
    std::vector<std::size_t> ends(n);
    std::iota(starts.begin(), starts.end(), 0);
    std::iota(ends.begin(), ends.end(), 0);
    if (restricted) {
      starts = m.valid_starts;
      ends = m.valid_ends;
    }
    std::vector<double> zs;
    std::vector<double> ze;
    for (auto i : starts) zs.push_back(row_dot(h, i, ws) + p[2 * d]);
    for (auto i : ends) ze.push_back(row_dot(h, i, we) + p[2 * d + 1]);
    return -(row_dot(h, target.start, ws) + p[2 * d] - naive_lse(zs)) -
           (row_dot(h, target.end, we) + p[2 * d + 1] - naive_lse(ze));
  }
  auto pair_score = [&](TokenPair q) {
    double s = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) {
        s += h(static_cast<Eigen::Index>(q.start), static_cast<Eigen::Index>(a)) * p[a * d + b] *
             h(static_cast<Eigen::Index>(q.end), static_cast<Eigen::Index>(b));
      }
    }
    s += row_dot(h, q.start, p.subspan(d * d, d));
    s += row_dot(h, q.end, p.subspan(d * d + d, d));
    return s + p[d * d + 2 * d];
  };
  std::vector<double> z;
  for (const auto& q : m.valid_pairs) z.push_back(pair_score(q));
  return -(pair_score(target) - naive_lse(z));
}

struct Instance {
  WindowDescriptor window;
  Eigen::MatrixXd hidden;
  RestrictionMask mask;
  TokenPair target;
};

inline Instance random_instance(GaussianSource& rng, std::size_t dim) {
  Instance x;
  const std::size_t context = rng.below(4);
  const std::size_t slice = 1 + rng.below(20 - context - 3);
  x.window = make_window("s", 0, 0, slice, context, slice);
  x.hidden = random_hidden(rng, x.window.alignment.size(), dim);
  x.mask = random_mask(rng, x.window, 1 + rng.below(5), 6);
  x.target = x.mask.valid_pairs[rng.below(x.mask.valid_pairs.size())];
  return x;
}

inline double max_rel_error(const std::vector<double>& analytic, HeadKind kind, std::vector<double> p, const Instance& x,
                     bool restricted) {
  constexpr double kStep = 1e-5;
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + kStep;
    const double up = oracle_loss(kind, p, x.hidden, x.mask, restricted, x.target);
    p[i] = orig - kStep;
    const double down = oracle_loss(kind, p, x.hidden, x.mask, restricted, x.target);
    p[i] = orig;
    const double fd = (up - down) / (2 * kStep);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

// Order-2 table where greedy decoding is trapped: "x" looks best first, but "y z </s>" wins.
inline json greedy_trap() {
  return {{"type", "table"},
          {"vocab", {"</s>", "x", "y", "z"}},
          {"eos", "</s>"},
          {"order", 2},
          {"tables",
           {{"*",
             {{"<s> <s>", {{"x", 0.5}, {"y", 0.4}, {"z", 0.1}}},
              {"<s> x", {{"x", 0.3}, {"y", 0.3}, {"z", 0.2}, {"</s>", 0.2}}},
              {"<s> y", {{"z", 0.9}, {"</s>", 0.1}}},
              {"y z", {{"</s>", 1.0}}},
              {"x x", {{"</s>", 0.5}, {"z", 0.5}}},
              {"x y", {{"</s>", 0.5}, {"z", 0.5}}}}}}}};
}

// Order-2 table on which beam 2 prunes the greedy path and ends lower than beam 1.
inline json beam_width_counterexample() {
  return {{"type", "table"},
          {"vocab", {"</s>", "x", "y", "z"}},
          {"eos", "</s>"},
          {"order", 2},
          {"tables",
           {{"*",
             {{"<s> <s>", {{"x", 0.5}, {"y", 0.4}, {"z", 0.1}}},
              {"<s> x", {{"x", 0.3}, {"y", 0.29}, {"z", 0.21}, {"</s>", 0.2}}},
              {"<s> y", {{"z", 0.5}, {"x", 0.5}}},
              {"x x", {{"</s>", 1.0}}}}}}}};
}

// Random order-1 table over `v` tokens (id 0 is EOS) with every state listed.
inline json random_table(GaussianSource& rng, std::size_t v, std::size_t order, const std::vector<std::string>& groundings) {
  std::vector<std::string> vocab{"</s>"};
  for (std::size_t i = 1; i < v; ++i) vocab.push_back("w" + std::to_string(i));
  // Every history of `order` tokens over vocab plus "<s>".
  std::vector<std::vector<std::string>> histories{{}};
  std::vector<std::string> symbols = vocab;
  symbols.push_back("<s>");
  for (std::size_t k = 0; k < order; ++k) {
    std::vector<std::vector<std::string>> next;
    for (const auto& h : histories) {
      for (const auto& s : symbols) {
        auto g = h;
        g.push_back(s);
        next.push_back(std::move(g));
      }
    }
    histories = std::move(next);
  }
  json tables = json::object();
  for (const auto& g : groundings) {
    for (const auto& h : histories) {
      std::string key;
      for (const auto& t : h) key += (key.empty() ? "" : " ") + t;
      json dist = json::object();
      for (const auto& t : vocab) dist[t] = std::exp(1.5 * rng.normal());
      tables[g][key] = dist;
    }
  }
  return {{"type", "table"}, {"vocab", vocab}, {"eos", "</s>"}, {"order", order}, {"tables", tables}};
}

inline GenerationInput input_with(const std::string& grounding) {
  GenerationInput in;
  in.context = {"<user>", "q"};
  in.title = {"t"};
  in.grounding = {grounding};
  in.grounding_text = grounding;
  return in;
}

inline double oracle_penalty_logprob(const std::vector<double>& lp, std::span<const int> prefix, double theta, int token) {
  std::vector<double> s = lp;
  std::vector<bool> seen(lp.size(), false);
  for (int t : prefix) seen[static_cast<std::size_t>(t)] = true;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (seen[i] && std::isfinite(s[i])) s[i] = s[i] < 0 ? s[i] * theta : s[i] / theta;
  }
  double z = 0.0;
  for (double v : s) z += std::exp(v);
  return s[static_cast<std::size_t>(token)] - std::log(z);
}

struct Best {
  std::vector<int> tokens;
  double score = -std::numeric_limits<double>::infinity();
};

// Every sequence of at most max_len tokens that stops at its first EOS.
inline void enumerate(const GenerationModel& m, const GenerationInput& in, std::size_t max_len, double theta,
               std::vector<int>& prefix, double score, Best& best, std::vector<std::pair<std::vector<int>, double>>* all) {
  const bool done = (!prefix.empty() && prefix.back() == m.vocabulary().eos_id()) || prefix.size() == max_len;
  if (done) {
    if (all != nullptr) all->emplace_back(prefix, score);
    if (score > best.score || (score == best.score && prefix < best.tokens)) best = {prefix, score};
    return;
  }
  const auto lp = m.next_token_logprobs(in, prefix);
  for (std::size_t t = 0; t < lp.size(); ++t) {
    if (!std::isfinite(lp[t])) continue;
    const double step = theta == 1.0 ? lp[t] : oracle_penalty_logprob(lp, prefix, theta, static_cast<int>(t));
    prefix.push_back(static_cast<int>(t));
    enumerate(m, in, max_len, theta, prefix, score + step, best, all);
    prefix.pop_back();
  }
}

inline Best exhaustive(const GenerationModel& m, const GenerationInput& in, std::size_t max_len, double theta = 1.0) {
  Best best;
  std::vector<int> prefix;
  enumerate(m, in, max_len, theta, prefix, 0.0, best, nullptr);
  return best;
}

inline SpanPosterior posterior_of(const std::vector<std::pair<std::string, double>>& spans) {
  SpanPosterior p;
  p.sample_id = "s";
  std::size_t start = 0;
  for (const auto& [text, prob] : spans) {
    p.hypotheses.push_back({{start, start + 1}, {}, std::log(prob), "w", text});
    ++start;
  }
  truncate_and_renormalize(p, p.hypotheses.size());
  return p;
}

struct Brute {
  CharRange span;
  double logprob;
};

// Enumerates every pair of every window straight from the per-window distributions.
inline std::vector<Brute> brute_force(const SpanHead& head, const DecodeInstance& x, std::size_t n, bool restricted) {
  std::map<CharRange, double> best;
  for (const auto& w : x.windows) {
    const auto& d = *w.descriptor;
    auto offer = [&](TokenPair p, double lp) {
      const CharRange span{d.alignment.char_spans[p.start].start, d.alignment.char_spans[p.end].end};
      auto [it, inserted] = best.try_emplace(span, lp);
      if (!inserted) it->second = std::max(it->second, lp);
    };
    if (const auto* h = std::get_if<IndependentHead>(&head)) {
      const auto lp = score_independent(*h, *w.hidden, w.mask, restricted);
      for (std::size_t s = d.doc_token_begin; s < d.doc_token_end; ++s) {
        for (std::size_t e = s; e < d.doc_token_end; ++e) {
          if (!w.mask.has_start(s) || !w.mask.has_end(e) || e - s >= w.mask.max_span_tokens) continue;
          offer({s, e}, span_logprob_independent(lp, {s, e}));
        }
      }
    } else {
      const auto lp = score_biaffine(std::get<BiaffineHead>(head), *w.hidden, w.mask);
      for (std::size_t k = 0; k < lp.size(); ++k) {
        if (!w.mask.valid_pairs[k].is_bos()) offer(w.mask.valid_pairs[k], lp[k]);
      }
    }
  }
  std::vector<Brute> all;
  for (const auto& [span, lp] : best) all.push_back({span, lp});
  std::sort(all.begin(), all.end(), [](const Brute& a, const Brute& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return a.span < b.span;
  });
  if (all.size() > n) all.resize(n);
  double z = 0.0;
  for (const auto& b : all) z += std::exp(b.logprob);
  for (auto& b : all) b.logprob -= std::log(z);
  return all;
}

}  // namespace testsupport::oracles
