#include "docground/span_heads.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "docground/errors.hpp"
#include "docground/numeric.hpp"

namespace docground {

std::string to_string(HeadKind kind) { return kind == HeadKind::Independent ? "independent" : "biaffine"; }

HeadKind parse_head_kind(const std::string& s) {
  if (s == "independent") return HeadKind::Independent;
  if (s == "biaffine") return HeadKind::Biaffine;
  throw ConfigError("unknown head kind '" + s + "' (expected independent or biaffine)");
}

void RestrictionMask::canonicalize() {
  valid_starts.push_back(0);
  valid_ends.push_back(0);
  valid_pairs.push_back(kBosSpan);
  auto uniq = [](auto& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  };
  uniq(valid_starts);
  uniq(valid_ends);
  uniq(valid_pairs);
}

bool RestrictionMask::has_start(std::size_t i) const {
  return std::binary_search(valid_starts.begin(), valid_starts.end(), i);
}

bool RestrictionMask::has_end(std::size_t i) const {
  return std::binary_search(valid_ends.begin(), valid_ends.end(), i);
}

bool RestrictionMask::has_pair(TokenPair p) const {
  return std::binary_search(valid_pairs.begin(), valid_pairs.end(), p);
}

void RestrictionMask::add_pair(TokenPair p) {
  valid_starts.push_back(p.start);
  valid_ends.push_back(p.end);
  valid_pairs.push_back(p);
  canonicalize();
}

RestrictionMask phrase_mask(const WindowDescriptor& window, const GroundedDocument& doc) {
  RestrictionMask mask;
  for (const auto& phrase : doc.phrases()) {
    if (const auto pair = cover_tokens(window, phrase.span)) {
      mask.valid_starts.push_back(pair->start);
      mask.valid_ends.push_back(pair->end);
      mask.valid_pairs.push_back(*pair);
    }
  }
  mask.canonicalize();
  return mask;
}

RestrictionMask full_mask(const WindowDescriptor& window, std::size_t max_span_tokens) {
  if (max_span_tokens == 0) throw ConfigError("max_span_tokens must be positive");
  RestrictionMask mask;
  mask.max_span_tokens = max_span_tokens;
  for (std::size_t s = window.doc_token_begin; s < window.doc_token_end; ++s) {
    mask.valid_starts.push_back(s);
    mask.valid_ends.push_back(s);
    for (std::size_t e = s; e < window.doc_token_end && e - s < max_span_tokens; ++e) mask.valid_pairs.push_back({s, e});
  }
  mask.canonicalize();
  return mask;
}

std::vector<TokenPair> independent_candidates(const WindowDescriptor& window, const RestrictionMask& mask) {
  std::vector<TokenPair> out;
  for (std::size_t s : mask.valid_starts) {
    if (!window.is_document_token(s)) continue;
    for (std::size_t e : mask.valid_ends) {
      if (e < s || !window.is_document_token(e)) continue;
      if (e - s >= mask.max_span_tokens) break;
      out.push_back({s, e});
    }
  }
  return out;
}

IndependentHead IndependentHead::zeros(std::size_t d) {
  const auto n = static_cast<Eigen::Index>(d);
  return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n), 0.0, 0.0};
}

BiaffineHead BiaffineHead::zeros(std::size_t d) {
  const auto n = static_cast<Eigen::Index>(d);
  return {Eigen::MatrixXd::Zero(n, n), Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n), 0.0};
}

HeadKind kind_of(const SpanHead& head) {
  return std::holds_alternative<IndependentHead>(head) ? HeadKind::Independent : HeadKind::Biaffine;
}

std::size_t feature_dim_of(const SpanHead& head) {
  return std::visit([](const auto& h) { return h.feature_dim(); }, head);
}

std::size_t parameter_count(HeadKind kind, std::size_t d) {
  return kind == HeadKind::Independent ? 2 * d + 2 : d * d + 2 * d + 1;
}

std::vector<double> flatten(const SpanHead& head) {
  std::vector<double> out;
  const std::size_t d = feature_dim_of(head);
  out.reserve(parameter_count(kind_of(head), d));
  if (const auto* h = std::get_if<IndependentHead>(&head)) {
    out.insert(out.end(), h->w_start.data(), h->w_start.data() + d);
    out.insert(out.end(), h->w_end.data(), h->w_end.data() + d);
    out.push_back(h->b_start);
    out.push_back(h->b_end);
  } else {
    const auto& b = std::get<BiaffineHead>(head);
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t c = 0; c < d; ++c) out.push_back(b.U(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
    }
    out.insert(out.end(), b.v_start.data(), b.v_start.data() + d);
    out.insert(out.end(), b.v_end.data(), b.v_end.data() + d);
    out.push_back(b.b);
  }
  return out;
}

void unflatten(SpanHead& head, std::span<const double> p) {
  const std::size_t d = feature_dim_of(head);
  if (p.size() != parameter_count(kind_of(head), d)) throw ConfigError("parameter vector has the wrong size");
  std::size_t k = 0;
  if (auto* h = std::get_if<IndependentHead>(&head)) {
    for (std::size_t i = 0; i < d; ++i) h->w_start(static_cast<Eigen::Index>(i)) = p[k++];
    for (std::size_t i = 0; i < d; ++i) h->w_end(static_cast<Eigen::Index>(i)) = p[k++];
    h->b_start = p[k++];
    h->b_end = p[k++];
  } else {
    auto& b = std::get<BiaffineHead>(head);
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t c = 0; c < d; ++c) b.U(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = p[k++];
    }
    for (std::size_t i = 0; i < d; ++i) b.v_start(static_cast<Eigen::Index>(i)) = p[k++];
    for (std::size_t i = 0; i < d; ++i) b.v_end(static_cast<Eigen::Index>(i)) = p[k++];
    b.b = p[k++];
  }
}

namespace {

void check_dim(std::size_t head_dim, const Eigen::MatrixXd& hidden) {
  if (static_cast<std::size_t>(hidden.cols()) != head_dim) {
    throw ConfigError("feature_dim mismatch: head expects " + std::to_string(head_dim) + ", features have " +
                      std::to_string(hidden.cols()));
  }
}

// In-place log-softmax over `support` (or every entry when empty); everything else -> -inf.
Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits, const std::vector<std::size_t>* support) {
  Eigen::VectorXd out = Eigen::VectorXd::Constant(logits.size(), kNegInf);
  std::vector<double> values;
  if (support == nullptr) {
    values.assign(logits.data(), logits.data() + logits.size());
  } else {
    values.reserve(support->size());
    for (std::size_t i : *support) {
      if (i >= static_cast<std::size_t>(logits.size())) throw DataError("restriction mask index beyond the window");
      values.push_back(logits(static_cast<Eigen::Index>(i)));
    }
  }
  if (values.empty()) throw ConfigError("empty restriction mask");
  const double z = logsumexp(values);
  if (support == nullptr) {
    out = logits.array() - z;
  } else {
    for (std::size_t i : *support) out(static_cast<Eigen::Index>(i)) = logits(static_cast<Eigen::Index>(i)) - z;
  }
  return out;
}

}  // namespace

StartEndLogprobs score_independent(const IndependentHead& head, const Eigen::MatrixXd& hidden,
                                   const RestrictionMask& mask, bool restricted) {
  check_dim(head.feature_dim(), hidden);
  const Eigen::VectorXd start_logits = (hidden * head.w_start).array() + head.b_start;
  const Eigen::VectorXd end_logits = (hidden * head.w_end).array() + head.b_end;
  return {log_softmax(start_logits, restricted ? &mask.valid_starts : nullptr),
          log_softmax(end_logits, restricted ? &mask.valid_ends : nullptr)};
}

double span_logprob_independent(const StartEndLogprobs& lp, TokenPair pair) {
  return lp.start(static_cast<Eigen::Index>(pair.start)) + lp.end(static_cast<Eigen::Index>(pair.end));
}

double biaffine_logit(const BiaffineHead& head, const Eigen::MatrixXd& hidden, TokenPair pair) {
  const auto hs = hidden.row(static_cast<Eigen::Index>(pair.start)).transpose();
  const auto he = hidden.row(static_cast<Eigen::Index>(pair.end)).transpose();
  return hs.dot(head.U * he) + head.v_start.dot(hs) + head.v_end.dot(he) + head.b;
}

namespace {

std::vector<double> biaffine_logits(const BiaffineHead& head, const Eigen::MatrixXd& hidden,
                                    const RestrictionMask& mask) {
  check_dim(head.feature_dim(), hidden);
  if (mask.valid_pairs.empty()) throw ConfigError("empty restriction mask");
  const Eigen::MatrixXd hu = hidden * head.U;
  const Eigen::VectorXd a_start = hidden * head.v_start;
  const Eigen::VectorXd a_end = hidden * head.v_end;
  const auto n = static_cast<std::size_t>(hidden.rows());
  std::vector<double> z;
  z.reserve(mask.valid_pairs.size());
  for (const auto& p : mask.valid_pairs) {
    if (p.start >= n || p.end >= n) throw DataError("restriction mask pair beyond the window");
    const auto s = static_cast<Eigen::Index>(p.start);
    const auto e = static_cast<Eigen::Index>(p.end);
    z.push_back(hu.row(s).dot(hidden.row(e)) + a_start(s) + a_end(e) + head.b);
  }
  return z;
}

}  // namespace

std::vector<double> score_biaffine(const BiaffineHead& head, const Eigen::MatrixXd& hidden,
                                   const RestrictionMask& mask) {
  std::vector<double> z = biaffine_logits(head, hidden, mask);
  const double lse = logsumexp(z);
  for (double& v : z) v -= lse;
  return z;
}

HeadGradient gradients(const IndependentHead& head, const Eigen::MatrixXd& hidden, const RestrictionMask& mask,
                       bool restricted, TokenPair target) {
  const auto lp = score_independent(head, hidden, mask, restricted);
  const auto s = static_cast<Eigen::Index>(target.start);
  const auto e = static_cast<Eigen::Index>(target.end);
  const bool inside = restricted ? mask.has_start(target.start) && mask.has_end(target.end)
                                 : s < lp.start.size() && e < lp.end.size();
  if (!inside) {
    throw ConfigError("target outside the restriction mask");
  }
  // d(-log softmax)/d logits = p - y, zero outside the support.
  Eigen::VectorXd g_start = lp.start.unaryExpr([](double v) { return std::exp(v); });
  Eigen::VectorXd g_end = lp.end.unaryExpr([](double v) { return std::exp(v); });
  g_start(s) -= 1.0;
  g_end(e) -= 1.0;

  const std::size_t d = head.feature_dim();
  HeadGradient out;
  out.loss = -(lp.start(s) + lp.end(e));
  out.params.resize(parameter_count(HeadKind::Independent, d));
  Eigen::Map<Eigen::VectorXd>(out.params.data(), static_cast<Eigen::Index>(d)) = hidden.transpose() * g_start;
  Eigen::Map<Eigen::VectorXd>(out.params.data() + d, static_cast<Eigen::Index>(d)) = hidden.transpose() * g_end;
  out.params[2 * d] = g_start.sum();
  out.params[2 * d + 1] = g_end.sum();
  return out;
}

HeadGradient gradients(const BiaffineHead& head, const Eigen::MatrixXd& hidden, const RestrictionMask& mask,
                       TokenPair target) {
  const auto it = std::lower_bound(mask.valid_pairs.begin(), mask.valid_pairs.end(), target);
  if (it == mask.valid_pairs.end() || *it != target) throw ConfigError("target outside the restriction mask");
  const auto target_index = static_cast<std::size_t>(it - mask.valid_pairs.begin());

  const std::vector<double> lp = score_biaffine(head, hidden, mask);
  const auto n = hidden.rows();
  // G(s, e) = p(s, e) - y(s, e); dU = H' G H, dv_start = H' G 1, dv_end = H' G' 1.
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(n, n);
  double g_sum = 0.0;
  for (std::size_t k = 0; k < mask.valid_pairs.size(); ++k) {
    double g = std::exp(lp[k]);
    if (k == target_index) g -= 1.0;
    G(static_cast<Eigen::Index>(mask.valid_pairs[k].start), static_cast<Eigen::Index>(mask.valid_pairs[k].end)) += g;
    g_sum += g;
  }
  const std::size_t d = head.feature_dim();
  const Eigen::MatrixXd dU = hidden.transpose() * G * hidden;
  const Eigen::VectorXd dv_start = hidden.transpose() * G.rowwise().sum();
  const Eigen::VectorXd dv_end = hidden.transpose() * G.colwise().sum().transpose();

  HeadGradient out;
  out.loss = -lp[target_index];
  out.params.reserve(parameter_count(HeadKind::Biaffine, d));
  for (Eigen::Index r = 0; r < dU.rows(); ++r) {
    for (Eigen::Index c = 0; c < dU.cols(); ++c) out.params.push_back(dU(r, c));
  }
  out.params.insert(out.params.end(), dv_start.data(), dv_start.data() + d);
  out.params.insert(out.params.end(), dv_end.data(), dv_end.data() + d);
  out.params.push_back(g_sum);
  return out;
}

HeadGradient gradients(const SpanHead& head, const Eigen::MatrixXd& hidden, const RestrictionMask& mask,
                       bool restricted, TokenPair target) {
  if (const auto* h = std::get_if<IndependentHead>(&head)) return gradients(*h, hidden, mask, restricted, target);
  return gradients(std::get<BiaffineHead>(head), hidden, mask, target);
}

double target_nll(const SpanHead& head, const Eigen::MatrixXd& hidden, const RestrictionMask& mask,
                  bool restricted, TokenPair target) {
  if (const auto* h = std::get_if<IndependentHead>(&head)) {
    return -span_logprob_independent(score_independent(*h, hidden, mask, restricted), target);
  }
  const auto lp = score_biaffine(std::get<BiaffineHead>(head), hidden, mask);
  const auto it = std::lower_bound(mask.valid_pairs.begin(), mask.valid_pairs.end(), target);
  if (it == mask.valid_pairs.end() || *it != target) return std::numeric_limits<double>::infinity();
  return -lp[static_cast<std::size_t>(it - mask.valid_pairs.begin())];
}

TokenPair predict_pair(const SpanHead& head, const WindowDescriptor& window, const Eigen::MatrixXd& hidden,
                       const RestrictionMask& mask, bool restricted) {
  TokenPair best = kBosSpan;
  double best_lp = kNegInf;
  auto consider = [&](TokenPair p, double lp) {
    if (lp > best_lp || (lp == best_lp && p < best)) {
      best = p;
      best_lp = lp;
    }
  };
  if (const auto* h = std::get_if<IndependentHead>(&head)) {
    const auto lp = score_independent(*h, hidden, mask, restricted);
    consider(kBosSpan, span_logprob_independent(lp, kBosSpan));
    for (const auto& p : independent_candidates(window, mask)) consider(p, span_logprob_independent(lp, p));
  } else {
    const auto lp = score_biaffine(std::get<BiaffineHead>(head), hidden, mask);
    for (std::size_t k = 0; k < lp.size(); ++k) consider(mask.valid_pairs[k], lp[k]);
  }
  return best;
}

SpanHead initial_head(HeadKind kind, std::size_t d, const TrainConfig& config) {
  GaussianSource rng(config.seed);
  if (kind == HeadKind::Independent) {
    auto h = IndependentHead::zeros(d);
    for (Eigen::Index i = 0; i < h.w_start.size(); ++i) h.w_start(i) = config.init_stddev * rng.normal();
    for (Eigen::Index i = 0; i < h.w_end.size(); ++i) h.w_end(i) = config.init_stddev * rng.normal();
    return h;
  }
  auto h = BiaffineHead::zeros(d);
  for (Eigen::Index i = 0; i < h.v_start.size(); ++i) h.v_start(i) = config.init_stddev * rng.normal();
  for (Eigen::Index i = 0; i < h.v_end.size(); ++i) h.v_end(i) = config.init_stddev * rng.normal();
  return h;
}

TrainResult train_head(HeadKind kind, std::span<const TrainingExample> examples, std::size_t feature_dim,
                       const TrainConfig& config) {
  return train_head(initial_head(kind, feature_dim, config), examples, config);
}

TrainResult train_head(SpanHead head, std::span<const TrainingExample> examples, const TrainConfig& config) {
  if (config.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(config.lr >= 0.0) || !(config.momentum >= 0.0 && config.momentum < 1.0)) {
    throw ConfigError("lr must be >= 0 and momentum in [0, 1)");
  }
  if (examples.empty()) throw ConfigError("no training examples");

  std::vector<double> params = flatten(head);
  std::vector<double> velocity(params.size(), 0.0);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  GaussianSource rng(config.seed ^ 0x5eedULL);

  TrainResult result;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.shuffle) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    }
    double epoch_loss = 0.0;
    for (std::size_t begin = 0, batch = 0; begin < order.size(); begin += config.batch_size, ++batch) {
      const std::size_t end = std::min(begin + config.batch_size, order.size());
      std::vector<double> grad(params.size(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t k = begin; k < end; ++k) {
        const auto& ex = examples[order[k]];
        const auto g = gradients(head, *ex.hidden, ex.mask, config.restricted, ex.target);
        batch_loss += g.loss;
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g.params[i];
      }
      if (!std::isfinite(batch_loss)) {
        throw NumericError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                           " (lr " + std::to_string(config.lr) + ")");
      }
      epoch_loss += batch_loss;
      const double scale = 1.0 / static_cast<double>(end - begin);
      double norm2 = 0.0;
      for (double& g : grad) {
        g *= scale;
        norm2 += g * g;
      }
      const double norm = std::sqrt(norm2);
      if (config.clip_norm > 0.0 && norm > config.clip_norm) {
        const double c = config.clip_norm / norm;
        for (double& g : grad) g *= c;
      }
      for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = config.momentum * velocity[i] + grad[i];
        params[i] -= config.lr * velocity[i];
      }
      unflatten(head, params);
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  result.head = std::move(head);
  return result;
}

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'G', 'H', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int k = 0; k < bytes; ++k) out.push_back(static_cast<std::uint8_t>((v >> (8 * k)) & 0xFF));
}

std::uint64_t get_le(const std::vector<std::uint8_t>& in, std::size_t& pos, int bytes) {
  if (in.size() - pos < static_cast<std::size_t>(bytes)) throw DataError("head checkpoint: truncated");
  std::uint64_t v = 0;
  for (int k = 0; k < bytes; ++k) v |= static_cast<std::uint64_t>(in[pos++]) << (8 * k);
  return v;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const HeadCheckpoint& ckpt) {
  const auto params = flatten(ckpt.head);
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_le(out, kCheckpointVersion, 4);
  put_le(out, kind_of(ckpt.head) == HeadKind::Independent ? 0 : 1, 4);
  put_le(out, feature_dim_of(ckpt.head), 4);
  put_le(out, ckpt.restricted ? 1 : 0, 1);
  put_le(out, params.size(), 8);
  for (double p : params) put_le(out, std::bit_cast<std::uint64_t>(p), 8);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

HeadCheckpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open head checkpoint " + path.string());
  const std::vector<std::uint8_t> in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (in.size() < 4 || !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), in.begin())) {
    throw DataError(path.string() + ": not a head checkpoint");
  }
  std::size_t pos = 4;
  if (get_le(in, pos, 4) != kCheckpointVersion) throw DataError(path.string() + ": unsupported checkpoint version");
  const auto kind_code = get_le(in, pos, 4);
  if (kind_code > 1) throw DataError(path.string() + ": unknown head kind");
  const auto d = static_cast<std::size_t>(get_le(in, pos, 4));
  HeadCheckpoint ckpt;
  ckpt.restricted = get_le(in, pos, 1) != 0;
  const auto kind = kind_code == 0 ? HeadKind::Independent : HeadKind::Biaffine;
  const auto count = get_le(in, pos, 8);
  if (count != parameter_count(kind, d)) throw DataError(path.string() + ": parameter count mismatch");
  std::vector<double> params(count);
  for (auto& p : params) p = std::bit_cast<double>(get_le(in, pos, 8));
  if (pos != in.size()) throw DataError(path.string() + ": trailing bytes");
  ckpt.head = kind == HeadKind::Independent ? SpanHead(IndependentHead::zeros(d)) : SpanHead(BiaffineHead::zeros(d));
  unflatten(ckpt.head, params);
  for (double p : params) {
    if (!std::isfinite(p)) throw DataError(path.string() + ": non-finite parameter");
  }
  return ckpt;
}

}  // namespace docground
