#include "docground/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_map>

#include "docground/errors.hpp"
#include "docground/text.hpp"

namespace docground::metrics {

namespace {

bool is_word_char(char32_t c) {
  if (c < 0x80) {
    return (c >= U'0' && c <= U'9') || (c >= U'a' && c <= U'z') || (c >= U'A' && c <= U'Z') || c == U'_';
  }
  return !text::is_whitespace(c) && !text::is_punctuation(c);
}

bool is_article(std::u32string_view w) { return w == U"a" || w == U"an" || w == U"the"; }

// Replaces every article delimited by word boundaries with a space.
std::u32string remove_articles(const std::u32string& s) {
  std::u32string out;
  std::size_t i = 0;
  while (i < s.size()) {
    if (is_word_char(s[i]) && (i == 0 || !is_word_char(s[i - 1]))) {
      std::size_t j = i;
      while (j < s.size() && is_word_char(s[j])) ++j;
      const std::u32string_view word(s.data() + i, j - i);
      if (is_article(word)) {
        out.push_back(U' ');
      } else {
        out.append(word);
      }
      i = j;
    } else {
      out.push_back(s[i]);
      ++i;
    }
  }
  return out;
}

}  // namespace

std::string normalize_answer(std::string_view raw) {
  return text::join(normalized_tokens(raw), " ");
}

std::vector<std::string> normalized_tokens(std::string_view raw) {
  std::u32string s = text::decode_utf8(raw);
  for (auto& c : s) c = text::to_lower(c);
  std::erase_if(s, [](char32_t c) { return text::is_punctuation(c); });
  return text::split_whitespace(text::encode_utf8(remove_articles(s)));
}

int exact_match(std::string_view prediction, std::string_view reference) {
  return normalized_tokens(prediction) == normalized_tokens(reference) ? 1 : 0;
}

double token_f1(std::string_view prediction, std::string_view reference) {
  const auto p = normalized_tokens(prediction);
  const auto r = normalized_tokens(reference);
  if (p.empty() || r.empty()) return p.empty() && r.empty() ? 1.0 : 0.0;
  std::unordered_map<std::string, long> bag;
  for (const auto& t : r) ++bag[t];
  long same = 0;
  for (const auto& t : p) {
    auto it = bag.find(t);
    if (it != bag.end() && it->second > 0) {
      --it->second;
      ++same;
    }
  }
  if (same == 0) return 0.0;
  const double precision = static_cast<double>(same) / static_cast<double>(p.size());
  const double recall = static_cast<double>(same) / static_cast<double>(r.size());
  return 2.0 * precision * recall / (precision + recall);
}

int em_at_k(const SpanPosterior& nbest, std::string_view reference, std::size_t k) {
  const std::size_t n = std::min(k, nbest.hypotheses.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (exact_match(nbest.hypotheses[i].text, reference) == 1) return 1;
  }
  return 0;
}

namespace {

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

bool is_digit(char c) { return c >= '0' && c <= '9'; }
bool is_period_comma(char c) { return c == '.' || c == ','; }

bool is_13a_symbol(char c) {
  const auto u = static_cast<unsigned char>(c);
  return (u >= 0x7B && u <= 0x7E) || (u >= 0x5B && u <= 0x60) || (u >= 0x20 && u <= 0x26) ||
         (u >= 0x28 && u <= 0x2B) || (u >= 0x3A && u <= 0x40) || u == 0x2F;
}

// Non-overlapping left-to-right rewrite of two-character matches, like re.sub.
template <class First, class Second>
std::string rewrite_pairs(const std::string& s, First first, Second second, std::string_view before,
                          std::string_view middle, std::string_view after) {
  std::string out;
  out.reserve(s.size() * 2);
  std::size_t i = 0;
  while (i < s.size()) {
    if (i + 1 < s.size() && first(s[i]) && second(s[i + 1])) {
      out.append(before);
      out.push_back(s[i]);
      out.append(middle);
      out.push_back(s[i + 1]);
      out.append(after);
      i += 2;
    } else {
      out.push_back(s[i]);
      ++i;
    }
  }
  return out;
}

}  // namespace

std::vector<std::string> tokenize_13a(std::string_view segment) {
  std::string line(segment);
  replace_all(line, "<skipped>", "");
  replace_all(line, "-\n", "");
  replace_all(line, "\n", " ");
  if (line.find('&') != std::string::npos) {
    replace_all(line, "&quot;", "\"");
    replace_all(line, "&amp;", "&");
    replace_all(line, "&lt;", "<");
    replace_all(line, "&gt;", ">");
  }
  line = " " + line + " ";

  std::string spaced;
  spaced.reserve(line.size() * 2);
  for (char c : line) {
    if (is_13a_symbol(c)) {
      spaced.push_back(' ');
      spaced.push_back(c);
      spaced.push_back(' ');
    } else {
      spaced.push_back(c);
    }
  }
  auto not_digit = [](char c) { return !is_digit(c); };
  spaced = rewrite_pairs(spaced, not_digit, is_period_comma, "", " ", " ");
  spaced = rewrite_pairs(spaced, is_period_comma, not_digit, " ", " ", "");
  spaced = rewrite_pairs(spaced, is_digit, [](char c) { return c == '-'; }, "", " ", " ");
  return text::split_whitespace(spaced);
}

BleuSmoothing parse_bleu_smoothing(const std::string& s) {
  if (s == "none") return BleuSmoothing::None;
  if (s == "exp") return BleuSmoothing::Exp;
  throw ConfigError("unknown BLEU smoothing '" + s + "' (expected none or exp)");
}

std::string to_string(BleuSmoothing s) { return s == BleuSmoothing::Exp ? "exp" : "none"; }

std::string bleu_signature(const BleuOptions& options) {
  return std::string("nrefs:1|case:") + (options.lowercase ? "lc" : "mixed") + "|eff:no|tok:13a|smooth:" +
         to_string(options.smoothing) + "|version:docground-1";
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts count_ngrams(const std::vector<std::string>& tokens, std::size_t n) {
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

std::string rstrip(std::string_view s) {
  std::u32string u = text::decode_utf8(s);
  while (!u.empty() && text::is_whitespace(u.back())) u.pop_back();
  return text::encode_utf8(u);
}

double my_log(double x) { return x == 0.0 ? -9999999999.0 : std::log(x); }

}  // namespace

BleuResult corpus_bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
                       const BleuOptions& options) {
  if (hypotheses.empty()) throw DataError("BLEU over an empty corpus");
  if (hypotheses.size() != references.size()) {
    throw DataError("BLEU: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                    std::to_string(references.size()) + " references");
  }
  BleuResult r;
  r.signature = bleu_signature(options);
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    auto prep = [&](const std::string& s) {
      return tokenize_13a(rstrip(options.lowercase ? text::to_lower_utf8(s) : s));
    };
    const auto hyp = prep(hypotheses[i]);
    const auto ref = prep(references[i]);
    r.sys_len += hyp.size();
    r.ref_len += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto h = count_ngrams(hyp, n);
      const auto g = count_ngrams(ref, n);
      for (const auto& [gram, c] : h) {
        r.totals[n - 1] += c;
        const auto it = g.find(gram);
        if (it != g.end()) r.counts[n - 1] += std::min(c, it->second);
      }
    }
  }

  if (r.sys_len < r.ref_len) {
    r.bp = r.sys_len == 0 ? 0.0 : std::exp(1.0 - static_cast<double>(r.ref_len) / static_cast<double>(r.sys_len));
  } else {
    r.bp = 1.0;
  }
  if (std::all_of(r.counts.begin(), r.counts.end(), [](std::size_t c) { return c == 0; })) {
    r.score = 0.0;
    return r;
  }
  double smooth = 1.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (r.totals[n] == 0) break;
    if (r.counts[n] == 0 && options.smoothing == BleuSmoothing::Exp) {
      smooth *= 2.0;
      r.precisions[n] = 100.0 / (smooth * static_cast<double>(r.totals[n]));
    } else {
      r.precisions[n] = 100.0 * static_cast<double>(r.counts[n]) / static_cast<double>(r.totals[n]);
    }
  }
  double log_sum = 0.0;
  for (double p : r.precisions) log_sum += my_log(p);
  r.score = r.bp * std::exp(log_sum / 4.0);
  return r;
}

SpanScores score_spans(const std::vector<SpanPosterior>& nbest, const std::vector<std::string>& references) {
  if (nbest.size() != references.size()) throw DataError("span scoring: prediction/reference count mismatch");
  if (nbest.empty()) throw DataError("span scoring over an empty sample set");
  SpanScores s;
  s.n = nbest.size();
  for (std::size_t i = 0; i < nbest.size(); ++i) {
    const std::string top = nbest[i].hypotheses.empty() ? std::string() : nbest[i].hypotheses.front().text;
    s.f1 += token_f1(top, references[i]);
    s.em += exact_match(top, references[i]);
    s.em_at_1 += em_at_k(nbest[i], references[i], 1);
    s.em_at_5 += em_at_k(nbest[i], references[i], 5);
  }
  const double scale = 100.0 / static_cast<double>(s.n);
  s.f1 *= scale;
  s.em *= scale;
  s.em_at_1 *= scale;
  s.em_at_5 *= scale;
  return s;
}

nlohmann::json to_json(const EvaluationReport& report) {
  return {{"f1", report.f1},
          {"em", report.em},
          {"em_at_5", report.em_at_5},
          {"bleu", report.bleu},
          {"n_samples", report.n_samples},
          {"bleu_signature", report.bleu_signature}};
}

}  // namespace docground::metrics
