#include <doctest.h>

#include <string>

#include "docground/corpus.hpp"
#include "docground/errors.hpp"
#include "docground/numeric.hpp"
#include "docground/text.hpp"
#include "docground/windowing.hpp"

using namespace docground;

namespace {

GroundedDocument words_doc(std::size_t n) {
  std::string text;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) text += ' ';
    text += "w" + std::to_string(i);
  }
  const std::size_t len = text::decode_utf8(text).size();
  return GroundedDocument("d", "x", text, {{"s", "t", {0, len}}}, {{"p", "s", {0, 2}}});
}

DialogSample sample_for(const GroundedDocument& doc, std::vector<Turn> context = {}) {
  DialogSample s;
  s.sample_id = "s_1";
  s.dialog_id = "s";
  s.doc_id = doc.doc_id();
  s.turn_index = context.size();
  s.context = std::move(context);
  return s;
}

GroundedDocument random_doc(GaussianSource& rng) {
  static const std::vector<std::string> kWords = {"form", "card", "renew", "\xC3\xA9t\xC3\xA9", "office", "fee",
                                                  ",", ".", "(", ")", "x", "benefits"};
  std::string text;
  const std::size_t n = 1 + rng.below(120);
  for (std::size_t i = 0; i < n; ++i) {
    if (!text.empty() && rng.below(4) != 0) text += rng.below(5) == 0 ? "  " : " ";
    text += kWords[rng.below(kWords.size())];
  }
  const std::size_t len = text::decode_utf8(text).size();
  return GroundedDocument("d", "x", text, {{"s", "t", {0, len}}}, {});
}

}  // namespace

TEST_CASE("basic tokenizer splits punctuation and keeps character spans") {
  const BasicTokenizer tok;
  const auto cps = text::decode_utf8("Don't stop, \xC3\x89T\xC3\x89!");
  const auto t = tok.tokenize(cps);
  std::vector<std::string> forms;
  for (const auto& x : t) forms.push_back(x.form);
  CHECK(forms == std::vector<std::string>{"don", "'", "t", "stop", ",", "\xC3\xA9t\xC3\xA9", "!"});
  CHECK(t[0].span == CharRange{0, 3});
  CHECK(t[5].span == CharRange{12, 15});
  CHECK(t[0].id >= kFirstWordId);
  CHECK(t[3].id == tok.tokenize(text::decode_utf8("STOP"))[0].id);
  CHECK(tok.fingerprint() == "basic-ws-punct-fnv1a-v1:30000");
}

TEST_CASE("100-token document with slice capacity 100 gives one window") {
  const auto doc = words_doc(100);
  const auto r = make_windows(sample_for(doc), doc, BasicTokenizer{}, {.max_len = 103, .stride = 50});
  REQUIRE(r.windows.size() == 1);
  CHECK(r.windows[0].slice_length() == 100);
  CHECK(r.windows[0].window_char_offset == 0);
  CHECK(r.windows[0].window_char_end == doc.length());
}

TEST_CASE("150-token document, capacity 100, stride 50: two windows overlapping by 50 tokens") {
  const auto doc = words_doc(150);
  const auto r = make_windows(sample_for(doc), doc, BasicTokenizer{}, {.max_len = 103, .stride = 50});
  REQUIRE(r.windows.size() == 2);
  const auto& a = r.windows[0];
  const auto& b = r.windows[1];
  // Window 0 holds document tokens 0..99, window 1 tokens 50..149.
  CHECK(a.slice_length() == 100);
  CHECK(b.slice_length() == 100);
  CHECK(a.alignment.char_spans[a.doc_token_begin] == CharRange{0, 2});
  CHECK(b.alignment.char_spans[b.doc_token_begin] == a.alignment.char_spans[a.doc_token_begin + 50]);
  CHECK(b.alignment.char_spans[b.doc_token_end - 1].end == doc.length());
  std::size_t shared = 0;
  for (std::size_t i = a.doc_token_begin; i < a.doc_token_end; ++i) {
    for (std::size_t j = b.doc_token_begin; j < b.doc_token_end; ++j) {
      shared += a.alignment.char_spans[i] == b.alignment.char_spans[j];
    }
  }
  CHECK(shared == 50);
  CHECK(a.window_id == "s_1#0");
  CHECK(b.window_id == "s_1#1");
}

TEST_CASE("window layout: BOS, context, separator, slice, separator") {
  const auto doc = words_doc(5);
  const auto s = sample_for(doc, {{Role::User, "hello there", {}}, {Role::Agent, "hi", {}}});
  const auto r = make_windows(s, doc, BasicTokenizer{}, {});
  REQUIRE(r.windows.size() == 1);
  const auto& w = r.windows[0];
  CHECK(w.alignment.tokens.front() == kBosId);
  CHECK(w.alignment.tokens[1] == kUserId);
  CHECK(w.alignment.tokens[4] == kAgentId);
  CHECK(w.alignment.tokens[6] == kSepId);
  CHECK(w.doc_token_begin == 7);
  CHECK(w.alignment.tokens.back() == kSepId);
  CHECK(w.alignment.size() == 7 + 5 + 1);
  for (std::size_t i = 0; i < w.alignment.size(); ++i) {
    CHECK((w.alignment.special_mask[i] != 0) == !w.is_document_token(i));
    if (w.alignment.special_mask[i]) CHECK(w.alignment.char_spans[i].empty());
  }
}

TEST_CASE("oldest context turns are truncated first") {
  const auto doc = words_doc(20);
  std::vector<Turn> ctx;
  for (int t = 0; t < 3; ++t) ctx.push_back({t % 2 ? Role::Agent : Role::User, "a b c d e f g h i j", {}});
  const auto r = make_windows(sample_for(doc, ctx), doc, BasicTokenizer{}, {.max_len = 30, .stride = 10});
  CHECK(r.truncated_turns == 1);
  CHECK_FALSE(r.truncated_tokens);
  const auto& w = r.windows.front();
  CHECK(w.doc_token_begin == 1 + 22 + 1);
  CHECK(w.alignment.tokens[1] == kAgentId);

  std::string long_turn;
  for (int i = 0; i < 20; ++i) long_turn += "x" + std::to_string(i) + " ";
  const auto one_long =
      make_windows(sample_for(doc, {{Role::User, long_turn, {}}}), doc, BasicTokenizer{}, {.max_len = 10, .stride = 5});
  CHECK(one_long.truncated_tokens);
  // Role marker plus the five most recent tokens, leaving one slot for the document.
  const auto& lw = one_long.windows.front();
  CHECK(lw.doc_token_begin == 8);
  CHECK(lw.slice_length() == 1);
  CHECK(lw.forms[2] == "x15");
  CHECK(one_long.windows.size() == 20);
}

TEST_CASE("invalid window parameters") {
  const auto doc = words_doc(3);
  CHECK_THROWS_AS(make_windows(sample_for(doc), doc, BasicTokenizer{}, {.max_len = 3, .stride = 1}), ConfigError);
  CHECK_THROWS_AS(make_windows(sample_for(doc), doc, BasicTokenizer{}, {.max_len = 10, .stride = 0}), ConfigError);
  CHECK_THROWS_AS(make_windows(sample_for(doc), doc, BasicTokenizer{}, {.max_len = 10, .stride = 11}), ConfigError);
}

TEST_CASE("assign_targets: inside, elsewhere, straddling, whole slice") {
  const std::string text = "alpha beta, gamma delta. epsilon zeta eta theta";
  const std::size_t len = text::decode_utf8(text).size();
  GroundedDocument doc("d", "x", text, {{"s", "t", {0, len}}}, {});
  const auto r = make_windows(sample_for(doc), doc, BasicTokenizer{}, {.max_len = 8, .stride = 3});
  REQUIRE(r.windows.size() >= 2);
  const auto& w0 = r.windows[0];  // alpha beta , gamma delta
  const std::size_t b = w0.doc_token_begin;

  CHECK(assign_targets(w0, {6, 17}) == TokenPair{b + 1, b + 3});  // "beta, gamma"
  CHECK(assign_targets(w0, {7, 9}) == TokenPair{b + 1, b + 1});   // inside "beta"
  CHECK(assign_targets(w0, {33, 37}) == kBosSpan);                // "zeta" is in a later window
  CHECK(assign_targets(w0, {18, 32}) == kBosSpan);                // straddles the slice end
  const CharRange whole{w0.alignment.char_spans[b].start, w0.alignment.char_spans[w0.doc_token_end - 1].end};
  CHECK(assign_targets(w0, whole) == TokenPair{b, w0.doc_token_end - 1});
}

TEST_CASE("property: windows cover the document, overlap by capacity minus stride, and are deterministic") {
  GaussianSource rng(99);
  const BasicTokenizer tok;
  for (int it = 0; it < 300; ++it) {
    const auto doc = random_doc(rng);
    const std::size_t max_len = 4 + rng.below(40);
    const std::size_t stride = 1 + rng.below(max_len);
    const auto s = sample_for(doc, rng.below(2) ? std::vector<Turn>{{Role::User, "fee card", {}}} : std::vector<Turn>{});
    const auto r = make_windows(s, doc, tok, {max_len, stride});
    const auto again = make_windows(s, doc, tok, {max_len, stride});
    REQUIRE(r.windows.size() == again.windows.size());
    for (std::size_t k = 0; k < r.windows.size(); ++k) {
      CHECK(r.windows[k].alignment == again.windows[k].alignment);
      CHECK(r.windows[k].forms == again.windows[k].forms);
      CHECK(r.windows[k].window_char_offset == again.windows[k].window_char_offset);
    }

    CHECK(r.windows.front().window_char_offset == 0);
    CHECK(r.windows.back().window_char_end == doc.length());
    for (std::size_t k = 0; k + 1 < r.windows.size(); ++k) {
      const auto& a = r.windows[k];
      const auto& b = r.windows[k + 1];
      CHECK(b.window_char_offset <= a.window_char_end);
      const std::size_t capacity = max_len - (a.doc_token_begin - 2) - 3;
      CHECK(a.slice_length() == capacity);
      const std::size_t eff = std::min(stride, capacity);
      // Overlap: the last capacity - stride tokens of a are the first tokens of b.
      for (std::size_t o = 0; o < capacity - eff; ++o) {
        CHECK(a.alignment.char_spans[a.doc_token_begin + eff + o] == b.alignment.char_spans[b.doc_token_begin + o]);
      }
    }
    std::size_t total = 0;
    for (const auto& w : r.windows) total += w.slice_length();
    CHECK(total >= tok.tokenize(doc.codepoints()).size());

    // Alignment consistency: the pair's range starts with token i's text and ends with token j's.
    const auto& w = r.windows[rng.below(r.windows.size())];
    if (w.slice_length() > 0) {
      const std::size_t i = w.doc_token_begin + rng.below(w.slice_length());
      const std::size_t j = i + rng.below(w.doc_token_end - i);
      const std::string span_text = doc.slice(pair_char_span(w, {i, j}));
      const std::string first = doc.slice(w.alignment.char_spans[i]);
      const std::string last = doc.slice(w.alignment.char_spans[j]);
      CHECK(span_text.rfind(first, 0) == 0);
      CHECK(span_text.substr(span_text.size() - last.size()) == last);
    }
  }
}

TEST_CASE("property: single-window documents never get the BOS target for in-document references") {
  GaussianSource rng(7);
  const BasicTokenizer tok;
  for (int it = 0; it < 300; ++it) {
    const auto doc = random_doc(rng);
    const auto tokens = tok.tokenize(doc.codepoints());
    const auto r = make_windows(sample_for(doc), doc, tok, {512, 128});
    REQUIRE(r.windows.size() == 1);
    const std::size_t a = rng.below(tokens.size());
    const std::size_t b = a + rng.below(tokens.size() - a);
    const std::size_t start = tokens[a].span.start + rng.below(tokens[a].span.length());
    const std::size_t end = std::max(start + 1, tokens[b].span.end - rng.below(tokens[b].span.length()));
    const TokenPair t = assign_targets(r.windows[0], {start, end});
    CHECK_FALSE(t.is_bos());
    CHECK(pair_char_span(r.windows[0], t).contains({start, end}));
    // Tightest: shrinking either side loses coverage.
    if (t.start < t.end) {
      CHECK_FALSE(pair_char_span(r.windows[0], {t.start + 1, t.end}).contains({start, end}));
      CHECK_FALSE(pair_char_span(r.windows[0], {t.start, t.end - 1}).contains({start, end}));
    }
  }
}
