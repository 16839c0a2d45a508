#include "docground/windowing.hpp"

#include <algorithm>
#include <spdlog/spdlog.h>

#include "docground/errors.hpp"
#include "docground/text.hpp"

namespace docground {

namespace {

template <typename Emit>
void segment(std::u32string_view text, Emit&& emit) {
  std::size_t i = 0;
  while (i < text.size()) {
    const char32_t c = text[i];
    if (text::is_whitespace(c)) {
      ++i;
    } else if (text::is_punctuation(c)) {
      emit(i, i + 1);
      ++i;
    } else {
      std::size_t j = i + 1;
      while (j < text.size() && !text::is_whitespace(text[j]) && !text::is_punctuation(text[j])) ++j;
      emit(i, j);
      i = j;
    }
  }
}

}  // namespace

BasicTokenizer::BasicTokenizer(std::uint32_t vocab_size) : vocab_size_(vocab_size) {
  if (vocab_size_ == 0) throw ConfigError("tokenizer vocabulary size must be positive");
}

std::vector<Token> BasicTokenizer::tokenize(std::u32string_view text) const {
  std::vector<Token> out;
  segment(text, [&](std::size_t b, std::size_t e) {
    Token t;
    t.span = {b, e};
    t.form = text::encode_utf8(text::to_lower(text.substr(b, e - b)));
    t.id = kFirstWordId + static_cast<int>(text::fnv1a64(t.form) % vocab_size_);
    out.push_back(std::move(t));
  });
  return out;
}

std::string BasicTokenizer::fingerprint() const {
  return "basic-ws-punct-fnv1a-v1:" + std::to_string(vocab_size_);
}

std::vector<std::string> word_forms(std::string_view text) {
  const std::u32string cps = text::decode_utf8(text);
  std::vector<std::string> out;
  segment(cps, [&](std::size_t b, std::size_t e) {
    out.push_back(text::encode_utf8(text::to_lower(std::u32string_view(cps).substr(b, e - b))));
  });
  return out;
}

std::vector<Token> context_tokens(const std::vector<Turn>& context, const Tokenizer& tokenizer) {
  std::vector<Token> out;
  for (const auto& turn : context) {
    const bool user = turn.role == Role::User;
    out.push_back({user ? kUserId : kAgentId, {}, user ? "<user>" : "<agent>"});
    for (auto& t : tokenizer.tokenize(text::decode_utf8(turn.utterance))) {
      t.span = {};
      out.push_back(std::move(t));
    }
  }
  return out;
}

WindowingResult make_windows(const DialogSample& sample, const GroundedDocument& doc,
                             const Tokenizer& tokenizer, const WindowParams& params) {
  if (params.max_len < 4) throw ConfigError("max_len must leave room for three specials and one document token");
  if (params.stride == 0 || params.stride > params.max_len) {
    throw ConfigError("stride must satisfy 0 < stride <= max_len");
  }
  WindowingResult result;

  // Drop oldest turns until the context leaves room for at least one document token.
  const std::size_t context_budget = params.max_len - 4;
  std::vector<Turn> context = sample.context;
  std::vector<Token> query = context_tokens(context, tokenizer);
  while (query.size() > context_budget && context.size() > 1) {
    context.erase(context.begin());
    ++result.truncated_turns;
    query = context_tokens(context, tokenizer);
  }
  if (query.size() > context_budget) {
    // A single turn is still too long: keep its role marker and its most recent tokens.
    std::vector<Token> kept;
    if (context_budget > 0) {
      kept.push_back(query.front());
      kept.insert(kept.end(), query.end() - static_cast<std::ptrdiff_t>(context_budget - 1), query.end());
    }
    query = std::move(kept);
    result.truncated_tokens = true;
  }
  if (result.truncated_turns > 0 || result.truncated_tokens) {
    spdlog::warn("sample {}: dialog context truncated ({} oldest turns dropped{})", sample.sample_id,
                 result.truncated_turns, result.truncated_tokens ? ", last turn clipped" : "");
  }

  const std::vector<Token> doc_tokens = tokenizer.tokenize(doc.codepoints());
  const std::size_t capacity = params.max_len - query.size() - 3;
  const std::size_t stride = std::min(params.stride, capacity);

  std::vector<std::size_t> starts{0};
  while (starts.back() + capacity < doc_tokens.size()) starts.push_back(starts.back() + stride);

  for (std::size_t k = 0; k < starts.size(); ++k) {
    const std::size_t slice_begin = starts[k];
    const std::size_t slice_end = std::min(slice_begin + capacity, doc_tokens.size());
    WindowDescriptor w;
    w.window_id = sample.sample_id + "#" + std::to_string(k);
    w.sample_id = sample.sample_id;
    w.doc_id = doc.doc_id();
    w.has_bos = true;
    auto push = [&w](int id, CharRange span, bool special, std::string form) {
      w.alignment.tokens.push_back(id);
      w.alignment.char_spans.push_back(span);
      w.alignment.special_mask.push_back(special ? 1 : 0);
      w.forms.push_back(std::move(form));
    };
    push(kBosId, {}, true, "<s>");
    for (const auto& t : query) push(t.id, {}, true, t.form);
    push(kSepId, {}, true, "</s>");
    w.doc_token_begin = w.alignment.size();
    for (std::size_t i = slice_begin; i < slice_end; ++i) {
      push(doc_tokens[i].id, doc_tokens[i].span, false, doc_tokens[i].form);
    }
    w.doc_token_end = w.alignment.size();
    push(kSepId, {}, true, "</s>");

    const bool first = k == 0;
    const bool last = k + 1 == starts.size();
    w.window_char_offset = (first || slice_begin == slice_end) ? 0 : doc_tokens[slice_begin].span.start;
    w.window_char_end = (last || slice_begin == slice_end) ? doc.length() : doc_tokens[slice_end].span.start;
    result.windows.push_back(std::move(w));
  }
  return result;
}

std::optional<TokenPair> cover_tokens(const WindowDescriptor& window, CharRange range) {
  if (window.slice_length() == 0 || range.empty()) return std::nullopt;
  const auto& spans = window.alignment.char_spans;
  const std::size_t b = window.doc_token_begin;
  const std::size_t e = window.doc_token_end;
  if (range.start < spans[b].start || range.end > spans[e - 1].end) return std::nullopt;
  std::size_t start = b;
  for (std::size_t i = b; i < e && spans[i].start <= range.start; ++i) start = i;
  std::size_t end = e - 1;
  for (std::size_t i = b; i < e; ++i) {
    if (spans[i].end >= range.end) {
      end = i;
      break;
    }
  }
  return TokenPair{start, end};
}

TokenPair assign_targets(const WindowDescriptor& window, CharRange reference_span) {
  return cover_tokens(window, reference_span).value_or(kBosSpan);
}

CharRange pair_char_span(const WindowDescriptor& window, TokenPair pair) {
  if (!window.is_document_token(pair.start) || !window.is_document_token(pair.end) || pair.start > pair.end) {
    throw DataError("window '" + window.window_id + "': token pair is not a document span");
  }
  return {window.alignment.char_spans[pair.start].start, window.alignment.char_spans[pair.end].end};
}

}  // namespace docground
