#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "docground/corpus.hpp"

namespace docground {

inline constexpr int kBosId = 0;
inline constexpr int kSepId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUserId = 3;
inline constexpr int kAgentId = 4;
inline constexpr int kFirstWordId = 5;

struct Token {
  int id = 0;
  CharRange span;
  /// Lower-cased surface form.
  std::string form;
};

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<Token> tokenize(std::u32string_view text) const = 0;
  /// Identifies vocabulary and segmentation rules; feature files record it.
  virtual std::string fingerprint() const = 0;
};

/// Splits on whitespace and emits each punctuation character as its own token. Ids are a
/// hash of the lower-cased form into a fixed-size vocabulary.
class BasicTokenizer final : public Tokenizer {
 public:
  explicit BasicTokenizer(std::uint32_t vocab_size = 30000);

  std::vector<Token> tokenize(std::u32string_view text) const override;
  std::string fingerprint() const override;

 private:
  std::uint32_t vocab_size_;
};

/// Lower-cased word forms of `text` under the basic segmentation rules.
std::vector<std::string> word_forms(std::string_view text);

struct TokenPair {
  std::size_t start = 0;
  std::size_t end = 0;

  [[nodiscard]] bool is_bos() const { return start == 0 && end == 0; }
  auto operator<=>(const TokenPair&) const = default;
};

/// The begin-of-sequence pseudo-span: training target for windows without the reference.
inline constexpr TokenPair kBosSpan{0, 0};

/// Token ids with their document character ranges. Tokens that do not come from the
/// document (BOS, separators, dialog context) are flagged special and carry empty ranges.
struct TokenAlignment {
  std::vector<int> tokens;
  std::vector<CharRange> char_spans;
  std::vector<std::uint8_t> special_mask;

  [[nodiscard]] std::size_t size() const { return tokens.size(); }
  bool operator==(const TokenAlignment&) const = default;
};

/// One encoder input: [BOS] context [SEP] document-slice [SEP].
struct WindowDescriptor {
  std::string window_id;
  std::string sample_id;
  std::string doc_id;
  TokenAlignment alignment;
  /// Token index range [doc_token_begin, doc_token_end) occupied by the document slice.
  std::size_t doc_token_begin = 0;
  std::size_t doc_token_end = 0;
  /// Character range covered by this window; the union over a document's windows is [0, len).
  std::size_t window_char_offset = 0;
  std::size_t window_char_end = 0;
  bool has_bos = true;
  /// Lower-cased forms per token; kept in memory only, never serialized.
  std::vector<std::string> forms;

  [[nodiscard]] bool is_document_token(std::size_t i) const {
    return i >= doc_token_begin && i < doc_token_end;
  }
  [[nodiscard]] std::size_t slice_length() const { return doc_token_end - doc_token_begin; }
};

struct WindowParams {
  std::size_t max_len = 512;
  std::size_t stride = 128;
};

struct WindowingResult {
  std::vector<WindowDescriptor> windows;
  /// Oldest context turns dropped so the context fits next to at least one document token.
  std::size_t truncated_turns = 0;
  bool truncated_tokens = false;
};

/// Serialized dialog context: a role marker followed by the turn's tokens, oldest turn first.
std::vector<Token> context_tokens(const std::vector<Turn>& context, const Tokenizer& tokenizer);

/// Sliding windows over the document. Slice capacity is max_len minus the context length
/// minus three specials; the effective stride is min(stride, capacity) so that windows
/// always cover the whole document.
WindowingResult make_windows(const DialogSample& sample, const GroundedDocument& doc,
                             const Tokenizer& tokenizer, const WindowParams& params);

/// Tightest document-token pair whose character cover contains `range`, when the range lies
/// inside the window's slice.
std::optional<TokenPair> cover_tokens(const WindowDescriptor& window, CharRange range);

/// Training target for a window: the covering token pair, or kBosSpan when the reference is
/// not entirely inside the slice.
TokenPair assign_targets(const WindowDescriptor& window, CharRange reference_span);

/// Character range of a document-token pair.
CharRange pair_char_span(const WindowDescriptor& window, TokenPair pair);

}  // namespace docground
