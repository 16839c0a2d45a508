#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace docground::text {

/// Decodes UTF-8 into Unicode scalar values. Throws DataError on malformed input.
std::u32string decode_utf8(std::string_view bytes);
std::string encode_utf8(std::u32string_view codepoints);
std::string encode_utf8(char32_t codepoint);

bool is_whitespace(char32_t c);
/// Unicode general category P*, plus the ASCII symbols in Python's string.punctuation.
bool is_punctuation(char32_t c);
bool is_digit(char32_t c);

/// Simple case mapping for ASCII, Latin-1, Latin Extended-A, Greek and Cyrillic.
char32_t to_lower(char32_t c);
std::u32string to_lower(std::u32string_view s);
std::string to_lower_utf8(std::string_view s);

/// Splits on Unicode whitespace.
std::vector<std::string> split_whitespace(std::string_view s);
/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(std::string_view bytes);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

}  // namespace docground::text
