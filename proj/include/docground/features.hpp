#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "docground/corpus.hpp"
#include "docground/windowing.hpp"

namespace docground {

/// Encoder output for one window: one row of hidden states per token.
struct FeatureWindow {
  WindowDescriptor descriptor;
  Eigen::MatrixXd hidden_states;
};

/// Contents of a feature file plus its JSON sidecar.
struct FeatureSet {
  std::string model_id;
  std::string tokenizer_fingerprint;
  std::size_t feature_dim = 0;
  /// Free-form producer parameters (windowing, encoder), copied into the sidecar.
  nlohmann::json params = nlohmann::json::object();
  std::vector<FeatureWindow> windows;
};

/*
 * Feature file layout (little-endian):
 *
 *   char[4]  magic "SGF1"
 *   u32      feature_dim
 *   u32      window_count
 *   per window:
 *     str    window_id, sample_id, doc_id      (u32 byte length + UTF-8 bytes)
 *     u32    window_char_offset, window_char_end
 *     u32    doc_token_begin, doc_token_end
 *     u8     has_bos
 *     u32 n, i32[n]          token ids
 *     u32 n, (u32,u32)[n]    char spans (start, end)
 *     u32 n, u8[n]           special token mask
 *     f32[n * feature_dim]   hidden states, row-major
 *
 * The sidecar "<file>.json" holds {model_id, tokenizer_fingerprint, feature_dim,
 * window_count, params}.
 */
std::vector<std::uint8_t> serialize_features(const FeatureSet& features);
/// Parses and validates the binary payload; metadata fields other than feature_dim stay empty.
FeatureSet deserialize_features(const std::vector<std::uint8_t>& bytes);

void write_feature_file(const std::filesystem::path& path, const FeatureSet& features);
FeatureSet read_feature_file(const std::filesystem::path& path);
std::filesystem::path sidecar_path(const std::filesystem::path& feature_file);

/// Structural checks on one window; throws DataError naming the window.
void validate_window(const FeatureWindow& window, std::size_t feature_dim);
/// Checks that every window references a known document and that its alignment stays inside it.
void validate_against(const FeatureSet& features, const Corpus& corpus);

struct EncoderOptions {
  std::size_t feature_dim = 16;
  std::uint64_t seed = 0;
};

/// Deterministic stand-in for a frozen encoder. Each token gets indicator features for
/// BOS/special/punctuation, lexical overlap of itself and its neighbours with the last user
/// turn and with the whole context, and a seeded hash embedding of its form.
class LexicalEncoder {
 public:
  static constexpr std::size_t kIndicatorDims = 9;

  explicit LexicalEncoder(EncoderOptions options = {});

  [[nodiscard]] Eigen::MatrixXd encode(const WindowDescriptor& window, const DialogSample& sample) const;
  [[nodiscard]] std::size_t feature_dim() const { return options_.feature_dim; }
  [[nodiscard]] nlohmann::json describe() const;

 private:
  EncoderOptions options_;
};

}  // namespace docground
