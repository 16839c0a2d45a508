#include "docground/features.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <unordered_set>

#include "docground/errors.hpp"
#include "docground/text.hpp"

namespace docground {

namespace {

constexpr std::array<char, 4> kMagic = {'S', 'G', 'F', '1'};

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint64_t v) {
    if (v > std::numeric_limits<std::uint32_t>::max()) throw DataError("value does not fit in u32");
    for (int k = 0; k < 4; ++k) out_.push_back(static_cast<std::uint8_t>((v >> (8 * k)) & 0xFF));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(s.size());
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { out_.insert(out_.end(), p, p + n); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& in) : in_(in) {}

  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(in_[pos_++]) << (8 * k);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void expect_magic() {
    need(4);
    if (std::memcmp(in_.data(), kMagic.data(), 4) != 0) throw DataError("feature file: bad magic (expected SGF1)");
    pos_ += 4;
  }
  std::uint32_t length(std::size_t expected, const std::string& what) {
    const std::uint32_t n = u32();
    if (n != expected) throw DataError("feature file: " + what + " length mismatch");
    return n;
  }
  [[nodiscard]] bool at_end() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw DataError("feature file: truncated at byte " + std::to_string(pos_));
  }

  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

const std::unordered_set<std::string>& stopwords() {
  static const std::unordered_set<std::string> kWords = {
      "a",    "an",   "the",  "to",  "of",   "and",  "or",  "is",   "are",  "i",    "you",
      "my",   "your", "me",   "it",  "in",   "on",   "for", "do",   "does", "can",  "what",
      "how",  "is",   "be",   "if",  "with", "at",   "by",  "this", "that", "need", "want",
      "will", "am",   "have", "has", "about", "should", "would", "there", "we", "they"};
  return kWords;
}

std::unordered_set<std::string> content_words(const std::string& utterance) {
  std::unordered_set<std::string> out;
  for (auto& w : word_forms(utterance)) {
    if (w.empty() || stopwords().contains(w)) continue;
    const auto cps = text::decode_utf8(w);
    if (cps.size() == 1 && text::is_punctuation(cps[0])) continue;
    out.insert(std::move(w));
  }
  return out;
}

bool is_punct_form(const std::string& form) {
  const auto cps = text::decode_utf8(form);
  return cps.size() == 1 && text::is_punctuation(cps[0]);
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::vector<std::uint8_t> serialize_features(const FeatureSet& features) {
  if (features.feature_dim == 0) throw DataError("feature file: feature_dim must be positive");
  ByteWriter w;
  w.raw(kMagic.data(), kMagic.size());
  w.u32(features.feature_dim);
  w.u32(features.windows.size());
  for (const auto& fw : features.windows) {
    validate_window(fw, features.feature_dim);
    const auto& d = fw.descriptor;
    const auto& a = d.alignment;
    w.str(d.window_id);
    w.str(d.sample_id);
    w.str(d.doc_id);
    w.u32(d.window_char_offset);
    w.u32(d.window_char_end);
    w.u32(d.doc_token_begin);
    w.u32(d.doc_token_end);
    w.u8(d.has_bos ? 1 : 0);
    w.u32(a.size());
    for (int id : a.tokens) w.i32(id);
    w.u32(a.size());
    for (const auto& span : a.char_spans) {
      w.u32(span.start);
      w.u32(span.end);
    }
    w.u32(a.size());
    for (auto m : a.special_mask) w.u8(m);
    for (Eigen::Index r = 0; r < fw.hidden_states.rows(); ++r) {
      for (Eigen::Index c = 0; c < fw.hidden_states.cols(); ++c) w.f32(static_cast<float>(fw.hidden_states(r, c)));
    }
  }
  return w.take();
}

FeatureSet deserialize_features(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.expect_magic();
  FeatureSet fs;
  fs.feature_dim = r.u32();
  if (fs.feature_dim == 0) throw DataError("feature file: feature_dim must be positive");
  const std::uint32_t count = r.u32();
  fs.windows.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    FeatureWindow fw;
    auto& d = fw.descriptor;
    d.window_id = r.str();
    d.sample_id = r.str();
    d.doc_id = r.str();
    d.window_char_offset = r.u32();
    d.window_char_end = r.u32();
    d.doc_token_begin = r.u32();
    d.doc_token_end = r.u32();
    d.has_bos = r.u8() != 0;
    const std::uint32_t n = r.u32();
    auto& a = d.alignment;
    a.tokens.resize(n);
    for (auto& id : a.tokens) id = r.i32();
    r.length(n, "char span array of window '" + d.window_id + "'");
    a.char_spans.resize(n);
    for (auto& span : a.char_spans) {
      span.start = r.u32();
      span.end = r.u32();
    }
    r.length(n, "special mask of window '" + d.window_id + "'");
    a.special_mask.resize(n);
    for (auto& m : a.special_mask) m = r.u8();
    fw.hidden_states.resize(n, static_cast<Eigen::Index>(fs.feature_dim));
    for (std::uint32_t row = 0; row < n; ++row) {
      for (std::size_t c = 0; c < fs.feature_dim; ++c) fw.hidden_states(row, static_cast<Eigen::Index>(c)) = r.f32();
    }
    validate_window(fw, fs.feature_dim);
    fs.windows.push_back(std::move(fw));
  }
  if (!r.at_end()) throw DataError("feature file: trailing bytes after the last window");
  return fs;
}

void validate_window(const FeatureWindow& fw, std::size_t feature_dim) {
  const auto& d = fw.descriptor;
  const auto& a = d.alignment;
  const std::string where = "window '" + d.window_id + "'";
  if (a.char_spans.size() != a.size() || a.special_mask.size() != a.size()) {
    throw DataError(where + ": alignment arrays differ in length");
  }
  if (static_cast<std::size_t>(fw.hidden_states.rows()) != a.size() ||
      static_cast<std::size_t>(fw.hidden_states.cols()) != feature_dim) {
    throw DataError(where + ": hidden state shape does not match tokens x feature_dim");
  }
  if (d.doc_token_begin > d.doc_token_end || d.doc_token_end > a.size()) {
    throw DataError(where + ": document token range out of bounds");
  }
  if (d.has_bos && (a.size() == 0 || a.tokens[0] != kBosId || !a.special_mask[0])) {
    throw DataError(where + ": has_bos set but token 0 is not BOS");
  }
  std::size_t previous_end = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool special = a.special_mask[i] != 0;
    if (special != !d.is_document_token(i)) {
      throw DataError(where + ": special mask disagrees with the document token range at token " + std::to_string(i));
    }
    const auto& span = a.char_spans[i];
    if (special) {
      if (!span.empty()) throw DataError(where + ": special token " + std::to_string(i) + " has a character range");
      continue;
    }
    if (span.start >= span.end || span.start < previous_end) {
      throw DataError(where + ": character spans overlap or are not monotone at token " + std::to_string(i));
    }
    if (span.start < d.window_char_offset || span.end > d.window_char_end) {
      throw DataError(where + ": token " + std::to_string(i) + " lies outside the window's character range");
    }
    previous_end = span.end;
  }
  if (d.window_char_offset > d.window_char_end) throw DataError(where + ": inverted window character range");
  if (!fw.hidden_states.allFinite()) throw DataError(where + ": non-finite hidden states");
}

void validate_against(const FeatureSet& features, const Corpus& corpus) {
  for (const auto& fw : features.windows) {
    const auto& d = fw.descriptor;
    if (!corpus.has_document(d.doc_id)) {
      throw DataError("window '" + d.window_id + "' references unknown document '" + d.doc_id + "'");
    }
    const auto& doc = corpus.document(d.doc_id);
    for (std::size_t i = d.doc_token_begin; i < d.doc_token_end; ++i) {
      if (d.alignment.char_spans[i].end > doc.length()) {
        throw DataError("window '" + d.window_id + "': token " + std::to_string(i) + " exceeds the document");
      }
    }
  }
}

std::filesystem::path sidecar_path(const std::filesystem::path& feature_file) {
  return std::filesystem::path(feature_file.string() + ".json");
}

void write_feature_file(const std::filesystem::path& path, const FeatureSet& features) {
  const auto bytes = serialize_features(features);
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  nlohmann::json meta = {{"model_id", features.model_id},
                         {"tokenizer_fingerprint", features.tokenizer_fingerprint},
                         {"feature_dim", features.feature_dim},
                         {"window_count", features.windows.size()},
                         {"params", features.params}};
  std::ofstream side(sidecar_path(path));
  if (!side) throw DataError("cannot write " + sidecar_path(path).string());
  side << meta.dump(2) << '\n';
}

FeatureSet read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  FeatureSet fs;
  try {
    fs = deserialize_features(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  std::ifstream side(sidecar_path(path));
  if (!side) throw DataError("missing feature sidecar " + sidecar_path(path).string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(side);
    fs.model_id = meta.at("model_id").get<std::string>();
    fs.tokenizer_fingerprint = meta.at("tokenizer_fingerprint").get<std::string>();
    if (meta.at("feature_dim").get<std::size_t>() != fs.feature_dim ||
        meta.at("window_count").get<std::size_t>() != fs.windows.size()) {
      throw DataError("sidecar disagrees with the binary header");
    }
    if (meta.contains("params")) fs.params = meta["params"];
  } catch (const nlohmann::json::exception& e) {
    throw DataError(sidecar_path(path).string() + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(sidecar_path(path).string() + ": " + e.what());
  }
  return fs;
}

LexicalEncoder::LexicalEncoder(EncoderOptions options) : options_(options) {
  if (options_.feature_dim < kIndicatorDims) {
    throw ConfigError("lexical encoder needs feature_dim >= " + std::to_string(kIndicatorDims));
  }
}

nlohmann::json LexicalEncoder::describe() const {
  return {{"encoder", "lexical-v1"}, {"feature_dim", options_.feature_dim}, {"seed", options_.seed}};
}

Eigen::MatrixXd LexicalEncoder::encode(const WindowDescriptor& window, const DialogSample& sample) const {
  const std::size_t n = window.alignment.size();
  if (window.forms.size() != n) throw DataError("window '" + window.window_id + "' has no token forms to encode");

  std::string last_user;
  std::unordered_set<std::string> context_words;
  for (const auto& turn : sample.context) {
    if (turn.role == Role::User) last_user = turn.utterance;
    for (auto& w : content_words(turn.utterance)) context_words.insert(std::move(w));
  }
  const auto query_words = content_words(last_user);

  std::vector<double> overlap(n, 0.0);
  for (std::size_t i = window.doc_token_begin; i < window.doc_token_end; ++i) {
    overlap[i] = query_words.contains(window.forms[i]) ? 1.0 : 0.0;
  }

  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(options_.feature_dim));
  const std::size_t hash_dims = options_.feature_dim - kIndicatorDims;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    const bool doc_token = window.is_document_token(i);
    h(row, 0) = (i == 0 && window.has_bos) ? 1.0 : 0.0;
    h(row, 1) = doc_token ? 0.0 : 1.0;
    if (doc_token) {
      const bool has_prev = i > window.doc_token_begin;
      const bool has_next = i + 1 < window.doc_token_end;
      h(row, 2) = overlap[i];
      h(row, 3) = has_prev ? overlap[i - 1] : 0.0;
      h(row, 4) = has_next ? overlap[i + 1] : 0.0;
      h(row, 5) = context_words.contains(window.forms[i]) ? 1.0 : 0.0;
      h(row, 6) = is_punct_form(window.forms[i]) ? 1.0 : 0.0;
      h(row, 7) = (!has_prev || is_punct_form(window.forms[i - 1])) ? 1.0 : 0.0;
      h(row, 8) = (!has_next || is_punct_form(window.forms[i + 1])) ? 1.0 : 0.0;
    }
    std::uint64_t state = options_.seed ^ text::fnv1a64(window.forms[i]);
    for (std::size_t k = 0; k < hash_dims; ++k) {
      state = mix64(state);
      h(row, static_cast<Eigen::Index>(kIndicatorDims + k)) = (state & 1) ? 0.25 : -0.25;
    }
  }
  return h;
}

}  // namespace docground
