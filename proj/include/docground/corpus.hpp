#pragma once

#include <compare>
#include <cstddef>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace docground {

/// Half-open range [start, end) of Unicode scalar values.
struct CharRange {
  std::size_t start = 0;
  std::size_t end = 0;

  [[nodiscard]] std::size_t length() const { return end - start; }
  [[nodiscard]] bool empty() const { return end <= start; }
  [[nodiscard]] bool contains(const CharRange& other) const {
    return start <= other.start && other.end <= end;
  }
  auto operator<=>(const CharRange&) const = default;
};

struct Section {
  std::string section_id;
  std::string title;
  CharRange span;
};

struct Phrase {
  std::string phrase_id;
  std::string section_id;
  CharRange span;
};

/// A grounding document: text, sections and the phrase inventory. Offsets are in
/// Unicode scalar values, not bytes.
class GroundedDocument {
 public:
  GroundedDocument() = default;
  GroundedDocument(std::string doc_id, std::string domain, std::string text,
                   std::vector<Section> sections, std::vector<Phrase> phrases);

  [[nodiscard]] const std::string& doc_id() const { return doc_id_; }
  [[nodiscard]] const std::string& domain() const { return domain_; }
  [[nodiscard]] const std::string& text() const { return text_; }
  [[nodiscard]] const std::u32string& codepoints() const { return codepoints_; }
  [[nodiscard]] std::size_t length() const { return codepoints_.size(); }
  [[nodiscard]] const std::vector<Section>& sections() const { return sections_; }
  [[nodiscard]] const std::vector<Phrase>& phrases() const { return phrases_; }

  /// UTF-8 text of a character range. Throws DataError if out of bounds.
  [[nodiscard]] std::string slice(CharRange range) const;
  [[nodiscard]] const Phrase* find_phrase(const std::string& phrase_id) const;
  [[nodiscard]] const Section* find_section(const std::string& section_id) const;
  /// Title of the first section, or empty.
  [[nodiscard]] std::string title() const;
  /// Ids of phrases lying entirely inside `range`, in document order.
  [[nodiscard]] std::vector<std::string> phrases_within(CharRange range) const;

 private:
  void validate() const;

  std::string doc_id_;
  std::string domain_;
  std::string text_;
  std::u32string codepoints_;
  std::vector<Section> sections_;
  std::vector<Phrase> phrases_;
  std::unordered_map<std::string, std::size_t> phrase_index_;
};

enum class Role { User, Agent };

std::string to_string(Role role);
Role parse_role(const std::string& s);

struct Turn {
  Role role = Role::User;
  std::string utterance;
  std::vector<std::string> grounding_phrase_ids;
};

struct RawDialog {
  std::string dialog_id;
  std::string doc_id;
  std::vector<Turn> turns;
};

struct DialogSample {
  std::string sample_id;
  std::string dialog_id;
  std::string doc_id;
  std::size_t turn_index = 0;
  /// Every turn strictly before the target, oldest first.
  std::vector<Turn> context;
  std::string target_utterance;
  CharRange reference_span;
  std::vector<std::string> reference_phrase_ids;
  bool is_followup = false;
};

class Corpus {
 public:
  Corpus() = default;
  Corpus(std::vector<GroundedDocument> documents, std::vector<RawDialog> dialogs);

  [[nodiscard]] const std::vector<GroundedDocument>& documents() const { return documents_; }
  [[nodiscard]] const std::vector<RawDialog>& dialogs() const { return dialogs_; }
  [[nodiscard]] const GroundedDocument& document(const std::string& doc_id) const;
  [[nodiscard]] bool has_document(const std::string& doc_id) const;

 private:
  std::vector<GroundedDocument> documents_;
  std::vector<RawDialog> dialogs_;
  std::unordered_map<std::string, std::size_t> doc_index_;
};

std::vector<GroundedDocument> parse_documents(const nlohmann::json& j);
std::vector<RawDialog> parse_dialogs(const nlohmann::json& j);
nlohmann::json documents_to_json(const std::vector<GroundedDocument>& docs);
nlohmann::json dialogs_to_json(const std::vector<RawDialog>& dialogs);

/// Loads documents.json and dialogs.json. Throws DataError naming the record and field
/// on schema violations, out-of-bounds offsets or dangling references.
Corpus load_corpus(const std::filesystem::path& doc_file, const std::filesystem::path& dialog_file);

struct ExtractOptions {
  bool include_followups = true;
  /// Reject (skip) turns whose reference phrases leave an unreferenced phrase inside their cover.
  bool strict_contiguous = false;
};

struct SkipReport {
  std::size_t empty_grounding = 0;
  std::size_t non_contiguous = 0;
  std::size_t followups_excluded = 0;
};

struct ExtractResult {
  std::vector<DialogSample> samples;
  SkipReport skipped;
};

/// One sample per grounded agent turn, in dialog order.
ExtractResult extract_samples(const Corpus& corpus, const ExtractOptions& options);

/// Minimal character range covering all given phrases.
CharRange minimal_cover(const GroundedDocument& doc, const std::vector<std::string>& phrase_ids);

}  // namespace docground
