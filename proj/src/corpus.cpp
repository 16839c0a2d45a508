#include "docground/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <type_traits>
#include <unordered_set>

#include "docground/errors.hpp"
#include "docground/text.hpp"

namespace docground {

using nlohmann::json;

namespace {

template <typename T>
T require(const json& record, const char* field, const std::string& where) {
  if (!record.is_object()) throw DataError(where + ": expected an object");
  const auto it = record.find(field);
  if (it == record.end()) throw DataError(where + ": missing field '" + field + "'");
  if constexpr (std::is_same_v<T, std::size_t>) {
    if (!it->is_number_integer() || (!it->is_number_unsigned() && it->get<std::int64_t>() < 0)) {
      throw DataError(where + ": field '" + field + "' must be a non-negative integer");
    }
  }
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw DataError(where + ": field '" + field + "' has the wrong type");
  }
}

const json& require_array(const json& record, const char* field, const std::string& where) {
  const auto it = record.find(field);
  if (it == record.end()) throw DataError(where + ": missing field '" + field + "'");
  if (!it->is_array()) throw DataError(where + ": field '" + field + "' must be an array");
  return *it;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace

GroundedDocument::GroundedDocument(std::string doc_id, std::string domain, std::string text,
                                   std::vector<Section> sections, std::vector<Phrase> phrases)
    : doc_id_(std::move(doc_id)),
      domain_(std::move(domain)),
      text_(std::move(text)),
      codepoints_(text::decode_utf8(text_)),
      sections_(std::move(sections)),
      phrases_(std::move(phrases)) {
  validate();
  for (std::size_t i = 0; i < phrases_.size(); ++i) phrase_index_.emplace(phrases_[i].phrase_id, i);
}

void GroundedDocument::validate() const {
  const std::string where = "document '" + doc_id_ + "'";
  std::unordered_set<std::string> section_ids;
  for (const auto& s : sections_) {
    if (s.span.start > s.span.end || s.span.end > length()) {
      throw DataError(where + ": section '" + s.section_id + "' range out of bounds");
    }
    if (!section_ids.insert(s.section_id).second) {
      throw DataError(where + ": duplicate section id '" + s.section_id + "'");
    }
  }
  std::unordered_set<std::string> phrase_ids;
  for (const auto& p : phrases_) {
    if (p.span.start >= p.span.end || p.span.end > length()) {
      throw DataError(where + ": phrase '" + p.phrase_id + "' range [" + std::to_string(p.span.start) +
                      ", " + std::to_string(p.span.end) + ") invalid for text of length " +
                      std::to_string(length()));
    }
    if (!section_ids.contains(p.section_id)) {
      throw DataError(where + ": phrase '" + p.phrase_id + "' references unknown section '" +
                      p.section_id + "'");
    }
    if (!phrase_ids.insert(p.phrase_id).second) {
      throw DataError(where + ": duplicate phrase id '" + p.phrase_id + "'");
    }
  }
}

std::string GroundedDocument::slice(CharRange range) const {
  if (range.start > range.end || range.end > length()) {
    throw DataError("document '" + doc_id_ + "': slice out of bounds");
  }
  return text::encode_utf8(std::u32string_view(codepoints_).substr(range.start, range.length()));
}

const Phrase* GroundedDocument::find_phrase(const std::string& phrase_id) const {
  const auto it = phrase_index_.find(phrase_id);
  return it == phrase_index_.end() ? nullptr : &phrases_[it->second];
}

const Section* GroundedDocument::find_section(const std::string& section_id) const {
  for (const auto& s : sections_) {
    if (s.section_id == section_id) return &s;
  }
  return nullptr;
}

std::string GroundedDocument::title() const { return sections_.empty() ? std::string() : sections_.front().title; }

std::vector<std::string> GroundedDocument::phrases_within(CharRange range) const {
  std::vector<const Phrase*> inside;
  for (const auto& p : phrases_) {
    if (range.contains(p.span)) inside.push_back(&p);
  }
  std::stable_sort(inside.begin(), inside.end(),
                   [](const Phrase* a, const Phrase* b) { return a->span < b->span; });
  std::vector<std::string> ids;
  ids.reserve(inside.size());
  for (const auto* p : inside) ids.push_back(p->phrase_id);
  return ids;
}

std::string to_string(Role role) { return role == Role::User ? "user" : "agent"; }

Role parse_role(const std::string& s) {
  if (s == "user") return Role::User;
  if (s == "agent") return Role::Agent;
  throw DataError("unknown role '" + s + "'");
}

Corpus::Corpus(std::vector<GroundedDocument> documents, std::vector<RawDialog> dialogs)
    : documents_(std::move(documents)), dialogs_(std::move(dialogs)) {
  for (std::size_t i = 0; i < documents_.size(); ++i) {
    if (!doc_index_.emplace(documents_[i].doc_id(), i).second) {
      throw DataError("duplicate doc_id '" + documents_[i].doc_id() + "'");
    }
  }
  for (const auto& d : dialogs_) {
    const auto it = doc_index_.find(d.doc_id);
    if (it == doc_index_.end()) {
      throw DataError("dialog '" + d.dialog_id + "' references unknown doc_id '" + d.doc_id + "'");
    }
    const auto& doc = documents_[it->second];
    for (std::size_t t = 0; t < d.turns.size(); ++t) {
      for (const auto& pid : d.turns[t].grounding_phrase_ids) {
        if (doc.find_phrase(pid) == nullptr) {
          throw DataError("dialog '" + d.dialog_id + "' turn " + std::to_string(t) +
                          ": unknown grounding phrase '" + pid + "'");
        }
      }
    }
  }
}

const GroundedDocument& Corpus::document(const std::string& doc_id) const {
  const auto it = doc_index_.find(doc_id);
  if (it == doc_index_.end()) throw DataError("unknown doc_id '" + doc_id + "'");
  return documents_[it->second];
}

bool Corpus::has_document(const std::string& doc_id) const { return doc_index_.contains(doc_id); }

std::vector<GroundedDocument> parse_documents(const json& j) {
  if (!j.is_array()) throw DataError("documents: top level must be an array");
  std::vector<GroundedDocument> docs;
  docs.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    const json& rec = j[i];
    std::string where = "documents[" + std::to_string(i) + "]";
    auto doc_id = require<std::string>(rec, "doc_id", where);
    where += " (" + doc_id + ")";
    auto domain = require<std::string>(rec, "domain", where);
    auto text = require<std::string>(rec, "text", where);
    std::vector<Section> sections;
    const json& jsections = require_array(rec, "sections", where);
    for (std::size_t k = 0; k < jsections.size(); ++k) {
      const std::string w = where + ".sections[" + std::to_string(k) + "]";
      sections.push_back({require<std::string>(jsections[k], "section_id", w),
                          require<std::string>(jsections[k], "title", w),
                          {require<std::size_t>(jsections[k], "start", w),
                           require<std::size_t>(jsections[k], "end", w)}});
    }
    std::vector<Phrase> phrases;
    std::vector<std::pair<std::size_t, std::string>> stored_text;
    const json& jphrases = require_array(rec, "phrases", where);
    for (std::size_t k = 0; k < jphrases.size(); ++k) {
      const std::string w = where + ".phrases[" + std::to_string(k) + "]";
      phrases.push_back({require<std::string>(jphrases[k], "phrase_id", w),
                         require<std::string>(jphrases[k], "section_id", w),
                         {require<std::size_t>(jphrases[k], "start", w),
                          require<std::size_t>(jphrases[k], "end", w)}});
      if (jphrases[k].contains("text")) stored_text.emplace_back(k, require<std::string>(jphrases[k], "text", w));
    }
    GroundedDocument doc(std::move(doc_id), std::move(domain), std::move(text), std::move(sections),
                         std::move(phrases));
    for (const auto& [k, stored] : stored_text) {
      const auto& p = doc.phrases()[k];
      if (doc.slice(p.span) != stored) {
        throw DataError(where + ": phrase '" + p.phrase_id + "' text does not match its offsets");
      }
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

std::vector<RawDialog> parse_dialogs(const json& j) {
  if (!j.is_array()) throw DataError("dialogs: top level must be an array");
  std::vector<RawDialog> dialogs;
  dialogs.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    const json& rec = j[i];
    std::string where = "dialogs[" + std::to_string(i) + "]";
    RawDialog d;
    d.dialog_id = require<std::string>(rec, "dialog_id", where);
    where += " (" + d.dialog_id + ")";
    d.doc_id = require<std::string>(rec, "doc_id", where);
    const json& jturns = require_array(rec, "turns", where);
    for (std::size_t k = 0; k < jturns.size(); ++k) {
      const std::string w = where + ".turns[" + std::to_string(k) + "]";
      Turn t;
      try {
        t.role = parse_role(require<std::string>(jturns[k], "role", w));
      } catch (const DataError& e) {
        throw DataError(w + ": " + e.what());
      }
      t.utterance = require<std::string>(jturns[k], "utterance", w);
      if (jturns[k].contains("grounding_phrase_ids")) {
        t.grounding_phrase_ids = require<std::vector<std::string>>(jturns[k], "grounding_phrase_ids", w);
      }
      d.turns.push_back(std::move(t));
    }
    dialogs.push_back(std::move(d));
  }
  return dialogs;
}

json documents_to_json(const std::vector<GroundedDocument>& docs) {
  json out = json::array();
  for (const auto& d : docs) {
    json sections = json::array();
    for (const auto& s : d.sections()) {
      sections.push_back({{"section_id", s.section_id}, {"title", s.title}, {"start", s.span.start}, {"end", s.span.end}});
    }
    json phrases = json::array();
    for (const auto& p : d.phrases()) {
      phrases.push_back({{"phrase_id", p.phrase_id},
                         {"section_id", p.section_id},
                         {"start", p.span.start},
                         {"end", p.span.end},
                         {"text", d.slice(p.span)}});
    }
    out.push_back({{"doc_id", d.doc_id()},
                   {"domain", d.domain()},
                   {"text", d.text()},
                   {"sections", std::move(sections)},
                   {"phrases", std::move(phrases)}});
  }
  return out;
}

json dialogs_to_json(const std::vector<RawDialog>& dialogs) {
  json out = json::array();
  for (const auto& d : dialogs) {
    json turns = json::array();
    for (const auto& t : d.turns) {
      turns.push_back({{"role", to_string(t.role)},
                       {"utterance", t.utterance},
                       {"grounding_phrase_ids", t.grounding_phrase_ids}});
    }
    out.push_back({{"dialog_id", d.dialog_id}, {"doc_id", d.doc_id}, {"turns", std::move(turns)}});
  }
  return out;
}

Corpus load_corpus(const std::filesystem::path& doc_file, const std::filesystem::path& dialog_file) {
  auto docs = parse_documents(read_json(doc_file));
  auto dialogs = parse_dialogs(read_json(dialog_file));
  return Corpus(std::move(docs), std::move(dialogs));
}

CharRange minimal_cover(const GroundedDocument& doc, const std::vector<std::string>& phrase_ids) {
  if (phrase_ids.empty()) throw DataError("minimal_cover of an empty phrase list");
  CharRange cover{std::numeric_limits<std::size_t>::max(), 0};
  for (const auto& id : phrase_ids) {
    const Phrase* p = doc.find_phrase(id);
    if (p == nullptr) throw DataError("document '" + doc.doc_id() + "': unknown phrase '" + id + "'");
    cover.start = std::min(cover.start, p->span.start);
    cover.end = std::max(cover.end, p->span.end);
  }
  return cover;
}

namespace {

bool is_contiguous(const GroundedDocument& doc, const std::vector<std::string>& ids, CharRange cover) {
  const std::unordered_set<std::string> referenced(ids.begin(), ids.end());
  for (const auto& p : doc.phrases()) {
    if (!cover.contains(p.span) || referenced.contains(p.phrase_id)) continue;
    // A phrase nested in a referenced one is not a gap.
    const bool nested = std::any_of(ids.begin(), ids.end(), [&](const std::string& id) {
      return doc.find_phrase(id)->span.contains(p.span);
    });
    if (!nested) return false;
  }
  return true;
}

}  // namespace

ExtractResult extract_samples(const Corpus& corpus, const ExtractOptions& options) {
  ExtractResult result;
  for (const auto& dialog : corpus.dialogs()) {
    const auto& doc = corpus.document(dialog.doc_id);
    for (std::size_t t = 0; t < dialog.turns.size(); ++t) {
      const auto& turn = dialog.turns[t];
      if (turn.role != Role::Agent) continue;
      if (turn.grounding_phrase_ids.empty()) {
        ++result.skipped.empty_grounding;
        continue;
      }
      const bool followup = t > 0 && dialog.turns[t - 1].role == Role::Agent;
      if (followup && !options.include_followups) {
        ++result.skipped.followups_excluded;
        continue;
      }
      const CharRange cover = minimal_cover(doc, turn.grounding_phrase_ids);
      if (options.strict_contiguous && !is_contiguous(doc, turn.grounding_phrase_ids, cover)) {
        ++result.skipped.non_contiguous;
        continue;
      }
      DialogSample s;
      s.sample_id = dialog.dialog_id + "_" + std::to_string(t);
      s.dialog_id = dialog.dialog_id;
      s.doc_id = dialog.doc_id;
      s.turn_index = t;
      s.context.assign(dialog.turns.begin(), dialog.turns.begin() + static_cast<std::ptrdiff_t>(t));
      s.target_utterance = turn.utterance;
      s.reference_span = cover;
      s.reference_phrase_ids = turn.grounding_phrase_ids;
      s.is_followup = followup;
      result.samples.push_back(std::move(s));
    }
  }
  return result;
}

}  // namespace docground
