#include "docground/fixtures.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <string>

#include "docground/errors.hpp"
#include "docground/numeric.hpp"
#include "docground/text.hpp"

namespace docground::fixtures {

namespace {

struct Domain {
  std::string name;
  std::string label;
  std::vector<std::string> words;
};

const std::vector<Domain>& domains() {
  static const std::vector<Domain> kDomains = {
      {"ssa", "Social Security",
       {"retirement", "benefits", "disability", "spouse", "survivor", "earnings", "medicare", "card",
        "replacement", "deposit", "widow", "pension", "credits", "quarters", "hearing", "appeal",
        "overpayment", "payee", "citizenship", "noncitizen", "garnishment", "taxes", "divorce", "child",
        "annual", "limit", "sickness", "premium", "enrollment", "work"}},
      {"dmv", "Motor Vehicles",
       {"license", "permit", "registration", "plates", "title", "inspection", "insurance", "odometer",
        "learner", "road", "vision", "motorcycle", "commercial", "endorsement", "suspension", "points",
        "ticket", "renewal", "address", "photo", "emissions", "dealer", "lien", "trailer", "boat",
        "parking", "placard", "veteran", "organ", "donor"}},
      {"va", "Veterans Affairs",
       {"pension", "compensation", "rating", "discharge", "caregiver", "burial", "headstone", "housing",
        "loan", "guaranty", "tuition", "vocational", "rehabilitation", "prosthetics", "hospital", "clinic",
        "dependents", "survivors", "claim", "evidence", "exam", "service", "connection", "records",
        "reserve", "guard", "copay", "travel", "mileage", "pharmacy"}},
      {"studentaid", "Student Aid",
       {"grant", "loan", "fafsa", "subsidized", "unsubsidized", "interest", "forgiveness", "consolidation",
        "deferment", "forbearance", "repayment", "income", "servicer", "default", "transcript", "verification",
        "dependency", "parent", "award", "eligibility", "cost", "attendance", "scholarship", "campus",
        "semester", "withdrawal", "refund", "signature", "identifier", "counseling"}},
  };
  return kDomains;
}

const std::vector<std::string> kFillers = {
    "must be reported soon after changes to",      "is reviewed by a local office together with",
    "can be requested online along with",          "depends on current rules covering",
    "requires signed paperwork describing",        "may be delayed when officials examine",
    "gets processed faster once staff verify",     "stays valid unless someone cancels",
};

const std::vector<std::string> kOpeners = {"sure ,", "okay ,", "yes ,", "according to the guide ,"};

std::string question(GaussianSource& rng, const std::string& a, const std::string& b) {
  switch (rng.below(4)) {
    case 0: return "what should i know about " + a + " and " + b + " ?";
    case 1: return "how does " + a + " relate to " + b + " ?";
    case 2: return "tell me about " + a + " " + b + " please";
    default: return "question about " + a + " with " + b + " ?";
  }
}

template <class T>
const T& pick(GaussianSource& rng, const std::vector<T>& v) {
  return v[rng.below(v.size())];
}

struct PhraseWords {
  std::string first;
  std::string last;
  std::string text;
};

class DocumentBuilder {
 public:
  explicit DocumentBuilder(std::string doc_id) : doc_id_(std::move(doc_id)) {}

  void begin_section(const std::string& title) {
    section_start_ = length_;
    section_title_ = title;
    append(title + "\n");
  }

  void add_sentence(const std::string& phrase) {
    const std::size_t start = length_;
    append(phrase);
    const std::string id = doc_id_ + "_p" + std::to_string(phrases_.size() + 1);
    phrases_.push_back(Phrase{id, section_id(), CharRange{start, length_}});
    append(". ");
  }

  void end_section() {
    text_.back() = '\n';
    sections_.push_back(Section{section_id(), section_title_, CharRange{section_start_, length_}});
  }

  GroundedDocument build(const std::string& domain) {
    return GroundedDocument(doc_id_, domain, text_, sections_, phrases_);
  }

  [[nodiscard]] const std::vector<Phrase>& phrases() const { return phrases_; }

 private:
  std::string section_id() const { return doc_id_ + "_s" + std::to_string(sections_.size() + 1); }
  void append(const std::string& s) {
    text_ += s;
    length_ += text::decode_utf8(s).size();
  }

  std::string doc_id_;
  std::string text_;
  std::size_t length_ = 0;
  std::size_t section_start_ = 0;
  std::string section_title_;
  std::vector<Section> sections_;
  std::vector<Phrase> phrases_;
};

struct BuiltDoc {
  GroundedDocument doc;
  std::vector<PhraseWords> words;
};

// Draws distinct content words so no two phrases of a document share a boundary word.
BuiltDoc make_document(GaussianSource& rng, const Domain& domain, const std::string& doc_id, std::size_t sections,
                       std::size_t per_section, bool interior_only) {
  std::vector<std::string> bank = domain.words;
  for (std::size_t i = bank.size(); i > 1; --i) std::swap(bank[i - 1], bank[rng.below(i)]);
  std::size_t next = 0;
  auto draw = [&]() -> const std::string& {
    if (next >= bank.size()) throw ConfigError("fixture word bank exhausted for domain " + domain.name);
    return bank[next++];
  };

  DocumentBuilder builder(doc_id);
  std::vector<PhraseWords> words;
  for (std::size_t s = 0; s < sections; ++s) {
    builder.begin_section(domain.label + " guide part " + std::to_string(s + 1));
    for (std::size_t p = 0; p < per_section; ++p) {
      PhraseWords w;
      w.first = draw();
      w.last = draw();
      const std::string& filler = pick(rng, kFillers);
      if (interior_only) {
        w.text = "generally " + w.first + " " + filler + " " + w.last + " afterwards";
      } else {
        w.text = w.first + " " + filler + " " + w.last;
      }
      builder.add_sentence(w.text);
      words.push_back(std::move(w));
    }
    builder.end_section();
  }
  return BuiltDoc{builder.build(domain.name), std::move(words)};
}

RawDialog make_dialog(GaussianSource& rng, const BuiltDoc& built, const std::string& dialog_id,
                      const SyntheticOptions& options, bool allow_multi) {
  RawDialog d{dialog_id, built.doc.doc_id(), {}};
  const auto& phrases = built.doc.phrases();
  const std::size_t exchanges = 1 + rng.below(3);
  for (std::size_t x = 0; x < exchanges; ++x) {
    const std::size_t p = rng.below(phrases.size());
    const auto& w = built.words[p];
    d.turns.push_back(Turn{Role::User, question(rng, w.first, w.last), {}});

    std::vector<std::string> grounding{phrases[p].phrase_id};
    std::string answer = pick(rng, kOpeners) + " " + w.text;
    if (allow_multi && p + 1 < phrases.size() && rng.uniform() < options.multi_phrase_rate) {
      grounding.push_back(phrases[p + 1].phrase_id);
      answer += " and " + built.words[p + 1].text;
    }
    d.turns.push_back(Turn{Role::Agent, answer + " .", grounding});

    const std::size_t q = (p + 1) % phrases.size();
    if (rng.uniform() < options.followup_rate) {
      d.turns.push_back(Turn{Role::Agent, "also , " + built.words[q].text + " .", {phrases[q].phrase_id}});
    }
  }
  if (rng.uniform() < 0.3) d.turns.push_back(Turn{Role::User, "thanks , that helps", {}});
  return d;
}

}  // namespace

nlohmann::json FixtureCorpus::manifest() const {
  std::map<std::string, std::vector<std::string>> by_domain;
  std::size_t phrase_count = 0;
  for (const auto& d : documents) {
    by_domain[d.domain()].push_back(d.doc_id());
    phrase_count += d.phrases().size();
  }
  return {{"domains", by_domain},
          {"documents", documents.size()},
          {"phrases", phrase_count},
          {"train_dialogs", train_dialogs.size()},
          {"eval_dialogs", eval_dialogs.size()}};
}

FixtureCorpus synthetic_corpus(const SyntheticOptions& options) {
  GaussianSource rng(options.seed);
  FixtureCorpus out;
  for (const auto& domain : domains()) {
    for (std::size_t k = 0; k < options.docs_per_domain; ++k) {
      const std::string doc_id = domain.name + "_doc" + std::to_string(k + 1);
      const BuiltDoc built =
          make_document(rng, domain, doc_id, options.sections_per_doc, options.phrases_per_section, false);
      for (std::size_t i = 0; i < options.train_dialogs_per_doc; ++i) {
        out.train_dialogs.push_back(
            make_dialog(rng, built, doc_id + "_train" + std::to_string(i + 1), options, true));
      }
      for (std::size_t i = 0; i < options.eval_dialogs_per_doc; ++i) {
        out.eval_dialogs.push_back(
            make_dialog(rng, built, doc_id + "_eval" + std::to_string(i + 1), options, false));
      }
      out.documents.push_back(built.doc);
    }
  }
  return out;
}

FixtureCorpus two_phrase_corpus(std::size_t documents, std::uint64_t seed) {
  GaussianSource rng(seed);
  FixtureCorpus out;
  SyntheticOptions options;
  options.followup_rate = 0.0;
  for (std::size_t k = 0; k < documents; ++k) {
    const auto& domain = domains()[k % domains().size()];
    const std::string doc_id = "toy_doc" + std::to_string(k + 1);
    const BuiltDoc built = make_document(rng, domain, doc_id, 1, 2, false);
    for (std::size_t p = 0; p < 2; ++p) {
      const auto& w = built.words[p];
      RawDialog d{doc_id + "_q" + std::to_string(p + 1), doc_id, {}};
      d.turns.push_back(Turn{Role::User, question(rng, w.first, w.last), {}});
      d.turns.push_back(Turn{Role::Agent, "sure , " + w.text + " .", {built.doc.phrases()[p].phrase_id}});
      out.train_dialogs.push_back(d);
    }
    out.documents.push_back(built.doc);
  }
  out.eval_dialogs = out.train_dialogs;
  return out;
}

FixtureCorpus adversarial_corpus(std::uint64_t seed) {
  GaussianSource rng(seed);
  FixtureCorpus out;
  auto add = [&](const BuiltDoc& built, std::vector<RawDialog>& dialogs) {
    for (std::size_t p = 0; p < built.words.size(); ++p) {
      const auto& w = built.words[p];
      RawDialog d{built.doc.doc_id() + "_q" + std::to_string(p + 1), built.doc.doc_id(), {}};
      d.turns.push_back(Turn{Role::User, question(rng, w.first, w.last), {}});
      d.turns.push_back(Turn{Role::Agent, "sure , " + w.text + " .", {built.doc.phrases()[p].phrase_id}});
      dialogs.push_back(d);
    }
    out.documents.push_back(built.doc);
  };
  for (const auto& domain : domains()) {
    add(make_document(rng, domain, "adv_train_" + domain.name, 2, 3, false), out.train_dialogs);
    add(make_document(rng, domain, "adv_" + domain.name, 1, 3, true), out.eval_dialogs);
  }
  return out;
}

void write_fixture(const FixtureCorpus& fixture, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&](const std::string& name, const nlohmann::json& j) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw DataError("cannot write " + (dir / name).string());
    out << j.dump(2) << '\n';
  };
  write("documents.json", documents_to_json(fixture.documents));
  write("dialogs_train.json", dialogs_to_json(fixture.train_dialogs));
  write("dialogs_eval.json", dialogs_to_json(fixture.eval_dialogs));
  write("fixture_manifest.json", fixture.manifest());
}

}  // namespace docground::fixtures
