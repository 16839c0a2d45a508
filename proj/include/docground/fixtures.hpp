#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "docground/corpus.hpp"

namespace docground::fixtures {

struct FixtureCorpus {
  std::vector<GroundedDocument> documents;
  std::vector<RawDialog> train_dialogs;
  std::vector<RawDialog> eval_dialogs;

  /// Domain → document ids, plus dialog and phrase counts.
  [[nodiscard]] nlohmann::json manifest() const;
  [[nodiscard]] Corpus train_corpus() const { return Corpus(documents, train_dialogs); }
  [[nodiscard]] Corpus eval_corpus() const { return Corpus(documents, eval_dialogs); }
};

struct SyntheticOptions {
  std::uint64_t seed = 13;
  std::size_t docs_per_domain = 3;
  std::size_t sections_per_doc = 2;
  std::size_t phrases_per_section = 3;
  std::size_t train_dialogs_per_doc = 6;
  std::size_t eval_dialogs_per_doc = 2;
  /// Chance that an agent answer is followed by an agent follow-up turn.
  double followup_rate = 0.4;
  /// Chance that a training answer cites two adjacent phrases.
  double multi_phrase_rate = 0.1;
};

/// Four domains (ssa, dmv, va, studentaid). Users name the first and last word of the
/// phrase they ask about, so the lexical features separate the target phrase.
FixtureCorpus synthetic_corpus(const SyntheticOptions& options = {});

/// One-section documents with exactly two phrases; train and eval dialogs coincide.
FixtureCorpus two_phrase_corpus(std::size_t documents = 4, std::uint64_t seed = 5);

/// Training questions name the first and last word of their phrase; eval questions
/// name interior words only, so the phrase edges carry no lexical overlap.
FixtureCorpus adversarial_corpus(std::uint64_t seed = 21);

/// Writes documents.json, dialogs_train.json, dialogs_eval.json and fixture_manifest.json.
void write_fixture(const FixtureCorpus& fixture, const std::filesystem::path& dir);

}  // namespace docground::fixtures
