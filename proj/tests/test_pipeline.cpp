#include <doctest.h>

#include <sys/wait.h>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <stdexcept>

#include "docground/errors.hpp"
#include "docground/fixtures.hpp"
#include "docground/pipeline.hpp"

using namespace docground;
using namespace docground::pipeline;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    std::random_device rd;
    path = fs::temp_directory_path() / ("docground_test_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json_file(const fs::path& p) { return json::parse(slurp(p)); }

PipelineConfig smoke_config(const fs::path& data, const fs::path& work, std::size_t workers) {
  PipelineConfig c = load_config(std::nullopt, {{"windowing.max_len", "128"}, {"windowing.stride", "48"}});
  c.paths.documents = (data / "documents.json").string();
  c.paths.train_dialogs = (data / "dialogs_train.json").string();
  c.paths.eval_dialogs = (data / "dialogs_eval.json").string();
  c.paths.work_dir = work.string();
  c.workers = workers;
  return c;
}

metrics::EvaluationReport run_all(PipelineConfig c) {
  const auto l = layout(c);
  cmd_prepare(c, "train", {});
  cmd_prepare(c, "eval", {});
  cmd_train(c, "independent", {});
  cmd_train(c, "biaffine", {});
  cmd_train(c, "ngram", {});
  cmd_decode(c, {});
  c.head.kind = HeadKind::Biaffine;
  cmd_decode(c, {});
  c.ensemble.members = {{"independent", 0.5, l.nbest("independent").string()},
                        {"biaffine", 0.4, l.nbest("biaffine").string()}};
  cmd_ensemble(c, {});
  cmd_generate(c, {});
  return cmd_eval(c, {});
}

int run_cli(const fs::path& cwd, const std::string& args) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" DOCGROUND_CLI "' " + args + " >/dev/null 2>cli_stderr.txt";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config json round trip and checked merge") {
  PipelineConfig c;
  c.head.kind = HeadKind::Biaffine;
  c.head.train.lr = 0.25;
  c.windowing.max_len = 96;
  c.windowing.stride = 40;
  c.ensemble.members = {{"a", 0.5, "x.json"}};
  const auto back = PipelineConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());

  const auto partial = PipelineConfig::from_json(json{{"head", {{"epochs", 3}}}});
  CHECK(partial.head.train.epochs == 3);
  CHECK(partial.windowing.max_len == PipelineConfig{}.windowing.max_len);

  CHECK_THROWS_AS(PipelineConfig::from_json(json{{"head", {{"learning_rate", 0.1}}}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_json(json{{"nonsense", 1}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_json(json{{"head", {{"epochs", "ten"}}}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_json(json{{"head", {{"epochs", -1}}}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_json(json{{"head", 3}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_json(json{{"head", {{"kind", "triaffine"}}}}), ConfigError);
}

TEST_CASE("config validation rejects out-of-range values") {
  CHECK_NOTHROW(PipelineConfig{}.validate());
  auto bad = [](auto mutate) {
    PipelineConfig c;
    mutate(c);
    return c;
  };
  CHECK_THROWS_AS(bad([](PipelineConfig& c) { c.windowing.stride = 0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](PipelineConfig& c) { c.windowing.stride = c.windowing.max_len + 1; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](PipelineConfig& c) { c.windowing.max_len = 4; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](PipelineConfig& c) { c.head.train.lr = 0.0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](PipelineConfig& c) { c.head.train.momentum = 1.0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](PipelineConfig& c) { c.generation.beam.rep_penalty = 0.9; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](PipelineConfig& c) { c.encoder.feature_dim = 1; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](PipelineConfig& c) { c.ensemble.members = {{"m", 0.0, ""}}; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](PipelineConfig& c) { c.workers = 0; }).validate(), ConfigError);
}

TEST_CASE("dotted overrides parse by the existing type") {
  const json base = PipelineConfig{}.to_json();
  const json j = apply_overrides(base, {{"head.lr", "0.5"},
                                        {"head.kind", "biaffine"},
                                        {"head.restricted", "false"},
                                        {"windowing.max_len", "64"},
                                        {"generation.weights.uniform", "1"}});
  CHECK(j["head"]["lr"].get<double>() == 0.5);
  CHECK(j["head"]["kind"] == "biaffine");
  CHECK(j["head"]["restricted"] == false);
  CHECK(j["windowing"]["max_len"].get<std::size_t>() == 64);
  CHECK(j["generation"]["weights"]["uniform"].get<double>() == 1.0);

  CHECK_THROWS_AS(apply_overrides(base, {{"head.nope", "1"}}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(base, {{"head", "1"}}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(base, {{"ensemble.members", "[]"}}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(base, {{"head.lr", "fast"}}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(base, {{"head.epochs", "-3"}}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(base, {{"head.epochs", "2.5"}}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(base, {{"head.restricted", "maybe"}}), ConfigError);
  CHECK_THROWS_AS(load_config(std::nullopt, {{"decode.n_best", "0"}}), ConfigError);

  const auto keys = config_keys(base);
  for (const char* k : {"head.lr", "windowing.stride", "generation.weights.grounding", "eval.k", "workers",
                        "paths.work_dir", "ensemble.n"}) {
    CHECK(std::find(keys.begin(), keys.end(), k) != keys.end());
  }
  CHECK(std::find(keys.begin(), keys.end(), "ensemble.members") == keys.end());
  for (const auto& k : keys) {
    std::string pointer = "/" + k;
    std::replace(pointer.begin(), pointer.end(), '.', '/');
    const json& value = base.at(json::json_pointer(pointer));
    const std::string raw = value.is_string() ? value.get<std::string>() : value.dump();
    INFO(k);
    CHECK(apply_overrides(base, {{k, raw}}) == base);
  }
}

TEST_CASE("config file loading") {
  TempDir tmp;
  const fs::path f = tmp.path / "c.json";
  std::ofstream(f) << R"({"head": {"epochs": 4}, "decode": {"n_best": 7}})";
  const auto c = load_config(f, {{"decode.n_best", "9"}});
  CHECK(c.head.train.epochs == 4);
  CHECK(c.decode.n_best == 9);
  std::ofstream(tmp.path / "bad.json") << "{ not json";
  CHECK_THROWS_AS(load_config(tmp.path / "bad.json"), ConfigError);
  CHECK_THROWS_AS(load_config(tmp.path / "missing.json"), ConfigError);
}

TEST_CASE("sha256 known digests") {
  const std::string abc = "abc";
  CHECK(sha256_hex({reinterpret_cast<const std::uint8_t*>(abc.data()), abc.size()}) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex({}) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  TempDir tmp;
  std::ofstream(tmp.path / "abc.txt", std::ios::binary) << "abc";
  CHECK(sha256_file(tmp.path / "abc.txt") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK_THROWS_AS(sha256_file(tmp.path / "nope"), DataError);
}

TEST_CASE("manifests record command, config and content hashes") {
  TempDir tmp;
  const fs::path in = tmp.path / "in.txt";
  const fs::path art = tmp.path / "art.bin";
  std::ofstream(in, std::ios::binary) << "abc";
  std::ofstream(art, std::ios::binary) << "";
  const json cfg = PipelineConfig{}.to_json();
  write_manifest(art, "train", cfg, {in});
  CHECK(manifest_path(art) == tmp.path / "art.bin.manifest.json");
  const json m = read_json_file(manifest_path(art));
  CHECK(m["artifact"] == "art.bin");
  CHECK(m["command"] == "train");
  CHECK(m["version"] == std::string(kVersion));
  CHECK(m["config"] == cfg);
  CHECK(m["sha256"] == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  REQUIRE(m["inputs"].size() == 1);
  CHECK(m["inputs"][0]["sha256"] == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const std::string first = slurp(manifest_path(art));
  write_manifest(art, "train", cfg, {in});
  CHECK(slurp(manifest_path(art)) == first);
}

TEST_CASE("missing artifacts name the producing command") {
  try {
    require_artifact("/nonexistent/head_biaffine.ckpt", "train --kind biaffine");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("head_biaffine.ckpt") != std::string::npos);
    CHECK(msg.find("docground train --kind biaffine") != std::string::npos);
  }
  TempDir tmp;
  PipelineConfig c;
  c.paths.work_dir = tmp.path.string();
  auto message = [](auto fn) {
    try {
      fn();
    } catch (const DataError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message([&] { cmd_train(c, "independent", {}); }).find("prepare --split train") != std::string::npos);
  CHECK(message([&] { cmd_decode(c, {}); }).find("train --kind independent") != std::string::npos);
  CHECK(message([&] { cmd_generate(c, {}); }).find("train --kind ngram") != std::string::npos);
  CHECK(message([&] { cmd_eval(c, {}); }).find("decode (or ensemble)") != std::string::npos);
  CHECK_THROWS_AS(cmd_train(c, "trigram", {}), ConfigError);
  CHECK_THROWS_AS(cmd_prepare(c, "dev", {}), ConfigError);
  CHECK_THROWS_AS(cmd_ensemble(c, {}), ConfigError);
  CHECK_THROWS_AS(cmd_fixtures(tmp.path, "weird", 1), ConfigError);
}

TEST_CASE("parallel_for covers every index once and rethrows") {
  for (std::size_t workers : {1, 2, 4, 16}) {
    std::vector<std::atomic<int>> hits(100);
    parallel_for(hits.size(), workers, [&](std::size_t i) { hits[i]++; });
    for (const auto& h : hits) CHECK(h.load() == 1);
    CHECK_THROWS_AS(parallel_for(50, workers,
                                 [](std::size_t i) {
                                   if (i == 17) throw DataError("boom");
                                 }),
                    DataError);
  }
  parallel_for(0, 4, [](std::size_t) { throw std::runtime_error("never"); });
}

TEST_CASE("full pipeline is deterministic and thread-count independent") {
  TempDir tmp;
  const fs::path data = tmp.path / "data";
  cmd_fixtures(data, "synthetic", 13);

  const auto report1 = run_all(smoke_config(data, tmp.path / "w1", 1));
  CHECK(report1.em > 0.0);
  CHECK(report1.em_at_5 >= report1.em);
  CHECK(report1.bleu > 0.0);
  CHECK(report1.n_samples > 0);

  const json report_json = read_json_file(tmp.path / "w1" / "report.json");
  for (const char* key : {"f1", "em", "em_at_5", "bleu"}) CHECK(report_json.contains(key));
  CHECK(report_json["bleu"].is_number());

  for (const char* name : {"nbest_independent.json", "nbest_biaffine.json", "nbest_ensemble.json"}) {
    const auto lists = read_nbest(tmp.path / "w1" / name);
    CHECK(lists.size() == report1.n_samples);
    for (const auto& p : lists) {
      CHECK(!p.hypotheses.empty());
      CHECK(p.hypotheses.size() <= 20);
    }
  }

  std::map<std::string, std::string> first;
  for (const auto& e : fs::directory_iterator(tmp.path / "w1")) first[e.path().filename().string()] = slurp(e.path());
  CHECK(first.size() == 22);

  run_all(smoke_config(data, tmp.path / "w1", 1));
  for (const auto& [name, bytes] : first) {
    INFO(name);
    CHECK(slurp(tmp.path / "w1" / name) == bytes);
  }

  run_all(smoke_config(data, tmp.path / "w4", 4));
  for (const auto& [name, bytes] : first) {
    if (name.find(".manifest.json") != std::string::npos) continue;
    INFO(name);
    CHECK(slurp(tmp.path / "w4" / name) == bytes);
  }
  const json m1 = read_json_file(tmp.path / "w1" / "nbest_ensemble.json.manifest.json");
  const json m4 = read_json_file(tmp.path / "w4" / "nbest_ensemble.json.manifest.json");
  CHECK(m1["sha256"] == m4["sha256"]);
  CHECK(m1["config"]["workers"] == 1);
  CHECK(m4["config"]["workers"] == 4);
}

TEST_CASE("cli exit codes") {
  TempDir tmp;
  CHECK(run_cli(tmp.path, "--help") == 0);
  CHECK(run_cli(tmp.path, "train --help") == 0);
  CHECK(run_cli(tmp.path, "frobnicate") == 1);
  CHECK(run_cli(tmp.path, "--head.lr fast eval") == 1);
  CHECK(run_cli(tmp.path, "--no.such.key 1 eval") == 1);
  CHECK(run_cli(tmp.path, "--config missing.json eval") == 1);
  CHECK(run_cli(tmp.path, "ensemble --member broken") == 1);

  CHECK(run_cli(tmp.path, "eval") == 2);
  CHECK(slurp(tmp.path / "cli_stderr.txt").find("docground decode (or ensemble)") != std::string::npos);

  const std::string o = "--windowing.max_len 128 --windowing.stride 48 ";
  REQUIRE(run_cli(tmp.path, "fixtures --out data --kind synthetic --seed 13") == 0);
  CHECK(run_cli(tmp.path, o + "train --kind independent") == 2);
  CHECK(slurp(tmp.path / "cli_stderr.txt").find("docground prepare --split train") != std::string::npos);
  REQUIRE(run_cli(tmp.path, o + "prepare --split train") == 0);
  CHECK(run_cli(tmp.path, o + "--head.init_stddev 1e308 train --kind independent") == 3);
  CHECK(slurp(tmp.path / "cli_stderr.txt").find("non-finite") != std::string::npos);
  CHECK(run_cli(tmp.path, o + "--head.epochs 2 train --kind independent") == 0);
  CHECK(fs::exists(tmp.path / "work" / "head_independent.ckpt.manifest.json"));
}
