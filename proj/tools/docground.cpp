// docground: pipeline driver.
//
//   docground [--config FILE] [--<section>.<key> VALUE ...] <command> [command options]
//
// Exit status: 0 ok, 1 usage or configuration error, 2 data error, 3 numeric failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "docground/errors.hpp"
#include "docground/pipeline.hpp"

namespace {

using docground::pipeline::CommandPaths;
using docground::pipeline::PipelineConfig;

void add_path(CLI::App* cmd, const std::string& name, std::optional<std::filesystem::path>& slot,
              const std::string& help) {
  cmd->add_option_function<std::string>(
      name, [&slot](const std::string& v) { slot = std::filesystem::path(v); }, help);
}

std::vector<docground::pipeline::EnsembleMemberConfig> parse_members(const std::vector<std::string>& specs) {
  std::vector<docground::pipeline::EnsembleMemberConfig> out;
  for (const auto& s : specs) {
    const auto a = s.find(':');
    const auto b = a == std::string::npos ? std::string::npos : s.find(':', a + 1);
    if (b == std::string::npos) throw docground::ConfigError("--member expects ID:F1:NBEST, got '" + s + "'");
    docground::pipeline::EnsembleMemberConfig m;
    m.model_id = s.substr(0, a);
    try {
      std::size_t used = 0;
      const std::string f1 = s.substr(a + 1, b - a - 1);
      m.f1 = std::stod(f1, &used);
      if (used != f1.size()) throw std::invalid_argument(f1);
    } catch (const std::exception&) {
      throw docground::ConfigError("--member: bad F1 in '" + s + "'");
    }
    m.nbest = s.substr(b + 1);
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Span grounding and response decoding for document-grounded dialog"};
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<std::filesystem::path> config_file;
  std::string log_level = "info";
  add_path(&app, "--config", config_file, "JSON config with per-stage sections");
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")->capture_default_str();

  const nlohmann::json defaults = PipelineConfig{}.to_json();
  std::map<std::string, std::string> overrides;
  for (const auto& key : docground::pipeline::config_keys(defaults)) {
    app.add_option_function<std::string>(
           "--" + key, [&overrides, key](const std::string& v) { overrides[key] = v; }, "config override")
        ->group("Config overrides");
  }

  CommandPaths paths;

  auto* fixtures = app.add_subcommand("fixtures", "write a synthetic corpus");
  std::string fixture_dir = "data";
  std::string fixture_kind = "synthetic";
  std::uint64_t fixture_seed = 13;
  fixtures->add_option("--out", fixture_dir, "output directory")->capture_default_str();
  fixtures->add_option("--kind", fixture_kind, "synthetic, two_phrase or adversarial")->capture_default_str();
  fixtures->add_option("--seed", fixture_seed, "generator seed")->capture_default_str();

  auto* prepare = app.add_subcommand("prepare", "window a split and write its feature file");
  std::string split = "train";
  prepare->add_option("--split", split, "train or eval")->capture_default_str();
  add_path(prepare, "--out", paths.out, "feature file (default <work>/features_<split>.sgf)");

  auto* train = app.add_subcommand("train", "train a span head or the n-gram generator");
  std::string train_kind;
  train->add_option("--kind", train_kind, "independent, biaffine or ngram (default head.kind)");
  add_path(train, "--features", paths.features, "training feature file");
  add_path(train, "--out", paths.out, "checkpoint or generator output");

  auto* decode = app.add_subcommand("decode", "n-best span lists for the eval split");
  add_path(decode, "--checkpoint", paths.checkpoint, "span head checkpoint");
  add_path(decode, "--features", paths.features, "eval feature file");
  add_path(decode, "--out", paths.out, "n-best output");

  auto* ensemble = app.add_subcommand("ensemble", "Bayesian model averaging of n-best lists");
  std::vector<std::string> member_specs;
  ensemble->add_option("--member", member_specs, "ID:F1:NBEST, repeatable; replaces ensemble.members");
  add_path(ensemble, "--out", paths.out, "ensemble n-best output");

  auto* generate = app.add_subcommand("generate", "beam-search responses for the eval split");
  add_path(generate, "--model", paths.model, "generator JSON");
  add_path(generate, "--nbest", paths.nbest, "n-best spans (predicted_span mode or marginalization)");
  add_path(generate, "--out", paths.out, "generations output");

  auto* eval = app.add_subcommand("eval", "EM, F1, EM@5 and BLEU report");
  add_path(eval, "--nbest", paths.nbest, "n-best spans");
  add_path(eval, "--generations", paths.generations, "generated responses (adds BLEU)");
  add_path(eval, "--out", paths.out, "report output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    spdlog::set_default_logger(spdlog::stderr_color_mt("docground"));
    spdlog::set_level(spdlog::level::from_str(log_level));
    std::vector<std::pair<std::string, std::string>> ov(overrides.begin(), overrides.end());
    PipelineConfig config = docground::pipeline::load_config(config_file, ov);
    if (!member_specs.empty()) {
      config.ensemble.members = parse_members(member_specs);
      config.validate();
    }

    if (fixtures->parsed()) {
      docground::pipeline::cmd_fixtures(fixture_dir, fixture_kind, fixture_seed);
    } else if (prepare->parsed()) {
      docground::pipeline::cmd_prepare(config, split, paths);
    } else if (train->parsed()) {
      docground::pipeline::cmd_train(config, train_kind.empty() ? docground::to_string(config.head.kind) : train_kind,
                                     paths);
    } else if (decode->parsed()) {
      docground::pipeline::cmd_decode(config, paths);
    } else if (ensemble->parsed()) {
      docground::pipeline::cmd_ensemble(config, paths);
    } else if (generate->parsed()) {
      docground::pipeline::cmd_generate(config, paths);
    } else if (eval->parsed()) {
      docground::pipeline::cmd_eval(config, paths);
      std::ifstream in(paths.out.value_or(docground::pipeline::layout(config).report()));
      std::cout << nlohmann::json::parse(in).dump(2) << '\n';
    }
  } catch (const docground::ConfigError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const docground::NumericError& e) {
    spdlog::error("{}", e.what());
    return 3;
  } catch (const docground::DataError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const nlohmann::json::exception& e) {
    spdlog::error("malformed JSON input: {}", e.what());
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}
