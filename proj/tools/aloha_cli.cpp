#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>

#include "aloha/common.hpp"
#include "aloha/pipeline.hpp"
#include "aloha/service.hpp"
#include "aloha/synth.hpp"

using namespace aloha;
namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::optional<std::string> workdir, hla, dialogue;
  std::vector<std::int64_t> targets;
  std::optional<std::size_t> min_hla;
  std::optional<int> csm_dim, sweeps, second_level_k, min_frequency, distractors, pool_k, epochs, finetune_epochs,
      folds;
  std::optional<double> alpha, lambda, fraction, lr, finetune_lr;
};

void add_config_flags(CLI::App& app, Overrides& o) {
  app.add_option("--config", o.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Replace every stage seed with one derived from this");
  app.add_option("--set", o.sets, "Override a config key, e.g. --set csm.dim=8 (repeatable)");
  app.add_option("--workdir", o.workdir, "Artifact directory");
  app.add_option("--hla", o.hla, "HLA file");
  app.add_option("--dialogue", o.dialogue, "Dialogue file");
  app.add_option("--target", o.targets, "Target character external id (repeatable)");
  app.add_option("--min-hla", o.min_hla, "Drop characters with fewer HLAs");
  app.add_option("--csm-dim", o.csm_dim, "Latent dimension");
  app.add_option("--alpha", o.alpha, "Confidence scale");
  app.add_option("--lambda", o.lambda, "Regularization");
  app.add_option("--sweeps", o.sweeps, "ALS sweeps");
  app.add_option("--fraction", o.fraction, "First-level community fraction");
  app.add_option("--second-level-k", o.second_level_k, "Second-level list size");
  app.add_option("--min-frequency", o.min_frequency, "Positive community threshold");
  app.add_option("--distractors", o.distractors, "Distractors per candidate set");
  app.add_option("--pool-k", o.pool_k, "Negative sampling similarity pool");
  app.add_option("--epochs", o.epochs, "Uniform training epochs");
  app.add_option("--lr", o.lr, "Uniform training learning rate");
  app.add_option("--finetune-epochs", o.finetune_epochs, "Fine-tuning epochs");
  app.add_option("--finetune-lr", o.finetune_lr, "Fine-tuning learning rate");
  app.add_option("--folds", o.folds, "Cross-validation folds");
}

pipeline::Json parse_value(const std::string& raw) {
  try {
    return pipeline::Json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    return raw;
  }
}

pipeline::PipelineConfig build_config(const Overrides& o) {
  pipeline::Json j =
      o.config_path.empty() ? pipeline::PipelineConfig().to_json() : pipeline::Json::parse(read_file(o.config_path));
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw Error("--set expects key=value, got '" + s + "'");
    pipeline::Json* node = &j;
    std::string key = s.substr(0, eq);
    for (std::size_t dot; (dot = key.find('.')) != std::string::npos; key = key.substr(dot + 1)) {
      node = &(*node)[key.substr(0, dot)];
    }
    (*node)[key] = parse_value(s.substr(eq + 1));
  }
  auto c = pipeline::PipelineConfig::from_json(j);
  if (o.workdir) c.workdir = *o.workdir;
  if (o.hla) c.hla_path = *o.hla;
  if (o.dialogue) c.dialogue_path = *o.dialogue;
  if (!o.targets.empty()) c.targets = o.targets;
  if (o.min_hla) c.min_hla = *o.min_hla;
  if (o.csm_dim) c.csm.dim = *o.csm_dim;
  if (o.alpha) c.csm.alpha = *o.alpha;
  if (o.lambda) c.csm.lambda = *o.lambda;
  if (o.sweeps) c.csm.sweeps = *o.sweeps;
  if (o.fraction) c.community.first_level_fraction = *o.fraction;
  if (o.second_level_k) c.community.second_level_k = *o.second_level_k;
  if (o.min_frequency) c.community.min_frequency = *o.min_frequency;
  if (o.distractors) c.sampling.n_distractors = *o.distractors;
  if (o.pool_k) c.sampling.similarity_pool_k = *o.pool_k;
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.lr) c.train.learning_rate = *o.lr;
  if (o.finetune_epochs) c.finetune.epochs = *o.finetune_epochs;
  if (o.finetune_lr) c.finetune.learning_rate = *o.finetune_lr;
  if (o.folds) c.n_folds = *o.folds;
  if (o.seed) c.override_seed(*o.seed);
  c.validate();
  return c;
}

int run(pipeline::Stage stage, const Overrides& o) {
  const auto config = build_config(o);
  const auto start = std::chrono::steady_clock::now();
  const auto outcome = pipeline::run_stage(stage, config, std::cout);
  const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
  std::cerr << outcome.message << " (" << format_double(took.count()) << " s)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ALOHA character language style pipeline"};
  app.require_subcommand(1);
  Overrides o;

  for (auto stage : pipeline::all_stages()) {
    auto* sub = app.add_subcommand(pipeline::to_string(stage), "Run the " + pipeline::to_string(stage) + " stage");
    add_config_flags(*sub, o);
    sub->callback([stage, &o] { run(stage, o); });
  }

  auto* all = app.add_subcommand("all", "Run ingest through eval-ranker, skipping stages that are up to date");
  add_config_flags(*all, o);
  all->callback([&o] {
    for (auto s : {pipeline::Stage::ingest, pipeline::Stage::fit_csm, pipeline::Stage::eval_csm,
                   pipeline::Stage::community, pipeline::Stage::candidates, pipeline::Stage::train,
                   pipeline::Stage::finetune, pipeline::Stage::eval_ranker}) {
      run(s, o);
    }
  });

  synth::SynthConfig sc;
  std::string synth_out = "synthetic";
  auto* syn = app.add_subcommand("synth", "Write a synthetic corpus (hla.tsv, dialogue.tsv)");
  syn->add_option("--out", synth_out, "Output directory");
  syn->add_option("--seed", sc.seed, "Generator seed");
  syn->add_option("--characters", sc.characters, "Number of characters");
  syn->add_option("--groups", sc.groups, "Style groups");
  syn->add_option("--shows", sc.shows, "Shows");
  syn->add_option("--lines", sc.lines_per_character, "Lines per character");
  syn->callback([&] {
    const auto corpus = synth::generate(sc);
    fs::create_directories(synth_out);
    write_file((fs::path(synth_out) / "hla.tsv").string(), corpus.hla_text);
    write_file((fs::path(synth_out) / "dialogue.tsv").string(), corpus.dialogue_text);
    std::cerr << "wrote " << synth_out << "/hla.tsv and " << synth_out << "/dialogue.tsv\n";
  });

  service::ServiceOptions so;
  auto* serve = app.add_subcommand("serve", "Serve the chat API over a finished workdir");
  add_config_flags(*serve, o);
  serve->add_option("--host", so.host, "Bind address");
  serve->add_option("--port", so.port, "Port");
  serve->add_option("--model", so.model_path, "Ranker model (defaults to the first target's aloha.model)");
  serve->callback([&] {
    const auto config = build_config(o);
    service::ChatService svc(service::load_service_data(config, so.model_path));
    std::cerr << "listening on " << so.host << ':' << so.port << '\n';
    if (!svc.listen(so.host, so.port)) throw Error("could not bind " + so.host + ":" + std::to_string(so.port));
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const pipeline::StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
