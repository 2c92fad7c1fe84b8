// corefcl command-line entry point.
#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "corefcl/error.hpp"
#include "corefcl/pipeline.hpp"

namespace fs = std::filesystem;
using namespace corefcl;
using nlohmann::json;

namespace {

std::string flag_name(std::string_view key) {
  std::string s(key);
  std::replace(s.begin(), s.end(), '_', '-');
  return "--" + s;
}

std::string default_text(const RunConfig& defaults, const RunConfigField& f) {
  return std::visit(
      [&](auto member) -> std::string {
        const auto& v = defaults.*member;
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, std::string>) return v.empty() ? "\"\"" : v;
        else if constexpr (std::is_same_v<V, bool>) return v ? "true" : "false";
        else return json(v).dump();
      },
      f.member);
}

// Every subcommand accepts --config plus one flag per configuration key.
struct ConfigOptions {
  std::string config_file;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "flat JSON configuration file")->check(CLI::ExistingFile);
    const RunConfig defaults;
    for (const auto& f : run_config_fields()) {
      const std::string key(f.key);
      app->add_option(flag_name(f.key), values[key],
                      std::string(f.help) + " (default: " + default_text(defaults, f) + ")")
          ->group("Configuration");
    }
  }

  RunConfig resolve(const CLI::App* app) const {
    RunConfig cfg;
    if (!config_file.empty()) cfg.merge_file(config_file);
    for (const auto& f : run_config_fields()) {
      if (app->count(flag_name(f.key)) > 0) cfg.set(f.key, values.at(std::string(f.key)));
    }
    cfg.validate();
    return cfg;
  }
};

std::vector<Tokens> read_segments(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::vector<Tokens> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(split_whitespace(line));
  }
  return out;
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"corefcl: coreference-based contrastive fine-tuning for context-aware translation"};
  app.set_version_flag("--version", std::string(version()));
  app.require_subcommand(1);

  std::map<std::string, ConfigOptions> options;
  auto add = [&](const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    options[name].attach(sub);
    return sub;
  };

  auto* synth = add("synth-gen", "generate the synthetic pronoun corpus");
  auto* ingest = add("ingest", "split a corpus by document, build the vocabulary and the contrastive suite");
  auto* annotate = add("annotate", "annotate training examples with coreference chains");
  auto* augment = add("augment", "corrupt antecedents of annotated examples");
  std::string augment_out;
  augment->add_option("--out", augment_out, "output file (default: <work_dir>/augmented.jsonl)");
  auto* train = add("train", "MT phase: train from scratch with early stopping");
  auto* finetune = add("finetune", "contrastive fine-tuning of the MT checkpoint");
  std::string ft_augmented, ft_out;
  finetune->add_option("--augmented", ft_augmented, "augmented data (default: <work_dir>/augmented.jsonl)");
  finetune->add_option("--out", ft_out, "output checkpoint (default: <work_dir>/cl.ckpt)");
  auto* translate = add("translate", "translate every sentence of a corpus file");
  std::string tr_ckpt, tr_input, tr_out;
  translate->add_option("--checkpoint", tr_ckpt, "model checkpoint (default: <work_dir>/cl.ckpt)");
  translate->add_option("--corpus", tr_input, "corpus file to translate (default: the test split)");
  translate->add_option("--out", tr_out, "output text file (default: standard output)");
  auto* bleu = add("bleu", "corpus BLEU of a hypothesis file against a reference file");
  std::string hyp, ref;
  bleu->add_option("--hyp", hyp, "hypotheses, one segment per line")->required()->check(CLI::ExistingFile);
  bleu->add_option("--ref", ref, "references, one segment per line")->required()->check(CLI::ExistingFile);
  auto* score = add("score-contrastive", "contrastive pronoun accuracy and test BLEU of a checkpoint");
  std::string sc_ckpt, sc_suite;
  score->add_option("--checkpoint", sc_ckpt, "model checkpoint (default: <work_dir>/cl.ckpt)");
  score->add_option("--suite", sc_suite, "suite file (default: <work_dir>/suite.jsonl)");
  auto* stats = add("stats", "corpus and annotation statistics");
  auto* ablate = add("ablate", "fine-tune under each corruption strategy and compare");
  auto* run = add("run", "every stage from corpus generation to evaluation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const RunConfig cfg = options.at(sub->get_name()).resolve(sub);
    const pipeline::Paths paths(cfg);

    if (sub == synth) {
      const auto docs = pipeline::synth_gen(cfg);
      std::cout << "wrote " << docs.size() << " documents to " << paths.corpus().string() << '\n';
    } else if (sub == ingest) {
      print_json(pipeline::ingest(cfg).to_json());
    } else if (sub == annotate) {
      print_json(pipeline::annotate(cfg).to_json());
    } else if (sub == augment) {
      const fs::path out = augment_out.empty() ? paths.augmented() : fs::path(augment_out);
      std::cout << "wrote " << pipeline::augment(cfg, out) << " contrastive pairs to " << out.string() << '\n';
    } else if (sub == train) {
      const auto h = pipeline::train(cfg);
      std::cout << "stopped after " << h.step_losses.size() << " steps (" << h.stop_reason << "), best validation MT loss "
                << h.best_val_mt_loss << " at step " << h.best_step << '\n';
    } else if (sub == finetune) {
      const fs::path data = ft_augmented.empty() ? paths.augmented() : fs::path(ft_augmented);
      const fs::path out = ft_out.empty() ? paths.cl_checkpoint() : fs::path(ft_out);
      const auto h = pipeline::finetune(cfg, data, out);
      std::cout << "stopped after " << h.step_losses.size() << " steps (" << h.stop_reason << "), best validation MT loss "
                << h.best_val_mt_loss << " at step " << h.best_step << '\n';
    } else if (sub == translate) {
      const fs::path ckpt = tr_ckpt.empty() ? paths.cl_checkpoint() : fs::path(tr_ckpt);
      const fs::path input = tr_input.empty() ? paths.split("test") : fs::path(tr_input);
      const auto lines = pipeline::translate(cfg, ckpt, input);
      std::ofstream file;
      if (!tr_out.empty()) {
        file.open(tr_out);
        if (!file) throw Error("cannot write '" + tr_out + "'");
      }
      std::ostream& out = tr_out.empty() ? std::cout : file;
      for (const auto& l : lines) out << l << '\n';
    } else if (sub == bleu) {
      const auto report = corpus_bleu(read_segments(hyp), read_segments(ref), cfg.bleu());
      auto j = report.to_json();
      j["tool"] = "corefcl";
      j["version"] = std::string(version());
      j["config"] = cfg.to_json();
      print_json(j);
    } else if (sub == score) {
      const fs::path ckpt = sc_ckpt.empty() ? paths.cl_checkpoint() : fs::path(sc_ckpt);
      if (sc_suite.empty()) {
        print_json(pipeline::evaluate(cfg, ckpt).to_json());
      } else {
        auto j = pipeline::score_contrastive(cfg, ckpt, sc_suite).to_json();
        print_json(j);
      }
    } else if (sub == stats) {
      print_json(pipeline::stats(cfg));
    } else if (sub == ablate) {
      std::cout << pipeline::format_ablation(pipeline::ablate(cfg));
    } else if (sub == run) {
      print_json(pipeline::run_all(cfg).to_json());
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
