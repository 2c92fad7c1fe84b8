#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "corefcl/augment.hpp"
#include "corefcl/coref.hpp"
#include "corefcl/error.hpp"
#include "corefcl/eval.hpp"
#include "corefcl/pipeline.hpp"
#include "corefcl/synthgen.hpp"
#include "corefcl/train.hpp"

namespace py = pybind11;
using namespace corefcl;
using nlohmann::json;

namespace {

// Python values cross the boundary as JSON text; configs are plain dicts.
json to_json(const py::handle& obj) {
  auto dumps = py::module_::import("json").attr("dumps");
  return json::parse(dumps(obj).cast<std::string>());
}

py::object from_json(const json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

RunConfig config_from(const py::dict& overrides) {
  RunConfig cfg;
  cfg.merge(to_json(overrides));
  cfg.validate();
  return cfg;
}

py::list documents_to_py(const std::vector<Document>& docs) {
  py::list out;
  for (const auto& d : docs) {
    py::list pairs;
    for (const auto& p : d.pairs) pairs.append(py::make_tuple(p.source_text, p.target_text));
    out.append(py::dict(py::arg("doc") = d.doc_id, py::arg("pairs") = pairs));
  }
  return out;
}

py::dict mention_to_py(const Mention& m) {
  return py::dict(py::arg("location") = m.location, py::arg("start") = m.start, py::arg("end") = m.end,
                  py::arg("surface") = join_tokens(m.surface));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Coreference-based contrastive fine-tuning for context-aware translation";
  m.attr("__version__") = std::string(version());

  py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("default_config", [] { return from_json(RunConfig{}.to_json()); },
        "All configuration keys with their default values.");

  m.def(
      "generate_corpus",
      [](int docs, int sentences_per_doc, double pronoun_rate, std::uint64_t seed, double verb_cue) {
        GenerationConfig g;
        g.num_docs = docs;
        g.sentences_per_doc = sentences_per_doc;
        g.pronoun_rate = pronoun_rate;
        g.seed = seed;
        g.verb_cue = verb_cue;
        return documents_to_py(generate_corpus(Lexicon::default_lexicon(), g));
      },
      py::arg("docs") = 10, py::arg("sentences_per_doc") = 5, py::arg("pronoun_rate") = 0.4,
      py::arg("seed") = 0, py::arg("verb_cue") = 0.0);

  m.def(
      "resolve",
      [](const std::vector<std::string>& contexts, const std::string& source) {
        ContextualExample ex;
        ex.source = split_whitespace(source);
        for (const auto& c : contexts) ex.contexts.push_back(split_whitespace(c));
        const auto annotated = resolve(ex, RuleSet::from_lexicon(Lexicon::default_lexicon()));
        py::list chains;
        for (const auto& c : annotated.chains) {
          py::list ante, ana;
          for (const auto& a : c.antecedents) ante.append(mention_to_py(a));
          for (const auto& a : c.anaphors) ana.append(mention_to_py(a));
          chains.append(py::dict(py::arg("antecedents") = ante, py::arg("anaphors") = ana));
        }
        return chains;
      },
      py::arg("contexts"), py::arg("source"),
      "Coreference chains linking the source sentence to its contexts (built-in lexicon rules).");

  m.def(
      "corrupt",
      [](const std::vector<std::string>& contexts, const std::string& source, const std::string& strategy,
         double p_omit, std::uint64_t seed) {
        ContextualExample ex;
        ex.source = split_whitespace(source);
        for (const auto& c : contexts) ex.contexts.push_back(split_whitespace(c));
        const auto rules = RuleSet::from_lexicon(Lexicon::default_lexicon());
        const auto annotated = resolve(ex, rules);
        CorruptionConfig cc;
        cc.p_omit = p_omit;
        cc.seed = seed;
        cc.strategy = parse_strategy(strategy);
        cc.replacement_pool = rules.nouns();
        Philox rng(seed, 0);
        const auto out = corrupt(mask_antecedents(annotated), cc, rng);
        std::vector<std::string> texts;
        for (const auto& c : out.contexts) texts.push_back(join_tokens(c));
        return texts;
      },
      py::arg("contexts"), py::arg("source"), py::arg("strategy") = "both", py::arg("p_omit") = 0.5,
      py::arg("seed") = 0, "Contexts with every antecedent token omitted or replaced.");

  m.def(
      "corpus_bleu",
      [](const std::vector<std::string>& hyps, const std::vector<std::string>& refs, const std::string& smoothing,
         bool lowercase, bool char_level) {
        BleuOptions o;
        o.smoothing = parse_smoothing(smoothing);
        o.lowercase = lowercase;
        o.char_level = char_level;
        std::vector<Tokens> h, r;
        for (const auto& s : hyps) h.push_back(split_whitespace(s));
        for (const auto& s : refs) r.push_back(split_whitespace(s));
        return from_json(corpus_bleu(h, r, o).to_json());
      },
      py::arg("hypotheses"), py::arg("references"), py::arg("smoothing") = "none", py::arg("lowercase") = false,
      py::arg("char_level") = false);

  m.def(
      "margin_loss",
      [](const std::vector<double>& pos, const std::vector<double>& neg, double eta) {
        if (pos.size() != neg.size() || pos.empty()) throw Error("margin_loss: need equal, non-empty inputs");
        ad::NoGrad<double> no_grad;
        auto p = ad::Tensor<double>::from({pos.size()}, pos);
        auto n = ad::Tensor<double>::from({neg.size()}, neg);
        return margin_loss(p, n, eta).item();
      },
      py::arg("log_p_true"), py::arg("log_p_corrupt"), py::arg("eta") = 1.0,
      "Mean hinge max(eta + log_p_corrupt - log_p_true, 0).");

  // Pipeline stages; every one takes a dict of configuration overrides.
  namespace pl = corefcl::pipeline;
  m.def("synth_gen", [](const py::dict& c) { return pl::synth_gen(config_from(c)).size(); }, py::arg("config"));
  m.def("ingest", [](const py::dict& c) { return from_json(pl::ingest(config_from(c)).to_json()); },
        py::arg("config"));
  m.def("annotate", [](const py::dict& c) { return from_json(pl::annotate(config_from(c)).to_json()); },
        py::arg("config"));
  m.def(
      "augment",
      [](const py::dict& c, std::optional<std::filesystem::path> out) {
        const auto cfg = config_from(c);
        return pl::augment(cfg, out.value_or(pl::Paths(cfg).augmented()));
      },
      py::arg("config"), py::arg("out") = py::none());
  m.def(
      "train",
      [](const py::dict& c) {
        const auto h = pl::train(config_from(c));
        return py::dict(py::arg("steps") = h.step_losses.size(), py::arg("stop_reason") = h.stop_reason,
                        py::arg("best_step") = h.best_step, py::arg("best_val_mt_loss") = h.best_val_mt_loss);
      },
      py::arg("config"));
  m.def(
      "finetune",
      [](const py::dict& c) {
        const auto cfg = config_from(c);
        const pl::Paths paths(cfg);
        const auto h = pl::finetune(cfg, paths.augmented(), paths.cl_checkpoint());
        return py::dict(py::arg("steps") = h.step_losses.size(), py::arg("stop_reason") = h.stop_reason,
                        py::arg("best_step") = h.best_step, py::arg("best_val_mt_loss") = h.best_val_mt_loss);
      },
      py::arg("config"));
  m.def(
      "evaluate",
      [](const py::dict& c, std::filesystem::path checkpoint) {
        return from_json(pl::evaluate(config_from(c), checkpoint).to_json());
      },
      py::arg("config"), py::arg("checkpoint"));
  m.def(
      "translate",
      [](const py::dict& c, std::filesystem::path checkpoint, std::filesystem::path corpus) {
        return pl::translate(config_from(c), checkpoint, corpus);
      },
      py::arg("config"), py::arg("checkpoint"), py::arg("corpus"));
  m.def("run_all", [](const py::dict& c) { return from_json(pl::run_all(config_from(c)).to_json()); },
        py::arg("config"), "Every stage from corpus generation to evaluation of the fine-tuned model.");
}
