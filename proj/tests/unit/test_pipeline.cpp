#include "doctest.h"

#include <fstream>
#include <map>
#include <sstream>

#include "corefcl/error.hpp"
#include "corefcl/pipeline.hpp"

using namespace corefcl;
namespace fs = std::filesystem;

namespace {

RunConfig tiny(const fs::path& dir) {
  RunConfig c;
  c.work_dir = dir.string();
  c.seed = 3;
  c.docs = 40;
  c.sentences_per_doc = 4;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.batch_size = 8;
  c.max_steps = 30;
  c.eval_every = 10;
  c.finetune_max_steps = 10;
  c.decode_max_len = 12;
  return c;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    out[fs::relative(e.path(), dir).string()] = ss.str();
  }
  return out;
}

fs::path fresh(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("end-to-end run is reproducible") {
  const auto dir = fresh("corefcl_pipeline_test");
  const auto cfg = tiny(dir);
  const auto first = pipeline::run_all(cfg);
  CHECK(first.bleu.bleu >= 0.0);
  CHECK(first.bleu.bleu <= 100.0);
  REQUIRE(first.contrastive.has_value());
  CHECK(first.contrastive->accuracy >= 0.0);
  CHECK(first.contrastive->accuracy <= 1.0);

  const pipeline::Paths paths(cfg);
  for (const auto& f : {paths.corpus(), paths.split("train"), paths.annotated(), paths.suite()}) {
    CHECK(fs::exists(f));
    CHECK(fs::exists(fs::path(f.string() + ".meta.json")));
  }
  CHECK(fs::exists(paths.mt_checkpoint()));
  CHECK(fs::exists(paths.cl_checkpoint()));

  const auto a = snapshot(dir);
  fs::remove_all(dir);
  pipeline::run_all(cfg);
  const auto b = snapshot(dir);
  CHECK(a.size() == b.size());
  for (const auto& [name, bytes] : a) {
    INFO(name);
    REQUIRE(b.count(name));
    CHECK(b.at(name) == bytes);
  }
  fs::remove_all(dir);
}

TEST_CASE("stages report their work") {
  const auto dir = fresh("corefcl_pipeline_stages");
  auto cfg = tiny(dir);
  CHECK(pipeline::synth_gen(cfg).size() == 40);
  const auto ing = pipeline::ingest(cfg);
  CHECK(ing.train_docs + ing.valid_docs + ing.test_docs == 40);
  CHECK(ing.vocab_size > kNumReserved);
  const auto ann = pipeline::annotate(cfg);
  CHECK(ann.annotated <= ann.examples);
  CHECK(ann.rate == doctest::Approx(static_cast<double>(ann.annotated) / ann.examples));
  CHECK(pipeline::augment(cfg, pipeline::Paths(cfg).augmented()) == ann.annotated);

  // an unusable checkpoint is reported, not silently accepted
  CHECK_THROWS_AS(pipeline::evaluate(cfg, dir / "missing.ckpt"), Error);
  fs::remove_all(dir);
}
