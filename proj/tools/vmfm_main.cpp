#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "vmfm/config.hpp"
#include "vmfm/evaluate.hpp"
#include "vmfm/hash.hpp"
#include "vmfm/png_io.hpp"
#include "vmfm/trainer.hpp"

namespace fs = std::filesystem;
using namespace vmfm;

namespace {

struct CommonArgs {
  std::string config_file;
  std::vector<std::string> sets;
  std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_file, "json config file of dotted keys");
  cmd->add_option("--set", args.sets, "override one config key, as key=value")
      ->take_all()
      ->expected(-1);
  cmd->add_option("--seed", args.seed, "shorthand for corpus.seed and train.seed");
  cmd->footer(cfg::keys_help());
}

cfg::Config resolve_config(const CommonArgs& args) {
  cfg::Config c;
  if (!args.config_file.empty()) cfg::load_config_file(c, args.config_file);
  cfg::apply_assignments(c, args.sets);
  if (args.seed >= 0) {
    c.corpus.seed = static_cast<std::uint64_t>(args.seed);
    c.train.seed = static_cast<std::uint64_t>(args.seed);
  }
  return c;
}

std::unique_ptr<train::Checkpoint> load_run_checkpoint(const fs::path& run_dir) {
  fs::path dir = run_dir / "checkpoint";
  if (!fs::exists(dir / "state.json"))
    throw missing_artifact_error("no checkpoint under " + run_dir.string() +
                                 " (expected checkpoint/state.json)");
  return train::load_checkpoint(dir);
}

int cmd_synth(const CommonArgs& common, const std::string& out_dir, bool force, int n,
              double object_prob) {
  cfg::Config c = resolve_config(common);
  if (n >= 0)
    for (auto& [split, count] : c.corpus.split_counts) count = n;
  if (object_prob >= 0) c.corpus.synth.object_prob = object_prob;

  io::CorpusMeta meta = io::write_corpus(out_dir, c.corpus, force, &std::cout);
  for (const auto& name : io::split_names()) {
    const auto& sm = meta.splits.at(name);
    std::uint64_t h = fnv1a64(std::string_view("split"));
    for (const auto& cs : sm.checksums) h = fnv1a64(std::string_view(cs), h);
    std::printf("%-16s %4d samples (%d interactive)  checksum %s\n", name.c_str(), sm.count,
                sm.interactive_count, to_hex(h).c_str());
  }
  std::printf("manifest checksum %s\n",
              to_hex(io::file_checksum(fs::path(out_dir) / "manifest.json")).c_str());
  return 0;
}

int cmd_train(const CommonArgs& common, const std::string& corpus_dir, const std::string& run_dir,
              const std::string& stage_name, int epochs, int batch, const std::string& ablation,
              bool desk) {
  cfg::Config c;
  if (desk) c.train = train::TrainConfig::desk_preset();
  if (!common.config_file.empty()) cfg::load_config_file(c, common.config_file);
  cfg::apply_assignments(c, common.sets);
  if (common.seed >= 0) {
    c.corpus.seed = static_cast<std::uint64_t>(common.seed);
    c.train.seed = static_cast<std::uint64_t>(common.seed);
  }
  if (batch >= 1) c.train.batch_size = batch;
  if (!ablation.empty()) c.train.cl_mode = ablation;

  train::Stage stage = train::stage_from_name(stage_name);
  io::Corpus corpus = io::Corpus::open(corpus_dir);
  train::Trainer trainer(run_dir, corpus, c.train);
  train::StageResult res = trainer.run_stage(stage, epochs);

  for (const auto& ep : res.epochs) {
    std::printf("epoch %llu", static_cast<unsigned long long>(ep.epoch));
    for (const auto& [k, v] : ep.terms) std::printf("  %s=%.4f", k.c_str(), v);
    std::printf("\n");
  }
  std::printf("stage %s done (%zu epochs); checkpoint under %s\n", stage_name.c_str(),
              res.epochs.size(), (fs::path(run_dir) / "checkpoint").string().c_str());
  return 0;
}

int cmd_eval(const CommonArgs& common, const std::string& corpus_dir, const std::string& run_dir,
             const std::string& split, const std::string& pipeline, int patches,
             std::string out_prefix, bool sad_kilo) {
  cfg::Config c = resolve_config(common);
  if (sad_kilo) c.sad_kilo = true;
  if (patches < 0) patches = c.train.patch_count;

  io::Corpus corpus = io::Corpus::open(corpus_dir);
  auto cp = load_run_checkpoint(run_dir);
  eval::SplitReport rep = eval::evaluate_split(cp->models, corpus, split, pipeline, patches);

  if (out_prefix.empty()) {
    std::string tag = rep.pipeline;
    for (char& ch : tag)
      if (ch == '+') ch = '_';
    out_prefix = (fs::path(run_dir) / "eval" / (split + "-" + tag)).string();
  }
  eval::write_text_file(out_prefix + ".json", eval::report_to_json(rep));
  eval::write_text_file(out_prefix + ".csv", eval::report_to_csv(rep));
  std::printf("%s", eval::report_table(rep, c.sad_kilo).c_str());
  std::printf("wrote %s.json and %s.csv\n", out_prefix.c_str(), out_prefix.c_str());
  return 0;
}

int cmd_infer(const std::string& corpus_dir, const std::string& run_dir, const std::string& split,
              int index, const std::string& pipeline, const std::string& out_dir) {
  io::Corpus corpus = io::Corpus::open(corpus_dir);
  auto cp = load_run_checkpoint(run_dir);
  io::CorpusSample sample = corpus.load(split, index);
  eval::export_inference(out_dir, cp->models, sample, pipeline);
  std::printf("wrote matte, composites and deviation maps under %s\n", out_dir.c_str());
  return 0;
}

int cmd_export(const std::string& corpus_dir, const std::string& run_dir, const std::string& split,
               int count, const std::string& pipeline, const std::string& bg,
               const std::string& out_dir, bool deviations, bool scene) {
  io::Corpus corpus = io::Corpus::open(corpus_dir);
  if (bg != "green" && bg != "blue")
    throw usage_error("unknown backing color '" + bg + "' (expected green or blue)");
  auto cp = load_run_checkpoint(run_dir);
  int total = corpus.count(split);
  if (count < 0 || count > total) count = total;
  fs::create_directories(out_dir);
  for (int i = 0; i < count; ++i) {
    io::CorpusSample sample = corpus.load(split, i);
    Plane<float> matte = eval::run_inference(cp->models, sample, pipeline);
    Image<float> comp = eval::export_composite(sample.scene.rgb, matte, bg);
    char name[64];
    std::snprintf(name, sizeof name, "composite_%s_%03d.png", bg.c_str(), i);
    png::write_rgb(fs::path(out_dir) / name, comp);
    if (deviations) {
      std::snprintf(name, sizeof name, "deviation_s_%03d.png", i);
      png::write_gray(fs::path(out_dir) / name, eval::deviation_map(cp->models, sample, 1));
      std::snprintf(name, sizeof name, "deviation_d_%03d.png", i);
      png::write_gray(fs::path(out_dir) / name, eval::deviation_map(cp->models, sample, 2));
    }
    if (scene) eval::export_scene(fs::path(out_dir) / ("scene_" + std::to_string(i)), sample);
  }
  std::printf("wrote %d composite(s) under %s\n", count, out_dir.c_str());
  return 0;
}

int cmd_report(const std::string& in_file, bool sad_kilo) {
  std::ifstream in(in_file);
  if (!in) throw missing_artifact_error("report not found: " + in_file);
  std::stringstream ss;
  ss << in.rdbuf();
  eval::SplitReport rep = eval::report_from_json(ss.str());
  std::printf("%s", eval::report_table(rep, sad_kilo).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"virtual multi-modality foreground matting pipeline"};
  app.require_subcommand(1);

  CommonArgs synth_common, train_common, eval_common;

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
  std::string synth_out;
  bool synth_force = false;
  int synth_n = -1;
  double synth_object_prob = -1;
  synth->add_option("--out", synth_out, "corpus output directory")->required();
  synth->add_flag("--force", synth_force, "overwrite a nonempty output directory");
  synth->add_option("--n", synth_n, "set every split count to this many samples");
  synth->add_option("--object-prob", synth_object_prob,
                    "shorthand for corpus.object_prob");
  add_common(synth, synth_common);

  // train
  auto* tr = app.add_subcommand("train", "run one curriculum stage");
  std::string tr_corpus, tr_run, tr_stage, tr_ablation;
  int tr_epochs = -1, tr_batch = -1;
  bool tr_desk = false;
  tr->add_option("--corpus", tr_corpus, "corpus directory")->required();
  tr->add_option("--run", tr_run, "run directory for checkpoint and logs")->required();
  tr->add_option("--stage", tr_stage, "pretrain | sup1 | sup2 | cl_selfsup | refine")->required();
  tr->add_option("--epochs", tr_epochs, "epochs to run now (default: configured count)");
  tr->add_option("--batch", tr_batch, "shorthand for train.batch_size");
  tr->add_option("--ablation", tr_ablation, "shorthand for train.cl_mode");
  tr->add_flag("--desk", tr_desk, "start from the desk-scale preset (half epochs, batch 8)");
  add_common(tr, train_common);

  // eval
  auto* ev = app.add_subcommand("eval", "run metrics over a split");
  std::string ev_corpus, ev_run, ev_split = "labeled-test", ev_pipeline = "s", ev_out;
  int ev_patches = -1;
  bool ev_sad_kilo = false;
  ev->add_option("--corpus", ev_corpus, "corpus directory")->required();
  ev->add_option("--run", ev_run, "run directory holding the checkpoint")->required();
  ev->add_option("--split", ev_split, "corpus split to evaluate");
  ev->add_option("--pipeline", ev_pipeline, "s | d | s+rn | d+rn | gt");
  ev->add_option("--patches", ev_patches, "refinement windows for +rn pipelines");
  ev->add_option("--out", ev_out, "output prefix for the json and csv reports");
  ev->add_flag("--sad-kilo", ev_sad_kilo, "shorthand for eval.sad_kilo");
  add_common(ev, eval_common);

  // infer
  auto* in = app.add_subcommand("infer", "matte one sample and dump its products");
  std::string in_corpus, in_run, in_split = "labeled-test", in_pipeline = "s", in_out;
  int in_index = 0;
  in->add_option("--corpus", in_corpus, "corpus directory")->required();
  in->add_option("--run", in_run, "run directory holding the checkpoint")->required();
  in->add_option("--split", in_split, "corpus split");
  in->add_option("--index", in_index, "sample index inside the split");
  in->add_option("--pipeline", in_pipeline, "s | d | s+rn | d+rn | gt");
  in->add_option("--out", in_out, "output directory")->required();

  // export
  auto* ex = app.add_subcommand("export", "composite samples over a keying color");
  std::string ex_corpus, ex_run, ex_split = "labeled-test", ex_pipeline = "s", ex_bg = "green",
              ex_out;
  int ex_count = -1;
  bool ex_dev = false, ex_scene = false;
  ex->add_option("--corpus", ex_corpus, "corpus directory")->required();
  ex->add_option("--run", ex_run, "run directory holding the checkpoint")->required();
  ex->add_option("--split", ex_split, "corpus split");
  ex->add_option("--count", ex_count, "how many samples from the front of the split (default all)");
  ex->add_option("--pipeline", ex_pipeline, "s | d | s+rn | d+rn | gt");
  ex->add_option("--bg", ex_bg, "backing color: green or blue");
  ex->add_option("--out", ex_out, "output directory")->required();
  ex->add_flag("--deviations", ex_dev, "also write per-branch deviation maps");
  ex->add_flag("--scene", ex_scene, "also dump the raw scene products per sample");

  // report
  auto* rp = app.add_subcommand("report", "print a stored evaluation report");
  std::string rp_in;
  bool rp_sad_kilo = false;
  rp->add_option("--in", rp_in, "report json path")->required();
  rp->add_flag("--sad-kilo", rp_sad_kilo, "divide the absolute-difference sum by 1000");

  try {
    app.parse(argc, argv);
    if (*synth)
      return cmd_synth(synth_common, synth_out, synth_force, synth_n, synth_object_prob);
    if (*tr)
      return cmd_train(train_common, tr_corpus, tr_run, tr_stage, tr_epochs, tr_batch, tr_ablation,
                       tr_desk);
    if (*ev)
      return cmd_eval(eval_common, ev_corpus, ev_run, ev_split, ev_pipeline, ev_patches, ev_out,
                      ev_sad_kilo);
    if (*in) return cmd_infer(in_corpus, in_run, in_split, in_index, in_pipeline, in_out);
    if (*ex)
      return cmd_export(ex_corpus, ex_run, ex_split, ex_count, ex_pipeline, ex_bg, ex_out, ex_dev,
                        ex_scene);
    if (*rp) return cmd_report(rp_in, rp_sad_kilo);
    return 2;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const usage_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const missing_artifact_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
}
