#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vmfm/checkpoint.hpp"
#include "vmfm/corpus_io.hpp"
#include "vmfm/errors.hpp"

namespace vmfm::train {

// ---- sample views -----------------------------------------------------------------
//
// Stage code sees corpus samples through a view. Views built over unlabeled
// splits refuse every ground-truth accessor, so a stage that is not supposed
// to look at labels cannot do so silently.

class SampleView {
 public:
  static SampleView labeled(const io::CorpusSample& s) { return SampleView(s, true); }
  static SampleView unlabeled(const io::CorpusSample& s) { return SampleView(s, false); }

  bool has_labels() const { return labeled_; }
  std::uint64_t seed() const { return s_->scene.seed; }
  int height() const { return s_->scene.h; }
  int width() const { return s_->scene.w; }

  const Image<float>& rgb() const { return s_->scene.rgb; }
  const Plane<float>& heatmap() const { return s_->mods.heatmap; }
  const Plane<float>& modality(int branch) const {
    if (branch == 1) return s_->mods.seg;
    if (branch == 2) return s_->mods.depth;
    throw std::invalid_argument("modality branch must be 1 or 2");
  }

  const Plane<float>& alpha() const { return labels().alpha; }
  const Image<float>& fg() const { return labels().fg; }
  const Image<float>& bg() const { return labels().bg; }
  const MaskPlane& human_mask() const { return labels().human_mask; }
  const MaskPlane& object_mask() const { return labels().object_mask; }

 private:
  SampleView(const io::CorpusSample& s, bool labeled) : s_(&s), labeled_(labeled) {}

  const synth::SceneSample& labels() const {
    if (!labeled_) throw label_access_error();
    return s_->scene;
  }

  const io::CorpusSample* s_;
  bool labeled_;
};

// ---- configuration ------------------------------------------------------------------

struct TrainConfig {
  std::uint64_t seed = 1;
  double lr = 1e-4;
  int batch_size = 4;
  double lambda_matte = 1.0;  // supervised matte term inside the generator loss
  double lambda_com = 0.5;    // composition consistency term
  double lambda_cl = 1.0;     // complementary term inside the self-supervised loss
  double lambda_cs = 6.0;     // cross-supervision weight
  double lambda_dc = 1.0;     // deviation-correction weight
  double tau = 0.5;           // confidence saturation threshold
  int patch_count = 4;        // refinement windows per matte; 0 disables the stage
  std::string cl_mode = "full";  // full | cs_only | dc_only
  std::map<std::string, int> stage_epochs = {
      {"pretrain", 20}, {"sup1", 10}, {"sup2", 30}, {"cl_selfsup", 25}, {"refine", 20},
  };

  // Halved schedule and a larger batch for small-image cpu runs.
  static TrainConfig desk_preset() {
    TrainConfig c;
    c.batch_size = 8;
    c.stage_epochs = {
        {"pretrain", 10}, {"sup1", 5}, {"sup2", 15}, {"cl_selfsup", 12}, {"refine", 10},
    };
    return c;
  }

  void validate() const;
  int epochs_for(Stage s) const { return stage_epochs.at(stage_name(s)); }
};

// Per-epoch mean loss terms, written to the stage's csv log.
struct EpochStats {
  std::uint64_t epoch = 0;
  std::map<std::string, double> terms;
};

struct StageResult {
  Stage stage = Stage::pretrain;
  std::vector<EpochStats> epochs;
};

// Exclusive run-directory lock; a second concurrent trainer on the same run
// directory is refused.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

// ---- trainer --------------------------------------------------------------------------
//
// Owns the checkpoint bundle for one run directory, runs curriculum stages on
// a corpus, and persists checkpoint plus logs after every stage invocation.
// All stochastic choices derive from (run seed, stage, absolute epoch, item),
// so splitting a stage across invocations reproduces the single-shot run.

class Trainer {
 public:
  // Fresh run or resume: loads run_dir's checkpoint when present, otherwise
  // initializes models from cfg.seed.
  Trainer(const std::filesystem::path& run_dir, const io::Corpus& corpus, TrainConfig cfg);

  // Runs `epochs` more epochs of the stage (default: the configured count),
  // enforcing stage order, then saves the checkpoint and appends logs.
  StageResult run_stage(Stage stage, int epochs = -1);

  const Checkpoint& checkpoint() const { return *cp_; }
  Checkpoint& checkpoint() { return *cp_; }
  const TrainConfig& config() const { return cfg_; }

  // Matte for one sample through one branch, current weights, no refinement.
  Plane<float> predict_matte(const SampleView& v, int branch);

 private:
  StageResult run_pretrain(std::uint64_t first, int epochs);
  StageResult run_supervised(Stage stage, std::uint64_t first, int epochs);
  StageResult run_cl_selfsup(std::uint64_t first, int epochs);
  StageResult run_refine(std::uint64_t first, int epochs);

  std::vector<int> epoch_order(Stage stage, std::uint64_t epoch, int count) const;
  void load_split(const std::string& split, std::vector<io::CorpusSample>& cache) const;
  void finish_stage(Stage stage, StageResult& result, std::uint64_t first_epoch);
  void write_run_manifest() const;

  std::filesystem::path run_dir_;
  const io::Corpus* corpus_;
  TrainConfig cfg_;
  RunLock lock_;
  std::unique_ptr<Checkpoint> cp_;
  std::vector<io::CorpusSample> labeled_, unlabeled_, pretrain_;
};

}  // namespace vmfm::train
