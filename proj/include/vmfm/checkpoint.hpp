#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "vmfm/adam.hpp"
#include "vmfm/nets.hpp"

namespace vmfm::train {

inline constexpr int kCheckpointFormatVersion = 1;

enum class Stage { pretrain, sup1, sup2, cl_selfsup, refine };

const char* stage_name(Stage s);
Stage stage_from_name(const std::string& name);  // throws usage_error on unknown names

// Each stage builds on the one before it; starting a stage whose prerequisite
// has not completed is refused. Refinement may follow either supervised
// adversarial training or the self-supervised stage.
void check_stage_order(const std::vector<std::string>& history, Stage next);

struct CheckpointState {
  std::uint64_t run_seed = 0;
  int image_size = 64;
  std::vector<std::string> stage_history;             // completed stages, in order
  std::map<std::string, std::uint64_t> stage_epochs;  // epochs completed per stage
};

// Owns the model bundle together with its optimizer. The optimizer resolves
// parameter names through tensor addresses, so the bundle is pinned in place
// and passed around through unique_ptr.
struct Checkpoint {
  net::Models<float> models;
  optim::Adam<float> opt;
  CheckpointState state;

  explicit Checkpoint(std::uint64_t seed, optim::AdamConfig cfg = {})
      : models(net::make_models<float>(seed)), opt(models, cfg) {
    state.run_seed = seed;
  }
  Checkpoint(const Checkpoint&) = delete;
  Checkpoint& operator=(const Checkpoint&) = delete;
};

// Writes dir/model.vmt (weights plus optimizer slots) and dir/state.json.
void save_checkpoint(const std::filesystem::path& dir, Checkpoint& cp);

std::unique_ptr<Checkpoint> load_checkpoint(const std::filesystem::path& dir);

std::string checkpoint_state_to_json(const CheckpointState& state);
CheckpointState checkpoint_state_from_json(const std::string& text);

}  // namespace vmfm::train
