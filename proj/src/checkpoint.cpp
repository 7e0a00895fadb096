#include "vmfm/checkpoint.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>

#include "vmfm/array_file.hpp"

namespace vmfm::train {

namespace {

constexpr const char* kStageNames[] = {"pretrain", "sup1", "sup2", "cl_selfsup", "refine"};

bool contains(const std::vector<std::string>& hist, Stage s) {
  return std::find(hist.begin(), hist.end(), stage_name(s)) != hist.end();
}

}  // namespace

const char* stage_name(Stage s) { return kStageNames[static_cast<int>(s)]; }

Stage stage_from_name(const std::string& name) {
  for (int i = 0; i < 5; ++i)
    if (name == kStageNames[i]) return static_cast<Stage>(i);
  throw usage_error("unknown stage '" + name +
                    "' (expected pretrain, sup1, sup2, cl_selfsup or refine)");
}

void check_stage_order(const std::vector<std::string>& history, Stage next) {
  auto require = [&](Stage pre) {
    if (!contains(history, pre))
      throw invariant_error(std::string("stage '") + stage_name(next) + "' requires completed '" +
                            stage_name(pre) + "'");
  };
  switch (next) {
    case Stage::pretrain: return;
    case Stage::sup1: require(Stage::pretrain); return;
    case Stage::sup2: require(Stage::sup1); return;
    case Stage::cl_selfsup: require(Stage::sup2); return;
    case Stage::refine:
      if (!contains(history, Stage::sup2) && !contains(history, Stage::cl_selfsup))
        throw invariant_error("stage 'refine' requires completed 'sup2' or 'cl_selfsup'");
      return;
  }
}

std::string checkpoint_state_to_json(const CheckpointState& state) {
  nlohmann::json j;
  j["kind"] = "vmfm-checkpoint";
  j["format_version"] = kCheckpointFormatVersion;
  j["run_seed"] = state.run_seed;
  j["image_size"] = state.image_size;
  j["stage_history"] = state.stage_history;
  j["stage_epochs"] = state.stage_epochs;
  return j.dump(2) + "\n";
}

CheckpointState checkpoint_state_from_json(const std::string& text) {
  try {
    nlohmann::json j = nlohmann::json::parse(text);
    if (j.at("kind").get<std::string>() != "vmfm-checkpoint")
      throw invariant_error("not a checkpoint state file");
    if (j.at("format_version").get<int>() != kCheckpointFormatVersion)
      throw invariant_error("unsupported checkpoint format version");
    CheckpointState s;
    s.run_seed = j.at("run_seed").get<std::uint64_t>();
    s.image_size = j.at("image_size").get<int>();
    s.stage_history = j.at("stage_history").get<std::vector<std::string>>();
    s.stage_epochs = j.at("stage_epochs").get<std::map<std::string, std::uint64_t>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw invariant_error(std::string("malformed checkpoint state: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& dir, Checkpoint& cp) {
  std::filesystem::create_directories(dir);
  io::ArrayFile af;
  cp.models.visit([&af](const std::string& name, Tensor<float>& t) {
    af.add_f32("param." + name,
               {std::uint32_t(t.n), std::uint32_t(t.c), std::uint32_t(t.h), std::uint32_t(t.w)},
               t.v.data());
  });
  for (const auto& [name, s] : cp.opt.slots) {
    af.add_vec_f32("adam." + name + ".m", s.m);
    af.add_vec_f32("adam." + name + ".v", s.v);
    af.add_scalar_u64("adam." + name + ".t", s.t);
  }
  af.write(dir / "model.vmt");

  std::ofstream f(dir / "state.json", std::ios::binary | std::ios::trunc);
  if (!f) throw missing_artifact_error("cannot open for writing: " + (dir / "state.json").string());
  f << checkpoint_state_to_json(cp.state);
}

std::unique_ptr<Checkpoint> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream f(dir / "state.json", std::ios::binary);
  if (!f) throw missing_artifact_error("missing artifact: " + (dir / "state.json").string());
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  CheckpointState state = checkpoint_state_from_json(text);

  io::ArrayFile af = io::ArrayFile::read(dir / "model.vmt");
  auto cp = std::make_unique<Checkpoint>(state.run_seed);
  cp->state = state;
  cp->models.visit([&af](const std::string& name, Tensor<float>& t) {
    const io::NamedArray& a = af.get("param." + name);
    if (a.dtype != io::Dtype::f32 || a.dims.size() != 4)
      throw invariant_error("checkpoint: bad dtype or rank for " + name);
    if (int(a.dims[0]) != t.n || int(a.dims[1]) != t.c || int(a.dims[2]) != t.h ||
        int(a.dims[3]) != t.w)
      throw invariant_error("checkpoint: shape mismatch for " + name);
    std::memcpy(t.v.data(), a.bytes.data(), a.bytes.size());
  });
  for (const io::NamedArray& a : af.arrays) {
    if (a.name.rfind("adam.", 0) != 0 || a.name.size() < 8) continue;
    std::string tail = a.name.substr(a.name.size() - 2);
    if (tail != ".m") continue;
    std::string slot = a.name.substr(5, a.name.size() - 7);
    optim::ParamMoments<float>& s = cp->opt.slots[slot];
    s.m = af.vec_f32("adam." + slot + ".m");
    s.v = af.vec_f32("adam." + slot + ".v");
    s.t = af.scalar_u64("adam." + slot + ".t");
    if (s.m.size() != s.v.size()) throw invariant_error("checkpoint: moment size mismatch " + slot);
  }
  return cp;
}

}  // namespace vmfm::train
