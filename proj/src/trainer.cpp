#include "vmfm/trainer.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <json.hpp>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <thread>

#include "vmfm/cl_ops.hpp"
#include "vmfm/hash.hpp"
#include "vmfm/losses.hpp"
#include "vmfm/refinement.hpp"
#include "vmfm/rng.hpp"
#include "vmfm/scene_synth.hpp"

namespace vmfm::train {

namespace {

namespace fs = std::filesystem;
using ad::Var;
using net::Binding;

std::uint64_t stage_index(Stage s) { return static_cast<std::uint64_t>(s); }

const char* branch_tag(int branch) { return branch == 1 ? "s" : "d"; }

std::vector<SampleView> labeled_views(const std::vector<io::CorpusSample>& data) {
  std::vector<SampleView> v;
  v.reserve(data.size());
  for (const auto& s : data) v.push_back(SampleView::labeled(s));
  return v;
}

std::vector<SampleView> unlabeled_views(const std::vector<io::CorpusSample>& data) {
  std::vector<SampleView> v;
  v.reserve(data.size());
  for (const auto& s : data) v.push_back(SampleView::unlabeled(s));
  return v;
}

template <class Get>
Tensor<float> stack_planes(const std::vector<SampleView>& views, const std::vector<int>& idx,
                           Get&& get) {
  const Plane<float>& first = get(views[static_cast<std::size_t>(idx[0])]);
  Tensor<float> t(static_cast<int>(idx.size()), 1, static_cast<int>(first.rows()),
                  static_cast<int>(first.cols()));
  for (std::size_t i = 0; i < idx.size(); ++i)
    t.plane(static_cast<int>(i), 0) = get(views[static_cast<std::size_t>(idx[i])]);
  return t;
}

template <class Get>
Tensor<float> stack_images(const std::vector<SampleView>& views, const std::vector<int>& idx,
                           Get&& get) {
  const Image<float>& first = get(views[static_cast<std::size_t>(idx[0])]);
  Tensor<float> t(static_cast<int>(idx.size()), 3, static_cast<int>(first.rows()),
                  static_cast<int>(first.cols()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Image<float>& im = get(views[static_cast<std::size_t>(idx[i])]);
    for (int c = 0; c < 3; ++c) t.plane(static_cast<int>(i), c) = im.channel(c);
  }
  return t;
}

// Substitute backgrounds for adversarial composites, one fresh field per
// (stage, epoch, corpus index) so discriminators never memorize a backdrop.
Tensor<float> stack_substitute_bg(std::uint64_t run_seed, Stage stage, std::uint64_t epoch,
                                  const std::vector<SampleView>& views,
                                  const std::vector<int>& idx) {
  int h = views[static_cast<std::size_t>(idx[0])].height();
  int w = views[static_cast<std::size_t>(idx[0])].width();
  Tensor<float> t(static_cast<int>(idx.size()), 3, h, w);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::uint64_t s = derive_seed(run_seed, "bbar",
                                  {stage_index(stage), epoch, static_cast<std::uint64_t>(idx[i])});
    Image<float> bg = synth::synth_background(s, h, w);
    for (int c = 0; c < 3; ++c) t.plane(static_cast<int>(i), c) = bg.channel(c);
  }
  return t;
}

struct BatchInputs {
  Var<float> rgb, heatmap, mod1, mod2;
};

BatchInputs batch_inputs(ad::Tape<float>& t, const std::vector<SampleView>& views,
                         const std::vector<int>& idx) {
  BatchInputs in;
  in.rgb = t.constant(stack_images(views, idx, [](const SampleView& v) -> const Image<float>& {
    return v.rgb();
  }));
  in.heatmap = t.constant(stack_planes(views, idx, [](const SampleView& v) -> const Plane<float>& {
    return v.heatmap();
  }));
  in.mod1 = t.constant(stack_planes(views, idx, [](const SampleView& v) -> const Plane<float>& {
    return v.modality(1);
  }));
  in.mod2 = t.constant(stack_planes(views, idx, [](const SampleView& v) -> const Plane<float>& {
    return v.modality(2);
  }));
  return in;
}

double scalar_of(const Var<float>& v) { return static_cast<double>(v->val.v[0]); }

struct TermAccum {
  std::map<std::string, double> sums;
  int batches = 0;

  void add(const std::string& name, double value) { sums[name] += value; }
  void bump() { ++batches; }

  EpochStats mean(std::uint64_t epoch) const {
    EpochStats st;
    st.epoch = epoch;
    for (const auto& [k, v] : sums) st.terms[k] = v / std::max(batches, 1);
    return st;
  }
};

void append_stage_csv(const fs::path& file, const StageResult& res, bool write_header) {
  if (res.epochs.empty()) return;
  std::ofstream out(file, write_header ? std::ios::trunc : std::ios::app);
  if (!out) throw invariant_error("cannot open loss log " + file.string());
  if (write_header) {
    out << "epoch";
    for (const auto& [k, v] : res.epochs.front().terms) out << "," << k;
    out << "\n";
  }
  char buf[64];
  for (const auto& ep : res.epochs) {
    out << ep.epoch;
    for (const auto& [k, v] : ep.terms) {
      std::snprintf(buf, sizeof buf, "%.9g", v);
      out << "," << buf;
    }
    out << "\n";
  }
  if (!out) throw invariant_error("short write on loss log " + file.string());
}

std::vector<std::vector<int>> batch_partition(const std::vector<int>& order, int batch_size) {
  std::vector<std::vector<int>> batches;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace

// ---- config -----------------------------------------------------------------------

void TrainConfig::validate() const {
  if (lr <= 0) throw usage_error("train: lr must be positive");
  if (batch_size < 1) throw usage_error("train: batch_size must be at least 1");
  if (lambda_matte < 0 || lambda_com < 0 || lambda_cl < 0 || lambda_cs < 0 || lambda_dc < 0)
    throw usage_error("train: loss weights must be non-negative");
  if (!(tau > 0.0 && tau < 1.0)) throw usage_error("train: tau must lie strictly inside (0,1)");
  if (patch_count < 0) throw usage_error("train: patch_count must be non-negative");
  if (cl_mode != "full" && cl_mode != "cs_only" && cl_mode != "dc_only")
    throw usage_error("train: cl_mode must be full, cs_only or dc_only");
  for (const char* name : {"pretrain", "sup1", "sup2", "cl_selfsup", "refine"}) {
    auto it = stage_epochs.find(name);
    if (it == stage_epochs.end())
      throw usage_error(std::string("train: missing epoch count for stage ") + name);
    if (it->second < 0)
      throw usage_error(std::string("train: epoch count for stage ") + name +
                        " must be non-negative");
  }
}

// ---- run lock --------------------------------------------------------------------

RunLock::RunLock(const std::filesystem::path& run_dir) {
  fs::create_directories(run_dir);
  path_ = run_dir / ".lock";
  fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd_ < 0) {
    if (errno == EEXIST)
      throw invariant_error("run directory " + run_dir.string() +
                            " is locked by another trainer (.lock exists)");
    throw invariant_error("cannot create lock file " + path_.string() + ": " +
                          std::strerror(errno));
  }
}

RunLock::~RunLock() {
  if (fd_ >= 0) {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
}

// ---- trainer ----------------------------------------------------------------------

Trainer::Trainer(const std::filesystem::path& run_dir, const io::Corpus& corpus, TrainConfig cfg)
    : run_dir_(run_dir), corpus_(&corpus), cfg_(std::move(cfg)), lock_(run_dir) {
  cfg_.validate();
  fs::path cp_dir = run_dir_ / "checkpoint";
  if (fs::exists(cp_dir / "state.json")) {
    cp_ = load_checkpoint(cp_dir);
    if (cp_->state.run_seed != cfg_.seed)
      throw invariant_error("run directory holds a checkpoint for seed " +
                            std::to_string(cp_->state.run_seed) + ", config asks for seed " +
                            std::to_string(cfg_.seed));
    cp_->opt.cfg.lr = cfg_.lr;
  } else {
    optim::AdamConfig ocfg;
    ocfg.lr = cfg_.lr;
    cp_ = std::make_unique<Checkpoint>(cfg_.seed, ocfg);
    cp_->state.image_size = corpus.meta().synth.image_size;
  }
}

std::vector<int> Trainer::epoch_order(Stage stage, std::uint64_t epoch, int count) const {
  std::vector<int> order(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
  auto eng = make_engine(derive_seed(cfg_.seed, "shuffle", {stage_index(stage), epoch}));
  shuffle_indices(order, eng);
  return order;
}

// Sample files load in parallel when VMFM_LOAD_THREADS asks for it; slots are
// preassigned by index, so thread count never changes the cached contents.
void Trainer::load_split(const std::string& split, std::vector<io::CorpusSample>& cache) const {
  if (!cache.empty()) return;
  const int n = corpus_->count(split);
  cache.resize(static_cast<std::size_t>(n));

  int threads = 1;
  if (const char* env = std::getenv("VMFM_LOAD_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end && *end == '\0' && v >= 1 && v <= 64) threads = static_cast<int>(v);
  }
  threads = std::min(threads, std::max(n, 1));

  if (threads == 1) {
    for (int i = 0; i < n; ++i) cache[static_cast<std::size_t>(i)] = corpus_->load(split, i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errs(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (int i = t; i < n; i += threads)
          cache[static_cast<std::size_t>(i)] = corpus_->load(split, i);
      } catch (...) {
        errs[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

StageResult Trainer::run_stage(Stage stage, int epochs) {
  check_stage_order(cp_->state.stage_history, stage);
  if (epochs < 0) epochs = cfg_.epochs_for(stage);

  std::uint64_t first = 0;
  auto it = cp_->state.stage_epochs.find(stage_name(stage));
  if (it != cp_->state.stage_epochs.end()) first = it->second;

  StageResult res;
  switch (stage) {
    case Stage::pretrain: res = run_pretrain(first, epochs); break;
    case Stage::sup1: res = run_supervised(Stage::sup1, first, epochs); break;
    case Stage::sup2: res = run_supervised(Stage::sup2, first, epochs); break;
    case Stage::cl_selfsup: res = run_cl_selfsup(first, epochs); break;
    case Stage::refine: res = run_refine(first, epochs); break;
  }
  finish_stage(stage, res, first);
  return res;
}

void Trainer::finish_stage(Stage stage, StageResult& result, std::uint64_t first_epoch) {
  result.stage = stage;
  const std::string name = stage_name(stage);
  cp_->state.stage_epochs[name] = first_epoch + result.epochs.size();
  auto& hist = cp_->state.stage_history;
  if (std::find(hist.begin(), hist.end(), name) == hist.end()) hist.push_back(name);

  save_checkpoint(run_dir_ / "checkpoint", *cp_);
  fs::create_directories(run_dir_ / "logs");
  append_stage_csv(run_dir_ / "logs" / (name + ".csv"), result, first_epoch == 0);
  write_run_manifest();
}

void Trainer::write_run_manifest() const {
  nlohmann::json j;
  j["kind"] = "vmfm-run";
  j["format_version"] = 1;
  j["seed"] = cfg_.seed;
  j["corpus_dir"] = corpus_->dir().string();
  j["corpus_seed"] = corpus_->meta().seed;
  j["corpus_manifest_checksum"] = to_hex(io::file_checksum(corpus_->dir() / "manifest.json"));
  j["image_size"] = cp_->state.image_size;
  j["batch_size"] = cfg_.batch_size;
  j["lr"] = cfg_.lr;
  j["patch_count"] = cfg_.patch_count;
  j["lambda"] = {{"matte", cfg_.lambda_matte}, {"com", cfg_.lambda_com},
                 {"cl", cfg_.lambda_cl},       {"cs", cfg_.lambda_cs},
                 {"dc", cfg_.lambda_dc}};
  // what the self-supervised round actually applies after the ablation gate
  j["lambda_effective"] = {{"cs", cfg_.cl_mode == "dc_only" ? 0.0 : cfg_.lambda_cs},
                           {"dc", cfg_.cl_mode == "cs_only" ? 0.0 : cfg_.lambda_dc}};
  j["tau"] = cfg_.tau;
  j["cl_mode"] = cfg_.cl_mode;
  j["stage_history"] = cp_->state.stage_history;
  j["stage_epochs"] = cp_->state.stage_epochs;
  j["checkpoint"] = {{"dir", "checkpoint"},
                     {"weights", "checkpoint/model.vmt"},
                     {"state", "checkpoint/state.json"}};
  nlohmann::json curves = nlohmann::json::object();
  for (const auto& [name, done] : cp_->state.stage_epochs)
    if (done > 0) curves[name] = "logs/" + name + ".csv";
  j["loss_curves"] = curves;
  std::ofstream out(run_dir_ / "run.json", std::ios::trunc);
  if (!out) throw invariant_error("cannot write run manifest in " + run_dir_.string());
  out << j.dump(2) << "\n";
}

Plane<float> Trainer::predict_matte(const SampleView& v, int branch) {
  ad::Tape<float> t;
  auto rgb = t.constant(tensor_from_image(v.rgb()));
  auto mod = t.constant(tensor_from_plane(v.modality(branch)));
  auto hm = t.constant(tensor_from_plane(v.heatmap()));
  auto a = net::fp_forward(t, branch == 1 ? cp_->models.fp1 : cp_->models.fp2, rgb, mod, hm);
  return a->val.plane(0, 0);
}

// ---- stage: pretrain ---------------------------------------------------------------
//
// Supervised matte regression for both branches on the pretrain split.

StageResult Trainer::run_pretrain(std::uint64_t first, int epochs) {
  load_split("pretrain", pretrain_);
  auto views = labeled_views(pretrain_);
  auto& m = cp_->models;

  StageResult res;
  for (int k = 0; k < epochs; ++k) {
    std::uint64_t e = first + static_cast<std::uint64_t>(k);
    TermAccum acc;
    for (const auto& b : batch_partition(epoch_order(Stage::pretrain, e,
                                                     static_cast<int>(views.size())),
                                         cfg_.batch_size)) {
      ad::Tape<float> t;
      Binding<float> bind;
      BatchInputs in = batch_inputs(t, views, b);
      auto gt = t.constant(stack_planes(views, b, [](const SampleView& v) -> const Plane<float>& {
        return v.alpha();
      }));
      auto a1 = net::fp_forward(t, m.fp1, in.rgb, in.mod1, in.heatmap, &bind);
      auto a2 = net::fp_forward(t, m.fp2, in.rgb, in.mod2, in.heatmap, &bind);
      auto l1 = loss::matte_loss(a1, gt);
      auto l2 = loss::matte_loss(a2, gt);
      t.backward(ad::add(l1, l2));
      cp_->opt.step(bind);
      acc.add("matte_s", scalar_of(l1));
      acc.add("matte_d", scalar_of(l2));
      acc.bump();
    }
    res.epochs.push_back(acc.mean(e));
  }
  return res;
}

// ---- stages: sup1 and sup2 ----------------------------------------------------------
//
// Alternating generator/critic steps per batch. The generator composites its
// matte over true foreground and a substitute background; the critic compares
// those against composites made with the reference matte. sup2 additionally
// fits the deviation estimator to widened matte residuals.

StageResult Trainer::run_supervised(Stage stage, std::uint64_t first, int epochs) {
  load_split("labeled-train", labeled_);
  auto views = labeled_views(labeled_);
  auto& m = cp_->models;
  const bool fit_cl = stage == Stage::sup2;

  StageResult res;
  for (int k = 0; k < epochs; ++k) {
    std::uint64_t e = first + static_cast<std::uint64_t>(k);
    TermAccum acc;
    for (const auto& b : batch_partition(epoch_order(stage, e, static_cast<int>(views.size())),
                                         cfg_.batch_size)) {
      Tensor<float> bbar = stack_substitute_bg(cfg_.seed, stage, e, views, b);
      Tensor<float> alpha = stack_planes(views, b, [](const SampleView& v) -> const Plane<float>& {
        return v.alpha();
      });
      Tensor<float> fg = stack_images(views, b, [](const SampleView& v) -> const Image<float>& {
        return v.fg();
      });
      Tensor<float> bg = stack_images(views, b, [](const SampleView& v) -> const Image<float>& {
        return v.bg();
      });

      // generator step, critics frozen
      {
        ad::Tape<float> t;
        Binding<float> bind;
        BatchInputs in = batch_inputs(t, views, b);
        auto fgC = t.constant(fg);
        auto bgC = t.constant(bg);
        auto bbarC = t.constant(bbar);
        auto gtC = t.constant(alpha);
        Var<float> total;
        for (int branch : {1, 2}) {
          auto& fp = branch == 1 ? m.fp1 : m.fp2;
          auto& disc = branch == 1 ? m.disc1 : m.disc2;
          auto a = net::fp_forward(t, fp, in.rgb, branch == 1 ? in.mod1 : in.mod2, in.heatmap,
                                   &bind);
          auto comp = loss::composite_v(a, fgC, bbarC);
          auto adv = loss::adv_real_target_loss(net::disc_forward(t, disc, comp));
          auto lm = loss::matte_loss(a, gtC);
          auto lcom = loss::composition_loss(a, fgC, bgC, in.rgb);
          auto g = ad::add(adv, ad::add(ad::mul_scalar(lm, float(cfg_.lambda_matte)),
                                        ad::mul_scalar(lcom, float(cfg_.lambda_com))));
          total = total ? ad::add(total, g) : g;
          acc.add(std::string("adv_") + branch_tag(branch), scalar_of(adv));
          acc.add(std::string("matte_") + branch_tag(branch), scalar_of(lm));
          acc.add(std::string("com_") + branch_tag(branch), scalar_of(lcom));
        }
        t.backward(total);
        cp_->opt.step(bind);
      }

      // critic step against composites from the reference matte; generator frozen
      Tensor<float> matte1, matte2;
      {
        ad::Tape<float> t;
        Binding<float> bind;
        BatchInputs in = batch_inputs(t, views, b);
        auto fgC = t.constant(fg);
        auto bbarC = t.constant(bbar);
        auto gtC = t.constant(alpha);
        auto real = loss::composite_v(gtC, fgC, bbarC);
        Var<float> total;
        for (int branch : {1, 2}) {
          auto& fp = branch == 1 ? m.fp1 : m.fp2;
          auto& disc = branch == 1 ? m.disc1 : m.disc2;
          auto a = net::fp_forward(t, fp, in.rgb, branch == 1 ? in.mod1 : in.mod2, in.heatmap);
          (branch == 1 ? matte1 : matte2) = a->val;
          auto fake = loss::composite_v(a, fgC, bbarC);
          auto d = ad::add(loss::adv_fake_target_loss(net::disc_forward(t, disc, fake, &bind)),
                           loss::adv_real_target_loss(net::disc_forward(t, disc, real, &bind)));
          total = total ? ad::add(total, d) : d;
          acc.add(std::string("disc_") + branch_tag(branch), scalar_of(d));
        }
        t.backward(total);
        cp_->opt.step(bind);
      }

      // deviation estimator fit on widened residuals of the frozen mattes
      if (fit_cl) {
        ad::Tape<float> t;
        Binding<float> bind;
        auto rgbC = t.constant(stack_images(views, b, [](const SampleView& v) -> const Image<float>& {
          return v.rgb();
        }));
        Var<float> total;
        for (int branch : {1, 2}) {
          const Tensor<float>& matte = branch == 1 ? matte1 : matte2;
          Tensor<float> target(matte.n, 1, matte.h, matte.w);
          for (int i = 0; i < matte.n; ++i) {
            Plane<float> residual = (matte.plane(i, 0) - alpha.plane(i, 0)).abs();
            target.plane(i, 0) = cl::q_widen(residual);
          }
          auto pred = net::cl_forward(t, m.cl, branch, rgbC, t.constant(matte), &bind);
          auto lfit = loss::cl_regression_loss(pred, t.constant(target));
          total = total ? ad::add(total, lfit) : lfit;
          acc.add(std::string("clfit_") + branch_tag(branch), scalar_of(lfit));
        }
        t.backward(total);
        cp_->opt.step(bind);
      }
      acc.bump();
    }
    res.epochs.push_back(acc.mean(e));
  }
  return res;
}

// ---- stage: cl_selfsup ----------------------------------------------------------------
//
// Self-supervised round on unlabeled frames. Each branch is pulled toward the
// other branch's matte where the other's saturated deviation map is strictly
// lower, and pushed to shrink its own raw deviation where both maps saturate.
// Composites reuse the frame itself as foreground. The deviation estimator
// stays frozen throughout; only its input gradient reaches the mattes.

StageResult Trainer::run_cl_selfsup(std::uint64_t first, int epochs) {
  load_split("unlabeled-train", unlabeled_);
  auto views = unlabeled_views(unlabeled_);
  auto& m = cp_->models;
  const bool use_cs = cfg_.cl_mode != "dc_only";
  const bool use_dc = cfg_.cl_mode != "cs_only";
  const float tau = static_cast<float>(cfg_.tau);

  StageResult res;
  for (int k = 0; k < epochs; ++k) {
    std::uint64_t e = first + static_cast<std::uint64_t>(k);
    TermAccum acc;
    for (const auto& b : batch_partition(epoch_order(Stage::cl_selfsup, e,
                                                     static_cast<int>(views.size())),
                                         cfg_.batch_size)) {
      Tensor<float> bbar = stack_substitute_bg(cfg_.seed, Stage::cl_selfsup, e, views, b);

      // generator step
      {
        ad::Tape<float> t;
        Binding<float> bind;
        BatchInputs in = batch_inputs(t, views, b);
        auto bbarC = t.constant(bbar);
        auto a1 = net::fp_forward(t, m.fp1, in.rgb, in.mod1, in.heatmap, &bind);
        auto a2 = net::fp_forward(t, m.fp2, in.rgb, in.mod2, in.heatmap, &bind);
        auto raw1 = net::cl_forward(t, m.cl, 1, in.rgb, a1);
        auto raw2 = net::cl_forward(t, m.cl, 2, in.rgb, a2);

        const int n = raw1->val.n, h = raw1->val.h, w = raw1->val.w;
        Tensor<float> beta1(n, 1, h, w), beta2(n, 1, h, w), sigma(n, 1, h, w);
        for (int i = 0; i < n; ++i) {
          Plane<float> thr1 = cl::threshold_update(Plane<float>(raw1->val.plane(i, 0)), tau);
          Plane<float> thr2 = cl::threshold_update(Plane<float>(raw2->val.plane(i, 0)), tau);
          auto [b1, b2] = cl::complementary_area(thr1, thr2);
          beta1.plane(i, 0) = b1.cast<float>();
          beta2.plane(i, 0) = b2.cast<float>();
          sigma.plane(i, 0) = cl::deviation_correction_area(thr1, thr2).cast<float>();
        }
        auto sigmaC = t.constant(sigma);

        Var<float> total;
        for (int branch : {1, 2}) {
          auto& a = branch == 1 ? a1 : a2;
          auto& other = branch == 1 ? a2 : a1;
          auto& raw = branch == 1 ? raw1 : raw2;
          auto& disc = branch == 1 ? m.disc1 : m.disc2;
          auto betaC = t.constant(branch == 1 ? beta1 : beta2);

          auto comp = loss::composite_v(a, in.rgb, bbarC);
          auto adv = loss::adv_real_target_loss(net::disc_forward(t, disc, comp));
          auto lcs = loss::cross_supervision_loss(a, ad::detach(other), betaC);
          auto ldc = loss::deviation_correction_loss(raw, sigmaC);

          Var<float> cl_term;
          if (use_cs) cl_term = ad::mul_scalar(lcs, float(cfg_.lambda_cs));
          if (use_dc) {
            auto dcw = ad::mul_scalar(ldc, float(cfg_.lambda_dc));
            cl_term = cl_term ? ad::add(cl_term, dcw) : dcw;
          }
          auto g = ad::add(adv, ad::mul_scalar(cl_term, float(cfg_.lambda_cl)));
          total = total ? ad::add(total, g) : g;
          acc.add(std::string("adv_") + branch_tag(branch), scalar_of(adv));
          acc.add(std::string("cs_") + branch_tag(branch), scalar_of(lcs));
          acc.add(std::string("dc_") + branch_tag(branch), scalar_of(ldc));
        }
        t.backward(total);
        cp_->opt.step(bind);
      }

      // critic step: frame itself is the real sample, recomposite is the fake
      {
        ad::Tape<float> t;
        Binding<float> bind;
        BatchInputs in = batch_inputs(t, views, b);
        auto bbarC = t.constant(bbar);
        Var<float> total;
        for (int branch : {1, 2}) {
          auto& fp = branch == 1 ? m.fp1 : m.fp2;
          auto& disc = branch == 1 ? m.disc1 : m.disc2;
          auto a = net::fp_forward(t, fp, in.rgb, branch == 1 ? in.mod1 : in.mod2, in.heatmap);
          auto fake = loss::composite_v(a, in.rgb, bbarC);
          auto d = ad::add(loss::adv_fake_target_loss(net::disc_forward(t, disc, fake, &bind)),
                           loss::adv_real_target_loss(net::disc_forward(t, disc, in.rgb, &bind)));
          total = total ? ad::add(total, d) : d;
          acc.add(std::string("disc_") + branch_tag(branch), scalar_of(d));
        }
        t.backward(total);
        cp_->opt.step(bind);
      }
      acc.bump();
    }
    res.epochs.push_back(acc.mean(e));
  }
  return res;
}

// ---- stage: refine ------------------------------------------------------------------
//
// Patch head training. Matting networks and the deviation estimator are
// frozen; the raw deviation map picks the worst patches per branch and the
// patch head regresses those regions toward the reference matte.

StageResult Trainer::run_refine(std::uint64_t first, int epochs) {
  load_split("labeled-train", labeled_);
  auto views = labeled_views(labeled_);
  auto& m = cp_->models;

  StageResult res;
  for (int k = 0; k < epochs; ++k) {
    std::uint64_t e = first + static_cast<std::uint64_t>(k);
    TermAccum acc;
    for (const auto& b : batch_partition(epoch_order(Stage::refine, e,
                                                     static_cast<int>(views.size())),
                                         cfg_.batch_size)) {
      std::vector<Plane<float>> matte_patches, rgb_r, rgb_g, rgb_b, gt_patches;
      {
        ad::Tape<float> t;
        BatchInputs in = batch_inputs(t, views, b);
        for (int branch : {1, 2}) {
          auto& fp = branch == 1 ? m.fp1 : m.fp2;
          auto a = net::fp_forward(t, fp, in.rgb, branch == 1 ? in.mod1 : in.mod2, in.heatmap);
          auto raw = net::cl_forward(t, m.cl, branch, in.rgb, a);
          for (std::size_t i = 0; i < b.size(); ++i) {
            const SampleView& v = views[static_cast<std::size_t>(b[i])];
            Plane<double> deviation = raw->val.plane(static_cast<int>(i), 0).cast<double>();
            auto wins = refinement::select_topk_patches(deviation, cfg_.patch_count);
            for (const auto& win : wins) {
              Plane<float> mp = refinement::extract_patch(
                  Plane<float>(a->val.plane(static_cast<int>(i), 0)), win);
              matte_patches.push_back(mp);
              Image<float> rp = refinement::extract_patch(v.rgb(), win);
              rgb_r.push_back(rp.r);
              rgb_g.push_back(rp.g);
              rgb_b.push_back(rp.b);
              gt_patches.push_back(refinement::extract_patch(v.alpha(), win));
            }
          }
        }
      }

      const int p = static_cast<int>(matte_patches.size());
      if (p == 0) continue;
      const int s = refinement::kPatchSize;
      Tensor<float> mt(p, 1, s, s), rt(p, 3, s, s), gt(p, 1, s, s);
      for (int i = 0; i < p; ++i) {
        mt.plane(i, 0) = matte_patches[static_cast<std::size_t>(i)];
        rt.plane(i, 0) = rgb_r[static_cast<std::size_t>(i)];
        rt.plane(i, 1) = rgb_g[static_cast<std::size_t>(i)];
        rt.plane(i, 2) = rgb_b[static_cast<std::size_t>(i)];
        gt.plane(i, 0) = gt_patches[static_cast<std::size_t>(i)];
      }

      ad::Tape<float> t;
      Binding<float> bind;
      auto refined = net::rn_forward(t, m.rn, t.constant(mt), t.constant(rt), &bind);
      auto lp = loss::matte_loss(refined, t.constant(gt));
      t.backward(lp);
      cp_->opt.step(bind);
      acc.add("patch_matte", scalar_of(lp));
      acc.bump();
    }
    res.epochs.push_back(acc.mean(e));
  }
  return res;
}

}  // namespace vmfm::train
