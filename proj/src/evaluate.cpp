#include "vmfm/evaluate.hpp"

#include <json.hpp>

#include <cctype>
#include <cstdio>
#include <fstream>

#include "vmfm/composite.hpp"
#include "vmfm/png_io.hpp"
#include "vmfm/refinement.hpp"

namespace vmfm::eval {

namespace {

namespace fs = std::filesystem;

std::string normalize_pipeline(const std::string& pipeline) {
  std::string p = pipeline;
  for (char& c : p) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return p;
}

int branch_of(const std::string& pipeline) {
  if (pipeline == "s" || pipeline == "s+rn") return 1;
  if (pipeline == "d" || pipeline == "d+rn") return 2;
  throw usage_error("unknown pipeline '" + pipeline + "' (expected s, d, s+rn, d+rn or gt)");
}

Plane<float> branch_matte(net::Models<float>& m, const io::CorpusSample& sample, int branch) {
  ad::Tape<float> t;
  auto rgb = t.constant(tensor_from_image(sample.scene.rgb));
  auto mod = t.constant(tensor_from_plane(branch == 1 ? sample.mods.seg : sample.mods.depth));
  auto hm = t.constant(tensor_from_plane(sample.mods.heatmap));
  auto a = net::fp_forward(t, branch == 1 ? m.fp1 : m.fp2, rgb, mod, hm);
  return a->val.plane(0, 0);
}

Plane<float> refine_matte(net::Models<float>& m, const io::CorpusSample& sample,
                          const Plane<float>& matte, int branch, int patch_count) {
  ad::Tape<float> t;
  auto rgb = t.constant(tensor_from_image(sample.scene.rgb));
  auto raw = net::cl_forward(t, m.cl, branch, rgb, t.constant(tensor_from_plane(matte)));
  Plane<float> deviation = raw->val.plane(0, 0);
  auto wins = refinement::select_topk_patches(deviation, patch_count);
  if (wins.empty()) return matte;

  const int p = static_cast<int>(wins.size());
  const int s = refinement::kPatchSize;
  Tensor<float> mt(p, 1, s, s), rt(p, 3, s, s);
  for (int i = 0; i < p; ++i) {
    mt.plane(i, 0) = refinement::extract_patch(matte, wins[static_cast<std::size_t>(i)]);
    Image<float> rp = refinement::extract_patch(sample.scene.rgb, wins[static_cast<std::size_t>(i)]);
    rt.plane(i, 0) = rp.r;
    rt.plane(i, 1) = rp.g;
    rt.plane(i, 2) = rp.b;
  }
  auto refined = net::rn_forward(t, m.rn, t.constant(mt), t.constant(rt));
  std::vector<Plane<float>> patches;
  patches.reserve(static_cast<std::size_t>(p));
  for (int i = 0; i < p; ++i) patches.push_back(Plane<float>(refined->val.plane(i, 0)));
  return refinement::merge_patches(matte, wins, patches);
}

void accumulate(metrics::MetricValues& into, const metrics::MetricValues& v) {
  into.sad += v.sad;
  into.mse += v.mse;
  into.grad += v.grad;
  into.conn += v.conn;
}

metrics::MetricValues scaled(const metrics::MetricValues& v, double k) {
  return {v.sad * k, v.mse * k, v.grad * k, v.conn * k};
}

nlohmann::json metric_json(const metrics::MetricValues& v) {
  return {{"sad", v.sad}, {"mse", v.mse}, {"grad", v.grad}, {"conn", v.conn}};
}

metrics::MetricValues metric_from_json(const nlohmann::json& j) {
  metrics::MetricValues v;
  v.sad = j.at("sad").get<double>();
  v.mse = j.at("mse").get<double>();
  v.grad = j.at("grad").get<double>();
  v.conn = j.at("conn").get<double>();
  return v;
}

nlohmann::json region_json(const metrics::RegionReport& r) {
  return {{"all", metric_json(r.all)},
          {"human", metric_json(r.human)},
          {"object", metric_json(r.object)},
          {"rest", metric_json(r.rest)}};
}

metrics::RegionReport region_from_json(const nlohmann::json& j) {
  metrics::RegionReport r;
  r.all = metric_from_json(j.at("all"));
  r.human = metric_from_json(j.at("human"));
  r.object = metric_from_json(j.at("object"));
  r.rest = metric_from_json(j.at("rest"));
  return r;
}

void csv_region_row(std::string& out, const std::string& index, const char* region,
                    const metrics::MetricValues& v) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s,%s,%.9g,%.9g,%.9g,%.9g\n", index.c_str(), region, v.sad,
                v.mse, v.grad, v.conn);
  out += buf;
}

void append_region_rows(std::string& out, const std::string& index,
                        const metrics::RegionReport& r) {
  csv_region_row(out, index, "all", r.all);
  csv_region_row(out, index, "human", r.human);
  csv_region_row(out, index, "object", r.object);
  csv_region_row(out, index, "rest", r.rest);
}

// A circle that covers the object mask's bounding box, for trimap rendering.
std::vector<metrics::Circle> object_circles(const MaskPlane& object_mask) {
  int y0 = static_cast<int>(object_mask.rows()), y1 = -1;
  int x0 = static_cast<int>(object_mask.cols()), x1 = -1;
  for (int y = 0; y < object_mask.rows(); ++y)
    for (int x = 0; x < object_mask.cols(); ++x)
      if (object_mask(y, x)) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  if (y1 < 0) return {};
  metrics::Circle c;
  c.cy = (y0 + y1) / 2;
  c.cx = (x0 + x1) / 2;
  c.r = std::max(y1 - y0, x1 - x0) / 2 + 2;
  return {c};
}

Plane<float> trimap_gray(const MaskPlane& trimap) {
  Plane<float> out(trimap.rows(), trimap.cols());
  for (Eigen::Index i = 0; i < trimap.size(); ++i) {
    auto label = static_cast<metrics::TrimapLabel>(trimap.data()[i]);
    out.data()[i] = label == metrics::TrimapLabel::foreground
                        ? 1.0f
                        : (label == metrics::TrimapLabel::unknown ? 0.5f : 0.0f);
  }
  return out;
}

}  // namespace

Plane<float> run_inference(net::Models<float>& models, const io::CorpusSample& sample,
                           const std::string& pipeline, int patch_count) {
  const std::string p = normalize_pipeline(pipeline);
  if (p == "gt") return sample.scene.alpha;
  int branch = branch_of(p);
  Plane<float> matte = branch_matte(models, sample, branch);
  if (p == "s+rn" || p == "d+rn") matte = refine_matte(models, sample, matte, branch, patch_count);
  return matte;
}

Image<float> export_composite(const Image<float>& rgb, const Plane<float>& matte,
                              const std::string& bg_color) {
  Image<float> backing;
  if (bg_color == "green")
    backing = solid_image(matte.rows(), matte.cols(), 0.0f, 1.0f, 0.0f);
  else if (bg_color == "blue")
    backing = solid_image(matte.rows(), matte.cols(), 0.0f, 0.0f, 1.0f);
  else
    throw usage_error("unknown backing color '" + bg_color + "' (expected green or blue)");
  return composite(rgb, backing, matte);
}

Plane<float> deviation_map(net::Models<float>& models, const io::CorpusSample& sample,
                           int branch) {
  Plane<float> matte = branch_matte(models, sample, branch);
  ad::Tape<float> t;
  auto rgb = t.constant(tensor_from_image(sample.scene.rgb));
  auto raw = net::cl_forward(t, models.cl, branch, rgb, t.constant(tensor_from_plane(matte)));
  return raw->val.plane(0, 0);
}

SplitReport evaluate_split(net::Models<float>& models, const io::Corpus& corpus,
                           const std::string& split, const std::string& pipeline,
                           int patch_count) {
  SplitReport rep;
  rep.split = split;
  rep.pipeline = normalize_pipeline(pipeline);
  rep.count = corpus.count(split);
  if (rep.count == 0) throw invariant_error("split '" + split + "' is empty");

  for (int i = 0; i < rep.count; ++i) {
    io::CorpusSample sample = corpus.load(split, i);
    Plane<float> pd = run_inference(models, sample, rep.pipeline, patch_count);
    auto masks = metrics::make_region_masks(sample.scene.human_mask, sample.scene.object_mask);
    rep.samples.push_back(metrics::evaluate_regions(pd, sample.scene.alpha, masks));
  }

  metrics::RegionReport sum;
  for (const auto& r : rep.samples) {
    accumulate(sum.all, r.all);
    accumulate(sum.human, r.human);
    accumulate(sum.object, r.object);
    accumulate(sum.rest, r.rest);
  }
  const double inv = 1.0 / rep.count;
  rep.mean.all = scaled(sum.all, inv);
  rep.mean.human = scaled(sum.human, inv);
  rep.mean.object = scaled(sum.object, inv);
  rep.mean.rest = scaled(sum.rest, inv);
  return rep;
}

std::string report_to_json(const SplitReport& rep) {
  nlohmann::json j;
  j["kind"] = "vmfm-eval";
  j["format_version"] = 1;
  j["split"] = rep.split;
  j["pipeline"] = rep.pipeline;
  j["count"] = rep.count;
  j["mean"] = region_json(rep.mean);
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& r : rep.samples) samples.push_back(region_json(r));
  j["samples"] = samples;
  return j.dump(2) + "\n";
}

SplitReport report_from_json(const std::string& text) {
  try {
    nlohmann::json j = nlohmann::json::parse(text);
    if (j.at("kind").get<std::string>() != "vmfm-eval")
      throw invariant_error("not an evaluation report");
    if (j.at("format_version").get<int>() != 1)
      throw invariant_error("unsupported evaluation report version");
    SplitReport rep;
    rep.split = j.at("split").get<std::string>();
    rep.pipeline = j.at("pipeline").get<std::string>();
    rep.count = j.at("count").get<int>();
    rep.mean = region_from_json(j.at("mean"));
    for (const auto& s : j.at("samples")) rep.samples.push_back(region_from_json(s));
    return rep;
  } catch (const nlohmann::json::exception& e) {
    throw invariant_error(std::string("malformed evaluation report: ") + e.what());
  }
}

std::string report_to_csv(const SplitReport& rep) {
  std::string out = "index,region,sad,mse,grad,conn\n";
  for (std::size_t i = 0; i < rep.samples.size(); ++i)
    append_region_rows(out, std::to_string(i), rep.samples[i]);
  append_region_rows(out, "mean", rep.mean);
  return out;
}

// Table applies the conventional display scales (raw stays in json/csv):
// optional sad/1e3, mse in units of 1e-2, grad in units of 1e2, conn in 1e3.
std::string report_table(const SplitReport& rep, bool sad_kilo) {
  char buf[200];
  std::string out;
  std::snprintf(buf, sizeof buf, "split %s, pipeline %s, %d samples\n", rep.split.c_str(),
                rep.pipeline.c_str(), rep.count);
  out += buf;
  std::snprintf(buf, sizeof buf, "%-8s %12s %12s %12s %12s\n", "region",
                sad_kilo ? "sad/1e3" : "sad", "mse*1e2", "grad/1e2", "conn/1e3");
  out += buf;
  auto row = [&](const char* name, const metrics::MetricValues& v) {
    std::snprintf(buf, sizeof buf, "%-8s %12.4f %12.4f %12.4f %12.4f\n", name,
                  sad_kilo ? v.sad / 1000.0 : v.sad, v.mse * 100.0, v.grad / 100.0,
                  v.conn / 1000.0);
    out += buf;
  };
  row("all", rep.mean.all);
  row("human", rep.mean.human);
  row("object", rep.mean.object);
  row("rest", rep.mean.rest);
  return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw missing_artifact_error("cannot open " + path.string() + " for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw invariant_error("short write on " + path.string());
}

void export_scene(const fs::path& dir, const io::CorpusSample& sample) {
  fs::create_directories(dir);
  png::write_rgb(dir / "rgb.png", sample.scene.rgb);
  png::write_rgb(dir / "fg.png", sample.scene.fg);
  png::write_rgb(dir / "bg.png", sample.scene.bg);
  png::write_gray(dir / "alpha.png", sample.scene.alpha);
  png::write_gray(dir / "seg.png", sample.mods.seg);
  png::write_gray(dir / "depth.png", sample.mods.depth);
  png::write_gray(dir / "heatmap.png", sample.mods.heatmap);
  png::write_gray(dir / "human_mask.png", Plane<float>(sample.scene.human_mask.cast<float>()));
  png::write_gray(dir / "object_mask.png", Plane<float>(sample.scene.object_mask.cast<float>()));
  MaskPlane trimap =
      metrics::generate_trimap(sample.mods.seg, object_circles(sample.scene.object_mask));
  png::write_gray(dir / "trimap.png", trimap_gray(trimap));
}

void export_inference(const fs::path& dir, net::Models<float>& models,
                      const io::CorpusSample& sample, const std::string& pipeline) {
  fs::create_directories(dir);
  const std::string p = normalize_pipeline(pipeline);
  Plane<float> matte = run_inference(models, sample, p);
  png::write_gray(dir / "matte.png", matte);
  png::write_rgb(dir / "composite_green.png", export_composite(sample.scene.rgb, matte, "green"));
  png::write_rgb(dir / "composite_blue.png", export_composite(sample.scene.rgb, matte, "blue"));
  if (p != "gt") {
    png::write_gray(dir / "deviation_s.png", deviation_map(models, sample, 1));
    png::write_gray(dir / "deviation_d.png", deviation_map(models, sample, 2));
  }
}

}  // namespace vmfm::eval
