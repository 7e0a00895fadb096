#include "vmfm/corpus_io.hpp"

#include <json.hpp>

#include <cinttypes>
#include <cstdio>
#include <fstream>

namespace vmfm::io {

using nlohmann::json;

namespace {

std::string sample_file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%06d.vmt", index);
  return buf;
}

std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw missing_artifact_error("missing artifact: " + p.string());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_text_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw missing_artifact_error("cannot open for writing: " + p.string());
  f << text;
  if (!f) throw invariant_error("short write: " + p.string());
}

}  // namespace

void CorpusConfig::validate() const {
  synth.validate();
  for (const auto& name : split_names()) {
    auto it = split_counts.find(name);
    if (it == split_counts.end())
      throw std::invalid_argument("CorpusConfig: missing split count for " + name);
    if (it->second < 0) throw std::invalid_argument("CorpusConfig: negative count for " + name);
  }
  for (const auto& [name, count] : split_counts) {
    (void)count;
    bool known = false;
    for (const auto& k : split_names()) known = known || k == name;
    if (!known) throw std::invalid_argument("CorpusConfig: unknown split " + name);
  }
}

ArrayFile pack_sample(const CorpusSample& s) {
  ArrayFile af;
  af.add_scalar_u64("seed", s.scene.seed);
  af.add_scalar_u64("interactive", s.scene.interactive ? 1 : 0);
  af.add_image("rgb", s.scene.rgb);
  af.add_image("fg", s.scene.fg);
  af.add_image("bg", s.scene.bg);
  af.add_plane("alpha", s.scene.alpha);
  af.add_plane("depth", s.mods.depth);
  af.add_plane("seg", s.mods.seg);
  af.add_plane("heatmap", s.mods.heatmap);
  af.add_mask("human_mask", s.scene.human_mask);
  af.add_mask("object_mask", s.scene.object_mask);
  return af;
}

CorpusSample unpack_sample(const ArrayFile& af, const std::string& origin) {
  CorpusSample s;
  try {
    s.scene.seed = af.scalar_u64("seed");
    s.scene.interactive = af.scalar_u64("interactive") != 0;
    s.scene.rgb = af.image("rgb");
    s.scene.fg = af.image("fg");
    s.scene.bg = af.image("bg");
    s.scene.alpha = af.plane("alpha");
    s.mods.depth = af.plane("depth");
    s.mods.seg = af.plane("seg");
    s.mods.heatmap = af.plane("heatmap");
    s.scene.human_mask = af.mask("human_mask");
    s.scene.object_mask = af.mask("object_mask");
  } catch (const invariant_error& e) {
    throw invariant_error(std::string(e.what()) + " (in " + origin + ")");
  }
  s.scene.h = static_cast<int>(s.scene.alpha.rows());
  s.scene.w = static_cast<int>(s.scene.alpha.cols());
  return s;
}

CorpusMeta write_corpus(const std::filesystem::path& dir, const CorpusConfig& cfg, bool force,
                        std::ostream* log) {
  cfg.validate();
  namespace fs = std::filesystem;
  if (fs::exists(dir) && !fs::is_directory(dir))
    throw invariant_error("corpus path exists and is not a directory: " + dir.string());
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw invariant_error("corpus directory not empty (use --force to overwrite): " + dir.string());
  fs::create_directories(dir);

  CorpusMeta meta;
  meta.seed = cfg.seed;
  meta.synth = cfg.synth;

  for (std::size_t split_ix = 0; split_ix < split_names().size(); ++split_ix) {
    const std::string& split = split_names()[split_ix];
    const int count = cfg.split_counts.at(split);
    fs::create_directories(dir / split);
    SplitMeta sm;
    sm.count = count;
    for (int i = 0; i < count; ++i) {
      std::uint64_t sample_seed =
          derive_seed(cfg.seed, "sample", {static_cast<std::uint64_t>(split_ix),
                                           static_cast<std::uint64_t>(i)});
      CorpusSample s;
      s.scene = synth::synth_scene(sample_seed, cfg.synth);
      s.mods = synth::derive_modalities(s.scene);
      const std::string fname = sample_file_name(i);
      const fs::path fpath = dir / split / fname;
      pack_sample(s).write(fpath);
      sm.files.push_back(fname);
      sm.checksums.push_back(to_hex(file_checksum(fpath)));
      sm.seeds.push_back(sample_seed);
      if (s.scene.interactive) sm.interactive_count++;
    }
    meta.splits[split] = std::move(sm);
    if (log)
      (*log) << "split " << split << ": " << count << " samples, "
             << meta.splits[split].interactive_count << " interactive\n";
  }

  write_text_file(dir / "manifest.json", corpus_meta_to_json(meta));
  return meta;
}

std::string corpus_meta_to_json(const CorpusMeta& meta) {
  json j;
  j["kind"] = "vmfm-corpus";
  j["format_version"] = meta.format_version;
  j["seed"] = meta.seed;
  j["synth"] = {{"image_size", meta.synth.image_size},
                {"object_prob", meta.synth.object_prob},
                {"feather_px", meta.synth.feather_px}};
  json splits = json::object();
  for (const auto& [name, sm] : meta.splits) {
    splits[name] = {{"count", sm.count},
                    {"interactive_count", sm.interactive_count},
                    {"files", sm.files},
                    {"checksums", sm.checksums},
                    {"seeds", sm.seeds}};
  }
  j["splits"] = splits;
  return j.dump(2) + "\n";
}

CorpusMeta corpus_meta_from_json(const std::string& text, const std::string& origin) {
  CorpusMeta meta;
  try {
    json j = json::parse(text);
    if (j.value("kind", "") != "vmfm-corpus")
      throw invariant_error("not a corpus manifest: " + origin);
    meta.format_version = j.at("format_version").get<int>();
    if (meta.format_version != kCorpusFormatVersion)
      throw invariant_error("unsupported corpus format_version in " + origin);
    meta.seed = j.at("seed").get<std::uint64_t>();
    meta.synth.image_size = j.at("synth").at("image_size").get<int>();
    meta.synth.object_prob = j.at("synth").at("object_prob").get<double>();
    meta.synth.feather_px = j.at("synth").at("feather_px").get<int>();
    for (auto& [name, sj] : j.at("splits").items()) {
      SplitMeta sm;
      sm.count = sj.at("count").get<int>();
      sm.interactive_count = sj.at("interactive_count").get<int>();
      sm.files = sj.at("files").get<std::vector<std::string>>();
      sm.checksums = sj.at("checksums").get<std::vector<std::string>>();
      sm.seeds = sj.at("seeds").get<std::vector<std::uint64_t>>();
      meta.splits[name] = std::move(sm);
    }
  } catch (const json::exception& e) {
    throw invariant_error("corrupt corpus manifest " + origin + ": " + e.what());
  }
  return meta;
}

Corpus Corpus::open(const std::filesystem::path& dir) {
  Corpus c;
  c.dir_ = dir;
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw missing_artifact_error("missing corpus manifest: " + (dir / "manifest.json").string());
  c.meta_ = corpus_meta_from_json(read_text_file(dir / "manifest.json"),
                                  (dir / "manifest.json").string());
  return c;
}

int Corpus::count(const std::string& split) const {
  auto it = meta_.splits.find(split);
  if (it == meta_.splits.end()) throw std::invalid_argument("unknown split: " + split);
  return it->second.count;
}

CorpusSample Corpus::load(const std::string& split, int index) const {
  auto it = meta_.splits.find(split);
  if (it == meta_.splits.end()) throw std::invalid_argument("unknown split: " + split);
  if (index < 0 || index >= it->second.count)
    throw std::invalid_argument("sample index out of range for split " + split);
  const std::filesystem::path p = dir_ / split / it->second.files[index];
  return unpack_sample(ArrayFile::read(p), p.string());
}

}  // namespace vmfm::io
