#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vmfm/corpus_io.hpp"
#include "vmfm/metrics.hpp"
#include "vmfm/nets.hpp"

namespace vmfm::eval {

// Inference pipelines: raw branch mattes ("s" = segmentation branch, "d" =
// depth branch), the same with patch refinement applied to the highest
// deviation windows ("+rn"), and the reference matte itself ("gt").
inline const std::vector<std::string>& pipeline_tags() {
  static const std::vector<std::string> tags = {"s", "d", "s+rn", "d+rn", "gt"};
  return tags;
}

// Tags are case-insensitive; patch_count bounds the refined windows for the
// "+rn" pipelines (0 leaves the matte untouched).
Plane<float> run_inference(net::Models<float>& models, const io::CorpusSample& sample,
                           const std::string& pipeline, int patch_count = 4);

// Raw (pre-threshold) deviation estimate for one branch's current matte.
Plane<float> deviation_map(net::Models<float>& models, const io::CorpusSample& sample, int branch);

// Re-backs the frame with a solid keying color under the predicted matte.
Image<float> export_composite(const Image<float>& rgb, const Plane<float>& matte,
                              const std::string& bg_color);

struct SplitReport {
  std::string split;
  std::string pipeline;
  int count = 0;
  metrics::RegionReport mean;
  std::vector<metrics::RegionReport> samples;
};

SplitReport evaluate_split(net::Models<float>& models, const io::Corpus& corpus,
                           const std::string& split, const std::string& pipeline,
                           int patch_count = 4);

// json and csv hold raw metric values; the terminal table applies the
// documented display scales instead (mse x100, optional sad / 1000).
std::string report_to_json(const SplitReport& rep);
std::string report_to_csv(const SplitReport& rep);
std::string report_table(const SplitReport& rep, bool sad_kilo);
SplitReport report_from_json(const std::string& text);

void write_text_file(const std::filesystem::path& path, const std::string& text);

// png dumps: scene products need no model, inference products do.
void export_scene(const std::filesystem::path& dir, const io::CorpusSample& sample);
void export_inference(const std::filesystem::path& dir, net::Models<float>& models,
                      const io::CorpusSample& sample, const std::string& pipeline);

}  // namespace vmfm::eval
