#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "vmfm/array_file.hpp"
#include "vmfm/scene_synth.hpp"

namespace vmfm::io {

inline constexpr int kCorpusFormatVersion = 1;

// Split roles are fixed; counts are configurable.
inline const std::vector<std::string>& split_names() {
  static const std::vector<std::string> names = {"pretrain", "labeled-train", "labeled-test",
                                                 "unlabeled-train", "unlabeled-test"};
  return names;
}

struct CorpusSample {
  synth::SceneSample scene;
  synth::ModalityBundle mods;
};

struct CorpusConfig {
  synth::SynthConfig synth;
  std::uint64_t seed = 1;
  std::map<std::string, int> split_counts = {
      {"pretrain", 200},       {"labeled-train", 200},   {"labeled-test", 50},
      {"unlabeled-train", 400}, {"unlabeled-test", 50},
  };

  void validate() const;
};

struct SplitMeta {
  int count = 0;
  int interactive_count = 0;
  std::vector<std::string> files;
  std::vector<std::string> checksums;  // fnv1a64 hex of each sample file
  std::vector<std::uint64_t> seeds;
};

struct CorpusMeta {
  int format_version = kCorpusFormatVersion;
  std::uint64_t seed = 1;
  synth::SynthConfig synth;
  std::map<std::string, SplitMeta> splits;
};

ArrayFile pack_sample(const CorpusSample& s);
CorpusSample unpack_sample(const ArrayFile& af, const std::string& origin);

// Generates every split under dir and writes manifest.json. Refuses a
// nonempty directory unless force is set. Returns the written metadata.
CorpusMeta write_corpus(const std::filesystem::path& dir, const CorpusConfig& cfg, bool force,
                        std::ostream* log = nullptr);

// Read-only handle over a generated corpus directory.
class Corpus {
 public:
  static Corpus open(const std::filesystem::path& dir);

  const CorpusMeta& meta() const { return meta_; }
  const std::filesystem::path& dir() const { return dir_; }
  int count(const std::string& split) const;
  CorpusSample load(const std::string& split, int index) const;

 private:
  std::filesystem::path dir_;
  CorpusMeta meta_;
};

std::string corpus_meta_to_json(const CorpusMeta& meta);
CorpusMeta corpus_meta_from_json(const std::string& text, const std::string& origin);

}  // namespace vmfm::io
