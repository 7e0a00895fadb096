#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vmfm/corpus_io.hpp"
#include "vmfm/trainer.hpp"

namespace vmfm::cfg {

// Everything the cli can tune, addressable by dotted keys. A config file is a
// flat json object of those keys; --set key=value overrides apply on top.
struct Config {
  io::CorpusConfig corpus;
  train::TrainConfig train;
  bool sad_kilo = false;  // divide the absolute-difference sum by 1000 in tables
};

struct KeyInfo {
  std::string key;
  std::string type;
  std::string help;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

const std::vector<KeyInfo>& key_registry();

// Unknown keys are rejected with the full list of valid ones.
void apply_override(Config& c, const std::string& key, const std::string& value);

// Each entry is "key=value".
void apply_assignments(Config& c, const std::vector<std::string>& assignments);

void load_config_file(Config& c, const std::filesystem::path& path);

// Effective configuration as a flat json object (also the config file format).
std::string render_config(const Config& c);

// One line per key: name, default, help. Fed into every subcommand's --help.
std::string keys_help();

}  // namespace vmfm::cfg
