#include "vmfm/config.hpp"

#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace vmfm::cfg {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

long long parse_ll(const std::string& key, const std::string& value) {
  const char* s = value.c_str();
  char* end = nullptr;
  errno = 0;
  long long v = std::strtoll(s, &end, 10);
  if (errno != 0 || end == s || *end != '\0')
    throw usage_error("config key " + key + ": '" + value + "' is not an integer");
  return v;
}

double parse_double(const std::string& key, const std::string& value) {
  const char* s = value.c_str();
  char* end = nullptr;
  errno = 0;
  double v = std::strtod(s, &end);
  if (errno != 0 || end == s || *end != '\0')
    throw usage_error("config key " + key + ": '" + value + "' is not a number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw usage_error("config key " + key + ": '" + value + "' is not a bool (true/false)");
}

struct RegistryBuilder {
  std::vector<KeyInfo> keys;

  void add_u64(const std::string& key, const std::string& help,
               std::function<std::uint64_t&(Config&)> ref) {
    KeyInfo k;
    k.key = key;
    k.type = "u64";
    k.help = help;
    k.get = [ref](const Config& c) { return std::to_string(ref(const_cast<Config&>(c))); };
    k.set = [key, ref](Config& c, const std::string& v) {
      long long x = parse_ll(key, v);
      if (x < 0) throw usage_error("config key " + key + ": must be non-negative");
      ref(c) = static_cast<std::uint64_t>(x);
    };
    keys.push_back(std::move(k));
  }

  void add_int(const std::string& key, const std::string& help,
               std::function<int&(Config&)> ref) {
    KeyInfo k;
    k.key = key;
    k.type = "int";
    k.help = help;
    k.get = [ref](const Config& c) { return std::to_string(ref(const_cast<Config&>(c))); };
    k.set = [key, ref](Config& c, const std::string& v) {
      ref(c) = static_cast<int>(parse_ll(key, v));
    };
    keys.push_back(std::move(k));
  }

  void add_double(const std::string& key, const std::string& help,
                  std::function<double&(Config&)> ref) {
    KeyInfo k;
    k.key = key;
    k.type = "double";
    k.help = help;
    k.get = [ref](const Config& c) { return fmt_double(ref(const_cast<Config&>(c))); };
    k.set = [key, ref](Config& c, const std::string& v) { ref(c) = parse_double(key, v); };
    keys.push_back(std::move(k));
  }

  void add_bool(const std::string& key, const std::string& help,
                std::function<bool&(Config&)> ref) {
    KeyInfo k;
    k.key = key;
    k.type = "bool";
    k.help = help;
    k.get = [ref](const Config& c) { return ref(const_cast<Config&>(c)) ? "true" : "false"; };
    k.set = [key, ref](Config& c, const std::string& v) { ref(c) = parse_bool(key, v); };
    keys.push_back(std::move(k));
  }

  void add_string(const std::string& key, const std::string& help,
                  std::function<std::string&(Config&)> ref) {
    KeyInfo k;
    k.key = key;
    k.type = "string";
    k.help = help;
    k.get = [ref](const Config& c) { return ref(const_cast<Config&>(c)); };
    k.set = [ref](Config& c, const std::string& v) { ref(c) = v; };
    keys.push_back(std::move(k));
  }
};

std::vector<KeyInfo> make_registry() {
  RegistryBuilder b;

  b.add_u64("corpus.seed", "master seed for corpus synthesis",
            [](Config& c) -> std::uint64_t& { return c.corpus.seed; });
  b.add_int("corpus.image_size", "square sample size in pixels, divisible by 8",
            [](Config& c) -> int& { return c.corpus.synth.image_size; });
  b.add_double("corpus.object_prob", "fraction of scenes with a human-object interaction",
               [](Config& c) -> double& { return c.corpus.synth.object_prob; });
  b.add_int("corpus.feather_px", "half width of the boundary blur in pixels",
            [](Config& c) -> int& { return c.corpus.synth.feather_px; });
  for (const std::string& split : io::split_names())
    b.add_int("corpus.count." + split, "sample count of the " + split + " split",
              [split](Config& c) -> int& { return c.corpus.split_counts.at(split); });

  b.add_u64("train.seed", "run seed for weights, shuffles and backdrops",
            [](Config& c) -> std::uint64_t& { return c.train.seed; });
  b.add_double("train.lr", "adaptive-moment learning rate",
               [](Config& c) -> double& { return c.train.lr; });
  b.add_int("train.batch_size", "samples per optimization step",
            [](Config& c) -> int& { return c.train.batch_size; });
  b.add_double("train.lambda_matte", "weight of the supervised matte term",
               [](Config& c) -> double& { return c.train.lambda_matte; });
  b.add_double("train.lambda_com", "weight of the composition consistency term",
               [](Config& c) -> double& { return c.train.lambda_com; });
  b.add_double("train.lambda_cl", "weight of the complementary term in self-supervision",
               [](Config& c) -> double& { return c.train.lambda_cl; });
  b.add_double("train.lambda_cs", "weight of the cross-supervision term",
               [](Config& c) -> double& { return c.train.lambda_cs; });
  b.add_double("train.lambda_dc", "weight of the deviation-correction term",
               [](Config& c) -> double& { return c.train.lambda_dc; });
  b.add_double("train.tau", "deviation saturation threshold, strictly inside (0,1)",
               [](Config& c) -> double& { return c.train.tau; });
  b.add_int("train.patch_count", "refinement windows per matte (0 disables refinement)",
            [](Config& c) -> int& { return c.train.patch_count; });
  b.add_string("train.cl_mode", "self-supervision ablation: full, cs_only or dc_only",
               [](Config& c) -> std::string& { return c.train.cl_mode; });
  for (const char* stage : {"pretrain", "sup1", "sup2", "cl_selfsup", "refine"})
    b.add_int(std::string("train.epochs.") + stage,
              std::string("default epoch count of the ") + stage + " stage",
              [stage](Config& c) -> int& { return c.train.stage_epochs.at(stage); });

  b.add_bool("eval.sad_kilo", "divide the absolute-difference sum by 1000 in tables",
             [](Config& c) -> bool& { return c.sad_kilo; });
  return b.keys;
}

}  // namespace

const std::vector<KeyInfo>& key_registry() {
  static const std::vector<KeyInfo> reg = make_registry();
  return reg;
}

void apply_override(Config& c, const std::string& key, const std::string& value) {
  for (const auto& k : key_registry()) {
    if (k.key == key) {
      k.set(c, value);
      return;
    }
  }
  std::string msg = "unknown config key '" + key + "'; valid keys:";
  for (const auto& k : key_registry()) msg += "\n  " + k.key;
  throw usage_error(msg);
}

void apply_assignments(Config& c, const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0)
      throw usage_error("override '" + a + "' is not of the form key=value");
    apply_override(c, a.substr(0, eq), a.substr(eq + 1));
  }
}

void load_config_file(Config& c, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw missing_artifact_error("config file not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::exception& e) {
    throw usage_error("config file " + path.string() + " is not valid json: " + e.what());
  }
  if (!j.is_object()) throw usage_error("config file must hold a json object of dotted keys");
  for (const auto& [key, value] : j.items()) {
    std::string text;
    if (value.is_string())
      text = value.get<std::string>();
    else if (value.is_boolean())
      text = value.get<bool>() ? "true" : "false";
    else if (value.is_number_integer())
      text = std::to_string(value.get<long long>());
    else if (value.is_number_unsigned())
      text = std::to_string(value.get<unsigned long long>());
    else if (value.is_number_float())
      text = fmt_double(value.get<double>());
    else
      throw usage_error("config key " + key + ": unsupported json value type");
    apply_override(c, key, text);
  }
}

std::string render_config(const Config& c) {
  nlohmann::json j;
  for (const auto& k : key_registry()) {
    if (k.type == "u64" || k.type == "int")
      j[k.key] = parse_ll(k.key, k.get(c));
    else if (k.type == "double")
      j[k.key] = parse_double(k.key, k.get(c));
    else if (k.type == "bool")
      j[k.key] = k.get(c) == "true";
    else
      j[k.key] = k.get(c);
  }
  return j.dump(2) + "\n";
}

std::string keys_help() {
  const Config defaults;
  std::string out = "Config keys (via --config file or --set key=value):\n";
  for (const auto& k : key_registry()) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "  %-28s %-7s default %-10s %s\n", k.key.c_str(),
                  k.type.c_str(), k.get(defaults).c_str(), k.help.c_str());
    out += buf;
  }
  return out;
}

}  // namespace vmfm::cfg
