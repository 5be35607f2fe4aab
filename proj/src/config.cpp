#include "dyrep/config.hpp"

#include <fstream>
#include <sstream>

namespace dyrep {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
  return out;
}

int64_t to_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    require(pos == v.size(), "");
    return r;
  } catch (...) {
    fail("config key '" + key + "' expects an integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    require(pos == v.size(), "");
    return r;
  } catch (...) {
    fail("config key '" + key + "' expects a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  fail("config key '" + key + "' expects a boolean, got '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

FlatConfig FlatConfig::parse_text(const std::string& text) {
  FlatConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    require(eq != std::string::npos,
            "config line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

FlatConfig FlatConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str());
}

void FlatConfig::set(const std::string& key, const std::string& value) {
  require(!key.empty(), "empty config key");
  kv_[key] = value;
}

ResolvedConfig resolve_config(const FlatConfig& raw) {
  // Aliases first.
  std::map<std::string, std::string> kv = raw.entries();
  if (auto it = kv.find("t"); it != kv.end()) {
    kv["train.update_interval"] = it->second;
    kv.erase(it);
  }

  ResolvedConfig rc;
  auto take = [&](const std::string& key) -> std::string {
    auto it = kv.find(key);
    if (it == kv.end()) return "";
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto take_int = [&](const std::string& key, int64_t def) {
    std::string v = take(key);
    return v.empty() ? def : to_int(key, v);
  };
  auto take_double = [&](const std::string& key, double def) {
    std::string v = take(key);
    return v.empty() ? def : to_double(key, v);
  };
  auto take_bool = [&](const std::string& key, bool def) {
    std::string v = take(key);
    return v.empty() ? def : to_bool(key, v);
  };
  auto take_str = [&](const std::string& key, const std::string& def) {
    std::string v = take(key);
    return v.empty() ? def : v;
  };

  rc.run_name = take_str("run.name", "run");

  rc.train.epochs = static_cast<int>(take_int("train.epochs", 40));
  rc.train.update_interval = static_cast<int>(take_int("train.update_interval", 5));
  rc.train.lr = take_double("train.lr", 0.1);
  rc.train.momentum = take_double("train.momentum", 0.9);
  rc.train.weight_decay = take_double("train.weight_decay", 1e-4);
  rc.train.batch_size = static_cast<int>(take_int("train.batch_size", 128));
  rc.train.eval_batch_size = static_cast<int>(take_int("train.eval_batch_size", 256));
  rc.train.seed = static_cast<uint64_t>(take_int("train.seed", 1));
  rc.train.metric = metric_from_name(take_str("train.metric", "synflow"));
  rc.train.synflow_abs = take_bool("train.synflow_abs", false);
  rc.train.rep_enabled = take_bool("train.rep_enabled", true);
  rc.train.augment = take_bool("train.augment", true);
  rc.train.precision = take_str("train.precision", "single");

  rc.train.grow.gamma_init = take_double("grow.gamma_init", 0.01);
  rc.train.grow.calib_batches = static_cast<int>(take_int("grow.calib_batches", 20));
  rc.train.grow.max_rep_depth = static_cast<int>(take_int("grow.max_rep_depth", 2));
  {
    std::string kinds = take_str("grow.branch_kinds", "");
    if (!kinds.empty()) {
      rc.train.grow.branch_kinds.clear();
      for (const auto& name : split_list(kinds))
        rc.train.grow.branch_kinds.push_back(branch_kind_from_name(name));
    }
  }
  rc.train.dep.lambda = take_double("dep.lambda", 0.02);

  rc.model.family = take_str("model.family", "vgg_like");
  {
    std::string w = take_str("model.widths", "8,16");
    rc.model.widths.clear();
    for (const auto& v : split_list(w))
      rc.model.widths.push_back(static_cast<int>(to_int("model.widths", v)));
    std::string b = take_str("model.blocks", "1,1");
    rc.model.blocks.clear();
    for (const auto& v : split_list(b))
      rc.model.blocks.push_back(static_cast<int>(to_int("model.blocks", v)));
  }
  rc.data.kind = take_str("data.kind", "synthetic");
  require(rc.data.kind == "synthetic" || rc.data.kind == "cifar10",
          "data.kind must be 'synthetic' or 'cifar10'");
  rc.data.path = take_str("data.path", "");
  rc.data.subset = take_int("data.subset", 5000);
  rc.data.test_subset = take_int("data.test_subset", 1000);
  rc.data.classes = static_cast<int>(take_int("data.classes", 10));
  rc.data.image_size = static_cast<int>(take_int("data.image_size", 16));
  rc.data.snr = take_double("data.snr", 1.0);
  rc.data.seed = static_cast<uint64_t>(take_int("data.seed", 7));
  {
    auto parse3 = [&](const std::string& key, std::array<double, 3>& dst) {
      std::string v = take(key);
      if (v.empty()) return;
      auto parts = split_list(v);
      require(parts.size() == 3, "config key '" + key + "' expects three comma-separated values");
      for (int i = 0; i < 3; ++i)
        dst[static_cast<size_t>(i)] = to_double(key, parts[static_cast<size_t>(i)]);
    };
    parse3("data.norm_mean", rc.data.norm.mean);
    parse3("data.norm_std", rc.data.norm.stdev);
  }

  require(kv.empty(), kv.empty() ? "" : "unknown config key: '" + kv.begin()->first + "'");

  if (rc.data.kind == "cifar10") rc.data.image_size = 32;
  rc.model.input_shape = {3, rc.data.image_size, rc.data.image_size};
  rc.model.num_classes = rc.data.kind == "cifar10" ? 10 : rc.data.classes;
  rc.model.validate();
  rc.train.validate();
  return rc;
}

std::string ResolvedConfig::canonical_text() const {
  std::map<std::string, std::string> kv;
  kv["run.name"] = run_name;
  kv["train.epochs"] = std::to_string(train.epochs);
  kv["train.update_interval"] = std::to_string(train.update_interval);
  kv["train.lr"] = fmt(train.lr);
  kv["train.momentum"] = fmt(train.momentum);
  kv["train.weight_decay"] = fmt(train.weight_decay);
  kv["train.batch_size"] = std::to_string(train.batch_size);
  kv["train.eval_batch_size"] = std::to_string(train.eval_batch_size);
  kv["train.seed"] = std::to_string(train.seed);
  kv["train.metric"] = metric_name(train.metric);
  kv["train.synflow_abs"] = train.synflow_abs ? "true" : "false";
  kv["train.rep_enabled"] = train.rep_enabled ? "true" : "false";
  kv["train.augment"] = train.augment ? "true" : "false";
  kv["train.precision"] = train.precision;
  kv["grow.gamma_init"] = fmt(train.grow.gamma_init);
  kv["grow.calib_batches"] = std::to_string(train.grow.calib_batches);
  kv["grow.max_rep_depth"] = std::to_string(train.grow.max_rep_depth);
  {
    std::string kinds;
    for (size_t i = 0; i < train.grow.branch_kinds.size(); ++i) {
      if (i) kinds += ",";
      kinds += branch_kind_name(train.grow.branch_kinds[i]);
    }
    kv["grow.branch_kinds"] = kinds;
  }
  kv["dep.lambda"] = fmt(train.dep.lambda);
  kv["model.family"] = model.family;
  {
    std::string w, b;
    for (size_t i = 0; i < model.widths.size(); ++i)
      w += (i ? "," : "") + std::to_string(model.widths[i]);
    for (size_t i = 0; i < model.blocks.size(); ++i)
      b += (i ? "," : "") + std::to_string(model.blocks[i]);
    kv["model.widths"] = w;
    kv["model.blocks"] = b;
  }
  kv["data.kind"] = data.kind;
  kv["data.path"] = data.path;
  kv["data.subset"] = std::to_string(data.subset);
  kv["data.test_subset"] = std::to_string(data.test_subset);
  kv["data.classes"] = std::to_string(data.classes);
  kv["data.image_size"] = std::to_string(data.image_size);
  kv["data.snr"] = fmt(data.snr);
  kv["data.seed"] = std::to_string(data.seed);
  for (int i = 0; i < 3; ++i) {
    kv["data.norm_mean"] += (i ? "," : "") + fmt(data.norm.mean[static_cast<size_t>(i)]);
    kv["data.norm_std"] += (i ? "," : "") + fmt(data.norm.stdev[static_cast<size_t>(i)]);
  }

  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::string ResolvedConfig::hash() const {
  uint64_t h = fnv1a64(canonical_text());
  char buf[17];
  snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

template <typename T>
std::pair<Dataset<T>, Dataset<T>> make_datasets(const DataConfig& cfg) {
  if (cfg.kind == "cifar10") {
    require(!cfg.path.empty(), "data.path is required for data.kind=cifar10");
    Dataset<T> tr = load_cifar10<T>(cfg.path, cfg.subset, true, cfg.norm);
    Dataset<T> te = load_cifar10<T>(cfg.path, cfg.test_subset, false, cfg.norm);
    return {std::move(tr), std::move(te)};
  }
  std::array<int, 3> shape{3, cfg.image_size, cfg.image_size};
  Dataset<T> tr = synthetic_dataset<T>(cfg.seed, cfg.subset, cfg.classes, shape, cfg.snr);
  // Same class templates, disjoint noise draws.
  Dataset<T> te = synthetic_dataset<T>(cfg.seed, cfg.test_subset, cfg.classes, shape, cfg.snr,
                                       0x100000000ULL);
  return {std::move(tr), std::move(te)};
}

template std::pair<Dataset<float>, Dataset<float>> make_datasets<float>(const DataConfig&);
template std::pair<Dataset<double>, Dataset<double>> make_datasets<double>(const DataConfig&);

}  // namespace dyrep
