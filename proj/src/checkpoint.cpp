#include "dyrep/checkpoint.hpp"

#include <bit>
#include <fstream>

#include "dyrep/rep_algebra.hpp"
#include "json.hpp"

namespace dyrep {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'Y', 'R', 'P', 'C', 'K', 'P', 'T'};

template <typename T>
json conv_to_json(const ConvParams<T>& c) {
  return json{{"out", c.out_channels()}, {"in", c.in_channels()},   {"kh", c.kh()},
              {"kw", c.kw()},            {"stride", c.stride},      {"pad_h", c.pad_h},
              {"pad_w", c.pad_w},        {"has_bias", c.has_bias}};
}

template <typename T>
ConvParams<T> conv_from_json(const json& j) {
  return make_conv<T>(j.at("out"), j.at("in"), j.at("kh"), j.at("kw"), j.at("stride"),
                      j.at("pad_h"), j.at("pad_w"), j.at("has_bias"));
}

template <typename T>
json block_to_json(const DyRepBlock<T>& b) {
  json out{{"id", b.id},
           {"depth", b.depth},
           {"conv", conv_to_json(b.conv)},
           {"has_bn", b.bn.has_value()}};
  json branches = json::array();
  for (const auto& br : b.branches) {
    json jb{{"kind", branch_kind_name(br.kind)},
            {"pre_pad", br.pre_pad},
            {"pre_crop_h", br.pre_crop_h},
            {"pre_crop_w", br.pre_crop_w}};
    json stages = json::array();
    for (const auto& st : br.stages) {
      json js;
      switch (st.kind) {
        case StageKind::Conv:
          js["type"] = "conv";
          js["conv"] = conv_to_json(st.conv);
          break;
        case StageKind::AvgPool:
          js["type"] = "avgpool";
          js["k"] = st.pool.k;
          js["stride"] = st.pool.stride;
          js["pad"] = st.pool.pad;
          break;
        case StageKind::Identity:
          js["type"] = "identity";
          break;
        case StageKind::Block:
          js["type"] = "block";
          js["block"] = block_to_json(*st.block);
          break;
      }
      js["has_bn"] = st.bn.has_value();
      if (st.bn) js["bn_channels"] = st.bn->channels();
      stages.push_back(std::move(js));
    }
    jb["stages"] = std::move(stages);
    branches.push_back(std::move(jb));
  }
  out["branches"] = std::move(branches);
  return out;
}

template <typename T>
void block_from_json(DyRepBlock<T>& b, const json& j) {
  require(j.at("id").get<std::string>() == b.id,
          "checkpoint structure id mismatch: expected " + b.id);
  b.depth = j.at("depth");
  {
    ConvParams<T> c = conv_from_json<T>(j.at("conv"));
    require(c.weight.shape == b.conv.weight.shape,
            "checkpoint conv shape mismatch at " + b.id);
    b.conv = std::move(c);
  }
  require(j.at("has_bn").get<bool>() == b.bn.has_value(),
          "checkpoint BN presence mismatch at " + b.id);
  b.branches.clear();
  for (const auto& jb : j.at("branches")) {
    Branch<T> br;
    br.kind = branch_kind_from_name(jb.at("kind"));
    br.pre_pad = jb.at("pre_pad");
    br.pre_crop_h = jb.at("pre_crop_h");
    br.pre_crop_w = jb.at("pre_crop_w");
    for (const auto& js : jb.at("stages")) {
      BranchStage<T> st;
      const std::string type = js.at("type");
      if (type == "conv") {
        st.kind = StageKind::Conv;
        st.conv = conv_from_json<T>(js.at("conv"));
      } else if (type == "avgpool") {
        st.kind = StageKind::AvgPool;
        st.pool = AvgPoolSpec{js.at("k"), js.at("stride"), js.at("pad")};
      } else if (type == "identity") {
        st.kind = StageKind::Identity;
      } else if (type == "block") {
        st.kind = StageKind::Block;
        const json& jn = js.at("block");
        auto nested = std::make_unique<DyRepBlock<T>>();
        nested->id = jn.at("id");
        nested->conv = conv_from_json<T>(jn.at("conv"));
        nested->bn = make_bn<T>(nested->conv.out_channels());
        block_from_json(*nested, jn);
        st.block = std::move(nested);
      } else {
        fail("checkpoint: unknown stage type '" + type + "'");
      }
      if (js.at("has_bn").get<bool>()) st.bn = make_bn<T>(js.at("bn_channels"));
      br.stages.push_back(std::move(st));
    }
    b.branches.push_back(std::move(br));
  }
}

template <typename T>
const char* precision_name() {
  return sizeof(T) == 4 ? "single" : "double";
}

struct ArrayEntry {
  std::string name;
  int64_t len;
};

template <typename T>
void write_array(std::ofstream& out, const std::vector<T>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
void read_array(std::ifstream& in, std::vector<T>& v, size_t n, const std::string& name) {
  v.resize(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
  require(in.gcount() == static_cast<std::streamsize>(n * sizeof(T)),
          "checkpoint truncated while reading array " + name);
}

json read_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  require(in.gcount() == 8 && std::equal(magic, magic + 8, kMagic),
          "not a dyrep checkpoint: " + path);
  uint32_t major = 0, minor = 0;
  in.read(reinterpret_cast<char*>(&major), 4);
  in.read(reinterpret_cast<char*>(&minor), 4);
  require(major == kCheckpointMajor, "unsupported checkpoint version " + std::to_string(major) +
                                         "." + std::to_string(minor) + " (expected major " +
                                         std::to_string(kCheckpointMajor) + ")");
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  require(in.gcount() == static_cast<std::streamsize>(len),
          "checkpoint header truncated: " + path);
  return json::parse(text);
}

}  // namespace

template <typename T>
void save_checkpoint(TrainState<T>& state, const ResolvedConfig& cfg, const std::string& path) {
  json header;
  header["format"] = {kCheckpointMajor, kCheckpointMinor};
  header["precision"] = precision_name<T>();
  header["epoch"] = state.epoch;
  header["config_text"] = cfg.canonical_text();
  header["config_hash"] = cfg.hash();

  json structure = json::array();
  for (const auto& site : state.model.sites) structure.push_back(block_to_json(site));
  header["structure"] = std::move(structure);

  json ledger{{"metric", metric_name(state.ledger.metric())},
              {"iters", state.ledger.iterations()}};
  json sums = json::object();
  for (const auto& [id, acc] : state.ledger.sums()) sums[id] = acc;
  ledger["sums"] = std::move(sums);
  header["ledger"] = std::move(ledger);

  auto params = collect_params(state.model);
  std::vector<std::pair<std::string, const std::vector<T>*>> arrays;
  for (const auto& p : params) arrays.emplace_back("param/" + p.name, &p.tensor->data);
  state.model.visit_buffers(TensorVisitor<T>([&](const std::string& name, Tensor<T>& t) {
    arrays.emplace_back("buffer/" + name, &t.data);
  }));
  for (const auto& [name, v] : state.opt.velocity) arrays.emplace_back("velocity/" + name, &v);

  // Seal each live block's collapsed conv for later verification.
  std::vector<std::unique_ptr<ConvParams<T>>> sealed;
  state.model.visit_all_blocks([&](DyRepBlock<T>& b) {
    if (!b.expanded()) return;
    sealed.push_back(std::make_unique<ConvParams<T>>(collapse_block(b)));
    arrays.emplace_back("collapsed/" + b.id + ".weight", &sealed.back()->weight.data);
    if (sealed.back()->has_bias)
      arrays.emplace_back("collapsed/" + b.id + ".bias", &sealed.back()->bias.data);
  });

  json dir = json::array();
  for (const auto& [name, v] : arrays)
    dir.push_back(json{{"name", name}, {"len", v->size()}});
  header["arrays"] = std::move(dir);

  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot write checkpoint: " + path);
  out.write(kMagic, 8);
  const uint32_t ver[2] = {kCheckpointMajor, kCheckpointMinor};
  out.write(reinterpret_cast<const char*>(ver), 8);
  const uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, v] : arrays) write_array(out, *v);
  require(out.good(), "failed while writing checkpoint: " + path);
}

std::string checkpoint_precision(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open checkpoint: " + path);
  return read_header(in, path).at("precision");
}

template <typename T>
CheckpointData<T> load_checkpoint_full(const std::string& path, ResolvedConfig* cfg_out) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open checkpoint: " + path);
  json header = read_header(in, path);
  require(header.at("precision").get<std::string>() == precision_name<T>(),
          "checkpoint precision is " + header.at("precision").get<std::string>());

  ResolvedConfig cfg = resolve_config(FlatConfig::parse_text(header.at("config_text")));
  if (cfg_out) *cfg_out = cfg;

  CheckpointData<T> data;
  TrainState<T>& state = data.state;
  state.model = build_model<T>(cfg.model, SplitRng(cfg.train.seed));
  state.epoch = header.at("epoch");

  const json& structure = header.at("structure");
  require(structure.size() == state.model.sites.size(),
          "checkpoint structure has " + std::to_string(structure.size()) + " sites, model has " +
              std::to_string(state.model.sites.size()));
  for (size_t i = 0; i < state.model.sites.size(); ++i)
    block_from_json(state.model.sites[i], structure[i]);

  {
    const json& jl = header.at("ledger");
    SaliencyLedger ledger(metric_from_name(jl.at("metric")));
    std::map<std::string, std::array<double, kNumBaseMetrics>> sums;
    for (const auto& [id, acc] : jl.at("sums").items()) {
      std::array<double, kNumBaseMetrics> a{};
      for (size_t k = 0; k < kNumBaseMetrics; ++k) a[k] = static_cast<double>(acc.at(k));
      sums[id] = a;
    }
    ledger.restore(std::move(sums), jl.at("iters"));
    state.ledger = std::move(ledger);
  }

  // Bind arrays by name in directory order.
  std::map<std::string, std::vector<T>*> sinks;
  auto params = collect_params(state.model);
  for (const auto& p : params) sinks["param/" + p.name] = &p.tensor->data;
  state.model.visit_buffers(TensorVisitor<T>([&](const std::string& name, Tensor<T>& t) {
    sinks["buffer/" + name] = &t.data;
  }));

  for (const auto& entry : header.at("arrays")) {
    const std::string name = entry.at("name");
    const size_t len = entry.at("len");
    if (name.rfind("velocity/", 0) == 0) {
      auto& v = state.opt.velocity[name.substr(9)];
      read_array(in, v, len, name);
    } else if (name.rfind("collapsed/", 0) == 0) {
      auto& v = data.collapsed[name.substr(10)];
      read_array(in, v, len, name);
    } else {
      auto it = sinks.find(name);
      require(it != sinks.end(), "checkpoint array has no destination: " + name);
      require(it->second->size() == len, "checkpoint array length mismatch for " + name);
      read_array(in, *it->second, len, name);
      sinks.erase(it);
    }
  }
  require(sinks.empty(), sinks.empty() ? "" : "checkpoint missing array: " + sinks.begin()->first);
  return data;
}

template <typename T>
TrainState<T> load_checkpoint(const std::string& path, ResolvedConfig* cfg_out) {
  return load_checkpoint_full<T>(path, cfg_out).state;
}

template void save_checkpoint<float>(TrainState<float>&, const ResolvedConfig&,
                                     const std::string&);
template void save_checkpoint<double>(TrainState<double>&, const ResolvedConfig&,
                                      const std::string&);
template CheckpointData<float> load_checkpoint_full<float>(const std::string&, ResolvedConfig*);
template CheckpointData<double> load_checkpoint_full<double>(const std::string&, ResolvedConfig*);
template TrainState<float> load_checkpoint<float>(const std::string&, ResolvedConfig*);
template TrainState<double> load_checkpoint<double>(const std::string&, ResolvedConfig*);

}  // namespace dyrep
