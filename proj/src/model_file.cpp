#include "dyrep/model_file.hpp"

#include <bit>
#include <fstream>

#include "json.hpp"

namespace dyrep {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "model file serialization assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'Y', 'R', 'P', 'M', 'D', 'L', '1'};

}  // namespace

template <typename T>
void write_model_file(Model<T>& model, const DataConfig& data, const std::string& path) {
  for (const auto& site : model.sites)
    require(!site.expanded(), "export: model still has live branches in block " + site.id +
                                  "; deploy before exporting");

  json header;
  header["format"] = {kModelFileMajor, kModelFileMinor};
  header["spec"] = {{"family", model.spec.family},
                    {"widths", model.spec.widths},
                    {"blocks", model.spec.blocks},
                    {"num_classes", model.spec.num_classes},
                    {"input_shape", model.spec.input_shape}};
  header["data"] = {{"kind", data.kind},       {"classes", data.classes},
                    {"image_size", data.image_size}, {"snr", data.snr},
                    {"seed", data.seed},       {"norm_mean", data.norm.mean},
                    {"norm_std", data.norm.stdev}};

  std::vector<std::pair<std::string, std::vector<float>>> arrays;
  auto push = [&](const std::string& prefix) {
    return TensorVisitor<T>([&arrays, prefix](const std::string& name, Tensor<T>& t) {
      std::vector<float> v(t.data.size());
      for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(t.data[i]);
      arrays.emplace_back(prefix + name, std::move(v));
    });
  };
  model.visit_params(push("param/"));
  model.visit_buffers(push("buffer/"));

  json dir = json::array();
  for (const auto& [name, v] : arrays) dir.push_back(json{{"name", name}, {"len", v.size()}});
  header["arrays"] = std::move(dir);

  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot write model file: " + path);
  out.write(kMagic, 8);
  const uint32_t ver[2] = {kModelFileMajor, kModelFileMinor};
  out.write(reinterpret_cast<const char*>(ver), 8);
  const uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, v] : arrays)
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(float)));
  require(out.good(), "failed while writing model file: " + path);
}

LoadedModel read_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open model file: " + path);
  char magic[8];
  in.read(magic, 8);
  require(in.gcount() == 8 && std::equal(magic, magic + 8, kMagic),
          "not a dyrep model file: " + path);
  uint32_t major = 0, minor = 0;
  in.read(reinterpret_cast<char*>(&major), 4);
  in.read(reinterpret_cast<char*>(&minor), 4);
  require(major == kModelFileMajor,
          "unsupported model file version " + std::to_string(major) + "." + std::to_string(minor));
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  require(in.gcount() == static_cast<std::streamsize>(len),
          "model file header truncated (section: header json)");
  json header = json::parse(text);

  LoadedModel out;
  const json& spec = header.at("spec");
  ModelSpec ms;
  ms.family = spec.at("family");
  ms.widths = spec.at("widths").get<std::vector<int>>();
  ms.blocks = spec.at("blocks").get<std::vector<int>>();
  ms.num_classes = spec.at("num_classes");
  ms.input_shape = spec.at("input_shape");
  out.model = build_model<float>(ms, SplitRng(0));

  const json& jd = header.at("data");
  out.data.kind = jd.at("kind");
  out.data.classes = jd.at("classes");
  out.data.image_size = jd.at("image_size");
  out.data.snr = jd.at("snr");
  out.data.seed = jd.at("seed");
  out.data.norm.mean = jd.at("norm_mean");
  out.data.norm.stdev = jd.at("norm_std");

  std::map<std::string, std::vector<float>*> sinks;
  out.model.visit_params(TensorVisitor<float>(
      [&](const std::string& name, Tensor<float>& t) { sinks["param/" + name] = &t.data; }));
  out.model.visit_buffers(TensorVisitor<float>(
      [&](const std::string& name, Tensor<float>& t) { sinks["buffer/" + name] = &t.data; }));

  for (const auto& entry : header.at("arrays")) {
    const std::string name = entry.at("name");
    const size_t n = entry.at("len");
    auto it = sinks.find(name);
    require(it != sinks.end(), "model file array has no destination (section: " + name + ")");
    require(it->second->size() == n,
            "model file array length mismatch (section: " + name + ")");
    in.read(reinterpret_cast<char*>(it->second->data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    require(in.gcount() == static_cast<std::streamsize>(n * sizeof(float)),
            "model file truncated (section: " + name + ")");
    sinks.erase(it);
  }
  require(sinks.empty(),
          sinks.empty() ? "" : "model file missing array (section: " + sinks.begin()->first + ")");
  return out;
}

template void write_model_file<float>(Model<float>&, const DataConfig&, const std::string&);
template void write_model_file<double>(Model<double>&, const DataConfig&, const std::string&);

}  // namespace dyrep
