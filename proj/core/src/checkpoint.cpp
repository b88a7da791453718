#include "scl/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "tensor_io.hpp"

using json = nlohmann::json;

namespace scl {

namespace {

constexpr char kMagic[4] = {'S', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

json layer_to_json(const LayerSpec& ls) {
  return json{{"kind", to_string(ls.kind)},
              {"role", to_string(ls.role)},
              {"activation", to_string(ls.activation)},
              {"kh", ls.cfg.kh},
              {"kw", ls.cfg.kw},
              {"stride_h", ls.cfg.stride_h},
              {"stride_w", ls.cfg.stride_w},
              {"pad_h", ls.cfg.pad_h},
              {"pad_w", ls.cfg.pad_w},
              {"c_in", ls.cfg.c_in},
              {"c_out", ls.cfg.c_out},
              {"has_bias", ls.cfg.has_bias},
              {"upsample_after", ls.upsample_after},
              {"skip_from", ls.skip_from}};
}

LayerSpec layer_from_json(const json& j) {
  LayerSpec ls;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "conv") ls.kind = LayerKind::conv;
  else if (kind == "shapeconv") ls.kind = LayerKind::shapeconv;
  else throw std::runtime_error("unknown layer kind '" + kind + "'");

  const std::string role = j.at("role").get<std::string>();
  if (role == "encoder") ls.role = LayerRole::encoder;
  else if (role == "decoder") ls.role = LayerRole::decoder;
  else if (role == "head") ls.role = LayerRole::head;
  else throw std::runtime_error("unknown layer role '" + role + "'");

  const std::string act = j.at("activation").get<std::string>();
  if (act == "relu") ls.activation = Activation::relu;
  else if (act == "none") ls.activation = Activation::none;
  else throw std::runtime_error("unknown activation '" + act + "'");

  ls.cfg.kh = j.at("kh").get<int>();
  ls.cfg.kw = j.at("kw").get<int>();
  ls.cfg.stride_h = j.at("stride_h").get<int>();
  ls.cfg.stride_w = j.at("stride_w").get<int>();
  ls.cfg.pad_h = j.at("pad_h").get<int>();
  ls.cfg.pad_w = j.at("pad_w").get<int>();
  ls.cfg.c_in = j.at("c_in").get<int>();
  ls.cfg.c_out = j.at("c_out").get<int>();
  ls.cfg.has_bias = j.at("has_bias").get<bool>();
  ls.upsample_after = j.at("upsample_after").get<bool>();
  ls.skip_from = j.at("skip_from").get<int>();
  return ls;
}

json spec_to_json(const ModelSpec& spec) {
  json layers = json::array();
  for (const LayerSpec& ls : spec.layers) layers.push_back(layer_to_json(ls));
  return json{{"input_channels", spec.input_channels},
              {"num_classes", spec.num_classes},
              {"width", spec.width},
              {"layers", std::move(layers)}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec spec;
  spec.input_channels = j.at("input_channels").get<int>();
  spec.num_classes = j.at("num_classes").get<int>();
  spec.width = j.at("width").get<int>();
  for (const json& lj : j.at("layers")) spec.layers.push_back(layer_from_json(lj));
  spec.validate();
  return spec;
}

}  // namespace

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path,
                     const SgdState<std::type_identity_t<T>>* optimizer, bool fused) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);

  json meta;
  meta["dtype"] = dtype_name<T>();
  meta["seed"] = model.seed;
  meta["fused"] = fused;
  meta["optimizer"] = optimizer != nullptr && !optimizer->momentum.empty();
  meta["model"] = spec_to_json(model.spec);
  const std::string meta_str = meta.dump();

  os.write(kMagic, sizeof kMagic);
  detail::write_u32(os, kVersion);
  detail::write_string(os, meta_str);

  // named_params is non-const (returns mutable pointers); the model itself
  // is not modified.
  auto params = const_cast<Model<T>&>(model).named_params();
  std::uint64_t count = params.size();
  if (meta["optimizer"].get<bool>()) count += optimizer->momentum.size();
  detail::write_u64(os, count);
  for (auto& [name, tensor] : params) detail::write_tensor_record(os, name, *tensor);
  if (meta["optimizer"].get<bool>()) {
    for (const auto& [name, tensor] : optimizer->momentum)
      detail::write_tensor_record(os, "opt." + name, tensor);
  }
  if (!os) throw std::runtime_error("write failed for checkpoint: " + path);
}

template <typename T>
Model<T> load_checkpoint(const std::string& path,
                         SgdState<std::type_identity_t<T>>* optimizer,
                         CheckpointInfo* info) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);

  char magic[4];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw std::runtime_error("corrupt checkpoint: bad magic in " + path);
  const std::uint32_t version = detail::read_u32(is);
  if (version != kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));

  json meta;
  try {
    meta = json::parse(detail::read_string(is));
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt checkpoint metadata: " + std::string(e.what()));
  }
  const std::string dtype = meta.at("dtype").get<std::string>();
  if (dtype != dtype_name<T>())
    throw std::runtime_error("checkpoint holds " + dtype + " tensors, expected " +
                             dtype_name<T>());

  CheckpointInfo local;
  local.spec = spec_from_json(meta.at("model"));
  local.seed = meta.at("seed").get<std::uint64_t>();
  local.fused = meta.at("fused").get<bool>();
  local.dtype = dtype_code<T>();
  local.has_optimizer = meta.at("optimizer").get<bool>();

  // Allocate the model structurally, then overwrite every parameter from the
  // tensor table.
  Model<T> model = build_model<T>(local.spec, local.seed);
  auto params = model.named_params();
  std::map<std::string, Tensor<T>*> by_name;
  for (auto& [name, tensor] : params) by_name.emplace(name, tensor);

  std::map<std::string, Tensor<T>> opt_tensors;
  const std::uint64_t count = detail::read_u64(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name;
    Tensor<T> t = detail::read_tensor_record<T>(is, name);
    if (name.rfind("opt.", 0) == 0) {
      opt_tensors.emplace(name.substr(4), std::move(t));
      continue;
    }
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("corrupt checkpoint: unexpected tensor '" + name + "'");
    if (!it->second->same_shape(t))
      throw std::runtime_error("corrupt checkpoint: tensor '" + name + "' has wrong shape");
    *it->second = std::move(t);
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw std::runtime_error("corrupt checkpoint: missing tensor '" +
                             by_name.begin()->first + "'");

  if (optimizer != nullptr) {
    optimizer->momentum.clear();
    if (local.has_optimizer) {
      for (auto& [name, tensor] : model.named_params()) {
        auto it = opt_tensors.find(name);
        if (it == opt_tensors.end())
          throw std::runtime_error("corrupt checkpoint: missing optimizer buffer for '" +
                                   name + "'");
        optimizer->momentum.emplace_back(name, std::move(it->second));
      }
    }
  }

  if (info != nullptr) *info = local;
  return model;
}

template void save_checkpoint(const Model<float>&, const std::string&,
                              const SgdState<float>*, bool);
template void save_checkpoint(const Model<double>&, const std::string&,
                              const SgdState<double>*, bool);
template Model<float> load_checkpoint(const std::string&, SgdState<float>*, CheckpointInfo*);
template Model<double> load_checkpoint(const std::string&, SgdState<double>*, CheckpointInfo*);

}  // namespace scl
