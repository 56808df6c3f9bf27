#include "fieldnet/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fieldnet {

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

static_assert(std::endian::native == std::endian::little, "parameter encoding assumes a little-endian host");

template <class T>
std::string encode_words(std::span<const T> values) {
  std::vector<std::uint8_t> bytes(values.size() * sizeof(T));
  if (!values.empty()) std::memcpy(bytes.data(), values.data(), bytes.size());
  return base64_encode(bytes);
}

template <class T>
std::vector<T> decode_words(const std::string& text) {
  const std::vector<std::uint8_t> bytes = base64_decode(text);
  if (bytes.size() % sizeof(T) != 0) throw std::runtime_error("base64 payload is not a whole number of words");
  std::vector<T> out(bytes.size() / sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (const std::size_t rest = bytes.size() - i; rest > 0) {
    std::uint32_t v = bytes[i] << 16;
    if (rest == 2) v |= bytes[i + 1] << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += rest == 2 ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::array<int, 256> lut;
  lut.fill(-1);
  for (int k = 0; k < 64; ++k) lut[static_cast<unsigned char>(kAlphabet[k])] = k;
  if (text.size() % 4 != 0) throw std::runtime_error("base64: length not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        v[k] = 0;
        ++pad;
        continue;
      }
      if (pad > 0) throw std::runtime_error("base64: data after padding");
      v[k] = lut[static_cast<unsigned char>(c)];
      if (v[k] < 0) throw std::runtime_error("base64: invalid character");
    }
    const std::uint32_t w = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(w >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(w >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(w));
  }
  return out;
}

std::string encode_f64(std::span<const double> values) { return encode_words(values); }
std::vector<double> decode_f64(const std::string& text) { return decode_words<double>(text); }
std::string encode_i64(std::span<const std::int64_t> values) { return encode_words(values); }
std::vector<std::int64_t> decode_i64(const std::string& text) { return decode_words<std::int64_t>(text); }

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace nn {

using nlohmann::json;

namespace {

json activation_to_json(const Activation& a) {
  switch (a.kind) {
    case Activation::Kind::ReLU: return {{"type", "activation"}, {"kind", "relu"}};
    case Activation::Kind::ScaledReLU: return {{"type", "activation"}, {"kind", "scaled_relu"}, {"c", a.param}};
    case Activation::Kind::Square: return {{"type", "activation"}, {"kind", "square"}};
    case Activation::Kind::Poly: return {{"type", "activation"}, {"kind", "poly"}, {"a", a.param}};
  }
  return {};
}

json tensor_to_json(const Tensor& t) { return {{"shape", t.shape}, {"data", encode_f64(t.data)}}; }

Tensor tensor_from_json(const json& j) {
  return Tensor(j.at("shape").get<Shape>(), decode_f64(j.at("data").get<std::string>()));
}

}  // namespace

json layer_to_json(const LayerSpec& layer) {
  if (const auto* c = std::get_if<Conv2D>(&layer)) {
    return {{"type", "conv2d"}, {"out_channels", c->out_channels}, {"kernel", c->kernel},
            {"stride", c->stride}, {"padding", c->padding}};
  }
  if (const auto* d = std::get_if<Dense>(&layer)) return {{"type", "dense"}, {"out_dim", d->out_dim}};
  if (const auto* p = std::get_if<Pool>(&layer)) {
    return {{"type", "pool"}, {"kind", to_string(p->kind)}, {"window", p->window},
            {"stride", p->stride}, {"padding", p->padding}};
  }
  if (std::holds_alternative<GlobalAvgPool>(layer)) return {{"type", "global_avg_pool"}};
  if (const auto* a = std::get_if<Activation>(&layer)) return activation_to_json(*a);
  if (const auto* d = std::get_if<Dropout>(&layer)) return {{"type", "dropout"}, {"rate", d->rate}};
  return {{"type", "flatten"}};
}

LayerSpec layer_from_json(const json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "conv2d") {
    return Conv2D{j.at("out_channels").get<std::size_t>(), j.at("kernel").get<std::size_t>(),
                  j.value("stride", std::size_t{1}), j.value("padding", std::size_t{0})};
  }
  if (type == "dense") return Dense{j.at("out_dim").get<std::size_t>()};
  if (type == "pool") {
    const std::size_t window = j.at("window").get<std::size_t>();
    return Pool{pool_kind_from_string(j.at("kind").get<std::string>()), window, j.value("stride", window),
                j.value("padding", std::size_t{0})};
  }
  if (type == "global_avg_pool") return GlobalAvgPool{};
  if (type == "activation") {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "relu") return Activation::relu();
    if (kind == "scaled_relu") return Activation::scaled_relu(j.at("c").get<long>());
    if (kind == "square") return Activation::square();
    if (kind == "poly") return Activation::poly(j.at("a").get<long>());
    throw std::invalid_argument("unknown activation kind '" + kind + "'");
  }
  if (type == "dropout") return Dropout{j.at("rate").get<double>()};
  if (type == "flatten") return Flatten{};
  throw std::invalid_argument("unknown layer type '" + type + "'");
}

json model_to_json(const Model& model, const json& meta) {
  json layers = json::array();
  json params = json::array();
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    layers.push_back(layer_to_json(model.spec()[l]));
    const LayerParams& p = model.params()[l];
    if (p.empty()) {
      params.push_back(nullptr);
    } else {
      params.push_back({{"weight", tensor_to_json(p.weight)}, {"bias", tensor_to_json(p.bias)}});
    }
  }
  return {{"format_version", kModelFormatVersion},
          {"input_shape", model.input_shape()},
          {"layers", layers},
          {"params", params},
          {"meta", meta}};
}

Model model_from_json(const json& j) {
  const int version = j.at("format_version").get<int>();
  if (version != kModelFormatVersion) {
    throw std::runtime_error("unsupported model format_version " + std::to_string(version));
  }
  std::vector<LayerSpec> spec;
  for (const auto& l : j.at("layers")) spec.push_back(layer_from_json(l));
  Model model(std::move(spec), j.at("input_shape").get<Shape>());
  const json& params = j.at("params");
  if (params.size() != model.num_layers()) throw std::runtime_error("model file: params/layers length mismatch");
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    LayerParams& dst = model.params()[l];
    if (params[l].is_null()) {
      if (!dst.empty()) throw std::runtime_error("model file: missing params for layer " + std::to_string(l));
      continue;
    }
    Tensor w = tensor_from_json(params[l].at("weight"));
    Tensor b = tensor_from_json(params[l].at("bias"));
    if (w.shape != dst.weight.shape || b.shape != dst.bias.shape) {
      throw std::runtime_error("model file: parameter shape mismatch at layer " + std::to_string(l));
    }
    dst.weight = std::move(w);
    dst.bias = std::move(b);
  }
  return model;
}

void save_model(const std::filesystem::path& path, const Model& model, const json& meta) {
  write_file_atomic(path, model_to_json(model, meta).dump(2) + "\n");
}

Model load_model(const std::filesystem::path& path, json* meta) {
  const json j = json::parse(read_text_file(path));
  if (meta) *meta = j.value("meta", json::object());
  return model_from_json(j);
}

}  // namespace nn
}  // namespace fieldnet
