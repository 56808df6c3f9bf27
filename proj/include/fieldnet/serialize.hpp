#pragma once

// JSON model files. Parameter arrays are stored row-major as base64 of
// little-endian 64-bit values.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fieldnet/nn.hpp"

namespace fieldnet {

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

std::string encode_f64(std::span<const double> values);
std::vector<double> decode_f64(const std::string& text);
std::string encode_i64(std::span<const std::int64_t> values);
std::vector<std::int64_t> decode_i64(const std::string& text);

/// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_text_file(const std::filesystem::path& path);

namespace nn {

inline constexpr int kModelFormatVersion = 1;

nlohmann::json layer_to_json(const LayerSpec& layer);
LayerSpec layer_from_json(const nlohmann::json& j);

/// {format_version, input_shape, layers, params, meta}. `meta` is free-form
/// provenance (the training dataset description, for instance).
nlohmann::json model_to_json(const Model& model, const nlohmann::json& meta = nlohmann::json::object());
Model model_from_json(const nlohmann::json& j);

void save_model(const std::filesystem::path& path, const Model& model,
                const nlohmann::json& meta = nlohmann::json::object());
Model load_model(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

}  // namespace nn
}  // namespace fieldnet
