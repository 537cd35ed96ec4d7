#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "saliprune/data_pipeline.hpp"
#include "saliprune/layers.hpp"

namespace saliprune {

/// Self-describing artifact: a JSON header (kind, metadata, tensor
/// directory) followed by little-endian float64 tensor payloads.
struct Checkpoint {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  WeightSet tensors;
};

/// Writes through a temporary file and renames, so readers never see a
/// partial artifact.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws PrerequisiteError when the file is missing, IoError when corrupt.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_file(const std::filesystem::path& path);

/// Dataset container: metadata in the header, pixels as float32.
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

/// 8-bit RGB raster, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 255) {}
  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b);
};

void write_png(const std::filesystem::path& path, const Image& image);
/// Reads an 8-bit RGB PNG (used to verify written figures).
Image read_png(const std::filesystem::path& path);

/// Appends JSON records one per line. Formatting is deterministic.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path);
  void write(const nlohmann::json& record);

 private:
  std::filesystem::path path_;
  std::string buffer_;
  friend void flush(JsonlWriter&);
};

/// Writes the accumulated records to disk (replacing the file).
void flush(JsonlWriter& w);

/// Pretty-prints JSON to a file with a trailing newline.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace saliprune
