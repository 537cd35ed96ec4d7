#include "saliprune/io.hpp"

#include <png.h>

#include <bit>
#include <cstring>
#include <fstream>

#include <openssl/evp.h>

#include "saliprune/error.hpp"

namespace saliprune {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "containers assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'S', 'P', 'C', 'K', 'P', 'T', '0', '1'};

std::string read_all(const fs::path& path) {
  if (!fs::exists(path)) throw PrerequisiteError(path.string() + " does not exist");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string pack(const nlohmann::json& header, const std::string& payload) {
  const std::string h = header.dump();
  const std::uint64_t len = h.size();
  std::string out(kMagic, sizeof(kMagic));
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += h;
  out += payload;
  return out;
}

std::pair<nlohmann::json, std::string_view> unpack(const std::string& bytes, const fs::path& path) {
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError(path.string() + " is not a saliprune container");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof(kMagic), sizeof(len));
  const std::size_t start = sizeof(kMagic) + 8;
  if (len > bytes.size() - start) throw IoError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(start, len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": corrupt header (" + e.what() + ")");
  }
  return {header, std::string_view(bytes).substr(start + len)};
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  nlohmann::json dir = nlohmann::json::array();
  std::string payload;
  for (const auto& [name, t] : ckpt.tensors) {
    dir.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
    for (Real v : t.values()) {
      const double d = v;
      payload.append(reinterpret_cast<const char*>(&d), sizeof(d));
    }
  }
  const nlohmann::json header = {{"kind", ckpt.kind}, {"meta", ckpt.meta}, {"tensors", dir}};
  write_atomic(path, pack(header, payload));
}

Checkpoint load_checkpoint(const fs::path& path) {
  const std::string bytes = read_all(path);
  auto [header, payload] = unpack(bytes, path);
  Checkpoint ckpt;
  try {
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.meta = header.at("meta");
    for (const auto& e : header.at("tensors")) {
      const auto shape = e.at("shape").get<std::vector<int>>();
      const std::size_t offset = e.at("offset").get<std::size_t>();
      const std::size_t count = shape_numel(shape);
      if (offset + count * sizeof(double) > payload.size()) {
        throw IoError(path.string() + ": truncated tensor " + e.at("name").get<std::string>());
      }
      Tensor t(shape);
      for (std::size_t i = 0; i < count; ++i) {
        double d;
        std::memcpy(&d, payload.data() + offset + i * sizeof(double), sizeof(d));
        t[i] = static_cast<Real>(d);
      }
      ckpt.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed header (" + e.what() + ")");
  }
  return ckpt;
}

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string sha256_file(const fs::path& path) {
  const std::string bytes = read_all(path);
  return sha256_hex(bytes.data(), bytes.size());
}

void save_dataset(const fs::path& path, const Dataset& d) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : d.boxes) boxes.push_back({b.top, b.left, b.size});
  std::vector<int> tags;
  for (SplitTag t : d.tags) tags.push_back(static_cast<int>(t));
  const nlohmann::json header = {
      {"kind", "dataset"},
      {"source", d.source},
      {"seed", d.seed},
      {"shape", {d.size(), d.channels, d.height, d.width}},
      {"num_classes", d.num_classes},
      {"labels", d.labels},
      {"tags", tags},
      {"prune_subset", d.prune_subset},
      {"boxes", boxes},
      {"norm", {{"mean", d.norm.mean}, {"std", d.norm.std}}},
      {"fingerprint", d.fingerprint()},
      {"pixels", "float32"}};
  const std::string payload(reinterpret_cast<const char*>(d.images.data()),
                            d.images.size() * sizeof(float));
  write_atomic(path, pack(header, payload));
}

Dataset load_dataset(const fs::path& path) {
  const std::string bytes = read_all(path);
  auto [h, payload] = unpack(bytes, path);
  Dataset d;
  try {
    if (h.at("kind") != "dataset") throw IoError(path.string() + " is not a dataset container");
    d.source = h.at("source").get<std::string>();
    d.seed = h.at("seed").get<std::uint64_t>();
    const auto shape = h.at("shape").get<std::vector<int>>();
    d.channels = shape.at(1);
    d.height = shape.at(2);
    d.width = shape.at(3);
    d.num_classes = h.at("num_classes").get<int>();
    d.labels = h.at("labels").get<std::vector<int>>();
    for (int t : h.at("tags").get<std::vector<int>>()) d.tags.push_back(static_cast<SplitTag>(t));
    d.prune_subset = h.at("prune_subset").get<std::vector<int>>();
    for (const auto& b : h.at("boxes")) d.boxes.push_back({b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>()});
    d.norm.mean = h.at("norm").at("mean").get<std::vector<double>>();
    d.norm.std = h.at("norm").at("std").get<std::vector<double>>();
    const std::size_t count = shape_numel(shape);
    if (payload.size() != count * sizeof(float)) throw IoError(path.string() + ": pixel payload size");
    d.images.resize(count);
    std::memcpy(d.images.data(), payload.data(), payload.size());
    d.validate();
    if (d.fingerprint() != h.at("fingerprint").get<std::string>()) {
      throw IoError(path.string() + ": fingerprint mismatch");
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed dataset header (" + e.what() + ")");
  }
  return d;
}

void Image::set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  std::uint8_t* p = rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  p[0] = r;
  p[1] = g;
  p[2] = b;
}

void write_png(const fs::path& path, const Image& image) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.rgb.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

Image read_png(const fs::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  Image out(static_cast<int>(img.width), static_cast<int>(img.height));
  if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  return out;
}

JsonlWriter::JsonlWriter(const fs::path& path) : path_(path) {}

void JsonlWriter::write(const nlohmann::json& record) {
  buffer_ += record.dump();
  buffer_ += '\n';
}

void flush(JsonlWriter& w) { write_atomic(w.path_, w.buffer_); }

void write_json(const fs::path& path, const nlohmann::json& j) { write_atomic(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& path) {
  const std::string text = read_all(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON (" + e.what() + ")");
  }
}

void write_text(const fs::path& path, const std::string& text) { write_atomic(path, text); }

}  // namespace saliprune
