#include "syncast/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "syncast/errors.hpp"

namespace syncast::io {

namespace {

static_assert(std::endian::native == std::endian::little, "raw float32 files assume a little-endian host");

torch::Tensor as_f32_contiguous(const torch::Tensor& tensor) {
  return tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous();
}

}  // namespace

void write_f32(const fs::path& path, const torch::Tensor& tensor) {
  auto data = as_f32_contiguous(tensor);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(data.data_ptr<float>()),
            static_cast<std::streamsize>(data.numel() * sizeof(float)));
  if (!out) throw IoError("write failed: " + path.string());
}

torch::Tensor read_f32(const fs::path& path, const std::vector<int64_t>& shape) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  const auto bytes = static_cast<std::int64_t>(in.tellg());
  std::int64_t numel = 1;
  for (auto d : shape) {
    if (d <= 0) throw FormatError("non-positive dimension in shape for " + path.string());
    numel *= d;
  }
  if (bytes != numel * static_cast<std::int64_t>(sizeof(float))) {
    throw FormatError(path.string() + ": expected " + std::to_string(numel * sizeof(float)) + " bytes, found " +
                      std::to_string(bytes));
  }
  auto tensor = torch::empty(shape, torch::kFloat32);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(tensor.data_ptr<float>()), bytes);
  if (!in) throw IoError("read failed: " + path.string());
  return tensor;
}

void append_f32(std::string& buffer, const torch::Tensor& tensor) {
  auto data = as_f32_contiguous(tensor);
  const auto offset = buffer.size();
  buffer.resize(offset + data.numel() * sizeof(float));
  std::memcpy(buffer.data() + offset, data.data_ptr<float>(), data.numel() * sizeof(float));
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

DirectoryLock::DirectoryLock(const fs::path& dir) : lock_path_(dir / ".lock") {
  fs::create_directories(dir);
  // "x" mode fails if the file exists, which gives exclusive creation.
  std::FILE* f = std::fopen(lock_path_.c_str(), "wx");
  if (f == nullptr) {
    throw ConfigError("output directory is locked by another run (remove " + lock_path_.string() +
                      " if stale)");
  }
  std::fclose(f);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(lock_path_, ec);
}

}  // namespace syncast::io
