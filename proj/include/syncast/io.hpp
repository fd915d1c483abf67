#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>
#include <json.hpp>

namespace syncast::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Raw little-endian float32 arrays, C-contiguous.
void write_f32(const fs::path& path, const torch::Tensor& tensor);
torch::Tensor read_f32(const fs::path& path, const std::vector<int64_t>& shape);

// Appends/reads float32 LE values to/from an in-memory byte buffer.
void append_f32(std::string& buffer, const torch::Tensor& tensor);

json read_json(const fs::path& path);
void write_json(const fs::path& path, const json& doc);
void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

// Exclusive ownership of a directory for the lifetime of the object (`<dir>/.lock`).
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path lock_path_;
};

}  // namespace syncast::io
