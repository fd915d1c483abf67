#include "syncast/checkpoint.hpp"

#include <cstring>

#include "syncast/errors.hpp"
#include "syncast/io.hpp"

namespace syncast {

namespace {

constexpr char kMagic[8] = {'S', 'Y', 'N', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos, const std::string& origin) {
  if (pos + sizeof(T) > in.size()) throw FormatError(origin + ": truncated checkpoint");
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

}  // namespace

std::string_view to_string(PolicyRole role) {
  switch (role) {
    case PolicyRole::base: return "pi0";
    case PolicyRole::far_aligned: return "pi_alpha";
    case PolicyRole::csi_aligned: return "pi_beta";
  }
  return "pi0";
}

PolicyRole parse_role(std::string_view name) {
  if (name == "pi0") return PolicyRole::base;
  if (name == "pi_alpha") return PolicyRole::far_aligned;
  if (name == "pi_beta") return PolicyRole::csi_aligned;
  throw FormatError("unknown policy role '" + std::string(name) + "'");
}

std::string PolicyCheckpoint::serialize() const {
  if (!model) throw ParameterError("checkpoint has no model");
  std::string data;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& item : model->named_parameters(true)) {
    tensors.push_back({{"name", item.key()}, {"shape", item.value().sizes().vec()}, {"offset", data.size()}});
    io::append_f32(data, item.value());
  }
  const nlohmann::json header = {{"config", model->config().to_json()},
                                 {"role", std::string(to_string(role))},
                                 {"stage", stage},
                                 {"tensors", tensors}};
  const std::string header_text = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint64_t>(out, header_text.size());
  out += header_text;
  out += data;
  return out;
}

PolicyCheckpoint PolicyCheckpoint::deserialize(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(origin + ": not a checkpoint (bad magic)");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get<std::uint32_t>(bytes, pos, origin);
  if (version != kFormatVersion) throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(version));
  const auto header_len = get<std::uint64_t>(bytes, pos, origin);
  if (pos + header_len > bytes.size()) throw FormatError(origin + ": truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": " + e.what());
  }
  pos += header_len;
  const std::size_t data_begin = pos;

  PolicyCheckpoint ckpt;
  try {
    ckpt.model = std::make_shared<denoiser::ConditionalUNet>(denoiser::DenoiserConfig::from_json(header.at("config")));
    ckpt.role = parse_role(header.at("role").get<std::string>());
    ckpt.stage = header.value("stage", nlohmann::json::object());
    auto params = ckpt.model->named_parameters(true);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != params.size()) throw FormatError(origin + ": parameter count mismatch");
    torch::NoGradGuard no_grad;
    for (const auto& entry : tensors) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<std::vector<int64_t>>();
      const auto offset = entry.at("offset").get<std::size_t>();
      auto* target = params.find(name);
      if (target == nullptr) throw FormatError(origin + ": unknown parameter '" + name + "'");
      if (!target->sizes().equals(shape)) throw FormatError(origin + ": shape mismatch for '" + name + "'");
      const std::size_t nbytes = static_cast<std::size_t>(target->numel()) * sizeof(float);
      if (data_begin + offset + nbytes > bytes.size()) throw FormatError(origin + ": truncated parameter data");
      auto values = torch::empty(shape, torch::kFloat32);
      std::memcpy(values.data_ptr<float>(), bytes.data() + data_begin + offset, nbytes);
      target->copy_(values);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": " + e.what());
  }
  return ckpt;
}

void PolicyCheckpoint::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  io::write_text(tmp, serialize());
  std::filesystem::rename(tmp, path);
}

PolicyCheckpoint PolicyCheckpoint::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  return deserialize(io::read_text(path), path.string());
}

}  // namespace syncast
