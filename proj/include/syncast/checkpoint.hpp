#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <string_view>

#include <json.hpp>

#include "syncast/denoiser.hpp"

namespace syncast {

// pi0 (base), pi_alpha (FAR-aligned), pi_beta (CSI-aligned under FAR preservation).
enum class PolicyRole { base, far_aligned, csi_aligned };
std::string_view to_string(PolicyRole role);
PolicyRole parse_role(std::string_view name);

/// Denoiser parameters plus the metadata needed to rebuild and place them in the pipeline.
///
/// File layout (all integers little-endian):
///   8 bytes   magic "SYNCKPT1"
///   u32       format version (1)
///   u64       header length N
///   N bytes   UTF-8 JSON header: config, role, stage, tensors[{name, shape, offset}]
///   ...       float32 parameter data, offsets relative to the end of the header
struct PolicyCheckpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::shared_ptr<denoiser::ConditionalUNet> model;
  PolicyRole role = PolicyRole::base;
  nlohmann::json stage = nlohmann::json::object();  // training-stage metadata

  const denoiser::DenoiserConfig& config() const { return model->config(); }

  std::string serialize() const;
  static PolicyCheckpoint deserialize(const std::string& bytes, const std::string& origin = "<memory>");

  void save(const std::filesystem::path& path) const;
  static PolicyCheckpoint load(const std::filesystem::path& path);
};

}  // namespace syncast
