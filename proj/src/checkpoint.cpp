#include "muxvit/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

namespace muxvit {

namespace {

constexpr char kMagic[4] = {'M', 'V', 'C', '1'};
constexpr std::size_t kAlign = 64;

std::size_t align_up(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const Model<float>& model, const RunConfig& rc, const std::string& path) {
  Json tensors = Json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < model.params.count(); ++i) {
    const Tensor<float>& t = model.params.tensors[i];
    Json shape = Json::array();
    for (int r = 0; r < t.shape.rank; ++r) shape.push_back(t.shape[r]);
    const std::size_t byte_len = t.numel() * sizeof(float);
    offset = align_up(offset);
    tensors.push_back(Json{{"name", model.params.names[i]},
                           {"shape", shape},
                           {"dtype", "f32"},
                           {"offset", offset},
                           {"byte_len", byte_len}});
    offset += byte_len;
  }
  Json header{{"format_version", 1},
              {"tensors", tensors},
              {"metadata", Json{{"run_config", run_config_to_json(rc)},
                                {"sharing_plan", sharing_plan_to_json(model.plan)}}}};
  std::string header_str = header.dump();
  // pad so the payload base (12 + header_len) is 64-byte aligned
  const std::size_t base = 12 + header_str.size();
  header_str.append(align_up(base) - base, ' ');

  std::string blob;
  blob.reserve(12 + header_str.size() + offset);
  blob.append(kMagic, 4);
  put_u64_le(blob, header_str.size());
  blob += header_str;
  std::size_t written = 0;
  for (const Tensor<float>& t : model.params.tensors) {
    const std::size_t aligned = align_up(written);
    blob.append(aligned - written, '\0');
    written = aligned;
    blob.append(reinterpret_cast<const char*>(t.ptr()), t.numel() * sizeof(float));
    written += t.numel() * sizeof(float);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("short write to " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (blob.size() < 12 || std::memcmp(blob.data(), kMagic, 4) != 0)
    throw CheckpointError(CheckpointError::Kind::BadMagic, path + " is not a model checkpoint");
  const std::uint64_t header_len =
      get_u64_le(reinterpret_cast<const unsigned char*>(blob.data()) + 4);
  if (blob.size() < 12 + header_len)
    throw CheckpointError(CheckpointError::Kind::Truncated, path + ": header extends past EOF");

  Json header;
  try {
    header = Json::parse(blob.substr(12, header_len));
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointError::Kind::Malformed,
                          path + ": header is not valid JSON: " + e.what());
  }
  if (!header.contains("format_version") || header.at("format_version").get<int>() != 1)
    throw CheckpointError(CheckpointError::Kind::UnknownVersion,
                          path + ": unsupported format version");

  LoadedCheckpoint lc;
  SharingPlan plan;
  try {
    lc.run_config = run_config_from_json(header.at("metadata").at("run_config"));
    plan = sharing_plan_from_json(header.at("metadata").at("sharing_plan"));
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointError::Kind::Malformed,
                          path + ": bad metadata: " + e.what());
  }

  // Rebuilding from the plan restores the aliasing: layers of one group
  // bind to a single stored tensor.
  lc.model = build_model<float>(lc.run_config.model, plan, lc.run_config.transforms, /*seed=*/0);

  std::set<std::string> expected(lc.model.params.names.begin(), lc.model.params.names.end());
  std::set<std::string> seen;
  const std::size_t payload_base = 12 + header_len;
  for (const Json& tj : header.at("tensors")) {
    const std::string name = tj.at("name").get<std::string>();
    if (!expected.count(name))
      throw CheckpointError(CheckpointError::Kind::AliasInconsistency,
                            path + ": tensor '" + name + "' does not belong to the declared plan");
    if (!seen.insert(name).second)
      throw CheckpointError(CheckpointError::Kind::AliasInconsistency,
                            path + ": tensor '" + name + "' appears twice");
    if (tj.at("dtype").get<std::string>() != "f32")
      throw CheckpointError(CheckpointError::Kind::Malformed,
                            path + ": unsupported dtype for '" + name + "'");
    Tensor<float>& dst = lc.model.params.at(name);
    const std::size_t offset = tj.at("offset").get<std::size_t>();
    const std::size_t byte_len = tj.at("byte_len").get<std::size_t>();
    if (byte_len != dst.numel() * sizeof(float))
      throw CheckpointError(CheckpointError::Kind::Malformed,
                            path + ": tensor '" + name + "' has unexpected size");
    if (payload_base + offset + byte_len > blob.size())
      throw CheckpointError(CheckpointError::Kind::Truncated,
                            path + ": payload for '" + name + "' extends past EOF");
    std::memcpy(dst.ptr(), blob.data() + payload_base + offset, byte_len);
  }
  if (seen.size() != expected.size())
    throw CheckpointError(CheckpointError::Kind::AliasInconsistency,
                          path + ": checkpoint is missing " +
                              std::to_string(expected.size() - seen.size()) + " tensor(s)");
  return lc;
}

}  // namespace muxvit
