#include "rebalance/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "rebalance/error.hpp"

namespace rebalance {

namespace {

constexpr char kMagic[4] = {'R', 'B', 'L', 'C'};

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_f64(std::vector<unsigned char>& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, const std::filesystem::path& path)
      : bytes_(bytes), path_(path) {}

  const unsigned char* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw CompatibilityError("truncated checkpoint " + path_.string());
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint32_t u32() {
    const unsigned char* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }

  double f64() {
    const unsigned char* p = take(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return std::bit_cast<double>(bits);
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<unsigned char>& bytes_;
  const std::filesystem::path& path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const NetworkSpec& spec, const ParamSet& params,
                     const std::filesystem::path& path) {
  check_params_match(spec, params);
  nlohmann::json header;
  header["spec"] = to_json(spec);
  header["slots"] = nlohmann::json::array();
  for (const auto& s : params.slots) header["slots"].push_back({{"name", s.name}, {"shape", s.value.shape}});
  const std::string text = header.dump();

  std::vector<unsigned char> bytes(std::begin(kMagic), std::end(kMagic));
  put_u32(bytes, kCheckpointVersion);
  put_u32(bytes, static_cast<std::uint32_t>(text.size()));
  bytes.insert(bytes.end(), text.begin(), text.end());
  for (const auto& s : params.slots) {
    for (double v : s.value.data) put_f64(bytes, v);
    for (double v : s.momentum.data) put_f64(bytes, v);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IngestError("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("checkpoint not found: " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Reader reader(bytes, path);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CompatibilityError("bad magic bytes in checkpoint " + path.string());
  }
  reader.take(4);
  const std::uint32_t version = reader.u32();
  if (version != kCheckpointVersion) {
    throw CompatibilityError("checkpoint format version " + std::to_string(version) +
                             " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t header_len = reader.u32();
  const unsigned char* text = reader.take(header_len);

  Checkpoint ckpt;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text, text + header_len);
    ckpt.spec = network_spec_from_json(header.at("spec"));
    for (const auto& s : header.at("slots")) {
      const auto shape = s.at("shape").get<std::vector<std::size_t>>();
      ckpt.params.slots.push_back({s.at("name").get<std::string>(), Tensor(shape), Tensor(shape)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw CompatibilityError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  for (auto& slot : ckpt.params.slots) {
    for (double& v : slot.value.data) v = reader.f64();
    for (double& v : slot.momentum.data) v = reader.f64();
  }
  if (!reader.at_end()) throw CompatibilityError("trailing bytes in checkpoint " + path.string());
  check_params_match(ckpt.spec, ckpt.params);
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const NetworkSpec& expected) {
  Checkpoint ckpt = load_checkpoint(path);
  if (!(ckpt.spec == expected)) {
    throw CompatibilityError("checkpoint " + path.string() +
                             " was saved for a different network spec than requested");
  }
  return ckpt;
}

}  // namespace rebalance
