#include "forge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

FORGE_NAMESPACE_BEGIN

namespace {

constexpr char kMagic[4] = {'D', 'N', 'F', 'T'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  [[nodiscard]] bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ConfigError("checkpoint truncated at byte " + std::to_string(pos_));
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const ArrayMap& arrays) {
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, t] : arrays) {
    if (!t.defined()) throw ConfigError("checkpoint: array '" + name + "' is empty");
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (Real v : t.values()) put_f32(out, static_cast<float>(v));
  }
  return out;
}

ArrayMap decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.str(4) != std::string(kMagic, 4)) throw ConfigError("checkpoint: bad magic, expected DNFT");
  const auto version = in.u32();
  if (version != kCheckpointVersion) {
    throw ConfigError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = in.u32();
  ArrayMap arrays;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = in.str(in.u32());
    Shape shape(in.u32());
    for (auto& e : shape) e = in.u32();
    std::vector<Real> values(static_cast<std::size_t>(numel(shape)));
    for (auto& v : values) v = static_cast<Real>(in.f32());
    if (!arrays.emplace(name, Tensor(std::move(shape), std::move(values))).second) {
      throw ConfigError("checkpoint: duplicate array '" + name + "'");
    }
  }
  if (!in.done()) throw ConfigError("checkpoint: trailing bytes after last array");
  return arrays;
}

void write_checkpoint(const std::filesystem::path& path, const ArrayMap& arrays) {
  const std::string bytes = encode_checkpoint(arrays);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("failed writing " + path.string());
}

ArrayMap read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

FORGE_NAMESPACE_END
