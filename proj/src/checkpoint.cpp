#include <bit>
#include <cstring>
#include <fstream>

#include "msfuse/model.hpp"

namespace msfuse {

namespace {

constexpr char kMagic[4] = {'F', 'S', 'F', 'M'};

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw IoError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[i]} << (8 * i);
  return v;
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{b[i]} << (8 * i);
  return v;
}

std::string get_bytes(std::istream& in, std::uint64_t n) {
  if (n > (std::uint64_t{1} << 32)) throw IoError("checkpoint field length implausible");
  std::string s(n, '\0');
  if (n && !in.read(s.data(), static_cast<std::streamsize>(n))) throw IoError("checkpoint truncated");
  return s;
}

}  // namespace

void save_checkpoint(const SegmentationModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  const std::string config = model.config().to_json().dump();
  put_u64(out, config.size());
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  for (const auto& [name, t] : model.parameters()) {
    put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(out, t.rank());
    for (auto d : t.shape()) put_u64(out, d);
    for (double v : t.values()) put_f64(out, v);
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

SegmentationModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw IoError(path.string() + " is not a checkpoint");
  const auto version = get_u32(in);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const std::string config_text = get_bytes(in, get_u64(in));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(config_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  SegmentationModel model(ModelConfig::from_json(j));
  ParamMap params = model.parameters();
  std::size_t loaded = 0;
  while (in.peek() != std::char_traits<char>::eof()) {
    const std::string name = get_bytes(in, get_u64(in));
    auto it = params.find(name);
    if (it == params.end()) throw IoError("checkpoint parameter '" + name + "' unknown to the model");
    const auto rank = get_u64(in);
    Shape shape;
    for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(get_u64(in));
    if (shape != it->second.shape()) {
      throw IoError("checkpoint parameter '" + name + "' has shape " + shape_str(shape) + ", expected " +
                    shape_str(it->second.shape()));
    }
    auto values = it->second.mutable_values();
    for (double& v : values) v = std::bit_cast<double>(get_u64(in));
    ++loaded;
  }
  if (loaded != params.size()) throw IoError("checkpoint is missing parameters");
  return model;
}

}  // namespace msfuse
