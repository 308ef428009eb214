#include "stnyolo/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "stnyolo/errors.hpp"

namespace stnyolo {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'N', 'Y', 'C', 'K', 'P', 'T'};

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xFFu) << (8 * (7 - i));
    return r;
  }
  return v;
}

void append_u64(std::string& out, std::uint64_t v) {
  v = to_little(v);
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

std::uint64_t read_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v;
  std::memcpy(&v, in.data() + pos, 8);
  return to_little(v);
}

}  // namespace

const StoredArray* Checkpoint::find(const std::string& name) const {
  for (const StoredArray& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["dtype"] = "float64";
  header["byte_order"] = "little";
  header["meta"] = ckpt.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const StoredArray& a : ckpt.arrays) {
    if (shape_numel(a.shape) != a.values.size()) {
      throw ShapeError("checkpoint array " + a.name + " has inconsistent shape");
    }
    const std::uint64_t nbytes = a.values.size() * sizeof(Real);
    header["tensors"].push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  append_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const StoredArray& a : ckpt.arrays) {
    for (Real v : a.values) append_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError("not a checkpoint container (bad magic)");
  }
  const std::uint64_t header_len = read_u64(bytes, 8);
  if (header_len > bytes.size() - 16) throw IoError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint header: ") + e.what());
  }
  if (header.value("format_version", 0) != kCheckpointFormatVersion) {
    throw IoError("unsupported checkpoint format version");
  }
  if (header.value("dtype", "") != "float64" || header.value("byte_order", "") != "little") {
    throw IoError("unsupported checkpoint dtype or byte order");
  }
  const std::size_t payload = 16 + header_len;

  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    StoredArray a;
    a.name = entry.at("name").get<std::string>();
    a.shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != shape_numel(a.shape) * sizeof(Real) || payload + offset + nbytes > bytes.size()) {
      throw IoError("checkpoint tensor " + a.name + " is truncated or inconsistent");
    }
    a.values.resize(nbytes / sizeof(Real));
    for (std::size_t i = 0; i < a.values.size(); ++i) {
      a.values[i] = std::bit_cast<Real>(read_u64(bytes, payload + offset + i * sizeof(Real)));
    }
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write then rename so an interrupted save never leaves a half file behind.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace stnyolo
