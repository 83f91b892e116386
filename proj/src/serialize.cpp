#include "dike/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace dike {

namespace {

constexpr char kTensorMagic[4] = {'D', 'K', 'T', 'N'};
constexpr char kBundleMagic[4] = {'D', 'K', 'T', 'B'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

void write_tensor_block(std::ostream& os, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_u64(os, e);
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_tensor_block(std::istream& is) {
  const std::uint32_t rank = get_u32(is);
  if (rank > 8) fail(ErrorKind::Io, "tensor block: implausible rank");
  std::vector<std::size_t> shape(rank);
  for (auto& e : shape) e = static_cast<std::size_t>(get_u64(is));
  Tensor t = Tensor::zeros(shape);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!is) fail(ErrorKind::Io, "tensor block: truncated payload");
  return t;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::Io, "cannot open for writing: " + path.string());
  return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open for reading: " + path.string());
  return is;
}

}  // namespace

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  auto os = open_out(path);
  os.write(kTensorMagic, 4);
  put_u32(os, kFormatVersion);
  write_tensor_block(os, t);
  if (!os) fail(ErrorKind::Io, "write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  auto is = open_in(path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kTensorMagic, 4) != 0)
    fail(ErrorKind::Io, "bad tensor magic: " + path.string());
  if (get_u32(is) != kFormatVersion) fail(ErrorKind::Io, "unsupported tensor version");
  return read_tensor_block(is);
}

void save_bundle(const std::filesystem::path& path, const NamedTensors& entries) {
  auto os = open_out(path);
  os.write(kBundleMagic, 4);
  put_u32(os, kFormatVersion);
  put_u32(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor_block(os, tensor);
  }
  if (!os) fail(ErrorKind::Io, "write failed: " + path.string());
}

NamedTensors load_bundle(const std::filesystem::path& path) {
  auto is = open_in(path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kBundleMagic, 4) != 0)
    fail(ErrorKind::Io, "bad bundle magic: " + path.string());
  if (get_u32(is) != kFormatVersion) fail(ErrorKind::Io, "unsupported bundle version");
  const std::uint32_t count = get_u32(is);
  NamedTensors entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = get_u32(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    entries.emplace_back(std::move(name), read_tensor_block(is));
  }
  return entries;
}

std::uint64_t fnv1a(const void* data, std::size_t length, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < length; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a_str(const std::string& s) { return fnv1a(s.data(), s.size()); }

std::uint64_t tensor_fingerprint(const Tensor& t, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::size_t e : t.shape()) h = fnv1a(&e, sizeof(e), h);
  return fnv1a(t.data(), t.size() * sizeof(double), h);
}

std::string read_text_file(const std::filesystem::path& path) {
  auto is = open_in(path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::Io, "cannot open for writing: " + path.string());
  os << text;
  if (!os) fail(ErrorKind::Io, "write failed: " + path.string());
}

}  // namespace dike
