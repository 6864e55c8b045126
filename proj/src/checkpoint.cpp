#include "stdit/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace stdit {

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

const Tensor* Checkpoint::find(std::string_view name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

const Tensor& Checkpoint::get(std::string_view name) const {
  if (const Tensor* t = find(name)) return *t;
  throw IoError("checkpoint has no record '" + std::string(name) + "'");
}

namespace {

constexpr char kMagic[4] = {'S', 'T', 'D', 'F'};

template <class T>
void put(std::ostream& out, T v) {
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get(std::istream& in, const std::string& where) {
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw IoError(where + ": truncated checkpoint");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<T>(v);
}

struct Header {
  std::uint64_t fingerprint = 0;
  std::uint64_t records = 0;
};

Header read_header(std::istream& in, const std::string& where) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw IoError(where + ": not a checkpoint file");
  const auto version = get<std::uint32_t>(in, where);
  if (version != Checkpoint::kVersion) {
    throw IoError(where + ": unsupported checkpoint version " + std::to_string(version));
  }
  Header h;
  h.fingerprint = get<std::uint64_t>(in, where);
  h.records = get<std::uint64_t>(in, where);
  return h;
}

Checkpoint read_records(std::istream& in, const Header& h, const std::string& where) {
  Checkpoint ckpt;
  ckpt.fingerprint = h.fingerprint;
  for (std::uint64_t r = 0; r < h.records; ++r) {
    const auto len = get<std::uint32_t>(in, where);
    if (len > (1u << 16)) throw IoError(where + ": implausible record name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw IoError(where + ": truncated record name");
    const auto code = get<std::uint32_t>(in, where);
    const auto rank = get<std::uint32_t>(in, where);
    if (code > 1) throw IoError(where + ": record '" + name + "' has unknown dtype code " + std::to_string(code));
    if (rank > 16) throw IoError(where + ": record '" + name + "' has implausible rank");
    Shape shape(rank);
    for (auto& e : shape) e = get<std::uint64_t>(in, where);
    const std::size_t n = numel(shape);
    auto payload = [&](auto tag) {
      using T = decltype(tag);
      std::vector<T> v(n);
      if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)))) {
        throw IoError(where + ": truncated payload for '" + name + "'");
      }
      return Tensor::from(shape, std::move(v));
    };
    ckpt.add(name, code == 1 ? payload(double{}) : payload(float{}));
  }
  return ckpt;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(kMagic, 4);
    put<std::uint32_t>(out, Checkpoint::kVersion);
    put<std::uint64_t>(out, ckpt.fingerprint);
    put<std::uint64_t>(out, ckpt.tensors.size());
    for (const auto& [name, t] : ckpt.tensors) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(out, t.dtype() == DType::f64 ? 1u : 0u);
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t e : t.shape()) put<std::uint64_t>(out, e);
      dispatch(t.dtype(), [&](auto tag) {
        const auto d = t.template data<decltype(tag)>();
        out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()));
      });
    }
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string where = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + where);
  return read_records(in, read_header(in, where), where);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected) {
  const std::string where = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + where);
  const Header h = read_header(in, where);
  if (h.fingerprint != expected) {
    std::ostringstream msg;
    msg << where << ": config fingerprint " << std::hex << h.fingerprint << " does not match the current config ("
        << expected << ")";
    throw FingerprintError(msg.str());
  }
  return read_records(in, h, where);
}

std::uint64_t read_fingerprint(const std::filesystem::path& path) {
  const std::string where = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + where);
  return read_header(in, where).fingerprint;
}

}  // namespace stdit
