#include "dtr/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace dtr::nn {
namespace {

constexpr char kMagic[8] = {'D', 'T', 'R', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put(std::string& buf, const T& v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::string& buf, std::size_t& pos, const std::filesystem::path& path) {
  if (pos + sizeof(T) > buf.size()) throw std::runtime_error("checkpoint truncated: " + path.string());
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  nlohmann::json header = archive.header;
  header["kind"] = archive.kind;
  header["format_version"] = kCheckpointVersion;
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& [name, m] : archive.tensors) dir.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  header["tensors"] = dir;
  const std::string header_text = header.dump();

  std::string buf;
  buf.append(kMagic, sizeof(kMagic));
  put(buf, kCheckpointVersion);
  put(buf, static_cast<std::uint64_t>(header_text.size()));
  buf += header_text;
  for (const auto& [_, m] : archive.tensors) {
    buf.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  put(buf, fnv1a(buf.data(), buf.size()));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path.string());

  header.erase("tensors");
  std::ofstream manifest(path.string() + ".json", std::ios::trunc);
  manifest << header.dump(2) << "\n";
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();

  if (buf.size() < sizeof(kMagic) + sizeof(std::uint32_t) + 2 * sizeof(std::uint64_t) ||
      std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a dtr checkpoint: " + path.string());
  }
  const std::size_t body = buf.size() - sizeof(std::uint64_t);
  std::uint64_t stored = 0;
  std::memcpy(&stored, buf.data() + body, sizeof(stored));
  if (stored != fnv1a(buf.data(), body)) throw std::runtime_error("checkpoint checksum mismatch: " + path.string());

  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(buf, pos, path);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                             std::to_string(kCheckpointVersion) + "): " + path.string());
  }
  const auto header_len = take<std::uint64_t>(buf, pos, path);
  if (pos + header_len > body) throw std::runtime_error("checkpoint truncated: " + path.string());
  TensorArchive archive;
  archive.header = nlohmann::json::parse(buf.substr(pos, header_len));
  pos += header_len;
  archive.kind = archive.header.at("kind").get<std::string>();
  for (const auto& entry : archive.header.at("tensors")) {
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    Matrix m(rows, cols);
    const std::size_t bytes = static_cast<std::size_t>(rows * cols) * sizeof(double);
    if (pos + bytes > body) throw std::runtime_error("checkpoint truncated: " + path.string());
    std::memcpy(m.data(), buf.data() + pos, bytes);
    pos += bytes;
    archive.tensors.emplace(entry.at("name").get<std::string>(), std::move(m));
  }
  archive.header.erase("tensors");
  return archive;
}

void store_parameters(TensorArchive& archive, const ParameterStore& params, const std::string& prefix) {
  for (const auto& [name, p] : params) archive.tensors[prefix + name] = p.value;
}

void restore_parameters(const TensorArchive& archive, ParameterStore& params, const std::string& prefix) {
  std::size_t seen = 0;
  for (const auto& [name, m] : archive.tensors) {
    if (name.rfind(prefix, 0) != 0) continue;
    const std::string key = name.substr(prefix.size());
    if (!params.contains(key)) throw std::runtime_error("checkpoint has unexpected tensor: " + key);
    Parameter& p = params.at(key);
    if (p.value.rows() != m.rows() || p.value.cols() != m.cols()) {
      throw std::runtime_error("checkpoint tensor shape mismatch: " + key);
    }
    p.value = m;
    ++seen;
  }
  if (seen != params.size()) throw std::runtime_error("checkpoint is missing parameters");
}

}  // namespace dtr::nn
