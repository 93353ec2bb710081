#include "ens/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ens {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_raw(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write("ENSH", 4);
  write_raw<std::uint16_t>(os, 1);
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    for (int d : t.shape) write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "ENSH", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  auto version = read_raw<std::uint16_t>(is);
  if (version != 1)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  auto count = read_raw<std::uint32_t>(is);
  std::map<std::string, Tensor> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto len = read_raw<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw std::runtime_error("checkpoint: truncated name in " + path);
    std::array<int, 4> shape{};
    for (int& d : shape) d = static_cast<int>(read_raw<std::uint32_t>(is));
    Tensor t(shape[0], shape[1], shape[2], shape[3]);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated data in " + path);
    entries.emplace(std::move(name), std::move(t));
  }
  return entries;
}

}  // namespace ens
