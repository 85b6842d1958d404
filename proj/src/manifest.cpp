#include "compprobe/checksum.hpp"
#include "compprobe/manifest.hpp"

#include <zlib.h>

#include <array>
#include <fstream>

#include "compprobe/error.hpp"

namespace compprobe {

std::uint32_t crc32(std::string_view bytes, std::uint32_t running) {
  return static_cast<std::uint32_t>(
      ::crc32(running, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

std::string hex32(std::uint32_t value) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(8, '0');
  for (int i = 7; i >= 0; --i, value >>= 4) s[static_cast<std::size_t>(i)] = kDigits[value & 0xf];
  return s;
}

std::string file_crc32(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::array<char, 1 << 16> buf;
  std::uint32_t crc = 0;
  while (in) {
    in.read(buf.data(), buf.size());
    crc = crc32(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())), crc);
  }
  return hex32(crc);
}

}  // namespace compprobe

#ifndef COMPPROBE_VERSION
#define COMPPROBE_VERSION "0.0.0"
#endif

namespace compprobe {

std::string_view code_version() { return COMPPROBE_VERSION; }

nlohmann::json manifest_json(const Manifest& m, const std::filesystem::path& out_dir) {
  nlohmann::json inputs = nlohmann::json::array();
  for (const auto& p : m.inputs) inputs.push_back({{"path", p.generic_string()}, {"crc32", file_crc32(p)}});
  nlohmann::json outputs = nlohmann::json::array();
  for (const auto& o : m.outputs) outputs.push_back({{"file", o}, {"crc32", file_crc32(out_dir / o)}});
  nlohmann::json vol = nlohmann::json::array();
  for (const auto& o : m.volatile_outputs) vol.push_back(o);
  nlohmann::json j = {{"tool", kToolName},       {"code_version", code_version()}, {"command", m.command},
                      {"config", m.config},      {"inputs", inputs},               {"outputs", outputs},
                      {"volatile_outputs", vol}};
  if (!m.extra.empty()) j["extra"] = m.extra;
  return j;
}

void write_manifest(const std::filesystem::path& path, const Manifest& m, const std::filesystem::path& out_dir) {
  const std::string text = manifest_json(m, out_dir).dump(2) + "\n";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace compprobe
