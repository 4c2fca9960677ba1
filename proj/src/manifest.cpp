#include "tunnelfp/manifest.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <memory>

#include <openssl/evp.h>

namespace tunnelfp {

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string() + " for hashing");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256: digest initialisation failed");
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    const auto got = in.gcount();
    if (got > 0 && EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(got)) != 1)
      throw std::runtime_error("sha256: digest update failed");
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(ctx.get(), md.data(), &len) != 1) throw std::runtime_error("sha256: digest final failed");
  std::string hex;
  char two[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(two, sizeof(two), "%02x", md[i]);
    hex += two;
  }
  return hex;
}

nlohmann::json to_json(const Manifest& m) {
  nlohmann::json j;
  j["format"] = "tunnelfp.manifest";
  j["version"] = 1;
  j["command"] = m.command;
  j["arguments"] = m.arguments;
  j["config"] = to_json(m.config);
  j["inputs"] = nlohmann::json::array();
  for (const auto& p : m.inputs)
    j["inputs"].push_back(
        {{"path", p.generic_string()}, {"bytes", std::filesystem::file_size(p)}, {"sha256", sha256_file(p)}});
  j["outputs"] = nlohmann::json::array();
  for (const auto& p : m.outputs) j["outputs"].push_back(p.generic_string());
  return j;
}

void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  const std::string text = to_json(m).dump(2) + "\n";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

}  // namespace tunnelfp
