#pragma once

// Run manifest: command, inputs, and git blob hashes of every input file.
// Needs libcrypto.

#include <openssl/evp.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

#include "dsrd/common.hpp"

namespace dsrd {

/// SHA-1 over "blob <size>\0<content>", as `git hash-object` computes it.
inline std::string git_blob_sha1(std::string_view content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw Error("sha1: context allocation failed");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, md, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw Error("sha1: digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string git_blob_sha1_file(const std::string& path) { return git_blob_sha1(read_file(path)); }

struct RunManifest {
  std::string command;
  std::string config_path;
  std::vector<std::string> data_paths;
  std::uint64_t seed = 0;
  std::string output_dir;
  std::vector<std::pair<std::string, std::string>> input_hashes;  // path, blob sha1
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  /// Hashes every existing input file (config + data).
  void hash_inputs() {
    input_hashes.clear();
    auto add = [&](const std::string& p) {
      if (!p.empty() && std::filesystem::is_regular_file(p)) input_hashes.emplace_back(p, git_blob_sha1_file(p));
    };
    add(config_path);
    for (const auto& p : data_paths) add(p);
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["config"] = config_path;
    j["data"] = data_paths;
    j["seed"] = seed;
    j["out"] = output_dir;
    auto& h = j["inputs"] = nlohmann::ordered_json::object();
    for (const auto& [p, s] : input_hashes) h[p] = s;
    if (!extra.empty()) j["extra"] = extra;
    return j;
  }

  /// Hash of the canonical JSON; stamped on every artifact of the run.
  std::string hash() const { return git_blob_sha1(to_json().dump()); }

  void write(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out << to_json().dump(2) << '\n';
  }
};

}  // namespace dsrd
