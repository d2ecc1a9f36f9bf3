#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace jamt::cli {

constexpr int exit_ok = 0;
constexpr int exit_config = 1;
constexpr int exit_io = 2;
constexpr int exit_divergence = 3;

// FNV-1a over the byte string / over a file's bytes.
std::uint64_t fnv1a64(const std::string& bytes);
std::uint64_t hash_file(const std::string& path);

// Entry point shared by the binary and the tests; args excludes the program
// name. Subcommands: gen-data, tok-train, train, avg-ckpt, decode, prune,
// score. Returns one of the exit_* codes.
int run(const std::vector<std::string>& args);

}  // namespace jamt::cli
