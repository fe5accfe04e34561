#pragma once

#include <map>
#include <string>

namespace latentlab {

inline constexpr const char *kCodeVersion = "latentlab 0.1.0";

// FNV-1a over the file bytes; throws when the file cannot be read.
uint64_t hash_file(const std::string &path);
std::string hash_file_hex(const std::string &path);

// Reproducibility record written next to every output artifact. The manifest
// itself carries timestamps and is therefore not part of the byte-identical
// reproducibility contract; all other outputs are.
struct RunManifest {
    std::string subcommand;
    uint64_t seed = 0;
    std::map<std::string, std::string> config;        // resolved settings
    std::map<std::string, std::string> input_hashes;  // path -> fnv1a64 hex
    std::map<std::string, std::string> output_hashes;
    std::string code_version = kCodeVersion;
    std::string started_at, finished_at;  // UTC ISO-8601
};

std::string iso_utc_now();

// Writes dir/manifest.json via a temp file + rename.
void write_manifest(const RunManifest &m, const std::string &dir);
RunManifest load_manifest(const std::string &path);

// key=value lines; '#' comments and blank lines ignored; values keep inner
// whitespace, keys and values are trimmed.
std::map<std::string, std::string> parse_config_file(const std::string &path);

}  // namespace latentlab
