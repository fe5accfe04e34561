#include "latentlab/manifest.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "latentlab/rng.hpp"

namespace latentlab {

using nlohmann::json;

uint64_t hash_file(const std::string &path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("hash_file: cannot open " + path);
    uint64_t h = 1469598103934665603ULL;
    std::vector<char> buf(1 << 16);
    while (f) {
        f.read(buf.data(), buf.size());
        std::streamsize got = f.gcount();
        if (got > 0) h = fnv1a64(buf.data(), static_cast<size_t>(got), h);
    }
    return h;
}

std::string hash_file_hex(const std::string &path) {
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx",
                  static_cast<unsigned long long>(hash_file(path)));
    return out;
}

std::string iso_utc_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_manifest(const RunManifest &m, const std::string &dir) {
    json j{{"subcommand", m.subcommand},
           {"seed", m.seed},
           {"config", m.config},
           {"input_hashes", m.input_hashes},
           {"output_hashes", m.output_hashes},
           {"code_version", m.code_version},
           {"started_at", m.started_at},
           {"finished_at", m.finished_at}};
    std::string final_path = dir + "/manifest.json";
    std::string tmp_path = final_path + ".tmp";
    {
        std::ofstream f(tmp_path, std::ios::trunc);
        if (!f) throw std::runtime_error("write_manifest: cannot open " + tmp_path);
        f << j.dump(2) << "\n";
        if (!f) throw std::runtime_error("write_manifest: write failed for " + tmp_path);
    }
    if (std::rename(tmp_path.c_str(), final_path.c_str()) != 0)
        throw std::runtime_error("write_manifest: rename to " + final_path + " failed");
}

RunManifest load_manifest(const std::string &path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_manifest: cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception &e) {
        throw std::runtime_error("load_manifest: " + path + ": " + e.what());
    }
    RunManifest m;
    m.subcommand = j.at("subcommand").get<std::string>();
    m.seed = j.at("seed").get<uint64_t>();
    m.config = j.at("config").get<std::map<std::string, std::string>>();
    m.input_hashes = j.at("input_hashes").get<std::map<std::string, std::string>>();
    m.output_hashes = j.at("output_hashes").get<std::map<std::string, std::string>>();
    m.code_version = j.at("code_version").get<std::string>();
    m.started_at = j.value("started_at", "");
    m.finished_at = j.value("finished_at", "");
    return m;
}

static std::string trim(const std::string &s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::map<std::string, std::string> parse_config_file(const std::string &path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config file not found: " + path);
    std::map<std::string, std::string> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        line_no++;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": expected key=value");
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        if (key.empty())
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": empty key");
        out[key] = val;
    }
    return out;
}

}  // namespace latentlab
