#include "latentlab/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace latentlab {

static constexpr char kMagic[4] = {'L', 'L', 'A', 'B'};
static constexpr uint32_t kVersion = 1;

template <typename T>
static void put(std::ofstream &f, T v) {
    f.write(reinterpret_cast<const char *>(&v), sizeof(T));
}

template <typename T>
static T get(std::ifstream &f) {
    T v{};
    f.read(reinterpret_cast<char *>(&v), sizeof(T));
    if (!f) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

void save_checkpoint(const ModelState &state, const std::string &path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    f.write(kMagic, 4);
    put<uint32_t>(f, kVersion);
    const ModelConfig &c = state.cfg;
    put<int32_t>(f, c.d_model);
    put<int32_t>(f, c.d_vis);
    put<int32_t>(f, c.n_layers);
    put<int32_t>(f, c.n_heads);
    put<int32_t>(f, c.vocab_size);
    put<int32_t>(f, c.n_vis_tokens);
    put<int32_t>(f, c.hidden_layer_index);
    put<int32_t>(f, c.detrans_layers);
    put<int32_t>(f, c.max_seq_len);
    put<double>(f, c.alpha);

    put<uint32_t>(f, static_cast<uint32_t>(state.stage_markers.size()));
    for (int s : state.stage_markers) put<int32_t>(f, s);

    auto tensors = state.all_tensors();
    put<uint64_t>(f, static_cast<uint64_t>(tensors.size()));
    for (const ParamTensor *p : tensors) {
        put<uint32_t>(f, static_cast<uint32_t>(p->name.size()));
        f.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        put<uint64_t>(f, static_cast<uint64_t>(p->value.rows));
        put<uint64_t>(f, static_cast<uint64_t>(p->value.cols));
        f.write(reinterpret_cast<const char *>(p->value.data.data()),
                static_cast<std::streamsize>(p->value.data.size() * sizeof(double)));
    }
    if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

ModelState load_checkpoint(const std::string &path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    uint32_t version = get<uint32_t>(f);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

    ModelConfig c;
    c.d_model = get<int32_t>(f);
    c.d_vis = get<int32_t>(f);
    c.n_layers = get<int32_t>(f);
    c.n_heads = get<int32_t>(f);
    c.vocab_size = get<int32_t>(f);
    c.n_vis_tokens = get<int32_t>(f);
    c.hidden_layer_index = get<int32_t>(f);
    c.detrans_layers = get<int32_t>(f);
    c.max_seq_len = get<int32_t>(f);
    c.alpha = get<double>(f);
    c.validate();

    ModelState state = init_model(c, SeededRng(0));
    uint32_t n_markers = get<uint32_t>(f);
    state.stage_markers.clear();
    for (uint32_t i = 0; i < n_markers; i++) state.stage_markers.insert(get<int32_t>(f));

    std::map<std::string, ParamTensor *> by_name;
    for (ParamTensor *p : state.all_tensors()) by_name[p->name] = p;

    uint64_t n_tensors = get<uint64_t>(f);
    if (n_tensors != by_name.size())
        throw std::runtime_error("checkpoint: tensor count mismatch in " + path);
    for (uint64_t i = 0; i < n_tensors; i++) {
        uint32_t name_len = get<uint32_t>(f);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        if (!f) throw std::runtime_error("checkpoint: truncated file");
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw std::runtime_error("checkpoint: unknown tensor '" + name + "'");
        ParamTensor *p = it->second;
        uint64_t rows = get<uint64_t>(f);
        uint64_t cols = get<uint64_t>(f);
        if (rows != static_cast<uint64_t>(p->value.rows) ||
            cols != static_cast<uint64_t>(p->value.cols))
            throw std::runtime_error("checkpoint: shape mismatch for tensor '" + name + "'");
        f.read(reinterpret_cast<char *>(p->value.data.data()),
               static_cast<std::streamsize>(p->value.data.size() * sizeof(double)));
        if (!f) throw std::runtime_error("checkpoint: truncated file");
        p->m.set_zero();
        p->v.set_zero();
        p->steps = 0;
    }
    return state;
}

}  // namespace latentlab
