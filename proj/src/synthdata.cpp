#include "latentlab/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "latentlab/tokens.hpp"

namespace latentlab {

using nlohmann::json;

static constexpr double kPi = 3.14159265358979323846;

namespace tok {
std::string token_name(int id) {
    if (id == PAD) return "<pad>";
    if (id == BOS) return "<bos>";
    if (id == EOS) return "<eos>";
    if (id == TRIGGER) return "<auxiliary>";
    if (id == DELIM) return "<answer>";
    if (id == W_INSPECT) return "inspect";
    if (id == W_CELL) return "cell";
    if (id >= ROW0 && id < ROW0 + 8) return "row" + std::to_string(id - ROW0);
    if (id >= COL0 && id < COL0 + 8) return "col" + std::to_string(id - COL0);
    if (id >= GLYPH0 && id < GLYPH0 + 16) return "glyph" + std::to_string(id - GLYPH0);
    return "<unk" + std::to_string(id) + ">";
}

std::string decode(const std::vector<int> &ids) {
    std::string out;
    for (size_t i = 0; i < ids.size(); i++) {
        if (i) out += ' ';
        out += token_name(ids[i]);
    }
    return out;
}
}  // namespace tok

void GenParams::validate() const {
    if (grid_size < 2 || grid_size > 8)
        throw std::invalid_argument("GenParams: grid_size must be in [2,8]");
    if (n_glyphs < 2 || n_glyphs > 16)
        throw std::invalid_argument("GenParams: n_glyphs must be in [2,16]");
    if (n_glyphs > code_dim)
        throw std::invalid_argument("GenParams: need n_glyphs <= code_dim for the codebook");
    if (struct_dim < 1 || struct_dim > code_dim)
        throw std::invalid_argument("GenParams: struct_dim must be in [1,code_dim]");
    if (noise_level < 0.0 || iso_frac < 0.0)
        throw std::invalid_argument("GenParams: noise levels must be >= 0");
    if (n_samples < 1) throw std::invalid_argument("GenParams: n_samples must be positive");
}

static void orthonormalize_rows_local(Matrix2D &m, SeededRng &rng) {
    for (int i = 0; i < m.rows; i++) {
        for (int p = 0; p < i; p++) {
            double s = 0.0;
            for (int j = 0; j < m.cols; j++) s += m.at(p, j) * m.at(i, j);
            for (int j = 0; j < m.cols; j++) m.at(i, j) -= s * m.at(p, j);
        }
        double nrm = 0.0;
        for (int j = 0; j < m.cols; j++) nrm += m.at(i, j) * m.at(i, j);
        nrm = std::sqrt(nrm);
        if (nrm < 1e-12) {
            for (int j = 0; j < m.cols; j++) m.at(i, j) = rng.normal();
            i--;
            continue;
        }
        for (int j = 0; j < m.cols; j++) m.at(i, j) /= nrm;
    }
}

TaskBasis make_basis(const GenParams &p) {
    p.validate();
    TaskBasis b;
    SeededRng root(p.world_seed);

    SeededRng rc = root.derive("codebook");
    b.codebook = Matrix2D(p.n_glyphs, p.code_dim);
    for (double &v : b.codebook.data) v = rc.normal();
    orthonormalize_rows_local(b.codebook, rc);
    scale_inplace(b.codebook, p.code_scale);

    // Position tags are sinusoidal codes, mirroring the smooth positional
    // structure of real encoder features: tag dot products decay with grid
    // distance, so "nearby cell" is a linear notion in feature space.
    double tag_scale = 3.0;  // tags must stay readable through the isotropic noise
    b.row_tags = Matrix2D(p.grid_size, p.tag_dim);
    b.col_tags = Matrix2D(p.grid_size, p.tag_dim);
    auto fill_tags = [&](Matrix2D &m, double phase0) {
        int n_freq = p.tag_dim / 2;
        for (int r = 0; r < m.rows; r++)
            for (int f = 0; f < n_freq; f++) {
                double w = kPi * (f + 1) / (2.0 * p.grid_size);
                double a = w * (2 * r + 1) + phase0;
                m.at(r, 2 * f) = tag_scale * std::cos(a);
                m.at(r, 2 * f + 1) = tag_scale * std::sin(a);
            }
        if (p.tag_dim % 2)
            for (int r = 0; r < m.rows; r++) m.at(r, p.tag_dim - 1) = 0.0;
    };
    fill_tags(b.row_tags, 0.0);
    fill_tags(b.col_tags, kPi / 3.0);

    SeededRng rn = root.derive("noise_basis");
    b.noise_basis = Matrix2D(p.struct_dim, p.code_dim);
    for (double &v : b.noise_basis.data) v = rn.normal();
    orthonormalize_rows_local(b.noise_basis, rn);

    b.min_code_dist = 1e300;
    for (int i = 0; i < p.n_glyphs; i++)
        for (int j = i + 1; j < p.n_glyphs; j++) {
            double d2 = 0.0;
            for (int c = 0; c < p.code_dim; c++) {
                double d = b.codebook.at(i, c) - b.codebook.at(j, c);
                d2 += d * d;
            }
            b.min_code_dist = std::min(b.min_code_dist, std::sqrt(d2));
        }
    return b;
}

std::vector<int> GridSample::query_region_cells() const {
    std::vector<int> cells{query_cell()};
    const int dr[4] = {-1, 1, 0, 0};
    const int dc[4] = {0, 0, -1, 1};
    for (int k = 0; k < 4; k++) {
        int r = query_row + dr[k], c = query_col + dc[k];
        if (r >= 0 && r < grid_size && c >= 0 && c < grid_size) cells.push_back(r * grid_size + c);
    }
    std::sort(cells.begin(), cells.end());
    return cells;
}

std::vector<double> code_channels(const Matrix2D &features, int cell, int code_dim) {
    std::vector<double> out(code_dim);
    const double *r = features.row_ptr(cell);
    std::copy(r, r + code_dim, out.begin());
    return out;
}

int nearest_glyph(const std::vector<double> &code_row, const Matrix2D &codebook) {
    int best = 0;
    double best_d2 = 1e300;
    for (int g = 0; g < codebook.rows; g++) {
        double d2 = 0.0;
        for (int c = 0; c < codebook.cols; c++) {
            double d = code_row[c] - codebook.at(g, c);
            d2 += d * d;
        }
        if (d2 < best_d2) {
            best_d2 = d2;
            best = g;
        }
    }
    return best;
}

double signed_margin(const std::vector<double> &code_row, int true_glyph,
                     const Matrix2D &codebook) {
    double d_true = 0.0, d_wrong = 1e300;
    for (int g = 0; g < codebook.rows; g++) {
        double d2 = 0.0;
        for (int c = 0; c < codebook.cols; c++) {
            double d = code_row[c] - codebook.at(g, c);
            d2 += d * d;
        }
        double dist = std::sqrt(d2);
        if (g == true_glyph)
            d_true = dist;
        else
            d_wrong = std::min(d_wrong, dist);
    }
    return d_wrong - d_true;
}

static void fill_clean_row(double *row, int cell, int glyph, const GenParams &p,
                           const TaskBasis &b) {
    int r = cell / p.grid_size, c = cell % p.grid_size;
    for (int j = 0; j < p.code_dim; j++) row[j] = b.codebook.at(glyph, j);
    for (int j = 0; j < p.tag_dim; j++) {
        row[p.code_dim + j] = b.row_tags.at(r, j);
        row[p.code_dim + p.tag_dim + j] = b.col_tags.at(c, j);
    }
}

GridSample gen_sample(SeededRng rng, const GenParams &p, const TaskBasis &basis) {
    GridSample s;
    s.grid_size = p.grid_size;
    int n = p.n_cells();
    s.glyph_ids.resize(n);
    for (int i = 0; i < n; i++) s.glyph_ids[i] = rng.uniform_int(p.n_glyphs);
    s.query_row = rng.uniform_int(p.grid_size);
    s.query_col = rng.uniform_int(p.grid_size);

    double eps = p.iso_frac * p.noise_level;
    s.input_features = Matrix2D(n, p.raw_dim());
    s.aux_features = Matrix2D(n, p.raw_dim());
    for (int cell = 0; cell < n; cell++) {
        double *row = s.input_features.row_ptr(cell);
        fill_clean_row(row, cell, s.glyph_ids[cell], p, basis);
        // structured component lives in a fixed low-dim subspace of the codes
        for (int k = 0; k < p.struct_dim; k++) {
            double g = rng.normal(0.0, p.noise_level);
            for (int j = 0; j < p.code_dim; j++) row[j] += g * basis.noise_basis.at(k, j);
        }
        for (int j = 0; j < p.raw_dim(); j++) row[j] += rng.normal(0.0, eps);
    }
    s.aux_features = s.input_features;
    for (int cell : s.query_region_cells())
        fill_clean_row(s.aux_features.row_ptr(cell), cell, s.glyph_ids[cell], p, basis);

    s.question = tok::question_tokens(s.query_row, s.query_col);
    s.phase1 = tok::phase1_tokens(s.query_row, s.query_col);
    s.phase2 = tok::phase2_tokens(s.query_row, s.query_col, s.answer_glyph());
    s.margin = signed_margin(code_channels(s.input_features, s.query_cell(), p.code_dim),
                             s.answer_glyph(), basis.codebook);
    return s;
}

bool keep_sample(const GridSample &s, const GenParams &p, const TaskBasis &basis) {
    switch (p.mode) {
        case GenMode::Raw:
            return true;
        case GenMode::Easy:
            return s.margin > p.easy_margin;
        case GenMode::Filtered: {
            if (s.margin >= p.necessity_margin) return false;  // input alone suffices
            // the restored region must make the answer unambiguous
            double clean = signed_margin(
                code_channels(s.aux_features, s.query_cell(), p.code_dim), s.answer_glyph(),
                basis.codebook);
            return clean > p.necessity_margin;
        }
    }
    return false;
}

Dataset gen_dataset(const GenParams &p) {
    p.validate();
    TaskBasis basis = make_basis(p);
    SeededRng root(p.seed);

    Dataset ds;
    uint64_t tried = 0;
    uint64_t max_tries = static_cast<uint64_t>(p.n_samples) * 2000 + 10000;
    while (static_cast<int>(ds.samples.size()) < p.n_samples) {
        if (tried >= max_tries)
            throw std::runtime_error("gen_dataset: filter rejected nearly everything; "
                                     "check noise_level/necessity_margin");
        GridSample s = gen_sample(root.derive("sample", tried), p, basis);
        tried++;
        if (!keep_sample(s, p, basis)) continue;
        s.id = static_cast<int>(ds.samples.size());
        s.aux_needed = (p.mode != GenMode::Easy) && (s.margin < p.necessity_margin);
        ds.samples.push_back(std::move(s));
    }

    DatasetHeader &h = ds.header;
    h.seed = p.seed;
    h.world_seed = p.world_seed;
    h.n_samples = p.n_samples;
    h.grid_size = p.grid_size;
    h.n_glyphs = p.n_glyphs;
    h.code_dim = p.code_dim;
    h.tag_dim = p.tag_dim;
    h.struct_dim = p.struct_dim;
    h.code_scale = p.code_scale;
    h.noise_level = p.noise_level;
    h.iso_frac = p.iso_frac;
    h.necessity_margin = p.necessity_margin;
    h.easy_margin = p.easy_margin;
    h.min_code_dist = basis.min_code_dist;
    h.kept_fraction = static_cast<double>(ds.samples.size()) / static_cast<double>(tried);
    h.mode = mode_name(p.mode);
    return ds;
}

std::string mode_name(GenMode m) {
    switch (m) {
        case GenMode::Filtered: return "filtered";
        case GenMode::Raw: return "raw";
        case GenMode::Easy: return "easy";
    }
    return "filtered";
}

GenMode mode_from_name(const std::string &s) {
    if (s == "filtered") return GenMode::Filtered;
    if (s == "raw") return GenMode::Raw;
    if (s == "easy") return GenMode::Easy;
    throw std::invalid_argument("unknown dataset mode '" + s + "'");
}

GenParams params_from_header(const DatasetHeader &h) {
    GenParams p;
    p.n_samples = h.n_samples;
    p.grid_size = h.grid_size;
    p.n_glyphs = h.n_glyphs;
    p.code_dim = h.code_dim;
    p.tag_dim = h.tag_dim;
    p.struct_dim = h.struct_dim;
    p.code_scale = h.code_scale;
    p.noise_level = h.noise_level;
    p.iso_frac = h.iso_frac;
    p.necessity_margin = h.necessity_margin;
    p.easy_margin = h.easy_margin;
    p.seed = h.seed;
    p.world_seed = h.world_seed;
    p.mode = mode_from_name(h.mode);
    return p;
}

InitPriors task_priors(const TaskBasis &basis, const GenParams &p, int vocab_size) {
    InitPriors pr;
    pr.emb_prototypes = Matrix2D(vocab_size, p.raw_dim());
    pr.match_prototypes = Matrix2D(vocab_size, p.raw_dim());
    auto put = [&](Matrix2D &protos, int token, const Matrix2D &src, int src_row,
                   int channel_offset, int n) {
        if (token < 0 || token >= vocab_size) return;
        for (int j = 0; j < n; j++) protos.at(token, channel_offset + j) = src.at(src_row, j);
    };
    for (int r = 0; r < p.grid_size; r++) {
        put(pr.emb_prototypes, tok::row_token(r), basis.row_tags, r, p.code_dim, p.tag_dim);
        put(pr.match_prototypes, tok::row_token(r), basis.row_tags, r, p.code_dim, p.tag_dim);
    }
    for (int c = 0; c < p.grid_size; c++) {
        put(pr.emb_prototypes, tok::col_token(c), basis.col_tags, c, p.code_dim + p.tag_dim,
            p.tag_dim);
        put(pr.match_prototypes, tok::col_token(c), basis.col_tags, c, p.code_dim + p.tag_dim,
            p.tag_dim);
    }
    for (int g = 0; g < p.n_glyphs; g++)
        put(pr.emb_prototypes, tok::glyph_token(g), basis.codebook, g, 0, p.code_dim);
    return pr;
}

// ---- JSON lines ----

static json matrix_to_json(const Matrix2D &m) {
    json rows = json::array();
    for (int i = 0; i < m.rows; i++) {
        json r = json::array();
        for (int j = 0; j < m.cols; j++) r.push_back(m.at(i, j));
        rows.push_back(std::move(r));
    }
    return rows;
}

static Matrix2D matrix_from_json(const json &j) {
    if (!j.is_array()) throw std::runtime_error("matrix field is not an array");
    int rows = static_cast<int>(j.size());
    if (rows == 0) return Matrix2D(0, 0);
    int cols = static_cast<int>(j[0].size());
    Matrix2D m(rows, cols);
    for (int i = 0; i < rows; i++) {
        if (static_cast<int>(j[i].size()) != cols)
            throw std::runtime_error("ragged matrix rows");
        for (int c = 0; c < cols; c++) m.at(i, c) = j[i][c].get<double>();
    }
    return m;
}

void write_dataset(const Dataset &ds, const std::string &path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("write_dataset: cannot open " + path);
    const DatasetHeader &h = ds.header;
    json jh{{"version", h.version},
            {"seed", h.seed},
            {"world_seed", h.world_seed},
            {"n_samples", h.n_samples},
            {"grid_size", h.grid_size},
            {"n_glyphs", h.n_glyphs},
            {"code_dim", h.code_dim},
            {"tag_dim", h.tag_dim},
            {"struct_dim", h.struct_dim},
            {"code_scale", h.code_scale},
            {"noise_level", h.noise_level},
            {"iso_frac", h.iso_frac},
            {"necessity_margin", h.necessity_margin},
            {"easy_margin", h.easy_margin},
            {"min_code_dist", h.min_code_dist},
            {"kept_fraction", h.kept_fraction},
            {"mode", h.mode}};
    f << jh.dump() << "\n";
    for (const GridSample &s : ds.samples) {
        json js{{"id", s.id},
                {"grid_size", s.grid_size},
                {"glyphs", s.glyph_ids},
                {"query_row", s.query_row},
                {"query_col", s.query_col},
                {"input_features", matrix_to_json(s.input_features)},
                {"aux_features", matrix_to_json(s.aux_features)},
                {"question", s.question},
                {"phase1", s.phase1},
                {"phase2", s.phase2},
                {"margin", s.margin},
                {"aux_needed", s.aux_needed}};
        f << js.dump() << "\n";
    }
    if (!f) throw std::runtime_error("write_dataset: write failed for " + path);
}

Dataset load_dataset(const std::string &path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_dataset: cannot open " + path);
    std::string line;
    int line_no = 0;
    Dataset ds;
    auto fail = [&](const std::string &why) {
        throw std::runtime_error("load_dataset: " + path + ":" + std::to_string(line_no) + ": " +
                                 why);
    };
    if (!std::getline(f, line)) {
        line_no = 1;
        fail("missing header line");
    }
    line_no = 1;
    try {
        json jh = json::parse(line);
        DatasetHeader &h = ds.header;
        h.version = jh.at("version").get<int>();
        if (h.version != 1) fail("unsupported dataset version");
        h.seed = jh.at("seed").get<uint64_t>();
        h.world_seed = jh.at("world_seed").get<uint64_t>();
        h.n_samples = jh.at("n_samples").get<int>();
        h.grid_size = jh.at("grid_size").get<int>();
        h.n_glyphs = jh.at("n_glyphs").get<int>();
        h.code_dim = jh.at("code_dim").get<int>();
        h.tag_dim = jh.at("tag_dim").get<int>();
        h.struct_dim = jh.at("struct_dim").get<int>();
        h.code_scale = jh.at("code_scale").get<double>();
        h.noise_level = jh.at("noise_level").get<double>();
        h.iso_frac = jh.at("iso_frac").get<double>();
        h.necessity_margin = jh.at("necessity_margin").get<double>();
        h.easy_margin = jh.at("easy_margin").get<double>();
        h.min_code_dist = jh.at("min_code_dist").get<double>();
        h.kept_fraction = jh.at("kept_fraction").get<double>();
        h.mode = jh.at("mode").get<std::string>();
    } catch (const json::exception &e) {
        fail(std::string("bad header: ") + e.what());
    }
    while (std::getline(f, line)) {
        line_no++;
        if (line.empty()) continue;
        try {
            json js = json::parse(line);
            GridSample s;
            s.id = js.at("id").get<int>();
            s.grid_size = js.at("grid_size").get<int>();
            s.glyph_ids = js.at("glyphs").get<std::vector<int>>();
            s.query_row = js.at("query_row").get<int>();
            s.query_col = js.at("query_col").get<int>();
            s.input_features = matrix_from_json(js.at("input_features"));
            s.aux_features = matrix_from_json(js.at("aux_features"));
            s.question = js.at("question").get<std::vector<int>>();
            s.phase1 = js.at("phase1").get<std::vector<int>>();
            s.phase2 = js.at("phase2").get<std::vector<int>>();
            s.margin = js.at("margin").get<double>();
            s.aux_needed = js.at("aux_needed").get<bool>();
            if (static_cast<int>(s.glyph_ids.size()) != s.grid_size * s.grid_size)
                fail("glyph list does not match grid size");
            ds.samples.push_back(std::move(s));
        } catch (const json::exception &e) {
            fail(std::string("bad sample: ") + e.what());
        }
    }
    if (static_cast<int>(ds.samples.size()) != ds.header.n_samples) {
        line_no++;
        fail("sample count " + std::to_string(ds.samples.size()) + " does not match header " +
             std::to_string(ds.header.n_samples) + " (truncated file?)");
    }
    return ds;
}

}  // namespace latentlab
