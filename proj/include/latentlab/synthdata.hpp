#pragma once

#include <string>
#include <vector>

#include "latentlab/matrix.hpp"
#include "latentlab/model.hpp"
#include "latentlab/rng.hpp"

namespace latentlab {

// Grid needle task. Each cell of a g x g grid holds one glyph, encoded as a
// codebook vector plus identifying row/col tag channels. Cell features are
// corrupted by noise drawn mostly from a fixed low-dimensional subspace of
// the code channels, so Euclidean nearest-codebook decoding of a corrupted
// cell is unreliable while the clean content stays recoverable off that
// subspace. The auxiliary grid restores noise-free features inside the query
// region (query cell + 4-neighborhood) and is what the detransformer learns
// to reconstruct.
enum class GenMode { Filtered, Raw, Easy };

struct GenParams {
    int n_samples = 2000;
    int grid_size = 8;
    int n_glyphs = 16;
    int code_dim = 16;
    int tag_dim = 8;       // per axis; raw_dim = code_dim + 2*tag_dim must match d_vis
    int struct_dim = 4;    // dimension of the structured noise subspace
    double code_scale = 3.0;
    double noise_level = 2.5;       // sigma of the structured component
    double iso_frac = 0.25;         // isotropic noise = iso_frac * sigma
    double necessity_margin = 1.0;  // keep iff signed margin < this (Filtered)
    double easy_margin = 1.25;      // Easy mode keeps iff signed margin > this
    uint64_t seed = 1;
    uint64_t world_seed = 7;        // fixes codebook + noise subspace; datasets
                                    // meant to be train/eval splits of the same
                                    // task must share it
    GenMode mode = GenMode::Filtered;

    int raw_dim() const { return code_dim + 2 * tag_dim; }
    int n_cells() const { return grid_size * grid_size; }
    void validate() const;
};

// Frozen task geometry, reproducible from the world seed alone.
struct TaskBasis {
    Matrix2D codebook;    // n_glyphs x code_dim, near-orthogonal, scaled
    Matrix2D row_tags;    // grid x tag_dim
    Matrix2D col_tags;    // grid x tag_dim
    Matrix2D noise_basis; // struct_dim x code_dim, orthonormal rows
    double min_code_dist = 0.0;
};

TaskBasis make_basis(const GenParams &p);

struct GridSample {
    int id = 0;
    int grid_size = 8;
    std::vector<int> glyph_ids;  // row-major, length grid^2
    int query_row = 0, query_col = 0;
    Matrix2D input_features;     // n_cells x raw_dim
    Matrix2D aux_features;       // same, noise-free inside the query region
    std::vector<int> question;   // (row, col) prompt tokens
    std::vector<int> phase1;     // templated reasoning text, ends with trigger
    std::vector<int> phase2;     // answer delimiter + glyph + EOS
    double margin = 0.0;         // signed nearest-codebook margin of the query cell
    bool aux_needed = true;

    int query_cell() const { return query_row * grid_size + query_col; }
    int answer_glyph() const { return glyph_ids[query_cell()]; }
    std::vector<int> query_region_cells() const;
};

// One raw draw (no filtering); deterministic given the derived rng.
GridSample gen_sample(SeededRng rng, const GenParams &p, const TaskBasis &basis);

// Signed margin of a code-channel row: (distance to nearest wrong codebook
// entry) - (distance to the true entry). Negative means nearest-codebook
// decoding gets it wrong.
double signed_margin(const std::vector<double> &code_row, int true_glyph,
                     const Matrix2D &codebook);
int nearest_glyph(const std::vector<double> &code_row, const Matrix2D &codebook);
std::vector<double> code_channels(const Matrix2D &features, int cell, int code_dim);

// Filter policy for the configured mode.
bool keep_sample(const GridSample &s, const GenParams &p, const TaskBasis &basis);

struct DatasetHeader {
    int version = 1;
    uint64_t seed = 0;
    uint64_t world_seed = 7;
    int n_samples = 0;
    int grid_size = 8;
    int n_glyphs = 16;
    int code_dim = 16;
    int tag_dim = 8;
    int struct_dim = 4;
    double code_scale = 3.0;
    double noise_level = 2.5;
    double iso_frac = 0.25;
    double necessity_margin = 1.0;
    double easy_margin = 1.25;
    double min_code_dist = 0.0;
    double kept_fraction = 1.0;
    std::string mode = "filtered";
};

struct Dataset {
    DatasetHeader header;
    std::vector<GridSample> samples;
};

Dataset gen_dataset(const GenParams &p);

// JSON-lines on disk: header object first, one sample object per line.
void write_dataset(const Dataset &ds, const std::string &path);
Dataset load_dataset(const std::string &path);

GenParams params_from_header(const DatasetHeader &h);

// Visual-space prototypes for the task vocabulary (vocab_size x raw_dim):
// row/col tokens map to their tag vectors, glyph tokens to codebook rows,
// everything else to zero. Feeds init_model's alignment option; the matching
// prototypes are the positional (row/col) rows only, so attention is seeded
// to match on position content, not glyph content.
InitPriors task_priors(const TaskBasis &basis, const GenParams &p, int vocab_size);

std::string mode_name(GenMode m);
GenMode mode_from_name(const std::string &s);

}  // namespace latentlab
