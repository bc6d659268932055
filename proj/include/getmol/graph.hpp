#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "getmol/tensor.hpp"

namespace getmol {

// ---------------------------------------------------------------- vocabularies

/// Atom element vocabulary. Order is the embedding-row order and is part of
/// the serialized format; append only.
namespace vocab {

inline constexpr std::array kElements = {
    "H",  "C",  "N",  "O",  "S",  "P",  "F",  "Cl", "Br", "I",  "Se", "B",
    "Na", "K",  "Mg", "Ca", "Zn", "Fe", "Mn", "Cu", "Ni", "Co", "UNK"};

/// Side-chain remoteness codes, backbone atom codes, the small-molecule
/// BLANK code, and UNK.
inline constexpr std::array kPosCodes = {"alpha", "beta", "gamma", "delta", "epsilon",
                                         "zeta",  "eta",  "bb_N",  "bb_CA", "bb_C",
                                         "bb_O",  "BLANK", "UNK"};

inline constexpr std::array kResidues = {"ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU",
                                         "GLY", "HIS", "ILE", "LEU", "LYS", "MET", "PHE",
                                         "PRO", "SER", "THR", "TRP", "TYR", "VAL"};

inline constexpr int n_elements() { return static_cast<int>(kElements.size()); }
inline constexpr int n_pos_codes() { return static_cast<int>(kPosCodes.size()); }
inline constexpr int n_residues() { return static_cast<int>(kResidues.size()); }
/// Block types: the 20 residues, one small-molecule type per element, UNK.
inline constexpr int n_block_types() { return n_residues() + n_elements() + 1; }

int element_unk();
int pos_blank();
int pos_unk();
int block_unk();

/// Lookup by name; unknown names map to the UNK id.
int element_id(const std::string& symbol);
int pos_code_id(const std::string& name);
/// Residue names map to 0..19; anything else to block_unk().
int residue_block_id(const std::string& res_name);
/// The block type of a single-atom (small molecule) block of this element.
int small_molecule_block_id(int element);

std::string element_name(int id);
std::string pos_code_name(int id);
std::string block_type_name(int id);
int block_type_id(const std::string& name);

}  // namespace vocab

// ---------------------------------------------------------------- graph types

struct Atom {
    int element = 0;
    int pos_code = 0;
    std::array<double, 3> coord{0.0, 0.0, 0.0};
};

/// An unordered set of atoms acting as one node of the bilevel graph.
struct Block {
    int block_type = 0;
    std::vector<Atom> atoms;
    int molecule_id = 0;
};

enum class EdgeType { Self, Intra, Inter };

std::string edge_type_name(EdgeType t);
EdgeType edge_type_from_string(const std::string& s);

struct Edge {
    int src = 0;  // message source j
    int dst = 0;  // message target i
    EdgeType type = EdgeType::Self;

    bool operator==(const Edge&) const = default;
};

/// Per-block feature/coordinate matrices, filled by embed_graph and updated
/// by the encoder layers.
struct BlockState {
    Tensor h;  // [n_i, d_h]
    Tensor x;  // [n_i, 3]
};

/// The geometric graph of sets: blocks plus typed directed edges. Edges are
/// grouped by destination; within a group the self edge comes first and
/// neighbors follow in (distance, source index) order. This ordering is the
/// deterministic reduction order used by the attention sums.
struct ComplexGraph {
    std::vector<Block> blocks;
    std::vector<Edge> edges;
    int knn_k = 9;
    std::optional<std::vector<BlockState>> embedded;

    std::size_t n_blocks() const { return blocks.size(); }
    std::size_t n_atoms() const;
    int n_molecules() const;
    void validate() const;
};

// ---------------------------------------------------------------- operations

/// Minimum Euclidean distance over inter-block atom pairs.
double block_distance(const Block& a, const Block& b);

/// Directed kNN edges under block_distance plus one self edge per block.
/// Each block receives edges from its k nearest other blocks (all of them if
/// fewer than k exist); distance ties break toward the lower block index.
std::vector<Edge> build_knn_edges(const std::vector<Block>& blocks, int k);

ComplexGraph build_graph(std::vector<Block> blocks, int k);

/// Keeps exactly the blocks within `cutoff` of some block of a different
/// molecule; edges are rebuilt on the survivors with the graph's k.
/// Throws if no block survives.
ComplexGraph extract_interface(const ComplexGraph& g, double cutoff);

/// Every atom becomes its own block (inheriting molecule id and the
/// originating block's type); edges are rebuilt by kNN.
ComplexGraph to_atom_level(const ComplexGraph& g);

/// Reduces each block of an embedded graph to one pseudo-atom: the
/// coordinate centroid with the mean of the block's feature rows. Block
/// identities and edges are unchanged.
ComplexGraph to_block_level(const ComplexGraph& g);

/// Raw-level variant of the block reduction for serialization: one pseudo
/// atom per block at the coordinate centroid (element UNK, pos code BLANK).
ComplexGraph to_block_level_raw(const ComplexGraph& g);

// ---------------------------------------------------------------- embedding

/// Trainable embedding tables for atom types, block types, position codes
/// and the three edge types.
struct EmbeddingTables {
    Tensor atom_table;   // [n_elements, d_h]
    Tensor block_table;  // [n_block_types, d_h]
    Tensor pos_table;    // [n_pos_codes, d_h]
    Tensor edge_table;   // [3, d_e]

    static EmbeddingTables make(std::int64_t d_h, std::int64_t d_e, Rng& rng, double stddev);
    void collect(const std::string& prefix, std::vector<ParamRef>& out);
};

/// Fills per-block H (summed atom/block/pos embeddings) and X (atom
/// coordinates). Out-of-range ids map to the UNK row.
ComplexGraph embed_graph(const ComplexGraph& g, const EmbeddingTables& tables);

// ---------------------------------------------------------------- JSON

/// Canonical complex JSON (versioned schema, see docs/formats.md).
std::string graph_to_json(const ComplexGraph& g);
ComplexGraph graph_from_json(const std::string& text);

// ---------------------------------------------------------------- sampling

struct RandomComplexSpec {
    int min_blocks = 3;
    int max_blocks = 20;
    int min_atoms = 1;
    int max_atoms = 8;
    int k = 9;
    double block_spread = 3.0;      // stddev of block centers around a molecule center
    double atom_spread = 0.8;       // stddev of atoms around their block center
    double molecule_offset = 4.0;   // distance between the two molecule centers
    // Deterministic type ids (elements cycling by atom index, block types
    // fixed per molecule) instead of random draws. Geometry-only learning
    // tasks need this: random categorical attributes would let a model key
    // labels on per-sample type fingerprints.
    bool deterministic_types = false;
};

/// A random two-molecule complex, used by the audit defaults and the
/// synthetic training tasks.
ComplexGraph sample_random_complex(Rng& rng, const RandomComplexSpec& spec);

}  // namespace getmol
