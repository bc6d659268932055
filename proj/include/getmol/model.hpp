#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "getmol/graph.hpp"
#include "getmol/mlp.hpp"
#include "getmol/tensor.hpp"

namespace getmol {

/// Epsilon under the square roots of both layer-norm variants. Small enough
/// that unit-variance inputs renormalize to 1 well inside 1e-9, while still
/// guarding exactly-zero variance.
inline constexpr double kLayerNormEps = 1e-12;
/// Constant in the FFN radial feature s / (C + s).
inline constexpr double kFfnC = 1.0;
/// Guard for the pooling L2 normalization.
inline constexpr double kNormEps = 1e-12;

enum class ReprLevel { Unified, Atom, Block };

ReprLevel repr_level_from_string(const std::string& s);
std::string repr_level_name(ReprLevel level);

struct GetConfig {
    std::int64_t d_h = 32;
    std::int64_t d_r = 8;
    std::int64_t d_e = 16;
    int n_layers = 3;
    // Hidden width of the scalar MLPs (distance activation, coordinate gate,
    // radial feature); they map single scalars and need more than the
    // default input-width hidden layer.
    std::int64_t d_scalar = 16;

    void validate() const;
};

struct LayerNormParams {
    Tensor gamma;        // [d_h]
    Tensor beta;         // [d_h]
    Tensor sigma_coord;  // [1]

    static LayerNormParams make(std::int64_t d_h);
    void collect(const std::string& prefix, std::vector<ParamRef>& out);
};

/// All trainable tensors of one encoder layer.
struct GetLayerParams {
    Tensor w_q, w_k, w_v;  // [d_h, d_r]
    Mlp dist_mlp;          // 1 -> 1, elementwise over distance matrices
    Mlp edge_mlp;          // d_e -> 1
    Mlp message_mlp;       // d_r -> d_h
    Mlp coord_gate_mlp;    // 1 -> 1, elementwise over correlation matrices
    Mlp radial_mlp;        // 1 -> d_h
    Mlp hidden_mlp;        // 3*d_h -> d_h
    Mlp coord_mlp;         // 3*d_h -> 1
    LayerNormParams ln_att, ln_ffn;

    static GetLayerParams make(const GetConfig& cfg, Rng& rng);
    void collect(const std::string& prefix, std::vector<ParamRef>& out);
};

/// Embedding tables plus the layer stack.
struct GetParams {
    GetConfig cfg;
    EmbeddingTables tables;
    std::vector<GetLayerParams> layers;

    static GetParams make(const GetConfig& cfg, Rng& rng);
    void collect(std::vector<ParamRef>& out);
};

struct HeadParams {
    Mlp regressor;   // d_h -> 1
    Mlp classifier;  // 2*d_h -> 1

    static HeadParams make(std::int64_t d_h, Rng& rng);
    void collect(std::vector<ParamRef>& out);
    void collect(const std::string& prefix, std::vector<ParamRef>& out);
};

/// Encoder plus task heads; the unit of checkpointing.
struct GetModel {
    GetParams encoder;
    HeadParams heads;

    static GetModel make(const GetConfig& cfg, std::uint64_t seed);
    std::vector<ParamRef> collect();
};

void watch_all(Tape& tape, const std::vector<ParamRef>& params);

// ---------------------------------------------------------------- layer ops

/// One bilevel attention pass over every block: atom-level cross attention
/// within each edge, block-level attention across a block's in-neighbors,
/// residual updates of H and X.
std::vector<BlockState> bilevel_attention(const ComplexGraph& topo,
                                          const std::vector<BlockState>& states,
                                          const Tensor& edge_table, const GetLayerParams& p);

/// Per-atom feed-forward update conditioned on the block centroid and the
/// centered squared radius. Singleton blocks keep their coordinate exactly.
BlockState equivariant_ffn_block(const BlockState& st, const GetLayerParams& p);
std::vector<BlockState> equivariant_ffn(const std::vector<BlockState>& states,
                                        const GetLayerParams& p);

/// Feature layer norm per atom plus coordinate normalization about the
/// whole-graph centroid (variance over all 3N coordinate deviations).
std::vector<BlockState> equivariant_layer_norm(const std::vector<BlockState>& states,
                                               const LayerNormParams& p);

/// attention -> LN -> FFN -> LN. Residuals live inside the sub-modules.
std::vector<BlockState> get_layer(const ComplexGraph& topo, const std::vector<BlockState>& states,
                                  const Tensor& edge_table, const GetLayerParams& p);

/// Embeds the graph (after the requested single-level reduction, if any)
/// and applies every layer. The result carries the encoded per-block states.
ComplexGraph get_forward(const ComplexGraph& g, const GetParams& p,
                         ReprLevel level = ReprLevel::Unified);

// ---------------------------------------------------------------- heads

struct PoolingOutput {
    Tensor graph_vec;               // [d_h]
    std::vector<Tensor> block_vecs;  // each [d_h]
};

/// v / max(||v||_2, eps).
Tensor normalize_vec(const Tensor& v, double eps = kNormEps);

/// Sum atoms within each block, normalize; sum the block vectors, normalize.
PoolingOutput hierarchical_pool(const std::vector<BlockState>& states);
PoolingOutput hierarchical_pool(const ComplexGraph& encoded);

Tensor predict_affinity(const Tensor& graph_vec, const HeadParams& p);
Tensor efficacy_logit(const Tensor& vec_active, const Tensor& vec_inactive, const HeadParams& p);
/// Logistic of the classifier on [active ‖ inactive]; strictly inside (0,1).
Tensor predict_efficacy(const Tensor& vec_active, const Tensor& vec_inactive,
                        const HeadParams& p);

}  // namespace getmol
