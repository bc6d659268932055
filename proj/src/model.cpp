#include "getmol/model.hpp"

#include <cmath>

namespace getmol {

ReprLevel repr_level_from_string(const std::string& s) {
    if (s == "unified") return ReprLevel::Unified;
    if (s == "atom") return ReprLevel::Atom;
    if (s == "block") return ReprLevel::Block;
    throw ContractError("unknown representation level '" + s + "'");
}

std::string repr_level_name(ReprLevel level) {
    switch (level) {
        case ReprLevel::Unified: return "unified";
        case ReprLevel::Atom: return "atom";
        case ReprLevel::Block: return "block";
    }
    return "?";
}

void GetConfig::validate() const {
    if (d_h < 1 || d_r < 1 || d_e < 1 || d_scalar < 1) {
        throw ContractError("model widths must be positive");
    }
    if (n_layers < 1) throw ContractError("n_layers must be at least 1");
}

LayerNormParams LayerNormParams::make(std::int64_t d_h) {
    LayerNormParams p;
    p.gamma = Tensor::full({d_h}, 1.0);
    p.beta = Tensor::zeros({d_h});
    p.sigma_coord = Tensor::scalar(1.0);
    return p;
}

void LayerNormParams::collect(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
    out.push_back({prefix + ".sigma_coord", &sigma_coord});
}

GetLayerParams GetLayerParams::make(const GetConfig& cfg, Rng& rng) {
    GetLayerParams p;
    const double proj_bound = std::sqrt(6.0 / static_cast<double>(cfg.d_h + cfg.d_r));
    p.w_q = Tensor::rand_uniform({cfg.d_h, cfg.d_r}, rng, proj_bound);
    p.w_k = Tensor::rand_uniform({cfg.d_h, cfg.d_r}, rng, proj_bound);
    p.w_v = Tensor::rand_uniform({cfg.d_h, cfg.d_r}, rng, proj_bound);
    p.dist_mlp = Mlp::make({1, cfg.d_scalar, 1}, Activation::Silu, rng);
    p.edge_mlp = Mlp::make({cfg.d_e, cfg.d_e, 1}, Activation::Silu, rng);
    p.message_mlp = Mlp::make({cfg.d_r, cfg.d_r, cfg.d_h}, Activation::Silu, rng);
    p.coord_gate_mlp = Mlp::make({1, cfg.d_scalar, 1}, Activation::Silu, rng, 0.5);
    p.radial_mlp = Mlp::make({1, cfg.d_scalar, cfg.d_h}, Activation::Silu, rng);
    p.hidden_mlp = Mlp::make({3 * cfg.d_h, 3 * cfg.d_h, cfg.d_h}, Activation::Silu, rng);
    p.coord_mlp = Mlp::make({3 * cfg.d_h, 3 * cfg.d_h, 1}, Activation::Silu, rng, 0.5);
    p.ln_att = LayerNormParams::make(cfg.d_h);
    p.ln_ffn = LayerNormParams::make(cfg.d_h);
    return p;
}

void GetLayerParams::collect(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".w_q", &w_q});
    out.push_back({prefix + ".w_k", &w_k});
    out.push_back({prefix + ".w_v", &w_v});
    dist_mlp.collect(prefix + ".dist_mlp", out);
    edge_mlp.collect(prefix + ".edge_mlp", out);
    message_mlp.collect(prefix + ".message_mlp", out);
    coord_gate_mlp.collect(prefix + ".coord_gate_mlp", out);
    radial_mlp.collect(prefix + ".radial_mlp", out);
    hidden_mlp.collect(prefix + ".hidden_mlp", out);
    coord_mlp.collect(prefix + ".coord_mlp", out);
    ln_att.collect(prefix + ".ln_att", out);
    ln_ffn.collect(prefix + ".ln_ffn", out);
}

GetParams GetParams::make(const GetConfig& cfg, Rng& rng) {
    cfg.validate();
    GetParams p;
    p.cfg = cfg;
    p.tables = EmbeddingTables::make(cfg.d_h, cfg.d_e, rng, 0.4);
    for (int i = 0; i < cfg.n_layers; ++i) p.layers.push_back(GetLayerParams::make(cfg, rng));
    return p;
}

void GetParams::collect(std::vector<ParamRef>& out) {
    tables.collect("embed", out);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        layers[i].collect("layers." + std::to_string(i), out);
    }
}

HeadParams HeadParams::make(std::int64_t d_h, Rng& rng) {
    HeadParams h;
    h.regressor = Mlp::make({d_h, d_h, 1}, Activation::Silu, rng);
    h.classifier = Mlp::make({2 * d_h, 2 * d_h, 1}, Activation::Silu, rng);
    return h;
}

void HeadParams::collect(std::vector<ParamRef>& out) { collect("head", out); }

void HeadParams::collect(const std::string& prefix, std::vector<ParamRef>& out) {
    regressor.collect(prefix + ".regressor", out);
    classifier.collect(prefix + ".classifier", out);
}

GetModel GetModel::make(const GetConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    GetModel m;
    m.encoder = GetParams::make(cfg, rng);
    m.heads = HeadParams::make(cfg.d_h, rng);
    return m;
}

std::vector<ParamRef> GetModel::collect() {
    std::vector<ParamRef> out;
    encoder.collect(out);
    heads.collect(out);
    return out;
}

void watch_all(Tape& tape, const std::vector<ParamRef>& params) {
    for (const auto& p : params) tape.watch(*p.tensor);
}

// ---------------------------------------------------------------- attention

std::vector<BlockState> bilevel_attention(const ComplexGraph& topo,
                                          const std::vector<BlockState>& states,
                                          const Tensor& edge_table, const GetLayerParams& p) {
    const std::size_t nb = states.size();
    if (topo.blocks.size() != nb) throw ContractError("state/topology block count mismatch");

    // In-edges per destination, in edge-list order (the reduction order).
    std::vector<std::vector<const Edge*>> in_edges(nb);
    for (const auto& e : topo.edges) in_edges[static_cast<std::size_t>(e.dst)].push_back(&e);
    for (std::size_t i = 0; i < nb; ++i) {
        if (in_edges[i].empty()) {
            throw ContractError("block " + std::to_string(i) +
                                " has no in-edges; self loops are required");
        }
    }

    const double inv_sqrt_dr = 1.0 / std::sqrt(static_cast<double>(p.w_q.extent(1)));

    std::vector<Tensor> q(nb), k(nb), v(nb);
    for (std::size_t i = 0; i < nb; ++i) {
        q[i] = matmul(states[i].h, p.w_q);
        k[i] = matmul(states[i].h, p.w_k);
        v[i] = matmul(states[i].h, p.w_v);
    }

    // Edge-type scalar bias, one per edge type.
    std::vector<Tensor> edge_bias(3);
    for (std::int64_t t = 0; t < 3; ++t) {
        edge_bias[static_cast<std::size_t>(t)] =
            reshape(p.edge_mlp.forward(gather_rows(edge_table, {t})), {1});
    }

    // Pass 1: per-edge geometry and raw correlations; the element-wise
    // distance MLP runs once over every edge's flattened distance matrix.
    struct EdgeWork {
        Tensor xdiff;  // [ni, nj, 3]
        Tensor qk;     // [ni, nj]
        Tensor rmat;   // [ni, nj], filled in pass 2
        Tensor alpha;  // [ni, nj]
        std::int64_t ni, nj;
        std::int64_t flat_off;  // row offset into the stacked [sum ni*nj, 1] buffers
        int src;
        EdgeType type;
    };
    std::vector<std::vector<EdgeWork>> work(nb);
    std::vector<Tensor> dist_parts;
    std::int64_t flat_total = 0;
    for (std::size_t i = 0; i < nb; ++i) {
        const std::int64_t ni = states[i].x.extent(0);
        for (const Edge* e : in_edges[i]) {
            const auto j = static_cast<std::size_t>(e->src);
            const std::int64_t nj = states[j].x.extent(0);
            EdgeWork w;
            w.ni = ni;
            w.nj = nj;
            w.src = e->src;
            w.type = e->type;
            w.flat_off = flat_total;
            w.xdiff = pairwise_diff(states[i].x, states[j].x);
            w.qk = scale(matmul(q[i], transpose(k[j])), inv_sqrt_dr);
            dist_parts.push_back(reshape(norm3(w.xdiff), {ni * nj, 1}));
            flat_total += ni * nj;
            work[i].push_back(std::move(w));
        }
    }
    const Tensor dist_act_all = p.dist_mlp.forward(concat_rows(dist_parts));

    // Pass 2: correlations, atom-level attention, block-level logits; the
    // coordinate gate MLP again runs once over all stacked R entries.
    std::vector<Tensor> rflat_parts;
    std::vector<std::vector<Tensor>> r_scalars(nb);
    for (std::size_t i = 0; i < nb; ++i) {
        for (auto& w : work[i]) {
            const Tensor dist_act =
                reshape(slice_rows(dist_act_all, w.flat_off, w.ni * w.nj), {w.ni, w.nj});
            w.rmat = add(w.qk, dist_act);
            w.alpha = softmax_rows(w.rmat);
            rflat_parts.push_back(reshape(w.rmat, {w.ni * w.nj, 1}));
            r_scalars[i].push_back(
                add(mean_all(w.rmat),
                    edge_bias[static_cast<std::size_t>(static_cast<int>(w.type))]));
        }
    }
    const Tensor gate_all = p.coord_gate_mlp.forward(concat_rows(rflat_parts));

    // Pass 3: attended values, with one message-MLP call over the stacked
    // [sum ni, d_r] rows of every edge.
    std::vector<Tensor> attended_parts;
    std::int64_t msg_total = 0;
    std::vector<std::vector<std::int64_t>> msg_off(nb);
    for (std::size_t i = 0; i < nb; ++i) {
        for (auto& w : work[i]) {
            attended_parts.push_back(matmul(w.alpha, v[static_cast<std::size_t>(w.src)]));
            msg_off[i].push_back(msg_total);
            msg_total += w.ni;
        }
    }
    const Tensor msg_all = p.message_mlp.forward(concat_rows(attended_parts));

    // Pass 4: block-level softmax and the residual updates, accumulated in
    // edge order.
    std::vector<BlockState> out(nb);
    for (std::size_t i = 0; i < nb; ++i) {
        const auto deg = static_cast<std::int64_t>(work[i].size());
        Tensor beta = reshape(softmax_rows(reshape(concat_vec(r_scalars[i]), {1, deg})), {deg});
        Tensor h_acc, x_acc;
        for (std::int64_t t = 0; t < deg; ++t) {
            auto& w = work[i][static_cast<std::size_t>(t)];
            Tensor b = index_element(beta, t);
            Tensor msg = slice_rows(msg_all, msg_off[i][static_cast<std::size_t>(t)], w.ni);
            Tensor h_term = mul(msg, b);
            Tensor gate =
                reshape(slice_rows(gate_all, w.flat_off, w.ni * w.nj), {w.ni, w.nj});
            Tensor x_term = mul(contract_rows(mul(w.alpha, gate), w.xdiff), b);
            h_acc = (t == 0) ? std::move(h_term) : add(h_acc, h_term);
            x_acc = (t == 0) ? std::move(x_term) : add(x_acc, x_term);
        }
        out[i].h = add(states[i].h, h_acc);
        out[i].x = add(states[i].x, x_acc);
    }
    return out;
}

// ---------------------------------------------------------------- feed-forward

BlockState equivariant_ffn_block(const BlockState& st, const GetLayerParams& p) {
    const std::int64_t ni = st.x.extent(0);
    Tensor h_c = mean_over_rows(st.h);  // [d_h]
    Tensor x_c = mean_over_rows(st.x);  // [3]
    Tensor dx = sub(st.x, x_c);         // [ni, 3]
    Tensor s = sum_over_cols(mul(dx, dx));               // [ni], squared radius
    Tensor t = mul(s, reciprocal(add_scalar(s, kFfnC)));  // s / (C + s)
    Tensor r = p.radial_mlp.forward(reshape(t, {ni, 1}));  // [ni, d_h]
    Tensor inp = concat_cols(std::vector<Tensor>{st.h, tile_rows(h_c, ni), r});
    BlockState out;
    out.h = add(st.h, p.hidden_mlp.forward(inp));
    out.x = add(st.x, scale_rows(dx, p.coord_mlp.forward(inp)));
    return out;
}

std::vector<BlockState> equivariant_ffn(const std::vector<BlockState>& states,
                                        const GetLayerParams& p) {
    // Per-block centroids and radial features, then the two MLPs run once
    // over the stacked per-atom inputs of the whole graph.
    std::vector<Tensor> dxs, inputs;
    std::vector<std::int64_t> offsets;
    std::int64_t total = 0;
    for (const auto& st : states) {
        const std::int64_t ni = st.x.extent(0);
        Tensor h_c = mean_over_rows(st.h);
        Tensor x_c = mean_over_rows(st.x);
        Tensor dx = sub(st.x, x_c);
        Tensor s = sum_over_cols(mul(dx, dx));
        Tensor t = mul(s, reciprocal(add_scalar(s, kFfnC)));
        Tensor r = p.radial_mlp.forward(reshape(t, {ni, 1}));
        inputs.push_back(concat_cols(std::vector<Tensor>{st.h, tile_rows(h_c, ni), r}));
        dxs.push_back(std::move(dx));
        offsets.push_back(total);
        total += ni;
    }
    const Tensor inp_all = concat_rows(inputs);
    const Tensor dh_all = p.hidden_mlp.forward(inp_all);
    const Tensor scale_all = p.coord_mlp.forward(inp_all);

    std::vector<BlockState> out;
    out.reserve(states.size());
    for (std::size_t i = 0; i < states.size(); ++i) {
        const std::int64_t ni = states[i].x.extent(0);
        BlockState o;
        o.h = add(states[i].h, slice_rows(dh_all, offsets[i], ni));
        o.x = add(states[i].x, scale_rows(dxs[i], slice_rows(scale_all, offsets[i], ni)));
        out.push_back(std::move(o));
    }
    return out;
}

// ---------------------------------------------------------------- layer norm

std::vector<BlockState> equivariant_layer_norm(const std::vector<BlockState>& states,
                                               const LayerNormParams& p) {
    if (states.empty()) throw ContractError("layer norm over an empty graph");
    std::vector<Tensor> xs;
    xs.reserve(states.size());
    std::int64_t total = 0;
    for (const auto& st : states) {
        xs.push_back(st.x);
        total += st.x.extent(0);
    }
    Tensor all_x = concat_rows(xs);          // [N, 3]
    Tensor centroid = mean_over_rows(all_x);  // [3]
    Tensor centered = sub(all_x, centroid);
    Tensor var = scale(sum_all(mul(centered, centered)), 1.0 / (3.0 * static_cast<double>(total)));
    Tensor coord_scale = mul(p.sigma_coord, rsqrt(add_scalar(var, kLayerNormEps)));  // [1]

    std::vector<Tensor> hs;
    hs.reserve(states.size());
    for (const auto& st : states) hs.push_back(st.h);
    const Tensor h_norm_all = layer_norm_rows(concat_rows(hs), p.gamma, p.beta, kLayerNormEps);

    std::vector<BlockState> out;
    out.reserve(states.size());
    std::int64_t off = 0;
    for (const auto& st : states) {
        const std::int64_t ni = st.x.extent(0);
        BlockState o;
        o.h = slice_rows(h_norm_all, off, ni);
        o.x = add(mul(sub(st.x, centroid), coord_scale), centroid);
        out.push_back(std::move(o));
        off += ni;
    }
    return out;
}

// ---------------------------------------------------------------- composition

std::vector<BlockState> get_layer(const ComplexGraph& topo, const std::vector<BlockState>& states,
                                  const Tensor& edge_table, const GetLayerParams& p) {
    auto s = bilevel_attention(topo, states, edge_table, p);
    s = equivariant_layer_norm(s, p.ln_att);
    s = equivariant_ffn(s, p);
    s = equivariant_layer_norm(s, p.ln_ffn);
    return s;
}

ComplexGraph get_forward(const ComplexGraph& g, const GetParams& p, ReprLevel level) {
    p.cfg.validate();
    ComplexGraph prepared = (level == ReprLevel::Atom) ? to_atom_level(g) : g;
    ComplexGraph embedded = embed_graph(prepared, p.tables);
    if (level == ReprLevel::Block) embedded = to_block_level(embedded);
    std::vector<BlockState> states = *embedded.embedded;
    for (const auto& layer : p.layers) {
        states = get_layer(embedded, states, p.tables.edge_table, layer);
    }
    embedded.embedded = std::move(states);
    return embedded;
}

// ---------------------------------------------------------------- heads

Tensor normalize_vec(const Tensor& v, double eps) {
    Tensor norm = sqrt_elem(sum_all(mul(v, v)));
    return mul(v, reciprocal(clamp_min(norm, eps)));
}

PoolingOutput hierarchical_pool(const std::vector<BlockState>& states) {
    if (states.empty()) throw ContractError("pooling over an empty graph");
    PoolingOutput out;
    Tensor acc;
    for (std::size_t i = 0; i < states.size(); ++i) {
        Tensor bv = normalize_vec(sum_over_rows(states[i].h));
        acc = (i == 0) ? bv : add(acc, bv);
        out.block_vecs.push_back(std::move(bv));
    }
    out.graph_vec = normalize_vec(acc);
    return out;
}

PoolingOutput hierarchical_pool(const ComplexGraph& encoded) {
    if (!encoded.embedded) throw ContractError("pooling requires an encoded graph");
    return hierarchical_pool(*encoded.embedded);
}

Tensor predict_affinity(const Tensor& graph_vec, const HeadParams& p) {
    return reshape(p.regressor.forward(reshape(graph_vec, {1, graph_vec.numel()})), {1});
}

Tensor efficacy_logit(const Tensor& vec_active, const Tensor& vec_inactive, const HeadParams& p) {
    Tensor both = concat_vec(std::vector<Tensor>{vec_active, vec_inactive});
    return reshape(p.classifier.forward(reshape(both, {1, both.numel()})), {1});
}

Tensor predict_efficacy(const Tensor& vec_active, const Tensor& vec_inactive,
                        const HeadParams& p) {
    return sigmoid(efficacy_logit(vec_active, vec_inactive, p));
}

}  // namespace getmol
