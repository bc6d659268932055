#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "getmol/audit.hpp"
#include "getmol/model.hpp"
#include "reference_impl.hpp"

using namespace getmol;

namespace {

double silu_ref(double x) { return x / (1.0 + std::exp(-x)); }

Mlp pass_through_1d() {
    // 1 -> 1 -> 1 with unit weights and zero biases: f(x) = silu(x)
    Mlp m;
    m.weights = {Tensor::matrix(1, 1, {1.0}), Tensor::matrix(1, 1, {1.0})};
    m.biases = {Tensor({1}, {0.0}), Tensor({1}, {0.0})};
    return m;
}

GetLayerParams scalar_layer_params(double wq, double wk, double wv) {
    GetLayerParams p;
    p.w_q = Tensor::matrix(1, 1, {wq});
    p.w_k = Tensor::matrix(1, 1, {wk});
    p.w_v = Tensor::matrix(1, 1, {wv});
    p.dist_mlp = pass_through_1d();
    p.edge_mlp = pass_through_1d();
    p.message_mlp = pass_through_1d();
    p.coord_gate_mlp = pass_through_1d();
    p.radial_mlp = pass_through_1d();
    Mlp three;
    three.weights = {Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}),
                     Tensor::matrix(3, 1, {1, 1, 1})};
    three.biases = {Tensor::zeros({3}), Tensor::zeros({1})};
    p.hidden_mlp = three;
    p.coord_mlp = three;
    p.ln_att = LayerNormParams::make(1);
    p.ln_ffn = LayerNormParams::make(1);
    return p;
}

ComplexGraph two_singleton_graph(std::array<double, 3> x0, std::array<double, 3> x1) {
    Block b0, b1;
    b0.block_type = b1.block_type = 0;
    b0.molecule_id = b1.molecule_id = 0;
    b0.atoms.push_back(Atom{1, 0, x0});
    b1.atoms.push_back(Atom{1, 0, x1});
    return build_graph({b0, b1}, 9);
}

std::vector<BlockState> states_of(std::vector<std::vector<double>> hs,
                                  std::vector<std::vector<double>> xs) {
    std::vector<BlockState> out;
    for (std::size_t i = 0; i < hs.size(); ++i) {
        const auto d = static_cast<std::int64_t>(hs[i].size());
        const auto n = static_cast<std::int64_t>(xs[i].size() / 3);
        out.push_back(BlockState{Tensor({n, d / n}, hs[i]), Tensor({n, 3}, xs[i])});
    }
    return out;
}

}  // namespace

TEST_CASE("a lone self-loop gets block attention weight exactly 1") {
    Block b;
    b.block_type = 0;
    b.molecule_id = 0;
    b.atoms.push_back(Atom{1, 0, {0.3, -0.2, 0.9}});
    const ComplexGraph g = build_graph({b}, 9);
    Rng rng(3);
    const GetParams params = GetParams::make(GetConfig{4, 2, 2, 1}, rng);
    const ComplexGraph base = embed_graph(g, params.tables);
    const auto out = bilevel_attention(base, *base.embedded, params.tables.edge_table,
                                       params.layers[0]);
    // With beta_ii = 1 and X_ii = 0 the coordinate must not move at all.
    const Tensor& x = out[0].x;
    CHECK(x.at({0, 0}) == 0.3);
    CHECK(x.at({0, 1}) == -0.2);
    CHECK(x.at({0, 2}) == 0.9);
}

TEST_CASE("two singleton blocks match the scalar transcription of the update equations") {
    const std::array<double, 3> x0{0.0, 0.0, 0.0};
    const std::array<double, 3> x1{1.5, -0.5, 2.0};
    const ComplexGraph g = two_singleton_graph(x0, x1);
    const GetLayerParams p = scalar_layer_params(0.7, -1.1, 0.9);
    const Tensor edge_table = Tensor::matrix(3, 1, {0.25, -0.4, 0.6});  // self, intra, inter

    const double h0 = 0.8, h1 = -1.3;
    const auto states = states_of({{h0}, {h1}}, {{x0[0], x0[1], x0[2]}, {x1[0], x1[1], x1[2]}});
    const auto out = bilevel_attention(g, states, edge_table, p);

    // Scalar recomputation with d_h = d_r = 1 and f(x) = silu(x) everywhere.
    const double q0 = h0 * 0.7, k0 = h0 * -1.1, v0 = h0 * 0.9;
    const double q1 = h1 * 0.7, k1 = h1 * -1.1, v1 = h1 * 0.9;
    const double d01 = std::sqrt(1.5 * 1.5 + 0.5 * 0.5 + 2.0 * 2.0);
    const double r00 = q0 * k0 + silu_ref(0.0);
    const double r01 = q0 * k1 + silu_ref(d01);
    // alpha over a 1x1 matrix is 1; block attention over [self, neighbor]:
    const double s00 = r00 + silu_ref(0.25);  // self edge feature
    const double s01 = r01 + silu_ref(-0.4);  // intra edge feature
    const double m = std::max(s00, s01);
    const double b00 = std::exp(s00 - m) / (std::exp(s00 - m) + std::exp(s01 - m));
    const double b01 = std::exp(s01 - m) / (std::exp(s00 - m) + std::exp(s01 - m));
    const double h0_new = h0 + b00 * silu_ref(v0) + b01 * silu_ref(v1);
    // coordinates: self term vanishes (x0 - x0), neighbor term scales x0 - x1
    const double gate01 = silu_ref(r01);
    std::array<double, 3> x0_new{};
    for (std::size_t d = 0; d < 3; ++d) {
        x0_new[d] = x0[d] + b01 * (1.0 * gate01) * (x0[d] - x1[d]);
    }

    CHECK(out[0].h.at({0, 0}) == doctest::Approx(h0_new).epsilon(1e-14));
    for (std::int64_t d = 0; d < 3; ++d) {
        CHECK(out[0].x.at({0, d}) ==
              doctest::Approx(x0_new[static_cast<std::size_t>(d)]).epsilon(1e-14));
    }

    // block 1 mirror
    const double r11 = q1 * k1 + silu_ref(0.0);
    const double r10 = q1 * k0 + silu_ref(d01);
    const double s11 = r11 + silu_ref(0.25);
    const double s10 = r10 + silu_ref(-0.4);
    const double m1 = std::max(s11, s10);
    const double b11 = std::exp(s11 - m1) / (std::exp(s11 - m1) + std::exp(s10 - m1));
    const double b10 = std::exp(s10 - m1) / (std::exp(s11 - m1) + std::exp(s10 - m1));
    const double h1_new = h1 + b11 * silu_ref(v1) + b10 * silu_ref(v0);
    CHECK(out[1].h.at({0, 0}) == doctest::Approx(h1_new).epsilon(1e-14));
    const double gate10 = silu_ref(r10);
    for (std::int64_t d = 0; d < 3; ++d) {
        const auto dd = static_cast<std::size_t>(d);
        const double expect = x1[dd] + b10 * gate10 * (x1[dd] - x0[dd]);
        CHECK(out[1].x.at({0, d}) == doctest::Approx(expect).epsilon(1e-14));
    }
}

TEST_CASE("attention output shapes depend only on the destination block") {
    Rng rng(11);
    RandomComplexSpec spec;
    spec.min_blocks = 4;
    spec.max_blocks = 8;
    spec.min_atoms = 1;
    spec.max_atoms = 7;
    const ComplexGraph g = sample_random_complex(rng, spec);
    const GetConfig cfg{6, 3, 2, 1};
    const GetParams params = GetParams::make(cfg, rng);
    const ComplexGraph base = embed_graph(g, params.tables);
    const auto out = bilevel_attention(base, *base.embedded, params.tables.edge_table,
                                       params.layers[0]);
    for (std::size_t i = 0; i < g.blocks.size(); ++i) {
        const auto ni = static_cast<std::int64_t>(g.blocks[i].atoms.size());
        CHECK(out[i].h.shape() == Shape{ni, cfg.d_h});
        CHECK(out[i].x.shape() == Shape{ni, 3});
    }
}

TEST_CASE("atom- and block-level attention weights are normalized") {
    Rng rng(13);
    RandomComplexSpec spec;
    spec.min_blocks = 3;
    spec.max_blocks = 6;
    const ComplexGraph g = sample_random_complex(rng, spec);
    const GetParams params = GetParams::make(GetConfig{8, 4, 4, 1}, rng);
    const ComplexGraph base = embed_graph(g, params.tables);
    const auto& states = *base.embedded;
    const auto& p = params.layers[0];
    const double inv_sqrt_dr = 1.0 / std::sqrt(4.0);

    // Recompute the attention tensors from the update equations.
    std::vector<std::vector<const Edge*>> in_edges(g.blocks.size());
    for (const auto& e : g.edges) in_edges[static_cast<std::size_t>(e.dst)].push_back(&e);
    for (std::size_t i = 0; i < g.blocks.size(); ++i) {
        std::vector<double> r_scalars;
        for (const Edge* e : in_edges[i]) {
            const auto j = static_cast<std::size_t>(e->src);
            const Tensor rmat =
                add(scale(matmul(matmul(states[i].h, p.w_q), transpose(matmul(states[j].h, p.w_k))),
                          inv_sqrt_dr),
                    reshape(p.dist_mlp.forward(reshape(norm3(pairwise_diff(states[i].x, states[j].x)),
                                                       {states[i].x.extent(0) * states[j].x.extent(0), 1})),
                            {states[i].x.extent(0), states[j].x.extent(0)}));
            const Tensor alpha = softmax_rows(rmat);
            for (std::int64_t r = 0; r < alpha.extent(0); ++r) {
                double s = 0.0;
                for (std::int64_t c = 0; c < alpha.extent(1); ++c) s += alpha.at({r, c});
                CHECK(std::abs(s - 1.0) <= 1e-12);
            }
            r_scalars.push_back(mean_all(rmat).value() +
                                reference::mlp_eval(p.edge_mlp,
                                                    {params.tables.edge_table.at({static_cast<int>(e->type), 0}),
                                                     params.tables.edge_table.at({static_cast<int>(e->type), 1}),
                                                     params.tables.edge_table.at({static_cast<int>(e->type), 2}),
                                                     params.tables.edge_table.at({static_cast<int>(e->type), 3})})[0]);
        }
        double mx = r_scalars[0];
        for (double v : r_scalars) mx = std::max(mx, v);
        double total = 0.0;
        for (double v : r_scalars) total += std::exp(v - mx);
        double sum_beta = 0.0;
        for (double v : r_scalars) sum_beta += std::exp(v - mx) / total;
        CHECK(std::abs(sum_beta - 1.0) <= 1e-12);
    }
}

TEST_CASE("ffn leaves a singleton block's coordinate exactly unchanged") {
    Rng rng(17);
    const GetLayerParams p = GetLayerParams::make(GetConfig{5, 2, 2, 1}, rng);
    BlockState st{Tensor::randn({1, 5}, rng), Tensor::matrix(1, 3, {1.25, -3.5, 0.75})};
    const BlockState out = equivariant_ffn_block(st, p);
    CHECK(out.x.at({0, 0}) == 1.25);
    CHECK(out.x.at({0, 1}) == -3.5);
    CHECK(out.x.at({0, 2}) == 0.75);
}

TEST_CASE("ffn on a 2-atom block matches the scalar hand evaluation") {
    const GetLayerParams p = scalar_layer_params(1, 1, 1);  // only the phi maps matter here
    const double h0 = 0.4, h1 = -0.9;
    BlockState st{Tensor::matrix(2, 1, {h0, h1}), Tensor::matrix(2, 3, {1, 0, 0, -1, 0, 0})};
    const BlockState out = equivariant_ffn_block(st, p);

    const double h_c = 0.5 * (h0 + h1);
    // both atoms sit at distance 1 from the centroid: s = 1, t = 1/2
    const double r = silu_ref(0.5);
    const double phi_h0 = silu_ref(h0) + silu_ref(h_c) + silu_ref(r);
    const double phi_h1 = silu_ref(h1) + silu_ref(h_c) + silu_ref(r);
    CHECK(out.h.at({0, 0}) == doctest::Approx(h0 + phi_h0).epsilon(1e-14));
    CHECK(out.h.at({1, 0}) == doctest::Approx(h1 + phi_h1).epsilon(1e-14));
    // x' = x + dx * phi_x with dx = (+-1, 0, 0)
    CHECK(out.x.at({0, 0}) == doctest::Approx(1.0 + phi_h0).epsilon(1e-14));
    CHECK(out.x.at({1, 0}) == doctest::Approx(-1.0 - phi_h1).epsilon(1e-14));
    CHECK(out.x.at({0, 1}) == 0.0);
    CHECK(out.x.at({1, 2}) == 0.0);
}

TEST_CASE("layer norm is a fixed point on centered unit-variance coordinates") {
    // 2 atoms at +-(a,0,0) with 2*a^2/6 = 1 => a = sqrt(3)
    const double a = std::sqrt(3.0);
    LayerNormParams p = LayerNormParams::make(2);
    std::vector<BlockState> st{{Tensor::matrix(1, 2, {0.4, -0.4}), Tensor::matrix(1, 3, {a, 0, 0})},
                               {Tensor::matrix(1, 2, {1.0, 2.0}), Tensor::matrix(1, 3, {-a, 0, 0})}};
    const auto out = equivariant_layer_norm(st, p);
    CHECK(out[0].x.at({0, 0}) == doctest::Approx(a).epsilon(1e-9));
    CHECK(out[1].x.at({0, 0}) == doctest::Approx(-a).epsilon(1e-9));
}

TEST_CASE("layer norm maps a constant feature vector to beta") {
    LayerNormParams p = LayerNormParams::make(3);
    p.beta = Tensor({3}, {0.5, -1.0, 2.0});
    std::vector<BlockState> st{
        {Tensor::matrix(1, 3, {7.0, 7.0, 7.0}), Tensor::matrix(1, 3, {0, 0, 1})},
        {Tensor::matrix(1, 3, {1.0, 2.0, 3.0}), Tensor::matrix(1, 3, {0, 0, -1})}};
    const auto out = equivariant_layer_norm(st, p);
    // zero variance: the epsilon guard collapses (h - mean) / sqrt(eps) to 0
    CHECK(out[0].h.at({0, 0}) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(out[0].h.at({0, 1}) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(out[0].h.at({0, 2}) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("layer norm preserves the coordinate centroid and hits the target variance") {
    Rng rng(19);
    RandomComplexSpec spec;
    const ComplexGraph g = sample_random_complex(rng, spec);
    const GetParams params = GetParams::make(GetConfig{6, 3, 2, 1}, rng);
    const ComplexGraph base = embed_graph(g, params.tables);
    const auto out = equivariant_layer_norm(*base.embedded, params.layers[0].ln_att);

    // recompute statistics before and after
    const auto stats = [](const std::vector<BlockState>& states) {
        double c[3] = {0, 0, 0};
        std::size_t n = 0;
        for (const auto& st : states) {
            for (std::int64_t r = 0; r < st.x.extent(0); ++r) {
                for (std::int64_t d = 0; d < 3; ++d) c[d] += st.x.at({r, d});
                ++n;
            }
        }
        for (auto& v : c) v /= static_cast<double>(n);
        double var = 0.0;
        for (const auto& st : states) {
            for (std::int64_t r = 0; r < st.x.extent(0); ++r) {
                for (std::int64_t d = 0; d < 3; ++d) {
                    const double diff = st.x.at({r, d}) - c[d];
                    var += diff * diff;
                }
            }
        }
        var /= 3.0 * static_cast<double>(n);
        return std::array<double, 4>{c[0], c[1], c[2], var};
    };
    const auto before = stats(*base.embedded);
    const auto after = stats(out);
    for (std::size_t d = 0; d < 3; ++d) CHECK(std::abs(after[d] - before[d]) <= 1e-9);
    CHECK(std::abs(after[3] - 1.0) <= 1e-6);  // sigma_coord initializes to 1
}

TEST_CASE("one layer on a single singleton block leaves the coordinate exactly in place") {
    Block b;
    b.block_type = 2;
    b.molecule_id = 0;
    b.atoms.push_back(Atom{2, 1, {4.0, 5.0, -6.0}});
    const ComplexGraph g = build_graph({b}, 9);
    Rng rng(23);
    const GetParams params = GetParams::make(GetConfig{8, 4, 4, 1}, rng);
    const ComplexGraph base = embed_graph(g, params.tables);
    const auto out = get_layer(base, *base.embedded, params.tables.edge_table, params.layers[0]);
    CHECK(out[0].x.at({0, 0}) == 4.0);
    CHECK(out[0].x.at({0, 1}) == 5.0);
    CHECK(out[0].x.at({0, 2}) == -6.0);
}

TEST_CASE("a full layer matches the dense per-edge reference") {
    Rng rng(29);
    RandomComplexSpec spec;
    spec.min_blocks = 3;
    spec.max_blocks = 10;
    for (int trial = 0; trial < 5; ++trial) {
        const ComplexGraph g = sample_random_complex(rng, spec);
        const GetParams params = GetParams::make(GetConfig{8, 4, 4, 1}, rng);
        const ComplexGraph base = embed_graph(g, params.tables);
        const auto got = get_layer(base, *base.embedded, params.tables.edge_table, params.layers[0]);
        auto expect = reference::embed(g, params.tables);
        expect = reference::layer(g, expect, params.tables.edge_table, params.layers[0]);
        CHECK(reference::max_rel_vs(got, expect) < 1e-12);
    }
}

TEST_CASE("the full stack matches the dense reference through three layers") {
    Rng rng(31);
    RandomComplexSpec spec;
    spec.min_blocks = 3;
    spec.max_blocks = 8;
    const ComplexGraph g = sample_random_complex(rng, spec);
    const GetParams params = GetParams::make(GetConfig{8, 4, 4, 3}, rng);
    const ComplexGraph enc = get_forward(g, params);
    const auto expect = reference::forward(g, params);
    CHECK(reference::max_rel_vs(*enc.embedded, expect) < 1e-12);
}

TEST_CASE("n_layers = 0 is rejected at config validation") {
    Rng rng(37);
    CHECK_THROWS_AS(GetConfig({4, 2, 2, 0}).validate(), ContractError);
    CHECK_THROWS_AS(GetParams::make(GetConfig{4, 2, 2, 0}, rng), ContractError);
}

TEST_CASE("the encoder commutes with rigid motions and reflections") {
    Rng rng(41);
    RandomComplexSpec spec;
    spec.min_blocks = 3;
    spec.max_blocks = 10;
    const ComplexGraph g = sample_random_complex(rng, spec);
    GetModel model = GetModel::make(GetConfig{8, 4, 4, 3}, 7);
    AuditReport report;
    check_equivariance(model.encoder, g, 6, 1e-6, 1e-8, rng, report);
    for (const auto& c : report.checks) {
        CAPTURE(c.name);
        CHECK(c.pass);
    }
}

TEST_CASE("the encoder is invariant to intra-block atom permutations") {
    Rng rng(43);
    RandomComplexSpec spec;
    spec.min_blocks = 3;
    spec.max_blocks = 10;
    spec.min_atoms = 2;
    const ComplexGraph g = sample_random_complex(rng, spec);
    GetModel model = GetModel::make(GetConfig{8, 4, 4, 3}, 9);
    AuditReport report;
    check_block_permutation(model.encoder, g, 6, 1e-10, rng, report);
    CHECK(report.checks[0].pass);
}

TEST_CASE("level reductions plug into the forward pass") {
    Rng rng(47);
    RandomComplexSpec spec;
    spec.min_blocks = 3;
    spec.max_blocks = 6;
    const ComplexGraph g = sample_random_complex(rng, spec);
    const GetParams params = GetParams::make(GetConfig{6, 3, 2, 2}, rng);
    const ComplexGraph atom = get_forward(g, params, ReprLevel::Atom);
    CHECK(atom.n_blocks() == g.n_atoms());
    const ComplexGraph block = get_forward(g, params, ReprLevel::Block);
    CHECK(block.n_blocks() == g.n_blocks());
    for (const auto& st : *block.embedded) CHECK(st.x.extent(0) == 1);
}
