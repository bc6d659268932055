#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "getmol/graph.hpp"

using namespace getmol;

namespace {

Block single_atom_block(double x, double y, double z, int mol = 0) {
    Block b;
    b.molecule_id = mol;
    b.block_type = 0;
    b.atoms.push_back(Atom{1, 0, {x, y, z}});
    return b;
}

Block block_at(std::initializer_list<std::array<double, 3>> coords, int mol = 0) {
    Block b;
    b.molecule_id = mol;
    b.block_type = 0;
    for (const auto& c : coords) b.atoms.push_back(Atom{1, 0, c});
    return b;
}

// O(B^2) brute-force neighbor oracle: scan-minimum selection over the full
// distance matrix with the same (distance, index) tie-break.
std::vector<std::vector<int>> brute_force_knn(const std::vector<Block>& blocks, int k) {
    const int n = static_cast<int>(blocks.size());
    std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            dist[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                block_distance(blocks[static_cast<std::size_t>(i)], blocks[static_cast<std::size_t>(j)]);
    std::vector<std::vector<int>> result(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        std::vector<bool> used(static_cast<std::size_t>(n), false);
        used[static_cast<std::size_t>(i)] = true;
        const int take = std::min(k, n - 1);
        for (int pick = 0; pick < take; ++pick) {
            int best = -1;
            for (int j = 0; j < n; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                if (best < 0 ||
                    dist[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] <
                        dist[static_cast<std::size_t>(i)][static_cast<std::size_t>(best)]) {
                    best = j;
                }
                // equal distance keeps the earlier (lower-index) candidate
            }
            used[static_cast<std::size_t>(best)] = true;
            result[static_cast<std::size_t>(i)].push_back(best);
        }
    }
    return result;
}

std::vector<Block> random_blocks(Rng& rng, int n_blocks, int max_atoms) {
    std::uniform_int_distribution<int> atoms_dist(1, max_atoms);
    std::uniform_real_distribution<double> coord(-8.0, 8.0);
    std::uniform_int_distribution<int> mol(0, 1);
    std::vector<Block> blocks;
    for (int i = 0; i < n_blocks; ++i) {
        Block b;
        b.molecule_id = mol(rng);
        b.block_type = i % vocab::n_residues();
        const int na = atoms_dist(rng);
        for (int a = 0; a < na; ++a) {
            b.atoms.push_back(Atom{1, 0, {coord(rng), coord(rng), coord(rng)}});
        }
        blocks.push_back(std::move(b));
    }
    return blocks;
}

}  // namespace

TEST_CASE("block_distance of single-atom blocks is the euclidean distance") {
    CHECK(block_distance(single_atom_block(0, 0, 0), single_atom_block(3, 4, 0)) == 5.0);
}

TEST_CASE("block_distance is zero when blocks share a coordinate") {
    const Block a = block_at({{1, 2, 3}, {9, 9, 9}});
    const Block b = block_at({{1, 2, 3}, {-4, 0, 2}});
    CHECK(block_distance(a, b) == 0.0);
}

TEST_CASE("block_distance enumerates all pairs: {(0,0,0),(1,0,0)} vs {(4,0,0),(10,0,0)} -> 3") {
    const Block a = block_at({{0, 0, 0}, {1, 0, 0}});
    const Block b = block_at({{4, 0, 0}, {10, 0, 0}});
    CHECK(block_distance(a, b) == 3.0);
}

TEST_CASE("block_distance is symmetric and non-negative on random blocks") {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const auto blocks = random_blocks(rng, 2, 6);
        const double ab = block_distance(blocks[0], blocks[1]);
        const double ba = block_distance(blocks[1], blocks[0]);
        CHECK(ab == ba);
        CHECK(ab >= 0.0);
    }
}

TEST_CASE("three blocks with k=9 give the complete digraph plus self edges") {
    std::vector<Block> blocks{single_atom_block(0, 0, 0), single_atom_block(1, 0, 0),
                              single_atom_block(2, 0, 0)};
    const auto edges = build_knn_edges(blocks, 9);
    CHECK(edges.size() == 9);  // 3 self + 6 directed neighbor edges
    int self = 0;
    for (const auto& e : edges) self += e.type == EdgeType::Self ? 1 : 0;
    CHECK(self == 3);
}

TEST_CASE("collinear blocks at x = 0, 1, 3 with k = 1") {
    std::vector<Block> blocks{single_atom_block(0, 0, 0), single_atom_block(1, 0, 0),
                              single_atom_block(3, 0, 0)};
    const auto edges = build_knn_edges(blocks, 1);
    // expected in-neighbors: 0<-1, 1<-0, 2<-1, plus self edges
    std::set<std::pair<int, int>> pairs;
    for (const auto& e : edges) pairs.insert({e.src, e.dst});
    CHECK(pairs.count({1, 0}) == 1);
    CHECK(pairs.count({0, 1}) == 1);
    CHECK(pairs.count({1, 2}) == 1);
    CHECK(pairs.size() == 6);
}

TEST_CASE("build_knn_graph matches the brute-force oracle on random instances") {
    Rng rng(23);
    std::uniform_int_distribution<int> size_dist(2, 50);
    std::uniform_int_distribution<int> k_dist(1, 12);
    for (int trial = 0; trial < 60; ++trial) {
        const int n = size_dist(rng);
        const int k = k_dist(rng);
        const auto blocks = random_blocks(rng, n, 4);
        const auto edges = build_knn_edges(blocks, k);
        const auto oracle = brute_force_knn(blocks, k);
        // collect neighbor sets per destination, excluding self edges
        std::vector<std::set<int>> got(static_cast<std::size_t>(n));
        int self_edges = 0;
        for (const auto& e : edges) {
            if (e.type == EdgeType::Self) {
                ++self_edges;
                continue;
            }
            got[static_cast<std::size_t>(e.dst)].insert(e.src);
        }
        CHECK(self_edges == n);
        for (int i = 0; i < n; ++i) {
            const std::set<int> expect(oracle[static_cast<std::size_t>(i)].begin(),
                                       oracle[static_cast<std::size_t>(i)].end());
            CHECK(got[static_cast<std::size_t>(i)] == expect);
        }
    }
}

TEST_CASE("every block has exactly one self edge and edge types match membership") {
    Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        const auto blocks = random_blocks(rng, 12, 3);
        const ComplexGraph g = build_graph(blocks, 4);
        g.validate();  // throws on duplicate edges, bad self loops, type mismatches
        for (const auto& e : g.edges) {
            const bool inter = g.blocks[static_cast<std::size_t>(e.src)].molecule_id !=
                               g.blocks[static_cast<std::size_t>(e.dst)].molecule_id;
            if (e.src == e.dst) {
                CHECK(e.type == EdgeType::Self);
            } else {
                CHECK(e.type == (inter ? EdgeType::Inter : EdgeType::Intra));
            }
        }
    }
}

TEST_CASE("embed_graph with all-zero tables gives zero features") {
    std::vector<Block> blocks{block_at({{0, 0, 0}, {1, 0, 0}}), single_atom_block(4, 0, 0)};
    const ComplexGraph g = build_graph(blocks, 9);
    EmbeddingTables t;
    t.atom_table = Tensor::zeros({vocab::n_elements(), 4});
    t.block_table = Tensor::zeros({vocab::n_block_types(), 4});
    t.pos_table = Tensor::zeros({vocab::n_pos_codes(), 4});
    t.edge_table = Tensor::zeros({3, 2});
    const ComplexGraph e = embed_graph(g, t);
    REQUIRE(e.embedded.has_value());
    for (const auto& st : *e.embedded) {
        for (double v : st.h.vec()) CHECK(v == 0.0);
    }
}

TEST_CASE("embed_graph sums one-hot rows of the three tables") {
    // d_h large enough that atom/block/pos one-hot positions are distinct
    const std::int64_t d = 8;
    std::vector<double> atom_tab(static_cast<std::size_t>(vocab::n_elements() * d), 0.0);
    std::vector<double> block_tab(static_cast<std::size_t>(vocab::n_block_types() * d), 0.0);
    std::vector<double> pos_tab(static_cast<std::size_t>(vocab::n_pos_codes() * d), 0.0);
    atom_tab[static_cast<std::size_t>(2 * d + 0)] = 1.0;   // element 2 -> dim 0
    block_tab[static_cast<std::size_t>(5 * d + 1)] = 1.0;  // block 5 -> dim 1
    pos_tab[static_cast<std::size_t>(3 * d + 2)] = 1.0;    // pos 3 -> dim 2
    EmbeddingTables t;
    t.atom_table = Tensor({vocab::n_elements(), d}, atom_tab);
    t.block_table = Tensor({vocab::n_block_types(), d}, block_tab);
    t.pos_table = Tensor({vocab::n_pos_codes(), d}, pos_tab);
    t.edge_table = Tensor::zeros({3, 2});

    Block b;
    b.block_type = 5;
    b.molecule_id = 0;
    b.atoms.push_back(Atom{2, 3, {0, 0, 0}});
    const ComplexGraph g = build_graph({b}, 9);
    const ComplexGraph e = embed_graph(g, t);
    const Tensor& h = (*e.embedded)[0].h;
    CHECK(h.at({0, 0}) == 1.0);
    CHECK(h.at({0, 1}) == 1.0);
    CHECK(h.at({0, 2}) == 1.0);
    for (std::int64_t c = 3; c < d; ++c) CHECK(h.at({0, c}) == 0.0);
}

TEST_CASE("a ligand atom receives the BLANK position embedding") {
    const std::int64_t d = 4;
    Rng rng(5);
    EmbeddingTables t = EmbeddingTables::make(d, 2, rng, 1.0);
    // Zero atom and block tables so H rows expose the position row directly.
    t.atom_table = Tensor::zeros({vocab::n_elements(), d});
    t.block_table = Tensor::zeros({vocab::n_block_types(), d});

    Block lig;
    lig.block_type = vocab::small_molecule_block_id(vocab::element_id("C"));
    lig.molecule_id = 0;
    lig.atoms.push_back(Atom{vocab::element_id("C"), vocab::pos_blank(), {0, 0, 0}});
    const ComplexGraph e = embed_graph(build_graph({lig}, 9), t);
    const Tensor& h = (*e.embedded)[0].h;
    for (std::int64_t c = 0; c < d; ++c) {
        CHECK(h.at({0, c}) == t.pos_table.at({vocab::pos_blank(), c}));
    }
}

TEST_CASE("embed_graph maps out-of-range ids to the UNK rows") {
    const std::int64_t d = 4;
    Rng rng(9);
    const EmbeddingTables t = EmbeddingTables::make(d, 2, rng, 1.0);
    Block b;
    b.block_type = 9999;
    b.molecule_id = 0;
    b.atoms.push_back(Atom{-3, 998, {0, 0, 0}});
    const ComplexGraph e = embed_graph(build_graph({b}, 9), t);
    const Tensor& h = (*e.embedded)[0].h;
    for (std::int64_t c = 0; c < d; ++c) {
        const double expect = t.atom_table.at({vocab::element_unk(), c}) +
                              t.block_table.at({vocab::block_unk(), c}) +
                              t.pos_table.at({vocab::pos_unk(), c});
        CHECK(h.at({0, c}) == doctest::Approx(expect).epsilon(1e-15));
    }
}

TEST_CASE("two overlapping single-atom blocks survive interface extraction at cutoff 0") {
    std::vector<Block> blocks{single_atom_block(1, 1, 1, 0), single_atom_block(1, 1, 1, 1)};
    const ComplexGraph g = build_graph(blocks, 9);
    const ComplexGraph kept = extract_interface(g, 0.0);
    CHECK(kept.n_blocks() == 2);
}

TEST_CASE("interface extraction keeps exactly the blocks within the cutoff") {
    // pairwise distances A-B: 5, A-C: 10, B-C: 10; molecules {A} and {B, C}
    std::vector<Block> blocks{single_atom_block(0, 0, 0, 0), single_atom_block(5, 0, 0, 1),
                              single_atom_block(-10, 0, 0, 1)};
    const ComplexGraph g = build_graph(blocks, 9);
    const ComplexGraph kept = extract_interface(g, 6.0);
    REQUIRE(kept.n_blocks() == 2);
    CHECK(kept.blocks[0].molecule_id == 0);
    CHECK(kept.blocks[1].molecule_id == 1);
    CHECK(kept.blocks[1].atoms[0].coord[0] == 5.0);
}

TEST_CASE("interface extraction reports an empty interface explicitly") {
    std::vector<Block> blocks{single_atom_block(0, 0, 0, 0), single_atom_block(500, 0, 0, 1)};
    const ComplexGraph g = build_graph(blocks, 9);
    CHECK_THROWS_WITH_AS(extract_interface(g, 6.0), doctest::Contains("empty interface"),
                         std::runtime_error);
}

TEST_CASE("interface survivors grow monotonically with the cutoff") {
    Rng rng(37);
    RandomComplexSpec spec;
    for (int trial = 0; trial < 10; ++trial) {
        const ComplexGraph g = sample_random_complex(rng, spec);
        std::vector<double> cutoffs{2.0, 4.0, 6.0, 10.0, 30.0};
        std::set<std::string> prev;
        bool prev_ok = false;
        for (double c : cutoffs) {
            std::set<std::string> cur;
            try {
                const ComplexGraph kept = extract_interface(g, c);
                for (const auto& b : kept.blocks) {
                    // identify blocks by their first atom coordinate
                    cur.insert(std::to_string(b.atoms[0].coord[0]) + "/" +
                               std::to_string(b.atoms[0].coord[1]));
                }
            } catch (const std::runtime_error&) {
                cur.clear();
            }
            if (prev_ok) {
                CHECK(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end()));
            }
            prev = cur;
            prev_ok = true;
        }
    }
}

TEST_CASE("to_atom_level splits a 3-atom residue into 3 singleton blocks") {
    const Block b = block_at({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}});
    const ComplexGraph g = build_graph({b}, 9);
    const ComplexGraph a = to_atom_level(g);
    CHECK(a.n_blocks() == 3);
    for (const auto& blk : a.blocks) CHECK(blk.atoms.size() == 1);
}

TEST_CASE("to_atom_level keeps an all-singleton partition unchanged") {
    std::vector<Block> blocks{single_atom_block(0, 0, 0), single_atom_block(1, 1, 1)};
    const ComplexGraph g = build_graph(blocks, 9);
    const ComplexGraph a = to_atom_level(g);
    REQUIRE(a.n_blocks() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(a.blocks[i].atoms[0].coord == g.blocks[i].atoms[0].coord);
        CHECK(a.blocks[i].block_type == g.blocks[i].block_type);
    }
}

TEST_CASE("to_atom_level block count equals the input atom count") {
    Rng rng(41);
    RandomComplexSpec spec;
    for (int trial = 0; trial < 10; ++trial) {
        const ComplexGraph g = sample_random_complex(rng, spec);
        CHECK(to_atom_level(g).n_blocks() == g.n_atoms());
    }
}

TEST_CASE("to_block_level reduces coordinates to the centroid and features to the row mean") {
    Block b = block_at({{0, 0, 0}, {2, 0, 0}});
    const ComplexGraph g = build_graph({b}, 9);
    ComplexGraph e = g;
    // features [[1,3],[3,5]] -> [2,4]
    e.embedded = std::vector<BlockState>{BlockState{Tensor::matrix(2, 2, {1, 3, 3, 5}),
                                                    Tensor::matrix(2, 3, {0, 0, 0, 2, 0, 0})}};
    const ComplexGraph r = to_block_level(e);
    REQUIRE(r.n_blocks() == 1);
    CHECK(r.blocks[0].atoms.size() == 1);
    CHECK(r.blocks[0].atoms[0].coord[0] == 1.0);
    const Tensor& h = (*r.embedded)[0].h;
    CHECK(h.at({0, 0}) == 2.0);
    CHECK(h.at({0, 1}) == 4.0);
    const Tensor& x = (*r.embedded)[0].x;
    CHECK(x.at({0, 0}) == 1.0);
}

TEST_CASE("to_block_level leaves singleton blocks unchanged") {
    const Block b = single_atom_block(3, -1, 2);
    ComplexGraph e = build_graph({b}, 9);
    e.embedded = std::vector<BlockState>{
        BlockState{Tensor::matrix(1, 2, {7, 8}), Tensor::matrix(1, 3, {3, -1, 2})}};
    const ComplexGraph r = to_block_level(e);
    CHECK((*r.embedded)[0].h.at({0, 0}) == 7.0);
    CHECK((*r.embedded)[0].x.at({0, 2}) == 2.0);
    CHECK(r.blocks[0].atoms[0].coord == std::array<double, 3>{3, -1, 2});
}

TEST_CASE("k = 9 is the shipped neighbor default") {
    CHECK(ComplexGraph{}.knn_k == 9);
    CHECK(RandomComplexSpec{}.k == 9);
}

TEST_CASE("serialization canonicalizes interleaved molecule ids without breaking edges") {
    // blocks ordered mol 1, mol 0, mol 1: indices must be remapped on write
    std::vector<Block> blocks{single_atom_block(0, 0, 0, 1), single_atom_block(1, 0, 0, 0),
                              single_atom_block(2, 0, 0, 1)};
    const ComplexGraph g = build_graph(blocks, 1);
    const ComplexGraph back = graph_from_json(graph_to_json(g));
    back.validate();
    REQUIRE(back.n_blocks() == 3);
    // canonical order: the mol-0 block first
    CHECK(back.blocks[0].molecule_id == 0);
    CHECK(back.blocks[0].atoms[0].coord[0] == 1.0);
    // every remapped edge still connects the same coordinates
    for (const auto& e : back.edges) {
        if (e.type != EdgeType::Inter) continue;
        const double a = back.blocks[static_cast<std::size_t>(e.src)].atoms[0].coord[0];
        const double b = back.blocks[static_cast<std::size_t>(e.dst)].atoms[0].coord[0];
        CHECK(std::abs(a - b) <= 1.0 + 1e-12);  // kNN at k=1 links nearest neighbors only
    }
}

TEST_CASE("graph JSON round-trips blocks, edges and k") {
    Rng rng(51);
    RandomComplexSpec spec;
    const ComplexGraph g = sample_random_complex(rng, spec);
    const std::string j1 = graph_to_json(g);
    const ComplexGraph g2 = graph_from_json(j1);
    const std::string j2 = graph_to_json(g2);
    CHECK(j1 == j2);
    CHECK(g2.n_blocks() == g.n_blocks());
    CHECK(g2.edges.size() == g.edges.size());
    CHECK(g2.knn_k == g.knn_k);
}
