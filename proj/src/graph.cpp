#include "getmol/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <unordered_map>

#include <json.hpp>

namespace getmol {

namespace vocab {

namespace {

template <class Arr>
int find_in(const Arr& arr, const std::string& name) {
    for (std::size_t i = 0; i < arr.size(); ++i) {
        if (name == arr[i]) return static_cast<int>(i);
    }
    return -1;
}

}  // namespace

int element_unk() { return n_elements() - 1; }
int pos_blank() { return find_in(kPosCodes, "BLANK"); }
int pos_unk() { return n_pos_codes() - 1; }
int block_unk() { return n_block_types() - 1; }

int element_id(const std::string& symbol) {
    const int id = find_in(kElements, symbol);
    return id >= 0 ? id : element_unk();
}

int pos_code_id(const std::string& name) {
    const int id = find_in(kPosCodes, name);
    return id >= 0 ? id : pos_unk();
}

int residue_block_id(const std::string& res_name) {
    const int id = find_in(kResidues, res_name);
    return id >= 0 ? id : block_unk();
}

int small_molecule_block_id(int element) {
    if (element < 0 || element >= n_elements()) element = element_unk();
    return n_residues() + element;
}

std::string element_name(int id) {
    if (id < 0 || id >= n_elements()) id = element_unk();
    return kElements[static_cast<std::size_t>(id)];
}

std::string pos_code_name(int id) {
    if (id < 0 || id >= n_pos_codes()) id = pos_unk();
    return kPosCodes[static_cast<std::size_t>(id)];
}

std::string block_type_name(int id) {
    if (id >= 0 && id < n_residues()) return kResidues[static_cast<std::size_t>(id)];
    if (id >= n_residues() && id < n_residues() + n_elements()) {
        return element_name(id - n_residues());
    }
    return "UNK";
}

int block_type_id(const std::string& name) {
    const int res = find_in(kResidues, name);
    if (res >= 0) return res;
    const int elem = find_in(kElements, name);
    if (elem >= 0) return small_molecule_block_id(elem);
    return block_unk();
}

}  // namespace vocab

std::string edge_type_name(EdgeType t) {
    switch (t) {
        case EdgeType::Self: return "self";
        case EdgeType::Intra: return "intra";
        case EdgeType::Inter: return "inter";
    }
    return "?";
}

EdgeType edge_type_from_string(const std::string& s) {
    if (s == "self") return EdgeType::Self;
    if (s == "intra") return EdgeType::Intra;
    if (s == "inter") return EdgeType::Inter;
    throw ContractError("unknown edge type '" + s + "'");
}

std::size_t ComplexGraph::n_atoms() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.atoms.size();
    return n;
}

int ComplexGraph::n_molecules() const {
    std::set<int> ids;
    for (const auto& b : blocks) ids.insert(b.molecule_id);
    return static_cast<int>(ids.size());
}

void ComplexGraph::validate() const {
    std::vector<int> self_count(blocks.size(), 0);
    std::set<std::pair<int, int>> seen;
    for (const auto& b : blocks) {
        if (b.atoms.empty()) throw ContractError("graph contains an empty block");
    }
    for (const auto& e : edges) {
        if (e.src < 0 || e.dst < 0 || e.src >= static_cast<int>(blocks.size()) ||
            e.dst >= static_cast<int>(blocks.size())) {
            throw ContractError("edge endpoint out of range");
        }
        if (!seen.insert({e.src, e.dst}).second) {
            throw ContractError("duplicate edge (" + std::to_string(e.src) + ", " +
                                std::to_string(e.dst) + ")");
        }
        const bool inter = blocks[static_cast<std::size_t>(e.src)].molecule_id !=
                           blocks[static_cast<std::size_t>(e.dst)].molecule_id;
        if (e.src == e.dst) {
            if (e.type != EdgeType::Self) throw ContractError("self loop without self type");
            self_count[static_cast<std::size_t>(e.src)]++;
        } else if (inter != (e.type == EdgeType::Inter)) {
            throw ContractError("edge type disagrees with molecule membership");
        }
    }
    for (std::size_t i = 0; i < self_count.size(); ++i) {
        if (self_count[i] != 1) {
            throw ContractError("block " + std::to_string(i) + " has " +
                                std::to_string(self_count[i]) + " self edges");
        }
    }
}

// ---------------------------------------------------------------- distances

double block_distance(const Block& a, const Block& b) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& pa : a.atoms) {
        for (const auto& pb : b.atoms) {
            const double dx = pa.coord[0] - pb.coord[0];
            const double dy = pa.coord[1] - pb.coord[1];
            const double dz = pa.coord[2] - pb.coord[2];
            best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
        }
    }
    return best;
}

std::vector<Edge> build_knn_edges(const std::vector<Block>& blocks, int k) {
    if (k < 1) throw ContractError("kNN requires k >= 1");
    if (blocks.empty()) throw ContractError("kNN on an empty block list");
    const int b = static_cast<int>(blocks.size());
    std::vector<Edge> edges;
    std::vector<std::pair<double, int>> cand;
    for (int i = 0; i < b; ++i) {
        edges.push_back({i, i, EdgeType::Self});
        cand.clear();
        for (int j = 0; j < b; ++j) {
            if (j == i) continue;
            cand.emplace_back(block_distance(blocks[static_cast<std::size_t>(i)],
                                             blocks[static_cast<std::size_t>(j)]),
                              j);
        }
        std::sort(cand.begin(), cand.end());  // ties break toward the lower index
        const int take = std::min<int>(k, static_cast<int>(cand.size()));
        for (int t = 0; t < take; ++t) {
            const int j = cand[static_cast<std::size_t>(t)].second;
            const bool inter = blocks[static_cast<std::size_t>(i)].molecule_id !=
                               blocks[static_cast<std::size_t>(j)].molecule_id;
            edges.push_back({j, i, inter ? EdgeType::Inter : EdgeType::Intra});
        }
    }
    return edges;
}

ComplexGraph build_graph(std::vector<Block> blocks, int k) {
    for (const auto& b : blocks) {
        if (b.atoms.empty()) throw ContractError("cannot build a graph with an empty block");
    }
    ComplexGraph g;
    g.knn_k = k;
    g.edges = build_knn_edges(blocks, k);
    g.blocks = std::move(blocks);
    return g;
}

ComplexGraph extract_interface(const ComplexGraph& g, double cutoff) {
    if (g.n_molecules() < 2) {
        throw ContractError("interface extraction needs at least two molecules");
    }
    std::vector<Block> kept;
    for (std::size_t i = 0; i < g.blocks.size(); ++i) {
        bool survive = false;
        for (std::size_t j = 0; j < g.blocks.size() && !survive; ++j) {
            if (g.blocks[i].molecule_id == g.blocks[j].molecule_id) continue;
            survive = block_distance(g.blocks[i], g.blocks[j]) <= cutoff;
        }
        if (survive) kept.push_back(g.blocks[i]);
    }
    if (kept.empty()) {
        throw std::runtime_error("empty interface: no block within " + std::to_string(cutoff) +
                                 " of a partner molecule");
    }
    return build_graph(std::move(kept), g.knn_k);
}

ComplexGraph to_atom_level(const ComplexGraph& g) {
    std::vector<Block> singletons;
    for (const auto& b : g.blocks) {
        for (const auto& a : b.atoms) {
            Block nb;
            nb.block_type = b.block_type;
            nb.molecule_id = b.molecule_id;
            nb.atoms = {a};
            singletons.push_back(std::move(nb));
        }
    }
    return build_graph(std::move(singletons), g.knn_k);
}

ComplexGraph to_block_level(const ComplexGraph& g) {
    if (!g.embedded) throw ContractError("block-level reduction requires an embedded graph");
    ComplexGraph out = to_block_level_raw(g);
    std::vector<BlockState> reduced;
    reduced.reserve(g.embedded->size());
    for (const auto& st : *g.embedded) {
        BlockState r;
        r.h = reshape(mean_over_rows(st.h), {1, st.h.extent(1)});
        r.x = reshape(mean_over_rows(st.x), {1, 3});
        reduced.push_back(std::move(r));
    }
    out.embedded = std::move(reduced);
    return out;
}

ComplexGraph to_block_level_raw(const ComplexGraph& g) {
    ComplexGraph out;
    out.knn_k = g.knn_k;
    out.edges = g.edges;  // block identities are unchanged
    for (const auto& b : g.blocks) {
        Atom centroid;
        centroid.element = vocab::element_unk();
        centroid.pos_code = vocab::pos_blank();
        for (const auto& a : b.atoms) {
            for (int d = 0; d < 3; ++d) centroid.coord[static_cast<std::size_t>(d)] +=
                a.coord[static_cast<std::size_t>(d)];
        }
        for (int d = 0; d < 3; ++d)
            centroid.coord[static_cast<std::size_t>(d)] /= static_cast<double>(b.atoms.size());
        Block nb;
        nb.block_type = b.block_type;
        nb.molecule_id = b.molecule_id;
        nb.atoms = {centroid};
        out.blocks.push_back(std::move(nb));
    }
    return out;
}

// ---------------------------------------------------------------- embedding

EmbeddingTables EmbeddingTables::make(std::int64_t d_h, std::int64_t d_e, Rng& rng,
                                      double stddev) {
    EmbeddingTables t;
    t.atom_table = Tensor::randn({vocab::n_elements(), d_h}, rng, stddev);
    t.block_table = Tensor::randn({vocab::n_block_types(), d_h}, rng, stddev);
    t.pos_table = Tensor::randn({vocab::n_pos_codes(), d_h}, rng, stddev);
    t.edge_table = Tensor::randn({3, d_e}, rng, stddev);
    return t;
}

void EmbeddingTables::collect(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".atom_table", &atom_table});
    out.push_back({prefix + ".block_table", &block_table});
    out.push_back({prefix + ".pos_table", &pos_table});
    out.push_back({prefix + ".edge_table", &edge_table});
}

namespace {

std::int64_t clamp_id(int id, std::int64_t vocab_size, std::int64_t unk) {
    if (id < 0 || id >= vocab_size) return unk;
    return id;
}

}  // namespace

ComplexGraph embed_graph(const ComplexGraph& g, const EmbeddingTables& tables) {
    ComplexGraph out = g;
    std::vector<BlockState> states;
    states.reserve(g.blocks.size());
    for (const auto& b : g.blocks) {
        const auto n = static_cast<std::int64_t>(b.atoms.size());
        std::vector<std::int64_t> atom_ids, pos_ids, block_ids;
        std::vector<double> coords;
        coords.reserve(static_cast<std::size_t>(n * 3));
        for (const auto& a : b.atoms) {
            atom_ids.push_back(clamp_id(a.element, vocab::n_elements(), vocab::element_unk()));
            pos_ids.push_back(clamp_id(a.pos_code, vocab::n_pos_codes(), vocab::pos_unk()));
            block_ids.push_back(clamp_id(b.block_type, vocab::n_block_types(), vocab::block_unk()));
            coords.insert(coords.end(), a.coord.begin(), a.coord.end());
        }
        BlockState st;
        st.h = add(add(gather_rows(tables.atom_table, atom_ids),
                       gather_rows(tables.block_table, block_ids)),
                   gather_rows(tables.pos_table, pos_ids));
        st.x = Tensor({n, 3}, std::move(coords));
        states.push_back(std::move(st));
    }
    out.embedded = std::move(states);
    return out;
}

// ---------------------------------------------------------------- JSON

namespace {

using Json = nlohmann::ordered_json;

}  // namespace

std::string graph_to_json(const ComplexGraph& g) {
    Json root;
    root["schema_version"] = 1;
    root["k"] = g.knn_k;
    // Blocks serialize grouped by molecule id, ascending, preserving their
    // relative order; edge indices are remapped to that canonical order.
    std::vector<int> mol_ids;
    for (const auto& b : g.blocks) {
        if (std::find(mol_ids.begin(), mol_ids.end(), b.molecule_id) == mol_ids.end()) {
            mol_ids.push_back(b.molecule_id);
        }
    }
    std::sort(mol_ids.begin(), mol_ids.end());
    std::vector<int> remap(g.blocks.size(), 0);
    int next = 0;
    Json molecules = Json::array();
    for (int mid : mol_ids) {
        Json mol;
        mol["id"] = mid;
        Json blocks = Json::array();
        for (std::size_t i = 0; i < g.blocks.size(); ++i) {
            const Block& b = g.blocks[i];
            if (b.molecule_id != mid) continue;
            remap[i] = next++;
            Json jb;
            jb["type"] = vocab::block_type_name(b.block_type);
            Json atoms = Json::array();
            for (const auto& a : b.atoms) {
                Json ja;
                ja["element"] = vocab::element_name(a.element);
                ja["pos_code"] = vocab::pos_code_name(a.pos_code);
                ja["xyz"] = {a.coord[0], a.coord[1], a.coord[2]};
                atoms.push_back(std::move(ja));
            }
            jb["atoms"] = std::move(atoms);
            blocks.push_back(std::move(jb));
        }
        mol["blocks"] = std::move(blocks);
        molecules.push_back(std::move(mol));
    }
    root["molecules"] = std::move(molecules);
    Json edges = Json::array();
    for (const auto& e : g.edges) {
        Json je;
        je["src"] = remap[static_cast<std::size_t>(e.src)];
        je["dst"] = remap[static_cast<std::size_t>(e.dst)];
        je["type"] = edge_type_name(e.type);
        edges.push_back(std::move(je));
    }
    root["edges"] = std::move(edges);
    return root.dump(2) + "\n";
}

ComplexGraph graph_from_json(const std::string& text) {
    Json root;
    try {
        root = Json::parse(text);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("complex JSON parse failure: ") + e.what());
    }
    if (!root.contains("molecules")) {
        throw std::runtime_error("complex JSON lacks a 'molecules' array");
    }
    ComplexGraph g;
    g.knn_k = root.value("k", 9);
    // Blocks are ordered molecule-by-molecule as serialized.
    for (const auto& mol : root["molecules"]) {
        const int mid = mol.at("id").get<int>();
        for (const auto& jb : mol.at("blocks")) {
            Block b;
            b.molecule_id = mid;
            b.block_type = vocab::block_type_id(jb.at("type").get<std::string>());
            for (const auto& ja : jb.at("atoms")) {
                Atom a;
                a.element = vocab::element_id(ja.at("element").get<std::string>());
                a.pos_code = vocab::pos_code_id(ja.at("pos_code").get<std::string>());
                const auto& xyz = ja.at("xyz");
                if (!xyz.is_array() || xyz.size() != 3) {
                    throw std::runtime_error("atom xyz must be a 3-array");
                }
                for (int d = 0; d < 3; ++d) {
                    a.coord[static_cast<std::size_t>(d)] = xyz[static_cast<std::size_t>(d)].get<double>();
                    if (!std::isfinite(a.coord[static_cast<std::size_t>(d)])) {
                        throw std::runtime_error("atom coordinate is not finite");
                    }
                }
                b.atoms.push_back(a);
            }
            if (b.atoms.empty()) throw std::runtime_error("complex JSON contains an empty block");
            g.blocks.push_back(std::move(b));
        }
    }
    if (root.contains("edges")) {
        for (const auto& je : root["edges"]) {
            Edge e;
            e.src = je.at("src").get<int>();
            e.dst = je.at("dst").get<int>();
            e.type = edge_type_from_string(je.at("type").get<std::string>());
            g.edges.push_back(e);
        }
    } else {
        g.edges = build_knn_edges(g.blocks, g.knn_k);
    }
    try {
        g.validate();
    } catch (const ContractError& e) {
        throw std::runtime_error(std::string("complex JSON violates graph invariants: ") +
                                 e.what());
    }
    return g;
}

// ---------------------------------------------------------------- sampling

ComplexGraph sample_random_complex(Rng& rng, const RandomComplexSpec& spec) {
    std::uniform_int_distribution<int> n_blocks_dist(spec.min_blocks, spec.max_blocks);
    std::uniform_int_distribution<int> n_atoms_dist(spec.min_atoms, spec.max_atoms);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_int_distribution<int> elem_dist(0, vocab::n_elements() - 2);
    std::uniform_int_distribution<int> pos_dist(0, vocab::n_pos_codes() - 2);
    std::uniform_int_distribution<int> res_dist(0, vocab::n_residues() - 1);

    const int total = n_blocks_dist(rng);
    // At least one block per molecule.
    std::uniform_int_distribution<int> split_dist(1, std::max(1, total - 1));
    const int first = total >= 2 ? split_dist(rng) : total;

    const std::array<int, 3> cycle{vocab::element_id("C"), vocab::element_id("N"),
                                   vocab::element_id("O")};
    std::vector<Block> blocks;
    for (int i = 0; i < total; ++i) {
        const int mol = i < first ? 0 : 1;
        const double cx = mol == 0 ? 0.0 : spec.molecule_offset;
        Block b;
        b.molecule_id = mol;
        if (spec.deterministic_types) {
            b.block_type = mol == 0 ? 0 : vocab::small_molecule_block_id(cycle[0]);
        } else {
            b.block_type = res_dist(rng);
        }
        std::array<double, 3> center{cx + gauss(rng) * spec.block_spread,
                                     gauss(rng) * spec.block_spread,
                                     gauss(rng) * spec.block_spread};
        const int n = n_atoms_dist(rng);
        for (int p = 0; p < n; ++p) {
            Atom a;
            if (spec.deterministic_types) {
                a.element = cycle[static_cast<std::size_t>(p % 3)];
                a.pos_code = vocab::pos_blank();
            } else {
                a.element = elem_dist(rng);
                a.pos_code = pos_dist(rng);
            }
            for (int d = 0; d < 3; ++d)
                a.coord[static_cast<std::size_t>(d)] =
                    center[static_cast<std::size_t>(d)] + gauss(rng) * spec.atom_spread;
            b.atoms.push_back(a);
        }
        blocks.push_back(std::move(b));
    }
    return build_graph(std::move(blocks), spec.k);
}

}  // namespace getmol
