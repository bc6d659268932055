#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "getmol/audit.hpp"
#include "getmol/cli.hpp"
#include "getmol/params_io.hpp"
#include "getmol/pdb.hpp"
#include "getmol/trainer.hpp"

namespace py = pybind11;
using namespace getmol;

namespace {

py::array_t<double> tensor_to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

ComplexGraph complex_from_pdb(const std::vector<std::string>& texts, int k,
                              std::optional<double> interface_cutoff, bool split_chains,
                              bool keep_waters) {
    PdbParseOptions popts;
    popts.keep_waters = keep_waters;
    std::vector<ParsedStructure> structures;
    for (const auto& t : texts) structures.push_back(parse_pdb_subset(t, popts));
    AssembleOptions opts;
    opts.k = k;
    opts.interface_cutoff = interface_cutoff;
    opts.split_chains = split_chains;
    return assemble_complex(structures, opts);
}

ComplexGraph sample_complex_py(std::uint64_t seed, int min_blocks, int max_blocks, int min_atoms,
                               int max_atoms, int k, bool deterministic_types) {
    Rng rng(seed);
    RandomComplexSpec spec;
    spec.min_blocks = min_blocks;
    spec.max_blocks = max_blocks;
    spec.min_atoms = min_atoms;
    spec.max_atoms = max_atoms;
    spec.k = k;
    spec.deterministic_types = deterministic_types;
    return sample_random_complex(rng, spec);
}

struct PyModel {
    GetModel model;
    std::map<std::string, double> meta;

    static PyModel init(std::int64_t d_h, std::int64_t d_r, std::int64_t d_e, int n_layers,
                        std::uint64_t seed) {
        return PyModel{GetModel::make(GetConfig{d_h, d_r, d_e, n_layers}, seed), {}};
    }

    static PyModel load(const std::string& path) {
        PyModel m;
        m.model = load_model(path, &m.meta);
        return m;
    }

    void save(const std::string& path) const { save_model(model, path, meta); }

    std::vector<std::pair<py::array_t<double>, py::array_t<double>>> encode(
        const ComplexGraph& g, const std::string& level) const {
        const ComplexGraph enc = get_forward(g, model.encoder, repr_level_from_string(level));
        std::vector<std::pair<py::array_t<double>, py::array_t<double>>> out;
        for (const auto& st : *enc.embedded) {
            out.emplace_back(tensor_to_array(st.h), tensor_to_array(st.x));
        }
        return out;
    }

    py::array_t<double> graph_embedding(const ComplexGraph& g, const std::string& level) const {
        const ComplexGraph enc = get_forward(g, model.encoder, repr_level_from_string(level));
        return tensor_to_array(hierarchical_pool(enc).graph_vec);
    }

    double predict_affinity_py(const ComplexGraph& g) const {
        const ComplexGraph enc = get_forward(g, model.encoder);
        const double raw = predict_affinity(hierarchical_pool(enc).graph_vec, model.heads).value();
        const double mean = meta.count("target_mean") ? meta.at("target_mean") : 0.0;
        const double stdv = meta.count("target_std") ? meta.at("target_std") : 1.0;
        return raw * stdv + mean;
    }

    double predict_efficacy_py(const ComplexGraph& active, const ComplexGraph& inactive) const {
        const Tensor va = hierarchical_pool(get_forward(active, model.encoder)).graph_vec;
        const Tensor vi = hierarchical_pool(get_forward(inactive, model.encoder)).graph_vec;
        return predict_efficacy(va, vi, model.heads).value();
    }

    std::string audit_json(std::uint64_t seed, int trials, bool gradients) {
        AuditOptions opts;
        opts.n_graphs = std::max(1, trials / 10);
        opts.trials_per_graph = 10;
        opts.run_gradients = gradients;
        return run_audit(model, seed, opts).to_json();
    }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Bilevel E(3)-equivariant transformer for molecular complexes";
    m.attr("__version__") = "0.1.0";

    py::register_exception<ShapeError>(m, "GetmolShapeError", PyExc_ValueError);
    py::register_exception<ContractError>(m, "GetmolContractError", PyExc_ValueError);

    py::class_<ComplexGraph>(m, "ComplexGraph")
        .def_property_readonly("n_blocks", &ComplexGraph::n_blocks)
        .def_property_readonly("n_atoms", &ComplexGraph::n_atoms)
        .def_property_readonly("n_molecules", &ComplexGraph::n_molecules)
        .def_property_readonly("k", [](const ComplexGraph& g) { return g.knn_k; })
        .def("block_molecule",
             [](const ComplexGraph& g, std::size_t i) { return g.blocks.at(i).molecule_id; })
        .def("block_type",
             [](const ComplexGraph& g, std::size_t i) {
                 return vocab::block_type_name(g.blocks.at(i).block_type);
             })
        .def("block_size",
             [](const ComplexGraph& g, std::size_t i) { return g.blocks.at(i).atoms.size(); })
        .def("edges",
             [](const ComplexGraph& g) {
                 std::vector<std::tuple<int, int, std::string>> out;
                 for (const auto& e : g.edges) {
                     out.emplace_back(e.src, e.dst, edge_type_name(e.type));
                 }
                 return out;
             })
        .def("atom_positions",
             [](const ComplexGraph& g) {
                 std::vector<double> flat;
                 for (const auto& b : g.blocks) {
                     for (const auto& a : b.atoms) {
                         flat.insert(flat.end(), a.coord.begin(), a.coord.end());
                     }
                 }
                 const auto n = static_cast<py::ssize_t>(flat.size() / 3);
                 py::array_t<double> arr({n, static_cast<py::ssize_t>(3)});
                 std::copy(flat.begin(), flat.end(), arr.mutable_data());
                 return arr;
             })
        .def("__repr__", [](const ComplexGraph& g) {
            return "<ComplexGraph blocks=" + std::to_string(g.n_blocks()) +
                   " atoms=" + std::to_string(g.n_atoms()) +
                   " edges=" + std::to_string(g.edges.size()) + ">";
        });

    m.def("parse_complex_json", &graph_from_json, py::arg("text"));
    m.def("graph_to_json", &graph_to_json, py::arg("graph"));
    m.def("complex_from_pdb", &complex_from_pdb, py::arg("texts"), py::arg("k") = 9,
          py::arg("interface") = std::nullopt, py::arg("split_chains") = false,
          py::arg("keep_waters") = false);
    m.def("block_distance",
          [](const ComplexGraph& g, std::size_t i, std::size_t j) {
              return block_distance(g.blocks.at(i), g.blocks.at(j));
          });
    m.def("extract_interface", &extract_interface, py::arg("graph"), py::arg("cutoff") = 6.0);
    m.def("to_atom_level", &to_atom_level, py::arg("graph"));
    m.def("to_block_level", &to_block_level_raw, py::arg("graph"));
    m.def("sample_complex", &sample_complex_py, py::arg("seed"), py::arg("min_blocks") = 4,
          py::arg("max_blocks") = 12, py::arg("min_atoms") = 1, py::arg("max_atoms") = 6,
          py::arg("k") = 9, py::arg("deterministic_types") = false);

    py::class_<PyModel>(m, "Model")
        .def_static("init", &PyModel::init, py::arg("d_h") = 32, py::arg("d_r") = 8,
                    py::arg("d_e") = 16, py::arg("n_layers") = 3, py::arg("seed") = 0)
        .def_static("load", &PyModel::load, py::arg("path"))
        .def("save", &PyModel::save, py::arg("path"))
        .def("encode", &PyModel::encode, py::arg("graph"), py::arg("level") = "unified")
        .def("graph_embedding", &PyModel::graph_embedding, py::arg("graph"),
             py::arg("level") = "unified")
        .def("predict_affinity", &PyModel::predict_affinity_py, py::arg("graph"))
        .def("predict_efficacy", &PyModel::predict_efficacy_py, py::arg("active"),
             py::arg("inactive"))
        .def("audit_json", &PyModel::audit_json, py::arg("seed") = 0, py::arg("trials") = 20,
             py::arg("gradients") = false);

    m.def("metrics",
          [](const std::vector<double>& preds, const std::vector<double>& targets,
             const std::string& task) {
              const MetricsResult r = compute_metrics(preds, targets, task);
              py::dict out;
              for (const auto& [k, v] : r.values) out[py::str(k)] = v;
              if (r.degenerate) out["degenerate_input"] = true;
              return out;
          },
          py::arg("preds"), py::arg("targets"), py::arg("task") = "regression");

    m.def("run_cli", [](const std::vector<std::string>& args) { return run_cli(args); },
          py::arg("args"));
}
