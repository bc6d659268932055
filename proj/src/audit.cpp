#include "getmol/audit.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace getmol {

RigidTransform RigidTransform::identity_transform() {
    RigidTransform t;
    for (int i = 0; i < 3; ++i) t.q[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = 1.0;
    return t;
}

std::array<double, 3> RigidTransform::apply(const std::array<double, 3>& x) const {
    std::array<double, 3> y{};
    for (std::size_t i = 0; i < 3; ++i) {
        y[i] = t[i];
        for (std::size_t j = 0; j < 3; ++j) y[i] += q[i][j] * x[j];
    }
    return y;
}

double RigidTransform::det() const {
    return q[0][0] * (q[1][1] * q[2][2] - q[1][2] * q[2][1]) -
           q[0][1] * (q[1][0] * q[2][2] - q[1][2] * q[2][0]) +
           q[0][2] * (q[1][0] * q[2][1] - q[1][1] * q[2][0]);
}

double RigidTransform::orthogonality_defect() const {
    double worst = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < 3; ++k) dot += q[k][i] * q[k][j];
            worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
        }
    }
    return worst;
}

RigidTransform sample_rigid(Rng& rng, bool reflection) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    // QR by modified Gram-Schmidt on a Gaussian 3x3; columns of Q are Haar
    // distributed after correcting column signs by the R diagonal.
    std::array<std::array<double, 3>, 3> a{};
    for (auto& row : a)
        for (auto& v : row) v = gauss(rng);
    std::array<std::array<double, 3>, 3> qcols{};  // qcols[c] = column c
    for (std::size_t c = 0; c < 3; ++c) {
        std::array<double, 3> v{a[0][c], a[1][c], a[2][c]};
        for (std::size_t p = 0; p < c; ++p) {
            double dot = 0.0;
            for (std::size_t i = 0; i < 3; ++i) dot += qcols[p][i] * v[i];
            for (std::size_t i = 0; i < 3; ++i) v[i] -= dot * qcols[p][i];
        }
        double nrm = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if (nrm < 1e-12) {
            // Degenerate draw; retry with a fresh matrix.
            return sample_rigid(rng, reflection);
        }
        // Sign correction: make the implied R diagonal positive.
        double diag = 0.0;
        for (std::size_t i = 0; i < 3; ++i) diag += v[i] * a[i][c];
        const double sign = diag >= 0.0 ? 1.0 : -1.0;
        for (std::size_t i = 0; i < 3; ++i) qcols[c][i] = sign * v[i] / nrm;
    }
    RigidTransform t;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t c = 0; c < 3; ++c) t.q[i][c] = qcols[c][i];
    const bool needs_flip = (t.det() < 0.0) != reflection;
    if (needs_flip) {
        for (std::size_t i = 0; i < 3; ++i) t.q[i][0] = -t.q[i][0];
    }
    t.proper = !reflection;
    std::uniform_real_distribution<double> shift(-10.0, 10.0);
    for (auto& v : t.t) v = shift(rng);
    return t;
}

ComplexGraph transform_graph(const ComplexGraph& g, const RigidTransform& t) {
    ComplexGraph out = g;
    out.embedded.reset();
    for (auto& b : out.blocks)
        for (auto& a : b.atoms) a.coord = t.apply(a.coord);
    return out;
}

ComplexGraph permute_graph_atoms(const ComplexGraph& g,
                                 const std::vector<std::vector<std::size_t>>& perms) {
    if (perms.size() != g.blocks.size()) throw ContractError("one permutation per block required");
    ComplexGraph out = g;
    out.embedded.reset();
    for (std::size_t i = 0; i < out.blocks.size(); ++i) {
        const auto& perm = perms[i];
        const auto& src = g.blocks[i].atoms;
        if (perm.size() != src.size()) throw ContractError("permutation size mismatch");
        std::vector<Atom> atoms(src.size());
        for (std::size_t p = 0; p < perm.size(); ++p) atoms[p] = src[perm[p]];
        out.blocks[i].atoms = std::move(atoms);
    }
    return out;
}

bool AuditReport::all_pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const AuditCheck& c) { return c.pass; });
}

std::string AuditReport::to_json() const {
    nlohmann::ordered_json root;
    root["seed"] = seed;
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& c : checks) {
        nlohmann::ordered_json jc;
        jc["name"] = c.name;
        jc["max_abs_dev"] = c.max_abs_dev;
        jc["max_rel_dev"] = c.max_rel_dev;
        jc["tolerance"] = c.tolerance;
        jc["trials"] = c.trials;
        jc["pass"] = c.pass;
        arr.push_back(std::move(jc));
    }
    root["checks"] = std::move(arr);
    root["all_pass"] = all_pass();
    return root.dump(2) + "\n";
}

std::string AuditReport::to_table() const {
    std::ostringstream os;
    os << std::left << std::setw(34) << "check" << std::right << std::setw(13) << "max_rel"
       << std::setw(13) << "tol" << std::setw(9) << "trials" << std::setw(8) << "result" << '\n';
    os << std::string(77, '-') << '\n';
    for (const auto& c : checks) {
        os << std::left << std::setw(34) << c.name << std::right << std::setw(13)
           << std::scientific << std::setprecision(3) << c.max_rel_dev << std::setw(13)
           << c.tolerance << std::setw(9) << c.trials << std::setw(8)
           << (c.pass ? "pass" : "FAIL") << '\n';
    }
    return os.str();
}

double max_abs_deviation(std::span<const double> a, std::span<const double> b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

double max_rel_deviation(std::span<const double> a, std::span<const double> b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(b[i])));
    }
    return worst;
}

namespace {

/// H/X values of an encoded graph as flat buffers, block order preserved.
struct FlatOut {
    std::vector<double> h;
    std::vector<double> x;
};

FlatOut flatten(const ComplexGraph& encoded) {
    FlatOut out;
    for (const auto& st : *encoded.embedded) {
        const auto hs = st.h.data();
        const auto xs = st.x.data();
        out.h.insert(out.h.end(), hs.begin(), hs.end());
        out.x.insert(out.x.end(), xs.begin(), xs.end());
    }
    return out;
}

}  // namespace

void check_equivariance(const GetParams& params, const ComplexGraph& graph, int n_trials,
                        double coord_tol, double feat_tol, Rng& rng, AuditReport& report) {
    const ComplexGraph base = get_forward(graph, params);
    const FlatOut ref = flatten(base);

    AuditCheck coord{"equivariance.coordinates", 0.0, 0.0, coord_tol, n_trials, true};
    AuditCheck feat{"equivariance.features", 0.0, 0.0, feat_tol, n_trials, true};
    for (int trial = 0; trial < n_trials; ++trial) {
        const RigidTransform t = sample_rigid(rng, trial % 2 == 1);
        const ComplexGraph moved = get_forward(transform_graph(graph, t), params);
        const FlatOut got = flatten(moved);
        // Expected coordinates: transform the reference output.
        std::vector<double> expected(ref.x.size());
        for (std::size_t p = 0; p * 3 < ref.x.size(); ++p) {
            const std::array<double, 3> y =
                t.apply({ref.x[p * 3], ref.x[p * 3 + 1], ref.x[p * 3 + 2]});
            for (std::size_t d = 0; d < 3; ++d) expected[p * 3 + d] = y[d];
        }
        coord.max_abs_dev = std::max(coord.max_abs_dev, max_abs_deviation(got.x, expected));
        coord.max_rel_dev = std::max(coord.max_rel_dev, max_rel_deviation(got.x, expected));
        feat.max_abs_dev = std::max(feat.max_abs_dev, max_abs_deviation(got.h, ref.h));
        feat.max_rel_dev = std::max(feat.max_rel_dev, max_rel_deviation(got.h, ref.h));
    }
    coord.pass = coord.max_rel_dev <= coord_tol;
    feat.pass = feat.max_rel_dev <= feat_tol;
    report.checks.push_back(coord);
    report.checks.push_back(feat);
}

void check_block_permutation(const GetParams& params, const ComplexGraph& graph, int n_trials,
                             double tol, Rng& rng, AuditReport& report) {
    const ComplexGraph base = get_forward(graph, params);

    AuditCheck check{"permutation.intra_block", 0.0, 0.0, tol, n_trials, true};
    for (int trial = 0; trial < n_trials; ++trial) {
        std::vector<std::vector<std::size_t>> perms;
        perms.reserve(graph.blocks.size());
        for (const auto& b : graph.blocks) {
            std::vector<std::size_t> p(b.atoms.size());
            std::iota(p.begin(), p.end(), 0);
            std::shuffle(p.begin(), p.end(), rng);
            perms.push_back(std::move(p));
        }
        const ComplexGraph permuted = get_forward(permute_graph_atoms(graph, perms), params);

        // Expected: the reference outputs with the same row permutations.
        const auto& base_states = *base.embedded;
        const auto& perm_states = *permuted.embedded;
        for (std::size_t i = 0; i < perms.size(); ++i) {
            const auto dh = base_states[i].h.extent(1);
            const auto& bh = base_states[i].h.vec();
            const auto& bx = base_states[i].x.vec();
            const auto& ph = perm_states[i].h.vec();
            const auto& px = perm_states[i].x.vec();
            for (std::size_t p = 0; p < perms[i].size(); ++p) {
                const std::size_t q = perms[i][p];
                for (std::int64_t c = 0; c < dh; ++c) {
                    const double a = ph[p * static_cast<std::size_t>(dh) + static_cast<std::size_t>(c)];
                    const double b = bh[q * static_cast<std::size_t>(dh) + static_cast<std::size_t>(c)];
                    check.max_abs_dev = std::max(check.max_abs_dev, std::abs(a - b));
                    check.max_rel_dev =
                        std::max(check.max_rel_dev, std::abs(a - b) / std::max(1.0, std::abs(b)));
                }
                for (std::size_t d = 0; d < 3; ++d) {
                    const double a = px[p * 3 + d];
                    const double b = bx[q * 3 + d];
                    check.max_abs_dev = std::max(check.max_abs_dev, std::abs(a - b));
                    check.max_rel_dev =
                        std::max(check.max_rel_dev, std::abs(a - b) / std::max(1.0, std::abs(b)));
                }
            }
        }
    }
    check.pass = check.max_rel_dev <= tol;
    report.checks.push_back(check);
}

void check_gradients(GetModel& model, const ComplexGraph& graph, double step, double tol,
                     std::int64_t max_coords, Rng& rng, AuditReport& report) {
    auto params = model.collect();

    const auto loss_fn = [&]() {
        const ComplexGraph enc = get_forward(graph, model.encoder);
        const PoolingOutput pooled = hierarchical_pool(enc);
        const Tensor pred = predict_affinity(pooled.graph_vec, model.heads);
        // Squared prediction against a fixed pseudo-target keeps the loss
        // curved in every parameter direction.
        return (pred.value() - 1.0) * (pred.value() - 1.0);
    };

    // Analytic gradients from one taped pass.
    std::vector<Tensor> analytic;
    {
        Tape tape;
        watch_all(tape, params);
        const ComplexGraph enc = get_forward(graph, model.encoder);
        const PoolingOutput pooled = hierarchical_pool(enc);
        const Tensor pred = predict_affinity(pooled.graph_vec, model.heads);
        Tensor diff = add_scalar(pred, -1.0);
        Tensor loss = mul(diff, diff);
        const Gradients grads = tape.backward(loss);
        for (const auto& p : params) analytic.push_back(grads.at(*p.tensor));
    }

    const FdReport fd = finite_difference_check(loss_fn, params, analytic, step, max_coords, &rng);
    AuditCheck check{"gradients.finite_difference", 0.0, fd.max_rel_dev, tol,
                     static_cast<std::int64_t>(fd.per_param.size()), fd.max_rel_dev <= tol};
    for (const auto& e : fd.per_param) check.max_abs_dev = std::max(check.max_abs_dev, e.max_abs_dev);
    report.checks.push_back(check);
}

AuditReport run_audit_on_graph(GetModel& model, const ComplexGraph& graph, std::uint64_t seed,
                               const AuditOptions& opts) {
    AuditReport report;
    report.seed = seed;
    Rng rng(seed);
    check_equivariance(model.encoder, graph, opts.trials_per_graph, opts.coord_tol, opts.feat_tol,
                       rng, report);
    check_block_permutation(model.encoder, graph, opts.trials_per_graph, opts.perm_tol, rng,
                            report);
    if (opts.run_gradients) {
        check_gradients(model, graph, opts.grad_step, opts.grad_tol, opts.grad_max_coords, rng,
                        report);
    }
    return report;
}

AuditReport run_audit(GetModel& model, std::uint64_t seed, const AuditOptions& opts) {
    AuditReport report;
    report.seed = seed;
    Rng rng(seed);

    RandomComplexSpec spec;
    spec.min_blocks = 3;
    spec.max_blocks = 20;
    spec.min_atoms = 1;
    spec.max_atoms = 8;

    AuditCheck eq_coord{"equivariance.coordinates", 0.0, 0.0, opts.coord_tol, 0, true};
    AuditCheck eq_feat{"equivariance.features", 0.0, 0.0, opts.feat_tol, 0, true};
    AuditCheck perm{"permutation.intra_block", 0.0, 0.0, opts.perm_tol, 0, true};

    for (int gi = 0; gi < opts.n_graphs; ++gi) {
        const ComplexGraph graph = sample_random_complex(rng, spec);
        AuditReport sub;
        sub.seed = seed;
        check_equivariance(model.encoder, graph, opts.trials_per_graph, opts.coord_tol,
                           opts.feat_tol, rng, sub);
        check_block_permutation(model.encoder, graph, opts.trials_per_graph, opts.perm_tol, rng,
                                sub);
        for (const auto& c : sub.checks) {
            AuditCheck* agg = nullptr;
            if (c.name == eq_coord.name) agg = &eq_coord;
            else if (c.name == eq_feat.name) agg = &eq_feat;
            else if (c.name == perm.name) agg = &perm;
            if (!agg) continue;
            agg->max_abs_dev = std::max(agg->max_abs_dev, c.max_abs_dev);
            agg->max_rel_dev = std::max(agg->max_rel_dev, c.max_rel_dev);
            agg->trials += c.trials;
        }
    }
    eq_coord.pass = eq_coord.max_rel_dev <= eq_coord.tolerance;
    eq_feat.pass = eq_feat.max_rel_dev <= eq_feat.tolerance;
    perm.pass = perm.max_rel_dev <= perm.tolerance;
    report.checks.push_back(eq_coord);
    report.checks.push_back(eq_feat);
    report.checks.push_back(perm);

    if (opts.run_gradients) {
        RandomComplexSpec small = spec;
        small.min_blocks = 4;
        small.max_blocks = 6;
        small.max_atoms = 4;
        ComplexGraph graph = sample_random_complex(rng, small);
        check_gradients(model, graph, opts.grad_step, opts.grad_tol, opts.grad_max_coords, rng,
                        report);
    }
    return report;
}

}  // namespace getmol
