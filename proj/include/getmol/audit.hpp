#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "getmol/model.hpp"

namespace getmol {

/// An element of E(3): x -> Q x + t with Q orthogonal (proper or improper).
struct RigidTransform {
    std::array<std::array<double, 3>, 3> q{};
    std::array<double, 3> t{};
    bool proper = true;

    static RigidTransform identity_transform();
    std::array<double, 3> apply(const std::array<double, 3>& x) const;
    double det() const;
    /// max |Q^T Q - I| entry.
    double orthogonality_defect() const;
};

/// Q from the QR decomposition of a Gaussian matrix with sign correction;
/// det is forced to -1 by negating one column when a reflection is asked
/// for, and to +1 otherwise. t is uniform in [-10, 10]^3.
RigidTransform sample_rigid(Rng& rng, bool reflection);

ComplexGraph transform_graph(const ComplexGraph& g, const RigidTransform& t);
ComplexGraph permute_graph_atoms(const ComplexGraph& g,
                                 const std::vector<std::vector<std::size_t>>& perms);

struct AuditCheck {
    std::string name;
    double max_abs_dev = 0.0;
    double max_rel_dev = 0.0;
    double tolerance = 0.0;
    std::int64_t trials = 0;
    bool pass = true;
};

struct AuditReport {
    std::uint64_t seed = 0;
    std::vector<AuditCheck> checks;

    bool all_pass() const;
    std::string to_json() const;
    /// Aligned human-readable table.
    std::string to_table() const;
};

/// Relative deviation |a-b| / max(1, |b|), maximized elementwise.
double max_rel_deviation(std::span<const double> a, std::span<const double> b);
double max_abs_deviation(std::span<const double> a, std::span<const double> b);

/// Transform-then-encode vs encode-then-transform over n_trials random
/// rigid motions (alternating proper/improper). Features are compared at
/// feat_tol, coordinates at coord_tol; two check records are appended.
void check_equivariance(const GetParams& params, const ComplexGraph& graph, int n_trials,
                        double coord_tol, double feat_tol, Rng& rng, AuditReport& report);

/// Per-block random atom permutations: outputs of the permuted input must
/// equal permuted outputs of the original input.
void check_block_permutation(const GetParams& params, const ComplexGraph& graph, int n_trials,
                             double tol, Rng& rng, AuditReport& report);

/// Finite-difference check of the full model + regression head gradient,
/// sampling at most max_coords coordinates per parameter tensor.
void check_gradients(GetModel& model, const ComplexGraph& graph, double step, double tol,
                     std::int64_t max_coords, Rng& rng, AuditReport& report);

struct AuditOptions {
    int n_graphs = 10;
    int trials_per_graph = 10;
    double coord_tol = 1e-6;
    double feat_tol = 1e-8;
    double perm_tol = 1e-10;
    double grad_tol = 1e-4;
    double grad_step = 1e-6;
    std::int64_t grad_max_coords = 200;
    bool run_gradients = true;
};

/// Runs every check over randomly sampled graphs (B in [3,20], n_i in [1,8]).
AuditReport run_audit(GetModel& model, std::uint64_t seed, const AuditOptions& opts);
/// Same, over one supplied graph.
AuditReport run_audit_on_graph(GetModel& model, const ComplexGraph& graph, std::uint64_t seed,
                               const AuditOptions& opts);

}  // namespace getmol
