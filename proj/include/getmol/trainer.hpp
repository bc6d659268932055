#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "getmol/model.hpp"

namespace getmol {

struct TrainConfig {
    std::int64_t d_h = 32;
    std::int64_t d_r = 8;
    std::int64_t d_e = 16;
    int n_layers = 3;
    double lr = 1e-3;
    double final_lr = 1e-4;
    int max_epoch = 20;
    int save_topk = 3;
    std::size_t max_n_vertex = 1500;
    std::uint64_t seed = 42;
    std::string task = "regression";  // "regression" | "classification"
    int n_samples = 640;
    int knn_k = 9;

    GetConfig model_config() const { return GetConfig{d_h, d_r, d_e, n_layers}; }
    void validate() const;
    static TrainConfig from_json(const std::string& text);
    std::string to_json() const;
};

/// Geometric learning rate interpolation; epoch 0 gives lr, the last epoch
/// gives final_lr.
double lr_at_epoch(const TrainConfig& cfg, int epoch);

// ---------------------------------------------------------------- synthetic data

enum class SynthTask {
    AffinityRegression,       // -ln(min inter-block distance) + sum 1/(1+d)
    ContactRegression,        // sum exp(-d/2) over inter-molecule block pairs
    SeparationClassification  // molecule centroid separation below the dataset median
};

struct SyntheticSample {
    ComplexGraph graph;
    double label = 0.0;
};

double affinity_label(const ComplexGraph& g);
double contact_label(const ComplexGraph& g);
double centroid_separation(const ComplexGraph& g);

/// Random two-molecule complexes (B in [4,16], n_i in [1,6]) with
/// E(3)-invariant labels; bitwise reproducible from the rng state.
std::vector<SyntheticSample> make_synthetic_dataset(int n, Rng& rng,
                                                    SynthTask task = SynthTask::AffinityRegression);

// ---------------------------------------------------------------- batching

/// Greedy packing in the given order: a batch closes when adding the next
/// graph would push the block total past max_n_vertex. A single graph above
/// the budget is an error.
std::vector<std::vector<std::size_t>> dynamic_batches(const std::vector<std::size_t>& block_counts,
                                                      std::size_t max_n_vertex);

// ---------------------------------------------------------------- optimizer

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam(const std::vector<ParamRef>& params, AdamConfig cfg = {});
    void step(const std::vector<ParamRef>& params, const std::vector<Tensor>& grads, double lr);

private:
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

// ---------------------------------------------------------------- metrics

struct MetricsResult {
    std::map<std::string, double> values;
    bool degenerate = false;  // zero-variance correlation input

    double at(const std::string& k) const { return values.at(k); }
};

double pearson(std::span<const double> a, std::span<const double> b, bool* degenerate = nullptr);
std::vector<double> average_ranks(std::span<const double> v);
double spearman(std::span<const double> a, std::span<const double> b, bool* degenerate = nullptr);
double rmse(std::span<const double> preds, std::span<const double> targets);
double auroc(std::span<const double> scores, std::span<const double> labels);
double auprc(std::span<const double> scores, std::span<const double> labels);

/// task "regression": pearson, spearman, rmse; "classification": auroc, auprc.
MetricsResult compute_metrics(std::span<const double> preds, std::span<const double> targets,
                              const std::string& task);

// ---------------------------------------------------------------- training

struct TrainingDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
    MetricsResult val_metrics;
};

struct TrainResult {
    GetModel model;  // latest of the saved top-k checkpoints
    std::vector<EpochStats> history;
    std::vector<std::pair<int, GetModel>> checkpoints;  // saved top-k, epoch ascending
    std::vector<int> saved_epochs;
    int selected_epoch = -1;
    double target_mean = 0.0;  // regression label standardization
    double target_std = 1.0;

    std::string history_csv(const std::string& task) const;
};

/// Full Adam training run: per epoch seeded shuffle, dynamic batches,
/// forward + loss + backward + step, validation, top-k checkpointing.
/// Throws TrainingDiverged (with epoch/batch/parameter norms) on NaN loss.
TrainResult train(const TrainConfig& cfg, const std::vector<SyntheticSample>& train_set,
                  const std::vector<SyntheticSample>& val_set);

/// Model predictions for a dataset (regression head, de-standardized).
std::vector<double> predict_dataset(const GetModel& model, const std::vector<SyntheticSample>& data,
                                    double target_mean, double target_std);

struct MixedTrainResult {
    GetModel model;      // shared encoder + primary heads (task A regressor)
    HeadParams heads_b;  // task B heads
    std::vector<EpochStats> history;
    double target_mean_a = 0.0, target_std_a = 1.0;
    double target_mean_b = 0.0, target_std_b = 1.0;
};

/// Joint training of one encoder with one regression head per task;
/// batches interleave samples of both datasets under one seeded shuffle.
MixedTrainResult train_mixed(const TrainConfig& cfg, const std::vector<SyntheticSample>& train_a,
                             const std::vector<SyntheticSample>& val_a,
                             const std::vector<SyntheticSample>& train_b,
                             const std::vector<SyntheticSample>& val_b);

}  // namespace getmol
