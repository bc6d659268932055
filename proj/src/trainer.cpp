#include "getmol/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace getmol {

namespace {

using Json = nlohmann::ordered_json;

}  // namespace

void TrainConfig::validate() const {
    model_config().validate();
    if (!(lr >= final_lr && final_lr > 0.0)) {
        throw ContractError("learning rates must satisfy lr >= final_lr > 0");
    }
    if (max_epoch < 1) throw ContractError("max_epoch must be at least 1");
    if (save_topk < 1) throw ContractError("save_topk must be at least 1");
    if (max_n_vertex < 1) throw ContractError("max_n_vertex must be at least 1");
    if (task != "regression" && task != "classification") {
        throw ContractError("task must be 'regression' or 'classification'");
    }
    if (n_samples < 1) throw ContractError("n_samples must be at least 1");
    if (knn_k < 1) throw ContractError("k must be at least 1");
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("config parse failure: ") + e.what());
    }
    TrainConfig cfg;
    static const char* known[] = {"d_h",       "d_r",       "d_e",     "n_layers", "lr",
                                  "final_lr",  "max_epoch", "save_topk", "max_n_vertex",
                                  "seed",      "task",      "n_samples", "k"};
    for (const auto& [key, _] : j.items()) {
        if (std::find_if(std::begin(known), std::end(known),
                         [&](const char* k) { return key == k; }) == std::end(known)) {
            throw std::runtime_error("config has unknown field '" + key + "'");
        }
    }
    cfg.d_h = j.value("d_h", cfg.d_h);
    cfg.d_r = j.value("d_r", cfg.d_r);
    cfg.d_e = j.value("d_e", cfg.d_e);
    cfg.n_layers = j.value("n_layers", cfg.n_layers);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.final_lr = j.value("final_lr", cfg.final_lr);
    cfg.max_epoch = j.value("max_epoch", cfg.max_epoch);
    cfg.save_topk = j.value("save_topk", cfg.save_topk);
    cfg.max_n_vertex = j.value("max_n_vertex", cfg.max_n_vertex);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.task = j.value("task", cfg.task);
    cfg.n_samples = j.value("n_samples", cfg.n_samples);
    cfg.knn_k = j.value("k", cfg.knn_k);
    cfg.validate();
    return cfg;
}

std::string TrainConfig::to_json() const {
    Json j;
    j["d_h"] = d_h;
    j["d_r"] = d_r;
    j["d_e"] = d_e;
    j["n_layers"] = n_layers;
    j["lr"] = lr;
    j["final_lr"] = final_lr;
    j["max_epoch"] = max_epoch;
    j["save_topk"] = save_topk;
    j["max_n_vertex"] = max_n_vertex;
    j["seed"] = seed;
    j["task"] = task;
    j["n_samples"] = n_samples;
    j["k"] = knn_k;
    return j.dump(2) + "\n";
}

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
    if (cfg.max_epoch <= 1) return cfg.lr;
    const double frac = static_cast<double>(epoch) / static_cast<double>(cfg.max_epoch - 1);
    return cfg.lr * std::pow(cfg.final_lr / cfg.lr, frac);
}

// ---------------------------------------------------------------- synthetic data

namespace {

constexpr double kEnergyCoupling = 4.0;

double min_inter_distance(const ComplexGraph& g) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < g.blocks.size(); ++i) {
        for (std::size_t j = i + 1; j < g.blocks.size(); ++j) {
            if (g.blocks[i].molecule_id == g.blocks[j].molecule_id) continue;
            best = std::min(best, block_distance(g.blocks[i], g.blocks[j]));
        }
    }
    return best;
}

}  // namespace

double affinity_label(const ComplexGraph& g) {
    double energy = 0.0;
    for (std::size_t i = 0; i < g.blocks.size(); ++i) {
        for (std::size_t j = i + 1; j < g.blocks.size(); ++j) {
            if (g.blocks[i].molecule_id == g.blocks[j].molecule_id) continue;
            energy += kEnergyCoupling / (1.0 + block_distance(g.blocks[i], g.blocks[j]));
        }
    }
    return -std::log(min_inter_distance(g)) + energy;
}

double contact_label(const ComplexGraph& g) {
    double total = 0.0;
    for (std::size_t i = 0; i < g.blocks.size(); ++i) {
        for (std::size_t j = i + 1; j < g.blocks.size(); ++j) {
            if (g.blocks[i].molecule_id == g.blocks[j].molecule_id) continue;
            total += std::exp(-0.5 * block_distance(g.blocks[i], g.blocks[j]));
        }
    }
    return total;
}

double centroid_separation(const ComplexGraph& g) {
    std::array<double, 3> c0{}, c1{};
    std::size_t n0 = 0, n1 = 0;
    for (const auto& b : g.blocks) {
        for (const auto& a : b.atoms) {
            auto& c = b.molecule_id == 0 ? c0 : c1;
            auto& n = b.molecule_id == 0 ? n0 : n1;
            for (std::size_t d = 0; d < 3; ++d) c[d] += a.coord[d];
            ++n;
        }
    }
    if (n0 == 0 || n1 == 0) throw ContractError("separation needs two molecules");
    double s = 0.0;
    for (std::size_t d = 0; d < 3; ++d) {
        const double diff = c0[d] / static_cast<double>(n0) - c1[d] / static_cast<double>(n1);
        s += diff * diff;
    }
    return std::sqrt(s);
}

std::vector<SyntheticSample> make_synthetic_dataset(int n, Rng& rng, SynthTask task) {
    if (n < 1) throw ContractError("dataset size must be at least 1");
    RandomComplexSpec spec;
    spec.min_blocks = 4;
    spec.max_blocks = 16;
    spec.min_atoms = 1;
    spec.max_atoms = 6;
    spec.block_spread = 2.0;
    spec.atom_spread = 0.6;
    spec.deterministic_types = true;

    std::uniform_real_distribution<double> offset_dist(2.0, 12.0);
    std::vector<SyntheticSample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        ComplexGraph g;
        for (;;) {
            spec.molecule_offset = offset_dist(rng);
            g = sample_random_complex(rng, spec);
            if (min_inter_distance(g) >= 0.5) break;
        }
        SyntheticSample s;
        switch (task) {
            case SynthTask::AffinityRegression: s.label = affinity_label(g); break;
            case SynthTask::ContactRegression: s.label = contact_label(g); break;
            case SynthTask::SeparationClassification: s.label = centroid_separation(g); break;
        }
        s.graph = std::move(g);
        out.push_back(std::move(s));
    }
    if (task == SynthTask::SeparationClassification) {
        std::vector<double> seps;
        for (const auto& s : out) seps.push_back(s.label);
        std::vector<double> sorted = seps;
        std::sort(sorted.begin(), sorted.end());
        const std::size_t half = sorted.size() / 2;
        const double median = sorted.size() % 2 == 1
                                  ? sorted[half]
                                  : 0.5 * (sorted[half - 1] + sorted[half]);
        for (auto& s : out) s.label = s.label < median ? 1.0 : 0.0;
    }
    return out;
}

// ---------------------------------------------------------------- batching

std::vector<std::vector<std::size_t>> dynamic_batches(const std::vector<std::size_t>& block_counts,
                                                      std::size_t max_n_vertex) {
    std::vector<std::vector<std::size_t>> batches;
    std::vector<std::size_t> current;
    std::size_t used = 0;
    for (std::size_t i = 0; i < block_counts.size(); ++i) {
        const std::size_t b = block_counts[i];
        if (b > max_n_vertex) {
            throw std::runtime_error("graph " + std::to_string(i) + " has " + std::to_string(b) +
                                     " blocks, above the batch budget of " +
                                     std::to_string(max_n_vertex));
        }
        if (!current.empty() && used + b > max_n_vertex) {
            batches.push_back(std::move(current));
            current.clear();
            used = 0;
        }
        current.push_back(i);
        used += b;
    }
    if (!current.empty()) batches.push_back(std::move(current));
    return batches;
}

// ---------------------------------------------------------------- optimizer

Adam::Adam(const std::vector<ParamRef>& params, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& p : params) {
        m_.emplace_back(static_cast<std::size_t>(p.tensor->numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.tensor->numel()), 0.0);
    }
}

void Adam::step(const std::vector<ParamRef>& params, const std::vector<Tensor>& grads, double lr) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
        throw ContractError("optimizer state does not match the parameter list");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& g = grads[i].vec();
        auto& m = m_[i];
        auto& v = v_[i];
        std::vector<double> next(params[i].tensor->vec());
        for (std::size_t c = 0; c < next.size(); ++c) {
            m[c] = cfg_.beta1 * m[c] + (1.0 - cfg_.beta1) * g[c];
            v[c] = cfg_.beta2 * v[c] + (1.0 - cfg_.beta2) * g[c] * g[c];
            const double mhat = m[c] / bc1;
            const double vhat = v[c] / bc2;
            next[c] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        *params[i].tensor = Tensor(params[i].tensor->shape(), std::move(next));
    }
}

// ---------------------------------------------------------------- metrics

double pearson(std::span<const double> a, std::span<const double> b, bool* degenerate) {
    if (a.size() != b.size() || a.size() < 2) throw ContractError("pearson needs two equal series");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    return cov / std::sqrt(va * vb);
}

std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> ranks(v.size(), 0.0);
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based average rank
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b, bool* degenerate) {
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    return pearson(ra, rb, degenerate);
}

double rmse(std::span<const double> preds, std::span<const double> targets) {
    if (preds.size() != targets.size() || preds.empty()) {
        throw ContractError("rmse needs two equal series");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        s += (preds[i] - targets[i]) * (preds[i] - targets[i]);
    }
    return std::sqrt(s / static_cast<double>(preds.size()));
}

namespace {

// Threshold sweep over scores descending, ties grouped.
struct RocSweep {
    std::vector<double> tp, fp;  // cumulative counts after each group
    double pos = 0.0, neg = 0.0;
};

RocSweep roc_sweep(std::span<const double> scores, std::span<const double> labels) {
    if (scores.size() != labels.size() || scores.size() < 2) {
        throw ContractError("roc needs two equal series");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t i, std::size_t j) { return scores[i] > scores[j]; });
    RocSweep sweep;
    for (double l : labels) (l > 0.5 ? sweep.pos : sweep.neg) += 1.0;
    double tp = 0.0, fp = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        for (std::size_t k = i; k <= j; ++k) (labels[order[k]] > 0.5 ? tp : fp) += 1.0;
        sweep.tp.push_back(tp);
        sweep.fp.push_back(fp);
        i = j + 1;
    }
    return sweep;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const double> labels) {
    const RocSweep sweep = roc_sweep(scores, labels);
    if (sweep.pos == 0.0 || sweep.neg == 0.0) return 0.0;
    double area = 0.0, prev_tp = 0.0, prev_fp = 0.0;
    for (std::size_t g = 0; g < sweep.tp.size(); ++g) {
        area += (sweep.fp[g] - prev_fp) * (sweep.tp[g] + prev_tp) * 0.5;
        prev_tp = sweep.tp[g];
        prev_fp = sweep.fp[g];
    }
    return area / (sweep.pos * sweep.neg);
}

double auprc(std::span<const double> scores, std::span<const double> labels) {
    const RocSweep sweep = roc_sweep(scores, labels);
    if (sweep.pos == 0.0) return 0.0;
    double area = 0.0, prev_recall = 0.0;
    for (std::size_t g = 0; g < sweep.tp.size(); ++g) {
        const double recall = sweep.tp[g] / sweep.pos;
        const double precision = sweep.tp[g] / (sweep.tp[g] + sweep.fp[g]);
        area += (recall - prev_recall) * precision;  // step interpolation
        prev_recall = recall;
    }
    return area;
}

MetricsResult compute_metrics(std::span<const double> preds, std::span<const double> targets,
                              const std::string& task) {
    MetricsResult m;
    if (task == "regression") {
        m.values["pearson"] = pearson(preds, targets, &m.degenerate);
        m.values["spearman"] = spearman(preds, targets, &m.degenerate);
        m.values["rmse"] = rmse(preds, targets);
    } else if (task == "classification") {
        m.values["auroc"] = auroc(preds, targets);
        m.values["auprc"] = auprc(preds, targets);
    } else {
        throw ContractError("unknown metrics task '" + task + "'");
    }
    return m;
}

// ---------------------------------------------------------------- training

namespace {

struct Standardization {
    double mean = 0.0;
    double std = 1.0;
};

Standardization standardize_targets(const std::vector<SyntheticSample>& data) {
    Standardization s;
    if (data.empty()) return s;
    double mean = 0.0;
    for (const auto& d : data) mean += d.label;
    mean /= static_cast<double>(data.size());
    double var = 0.0;
    for (const auto& d : data) var += (d.label - mean) * (d.label - mean);
    var /= static_cast<double>(data.size());
    s.mean = mean;
    s.std = std::max(std::sqrt(var), 1e-12);
    return s;
}

Tensor sample_loss(const GetModel& model, const HeadParams& heads, const SyntheticSample& sample,
                   const std::string& task, const Standardization& st) {
    const ComplexGraph enc = get_forward(sample.graph, model.encoder);
    const PoolingOutput pooled = hierarchical_pool(enc);
    const Tensor out = predict_affinity(pooled.graph_vec, heads);
    if (task == "classification") {
        return bce_with_logits(out, Tensor::scalar(sample.label));
    }
    const double target = (sample.label - st.mean) / st.std;
    Tensor diff = add_scalar(out, -target);
    return mul(diff, diff);
}

std::string diverged_message(int epoch, std::size_t batch, const std::vector<ParamRef>& params) {
    double total = 0.0, worst = 0.0;
    std::string worst_name;
    for (const auto& p : params) {
        double n2 = 0.0;
        for (double x : p.tensor->vec()) n2 += x * x;
        total += n2;
        if (n2 > worst) {
            worst = n2;
            worst_name = p.name;
        }
    }
    std::ostringstream os;
    os << "training diverged: non-finite loss at epoch " << epoch << ", batch " << batch
       << "; parameter norm " << std::sqrt(total) << ", largest tensor " << worst_name << " ("
       << std::sqrt(worst) << ")";
    return os.str();
}

}  // namespace

std::string TrainResult::history_csv(const std::string& task) const {
    std::ostringstream os;
    os.precision(12);
    os << "epoch,train_loss,val_loss,lr";
    const std::vector<std::string> cols = task == "regression"
                                              ? std::vector<std::string>{"pearson", "spearman", "rmse"}
                                              : std::vector<std::string>{"auroc", "auprc"};
    for (const auto& c : cols) os << ',' << c;
    os << '\n';
    for (const auto& e : history) {
        os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr;
        for (const auto& c : cols) {
            os << ',';
            auto it = e.val_metrics.values.find(c);
            if (it != e.val_metrics.values.end()) os << it->second;
        }
        os << '\n';
    }
    return os.str();
}

TrainResult train(const TrainConfig& cfg, const std::vector<SyntheticSample>& train_set,
                  const std::vector<SyntheticSample>& val_set) {
    cfg.validate();
    if (train_set.empty() || val_set.empty()) throw ContractError("train and val sets must be non-empty");

    const Standardization st =
        cfg.task == "regression" ? standardize_targets(train_set) : Standardization{};

    GetModel model = GetModel::make(cfg.model_config(), cfg.seed);
    auto params = model.collect();
    Adam opt(params);
    Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

    struct Saved {
        double val_loss;
        int epoch;
        GetModel snapshot;
    };
    std::vector<Saved> saved;

    TrainResult result;
    result.target_mean = st.mean;
    result.target_std = st.std;

    for (int epoch = 0; epoch < cfg.max_epoch; ++epoch) {
        const double lr_e = lr_at_epoch(cfg, epoch);
        std::vector<std::size_t> order(train_set.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        std::vector<std::size_t> counts;
        counts.reserve(order.size());
        for (std::size_t i : order) counts.push_back(train_set[i].graph.n_blocks());
        const auto batches = dynamic_batches(counts, cfg.max_n_vertex);

        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            Tape tape;
            watch_all(tape, params);
            Tensor loss;
            for (std::size_t k = 0; k < batches[bi].size(); ++k) {
                const auto& sample = train_set[order[batches[bi][k]]];
                Tensor l = sample_loss(model, model.heads, sample, cfg.task, st);
                loss = (k == 0) ? std::move(l) : add(loss, l);
            }
            loss = scale(loss, 1.0 / static_cast<double>(batches[bi].size()));
            const double lv = loss.value();
            if (!std::isfinite(lv)) throw TrainingDiverged(diverged_message(epoch, bi, params));
            const Gradients grads = tape.backward(loss);
            std::vector<Tensor> gvec;
            gvec.reserve(params.size());
            for (const auto& p : params) gvec.push_back(grads.at(*p.tensor));
            opt.step(params, gvec, lr_e);
            epoch_loss += lv * static_cast<double>(batches[bi].size());
            seen += batches[bi].size();
        }
        epoch_loss /= static_cast<double>(seen);

        // Validation.
        double val_loss = 0.0;
        std::vector<double> preds, targets;
        for (const auto& sample : val_set) {
            const Tensor l = sample_loss(model, model.heads, sample, cfg.task, st);
            val_loss += l.value();
            const ComplexGraph enc = get_forward(sample.graph, model.encoder);
            const Tensor out = predict_affinity(hierarchical_pool(enc).graph_vec, model.heads);
            preds.push_back(cfg.task == "regression" ? out.value() * st.std + st.mean
                                                     : out.value());
            targets.push_back(sample.label);
        }
        val_loss /= static_cast<double>(val_set.size());

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = epoch_loss;
        stats.val_loss = val_loss;
        stats.lr = lr_e;
        stats.val_metrics = compute_metrics(preds, targets, cfg.task);
        result.history.push_back(stats);

        saved.push_back({val_loss, epoch, model});
        std::sort(saved.begin(), saved.end(), [](const Saved& a, const Saved& b) {
            if (a.val_loss != b.val_loss) return a.val_loss < b.val_loss;
            return a.epoch < b.epoch;
        });
        if (saved.size() > static_cast<std::size_t>(cfg.save_topk)) saved.resize(
            static_cast<std::size_t>(cfg.save_topk));
    }

    const auto latest = std::max_element(saved.begin(), saved.end(),
                                         [](const Saved& a, const Saved& b) { return a.epoch < b.epoch; });
    result.model = latest->snapshot;
    result.selected_epoch = latest->epoch;
    std::sort(saved.begin(), saved.end(),
              [](const Saved& a, const Saved& b) { return a.epoch < b.epoch; });
    for (const auto& s : saved) {
        result.saved_epochs.push_back(s.epoch);
        result.checkpoints.emplace_back(s.epoch, s.snapshot);
    }
    return result;
}

std::vector<double> predict_dataset(const GetModel& model, const std::vector<SyntheticSample>& data,
                                    double target_mean, double target_std) {
    std::vector<double> preds;
    preds.reserve(data.size());
    for (const auto& sample : data) {
        const ComplexGraph enc = get_forward(sample.graph, model.encoder);
        const Tensor out = predict_affinity(hierarchical_pool(enc).graph_vec, model.heads);
        preds.push_back(out.value() * target_std + target_mean);
    }
    return preds;
}

MixedTrainResult train_mixed(const TrainConfig& cfg, const std::vector<SyntheticSample>& train_a,
                             const std::vector<SyntheticSample>& val_a,
                             const std::vector<SyntheticSample>& train_b,
                             const std::vector<SyntheticSample>& val_b) {
    cfg.validate();
    if (cfg.task != "regression") throw ContractError("mixed training is a regression mechanism");

    const Standardization st_a = standardize_targets(train_a);
    const Standardization st_b = standardize_targets(train_b);

    GetModel model = GetModel::make(cfg.model_config(), cfg.seed);
    Rng head_rng(cfg.seed + 1);
    HeadParams heads_b = HeadParams::make(cfg.d_h, head_rng);

    std::vector<ParamRef> params = model.collect();
    heads_b.collect("head_b", params);
    Adam opt(params);
    Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

    struct Tagged {
        const SyntheticSample* sample;
        bool task_b;
    };
    std::vector<Tagged> pool;
    for (const auto& s : train_a) pool.push_back({&s, false});
    for (const auto& s : train_b) pool.push_back({&s, true});

    struct Saved {
        double val_loss;
        int epoch;
        GetModel snapshot;
        HeadParams heads_b_snapshot;
    };
    std::vector<Saved> saved;

    MixedTrainResult result;
    result.target_mean_a = st_a.mean;
    result.target_std_a = st_a.std;
    result.target_mean_b = st_b.mean;
    result.target_std_b = st_b.std;

    for (int epoch = 0; epoch < cfg.max_epoch; ++epoch) {
        const double lr_e = lr_at_epoch(cfg, epoch);
        std::vector<std::size_t> order(pool.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        std::vector<std::size_t> counts;
        for (std::size_t i : order) counts.push_back(pool[i].sample->graph.n_blocks());
        const auto batches = dynamic_batches(counts, cfg.max_n_vertex);

        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            Tape tape;
            watch_all(tape, params);
            Tensor loss;
            for (std::size_t k = 0; k < batches[bi].size(); ++k) {
                const Tagged& tg = pool[order[batches[bi][k]]];
                Tensor l = sample_loss(model, tg.task_b ? heads_b : model.heads, *tg.sample,
                                       "regression", tg.task_b ? st_b : st_a);
                loss = (k == 0) ? std::move(l) : add(loss, l);
            }
            loss = scale(loss, 1.0 / static_cast<double>(batches[bi].size()));
            const double lv = loss.value();
            if (!std::isfinite(lv)) throw TrainingDiverged(diverged_message(epoch, bi, params));
            const Gradients grads = tape.backward(loss);
            std::vector<Tensor> gvec;
            for (const auto& p : params) gvec.push_back(grads.at(*p.tensor));
            opt.step(params, gvec, lr_e);
        }

        double val_loss = 0.0;
        for (const auto& s : val_a) {
            val_loss += sample_loss(model, model.heads, s, "regression", st_a).value();
        }
        for (const auto& s : val_b) {
            val_loss += sample_loss(model, heads_b, s, "regression", st_b).value();
        }
        val_loss /= static_cast<double>(val_a.size() + val_b.size());

        EpochStats stats;
        stats.epoch = epoch;
        stats.val_loss = val_loss;
        stats.lr = lr_e;
        result.history.push_back(stats);

        saved.push_back({val_loss, epoch, model, heads_b});
        std::sort(saved.begin(), saved.end(), [](const Saved& a, const Saved& b) {
            if (a.val_loss != b.val_loss) return a.val_loss < b.val_loss;
            return a.epoch < b.epoch;
        });
        if (saved.size() > static_cast<std::size_t>(cfg.save_topk)) saved.resize(
            static_cast<std::size_t>(cfg.save_topk));
    }

    const auto latest = std::max_element(saved.begin(), saved.end(),
                                         [](const Saved& a, const Saved& b) { return a.epoch < b.epoch; });
    result.model = latest->snapshot;
    result.heads_b = latest->heads_b_snapshot;
    return result;
}

}  // namespace getmol
