#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "getmol/audit.hpp"
#include "getmol/params_io.hpp"
#include "getmol/trainer.hpp"

using namespace getmol;

namespace {

ComplexGraph two_block_complex(double distance) {
    Block a, b;
    a.block_type = b.block_type = 0;
    a.molecule_id = 0;
    b.molecule_id = 1;
    a.atoms.push_back(Atom{1, 0, {0, 0, 0}});
    b.atoms.push_back(Atom{1, 0, {distance, 0, 0}});
    return build_graph({a, b}, 9);
}

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.d_h = 8;
    cfg.d_r = 4;
    cfg.d_e = 4;
    cfg.n_layers = 1;
    cfg.max_epoch = 2;
    cfg.lr = 1e-3;
    cfg.final_lr = 1e-4;
    cfg.max_n_vertex = 64;
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST_CASE("synthetic labels are invariant under rigid transforms") {
    Rng rng(3);
    const auto data = make_synthetic_dataset(6, rng, SynthTask::AffinityRegression);
    Rng trng(7);
    for (const auto& s : data) {
        const RigidTransform t = sample_rigid(trng, true);
        const ComplexGraph moved = transform_graph(s.graph, t);
        CHECK(affinity_label(moved) == doctest::Approx(s.label).epsilon(1e-9));
        CHECK(contact_label(moved) ==
              doctest::Approx(contact_label(s.graph)).epsilon(1e-9));
        CHECK(centroid_separation(moved) ==
              doctest::Approx(centroid_separation(s.graph)).epsilon(1e-9));
    }
}

TEST_CASE("the same seed regenerates the dataset bitwise") {
    Rng rng_a(42), rng_b(42);
    const auto a = make_synthetic_dataset(10, rng_a, SynthTask::AffinityRegression);
    const auto b = make_synthetic_dataset(10, rng_b, SynthTask::AffinityRegression);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].label == b[i].label);
        REQUIRE(a[i].graph.n_blocks() == b[i].graph.n_blocks());
        for (std::size_t j = 0; j < a[i].graph.blocks.size(); ++j) {
            CHECK(a[i].graph.blocks[j].atoms[0].coord == b[i].graph.blocks[j].atoms[0].coord);
        }
    }
}

TEST_CASE("the hand-built two-block complex at distance 1 has label 2") {
    // -ln(1) + 4/(1+1)
    CHECK(affinity_label(two_block_complex(1.0)) == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("classification labels split at the median separation") {
    Rng rng(11);
    const auto data = make_synthetic_dataset(21, rng, SynthTask::SeparationClassification);
    int ones = 0;
    for (const auto& s : data) {
        CHECK((s.label == 0.0 || s.label == 1.0));
        ones += s.label == 1.0 ? 1 : 0;
    }
    CHECK(ones == 10);  // strictly-below-median count for odd n
}

TEST_CASE("dynamic batches pack greedily in order") {
    CHECK(dynamic_batches({5, 5, 5}, 10) ==
          std::vector<std::vector<std::size_t>>{{0, 1}, {2}});
    CHECK(dynamic_batches({5, 5, 5}, 15) == std::vector<std::vector<std::size_t>>{{0, 1, 2}});
    CHECK(dynamic_batches({3, 3, 3, 3}, 6) ==
          std::vector<std::vector<std::size_t>>{{0, 1}, {2, 3}});
}

TEST_CASE("a graph above the block budget is an explicit error") {
    CHECK_THROWS_WITH_AS(dynamic_batches({5, 20, 5}, 10), doctest::Contains("budget"),
                         std::runtime_error);
}

TEST_CASE("shipped training defaults match the hyperparameter tables") {
    TrainConfig cfg;
    CHECK(cfg.save_topk == 3);
    CHECK(cfg.n_layers == 3);
    CHECK(cfg.max_n_vertex == 1500);
    CHECK(cfg.knn_k == 9);
}

TEST_CASE("the learning rate schedule hits lr at epoch 0 and final_lr at the last epoch") {
    TrainConfig cfg;
    cfg.lr = 3e-3;
    cfg.final_lr = 7e-5;
    cfg.max_epoch = 13;
    CHECK(lr_at_epoch(cfg, 0) == cfg.lr);
    CHECK(std::abs(lr_at_epoch(cfg, 12) - cfg.final_lr) <= 1e-12);
    // monotone decay in between
    for (int e = 1; e < 13; ++e) CHECK(lr_at_epoch(cfg, e) < lr_at_epoch(cfg, e - 1));
}

TEST_CASE("config json round-trips and rejects unknown fields") {
    TrainConfig cfg = tiny_config();
    const TrainConfig back = TrainConfig::from_json(cfg.to_json());
    CHECK(back.d_h == cfg.d_h);
    CHECK(back.lr == cfg.lr);
    CHECK(back.max_n_vertex == cfg.max_n_vertex);
    CHECK_THROWS_WITH_AS(TrainConfig::from_json("{\"learning_rate\": 1}"),
                         doctest::Contains("unknown field"), std::runtime_error);
    CHECK_THROWS_AS(TrainConfig::from_json("{\"lr\": 1e-6, \"final_lr\": 1e-3}"), ContractError);
}

TEST_CASE("a two-epoch run produces a finite two-entry history") {
    Rng rng(13);
    const auto data = make_synthetic_dataset(12, rng, SynthTask::AffinityRegression);
    const std::vector<SyntheticSample> train_set(data.begin(), data.begin() + 8);
    const std::vector<SyntheticSample> val_set(data.begin() + 8, data.end());
    const TrainResult result = train(tiny_config(), train_set, val_set);
    REQUIRE(result.history.size() == 2);
    for (const auto& e : result.history) {
        CHECK(std::isfinite(e.train_loss));
        CHECK(std::isfinite(e.val_loss));
    }
    CHECK(result.history[0].lr == 1e-3);
    CHECK(std::abs(result.history[1].lr - 1e-4) <= 1e-12);
    CHECK(result.selected_epoch >= 0);
    CHECK(result.checkpoints.size() <= 3);
    const std::string csv = result.history_csv("regression");
    CHECK(csv.find("epoch,train_loss,val_loss,lr,pearson,spearman,rmse") == 0);
}

TEST_CASE("training keeps the save_topk best checkpoints and selects the latest") {
    Rng rng(17);
    const auto data = make_synthetic_dataset(14, rng, SynthTask::AffinityRegression);
    const std::vector<SyntheticSample> train_set(data.begin(), data.begin() + 10);
    const std::vector<SyntheticSample> val_set(data.begin() + 10, data.end());
    TrainConfig cfg = tiny_config();
    cfg.max_epoch = 5;
    cfg.save_topk = 2;
    const TrainResult result = train(cfg, train_set, val_set);
    CHECK(result.saved_epochs.size() == 2);
    CHECK(result.selected_epoch ==
          *std::max_element(result.saved_epochs.begin(), result.saved_epochs.end()));
    // the selected snapshot is among the best-2 validation losses
    std::vector<double> losses;
    for (const auto& e : result.history) losses.push_back(e.val_loss);
    std::vector<double> sorted = losses;
    std::sort(sorted.begin(), sorted.end());
    for (int epoch : result.saved_epochs) {
        CHECK(losses[static_cast<std::size_t>(epoch)] <= sorted[1] + 1e-15);
    }
}

TEST_CASE("training is bitwise reproducible from seed, config and dataset") {
    Rng rng(19);
    const auto data = make_synthetic_dataset(12, rng, SynthTask::AffinityRegression);
    const std::vector<SyntheticSample> train_set(data.begin(), data.begin() + 9);
    const std::vector<SyntheticSample> val_set(data.begin() + 9, data.end());
    const TrainResult a = train(tiny_config(), train_set, val_set);
    const TrainResult b = train(tiny_config(), train_set, val_set);
    GetModel ma = a.model, mb = b.model;
    const auto pa = ma.collect();
    const auto pb = mb.collect();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const auto& va = pa[i].tensor->vec();
        const auto& vb = pb[i].tensor->vec();
        REQUIRE(va.size() == vb.size());
        for (std::size_t c = 0; c < va.size(); ++c) CHECK(va[c] == vb[c]);
    }
}

TEST_CASE("a non-finite loss aborts with diagnostics") {
    Rng rng(23);
    auto data = make_synthetic_dataset(8, rng, SynthTask::AffinityRegression);
    data[2].label = std::numeric_limits<double>::quiet_NaN();
    const std::vector<SyntheticSample> train_set(data.begin(), data.begin() + 6);
    const std::vector<SyntheticSample> val_set(data.begin() + 6, data.end());
    TrainConfig cfg = tiny_config();
    CHECK_THROWS_WITH_AS(train(cfg, train_set, val_set), doctest::Contains("epoch"),
                         TrainingDiverged);
}

TEST_CASE("classification training runs with binary cross entropy") {
    Rng rng(29);
    const auto data = make_synthetic_dataset(12, rng, SynthTask::SeparationClassification);
    const std::vector<SyntheticSample> train_set(data.begin(), data.begin() + 9);
    const std::vector<SyntheticSample> val_set(data.begin() + 9, data.end());
    TrainConfig cfg = tiny_config();
    cfg.task = "classification";
    const TrainResult result = train(cfg, train_set, val_set);
    CHECK(result.history.size() == 2);
    CHECK(result.history.back().val_metrics.values.count("auroc") == 1);
}

TEST_CASE("metrics: identical series give pearson 1, spearman 1, rmse 0") {
    const std::vector<double> v{1.0, 3.0, -2.0, 0.5, 7.0};
    const MetricsResult m = compute_metrics(v, v, "regression");
    CHECK(m.at("pearson") == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(m.at("spearman") == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(m.at("rmse") == 0.0);
}

TEST_CASE("metrics: reversed ranks give spearman -1") {
    const std::vector<double> a{1.0, 2.0, 3.0, 4.0, 5.0};
    const std::vector<double> b{10.0, 8.0, 5.0, 2.0, -1.0};
    CHECK(spearman(a, b) == doctest::Approx(-1.0).epsilon(1e-14));
}

TEST_CASE("metrics: perfectly separated scores give auroc 1 and auprc 1") {
    const std::vector<double> scores{0.9, 0.8, 0.7, 0.2, 0.1};
    const std::vector<double> labels{1, 1, 1, 0, 0};
    CHECK(auroc(scores, labels) == 1.0);
    CHECK(auprc(scores, labels) == 1.0);
}

TEST_CASE("spearman equals pearson applied to average ranks") {
    Rng rng(31);
    std::uniform_real_distribution<double> dist(-5.0, 5.0);
    std::uniform_int_distribution<int> tie(0, 3);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> a, b;
        for (int i = 0; i < 40; ++i) {
            // quantize some values to create ties
            const double av = dist(rng);
            a.push_back(tie(rng) == 0 ? std::round(av) : av);
            const double bv = dist(rng);
            b.push_back(tie(rng) == 0 ? std::round(bv) : bv);
        }
        const double direct = spearman(a, b);
        const double via_ranks = pearson(average_ranks(a), average_ranks(b));
        CHECK(std::abs(direct - via_ranks) <= 1e-12);
    }
}

TEST_CASE("auroc equals the brute-force pairwise concordance count") {
    Rng rng(37);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    std::uniform_int_distribution<int> lab(0, 1);
    std::uniform_int_distribution<int> quant(0, 2);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> scores, labels;
        for (int i = 0; i < 120; ++i) {
            const double s = dist(rng);
            scores.push_back(quant(rng) == 0 ? std::round(s * 8.0) / 8.0 : s);
            labels.push_back(static_cast<double>(lab(rng)));
        }
        double pos = 0.0, neg = 0.0, concordant = 0.0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (labels[i] < 0.5) continue;
            pos += 1.0;
            for (std::size_t j = 0; j < scores.size(); ++j) {
                if (labels[j] > 0.5) continue;
                if (scores[i] > scores[j]) concordant += 1.0;
                else if (scores[i] == scores[j]) concordant += 0.5;
            }
        }
        for (double l : labels) neg += l < 0.5 ? 1.0 : 0.0;
        if (pos == 0.0 || neg == 0.0) continue;
        CHECK(std::abs(auroc(scores, labels) - concordant / (pos * neg)) <= 1e-12);
    }
}

TEST_CASE("zero-variance correlation inputs flag the result and return 0") {
    const std::vector<double> flat{2.0, 2.0, 2.0, 2.0};
    const std::vector<double> varied{1.0, 2.0, 3.0, 4.0};
    MetricsResult m = compute_metrics(flat, varied, "regression");
    CHECK(m.at("pearson") == 0.0);
    CHECK(m.degenerate);
}

TEST_CASE("mixed two-task training shares the encoder across two heads") {
    Rng rng(41);
    const auto da = make_synthetic_dataset(10, rng, SynthTask::AffinityRegression);
    const auto db = make_synthetic_dataset(10, rng, SynthTask::ContactRegression);
    const std::vector<SyntheticSample> ta(da.begin(), da.begin() + 8), va(da.begin() + 8, da.end());
    const std::vector<SyntheticSample> tb(db.begin(), db.begin() + 8), vb(db.begin() + 8, db.end());
    const MixedTrainResult r = train_mixed(tiny_config(), ta, va, tb, vb);
    CHECK(r.history.size() == 2);
    // both heads produce finite predictions through the shared encoder
    GetModel model_b = r.model;
    model_b.heads = r.heads_b;
    const auto pa = predict_dataset(r.model, va, r.target_mean_a, r.target_std_a);
    const auto pb = predict_dataset(model_b, vb, r.target_mean_b, r.target_std_b);
    for (double v : pa) CHECK(std::isfinite(v));
    for (double v : pb) CHECK(std::isfinite(v));
}
