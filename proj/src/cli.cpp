#include "getmol/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "getmol/audit.hpp"
#include "getmol/model.hpp"
#include "getmol/params_io.hpp"
#include "getmol/pdb.hpp"
#include "getmol/trainer.hpp"

namespace getmol {

namespace {

using Json = nlohmann::ordered_json;

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

ComplexGraph load_inputs(const std::vector<std::string>& inputs, int k, bool k_given,
                         bool split_chains, bool keep_waters) {
    bool any_json = false;
    for (const auto& p : inputs) any_json = any_json || ends_with(p, ".json");
    if (any_json) {
        if (inputs.size() != 1) {
            throw std::runtime_error("a graph JSON input must be the only input");
        }
        ComplexGraph g = graph_from_json(read_file(inputs[0]));
        if (k_given && k != g.knn_k) {
            g = build_graph(std::move(g.blocks), k);
        }
        return g;
    }
    std::vector<ParsedStructure> structures;
    PdbParseOptions popts;
    popts.keep_waters = keep_waters;
    for (const auto& p : inputs) structures.push_back(parse_pdb_subset(read_file(p), popts));
    AssembleOptions aopts;
    aopts.k = k;
    aopts.split_chains = split_chains;
    return assemble_complex(structures, aopts);
}

Json metrics_to_json(const MetricsResult& m) {
    Json j;
    for (const auto& [k, v] : m.values) j[k] = v;
    if (m.degenerate) j["degenerate_input"] = true;
    return j;
}

int cmd_encode(const std::vector<std::string>& inputs, const std::string& out_path, int k,
               bool k_given, const std::string& level, double interface_cutoff,
               bool interface_given, bool split_chains, bool keep_waters, std::ostream& out) {
    ComplexGraph g = load_inputs(inputs, k, k_given, split_chains, keep_waters);
    if (interface_given) g = extract_interface(g, interface_cutoff);
    const ReprLevel lvl = repr_level_from_string(level);
    if (lvl == ReprLevel::Atom) g = to_atom_level(g);
    if (lvl == ReprLevel::Block) g = to_block_level_raw(g);
    atomic_write_file(out_path, graph_to_json(g));
    out << "wrote " << out_path << " (" << g.n_blocks() << " blocks, " << g.n_atoms()
        << " atoms, " << g.edges.size() << " edges)\n";
    return 0;
}

int cmd_audit(const std::string& graph_path, const std::string& params_path, int trials,
              std::uint64_t seed, const std::string& out_path, const GetConfig& fresh_cfg,
              bool skip_gradients, std::ostream& out) {
    GetModel model = params_path.empty() ? GetModel::make(fresh_cfg, seed)
                                         : load_model(params_path);
    AuditOptions opts;
    opts.run_gradients = !skip_gradients;
    AuditReport report;
    if (!graph_path.empty()) {
        const ComplexGraph g = graph_from_json(read_file(graph_path));
        opts.trials_per_graph = trials;
        report = run_audit_on_graph(model, g, seed, opts);
    } else {
        opts.n_graphs = 10;
        opts.trials_per_graph = std::max(1, trials / 10);
        report = run_audit(model, seed, opts);
    }
    out << report.to_table();
    const std::string json = report.to_json();
    if (!out_path.empty()) {
        atomic_write_file(out_path, json);
        out << "report written to " << out_path << "\n";
    } else {
        out << json;
    }
    return report.all_pass() ? 0 : 2;
}

void write_jsonl(const std::string& path, const std::vector<SyntheticSample>& data) {
    std::ostringstream os;
    for (const auto& s : data) {
        Json line;
        line["complex"] = Json::parse(graph_to_json(s.graph));
        line["label"] = s.label;
        os << line.dump() << '\n';
    }
    atomic_write_file(path, os.str());
}

int cmd_train(const std::string& config_path, const std::string& out_dir, std::ostream& out) {
    namespace fs = std::filesystem;
    const TrainConfig cfg = TrainConfig::from_json(read_file(config_path));
    Rng rng(cfg.seed);
    const SynthTask task = cfg.task == "regression" ? SynthTask::AffinityRegression
                                                    : SynthTask::SeparationClassification;
    const auto data = make_synthetic_dataset(cfg.n_samples, rng, task);

    // 80/10/10 split in generation order.
    const std::size_t n = data.size();
    const std::size_t n_val = std::max<std::size_t>(1, n / 10);
    const std::size_t n_test = std::max<std::size_t>(1, n / 10);
    const std::size_t n_train = n - n_val - n_test;
    const std::vector<SyntheticSample> train_set(data.begin(), data.begin() + n_train);
    const std::vector<SyntheticSample> val_set(data.begin() + n_train, data.begin() + n_train + n_val);
    const std::vector<SyntheticSample> test_set(data.begin() + n_train + n_val, data.end());

    const TrainResult result = train(cfg, train_set, val_set);

    fs::create_directories(fs::path(out_dir) / "checkpoints");
    atomic_write_file((fs::path(out_dir) / "config.json").string(), cfg.to_json());
    atomic_write_file((fs::path(out_dir) / "history.csv").string(), result.history_csv(cfg.task));
    const std::map<std::string, double> meta{{"target_mean", result.target_mean},
                                             {"target_std", result.target_std}};
    for (const auto& [epoch, snapshot] : result.checkpoints) {
        std::ostringstream name;
        name << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".bin";
        save_model(snapshot, (fs::path(out_dir) / "checkpoints" / name.str()).string(), meta);
    }
    save_model(result.model, (fs::path(out_dir) / "model.bin").string(), meta);
    write_jsonl((fs::path(out_dir) / "test.jsonl").string(), test_set);

    // Test metrics of the selected checkpoint.
    std::vector<double> preds, targets;
    for (const auto& s : test_set) {
        const ComplexGraph enc = get_forward(s.graph, result.model.encoder);
        const Tensor o = predict_affinity(hierarchical_pool(enc).graph_vec, result.model.heads);
        preds.push_back(cfg.task == "regression" ? o.value() * result.target_std + result.target_mean
                                                 : o.value());
        targets.push_back(s.label);
    }
    Json summary;
    summary["selected_epoch"] = result.selected_epoch;
    summary["saved_epochs"] = result.saved_epochs;
    summary["final_train_loss"] = result.history.back().train_loss;
    summary["final_val_loss"] = result.history.back().val_loss;
    summary["test"] = metrics_to_json(compute_metrics(preds, targets, cfg.task));
    const std::string summary_str = summary.dump(2) + "\n";
    atomic_write_file((fs::path(out_dir) / "metrics.json").string(), summary_str);
    out << summary_str;
    return 0;
}

int cmd_eval(const std::string& params_path, const std::string& data_path, const std::string& task,
             std::ostream& out) {
    std::map<std::string, double> meta;
    const GetModel model = load_model(params_path, &meta);
    const double mean = meta.count("target_mean") ? meta.at("target_mean") : 0.0;
    const double stdv = meta.count("target_std") ? meta.at("target_std") : 1.0;

    std::istringstream in(read_file(data_path));
    std::string line;
    std::vector<double> preds, targets;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        Json j;
        try {
            j = Json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error(data_path + ":" + std::to_string(line_no) +
                                     ": bad JSON line: " + e.what());
        }
        if (task == "lep-like") {
            const ComplexGraph active = graph_from_json(j.at("active").dump());
            const ComplexGraph inactive = graph_from_json(j.at("inactive").dump());
            const Tensor va =
                hierarchical_pool(get_forward(active, model.encoder)).graph_vec;
            const Tensor vi =
                hierarchical_pool(get_forward(inactive, model.encoder)).graph_vec;
            preds.push_back(predict_efficacy(va, vi, model.heads).value());
        } else {
            const ComplexGraph g = graph_from_json(j.at("complex").dump());
            const ComplexGraph enc = get_forward(g, model.encoder);
            const Tensor o = predict_affinity(hierarchical_pool(enc).graph_vec, model.heads);
            preds.push_back(o.value() * stdv + mean);
        }
        targets.push_back(j.at("label").get<double>());
    }
    if (preds.size() < 2) throw std::runtime_error("eval needs at least two data lines");

    MetricsResult metrics;
    if (task == "ppa-like") {
        metrics.values["pearson"] = pearson(preds, targets, &metrics.degenerate);
        metrics.values["spearman"] = spearman(preds, targets, &metrics.degenerate);
    } else if (task == "lba-like") {
        metrics = compute_metrics(preds, targets, "regression");
    } else if (task == "lep-like") {
        metrics = compute_metrics(preds, targets, "classification");
    } else {
        throw std::runtime_error("unknown eval task '" + task + "'");
    }
    out << metrics_to_json(metrics).dump(2) << "\n";
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Bilevel equivariant transformer for molecular complexes"};
    app.require_subcommand(1);

    // encode
    auto* encode = app.add_subcommand("encode", "Build a complex graph JSON from PDB or JSON input");
    std::vector<std::string> enc_inputs;
    std::string enc_out;
    int enc_k = 9;
    double enc_interface = 6.0;
    std::string enc_level = "unified";
    bool enc_split_chains = false, enc_keep_waters = false;
    encode->add_option("--in", enc_inputs, "input file(s): .pdb structures or one graph .json")
        ->required()
        ->expected(-1);
    encode->add_option("--out", enc_out, "output graph JSON path")->required();
    auto* enc_k_opt = encode->add_option("--k", enc_k, "neighbors per block");
    auto* enc_if_opt =
        encode->add_option("--interface", enc_interface, "keep only interface blocks (cutoff in A)");
    encode->add_option("--level", enc_level, "unified | atom | block")
        ->check(CLI::IsMember({"unified", "atom", "block"}));
    encode->add_flag("--split-chains", enc_split_chains, "one molecule per chain");
    encode->add_flag("--keep-waters", enc_keep_waters, "keep HOH/WAT records");

    // audit
    auto* audit = app.add_subcommand("audit", "Run equivariance / permutation / gradient checks");
    std::string audit_graph, audit_params, audit_out;
    int audit_trials = 100;
    std::uint64_t audit_seed = 0;
    bool audit_skip_grad = false;
    GetConfig audit_cfg;
    audit->add_option("--graph", audit_graph, "graph JSON to audit (default: random graphs)");
    audit->add_option("--params", audit_params, "parameter container (default: fresh init)");
    audit->add_option("--trials", audit_trials, "number of random trials");
    audit->add_option("--seed", audit_seed, "RNG seed");
    audit->add_option("--out", audit_out, "write the JSON report here");
    audit->add_option("--d-h", audit_cfg.d_h, "hidden size for fresh init");
    audit->add_option("--d-r", audit_cfg.d_r, "attention size for fresh init");
    audit->add_option("--n-layers", audit_cfg.n_layers, "layers for fresh init");
    audit->add_flag("--skip-gradients", audit_skip_grad, "skip the finite-difference check");

    // train
    auto* train_cmd = app.add_subcommand("train", "Train on synthetic complexes");
    std::string train_config, train_out;
    train_cmd->add_option("--config", train_config, "TrainConfig JSON")->required();
    train_cmd->add_option("--out", train_out, "run directory")->required();

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a JSONL dataset");
    std::string eval_params, eval_data, eval_task;
    eval_cmd->add_option("--params", eval_params, "parameter container")->required();
    eval_cmd->add_option("--data", eval_data, "JSONL dataset")->required();
    eval_cmd->add_option("--task", eval_task, "ppa-like | lba-like | lep-like")
        ->required()
        ->check(CLI::IsMember({"ppa-like", "lba-like", "lep-like"}));

    std::vector<const char*> argv;
    argv.push_back("getmol");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return 0;
        }
        err << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (encode->parsed()) {
            return cmd_encode(enc_inputs, enc_out, enc_k, enc_k_opt->count() > 0, enc_level,
                              enc_interface, enc_if_opt->count() > 0, enc_split_chains,
                              enc_keep_waters, out);
        }
        if (audit->parsed()) {
            return cmd_audit(audit_graph, audit_params, audit_trials, audit_seed, audit_out,
                             audit_cfg, audit_skip_grad, out);
        }
        if (train_cmd->parsed()) return cmd_train(train_config, train_out, out);
        if (eval_cmd->parsed()) return cmd_eval(eval_params, eval_data, eval_task, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    err << "error: no subcommand\n";
    return 1;
}

}  // namespace getmol
