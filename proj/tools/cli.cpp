#include "cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <optional>
#include <stdexcept>

#include "csilab/harness.hpp"

namespace csilab::cli {

namespace {

using harness::ExperimentConfig;
using nlohmann::json;

struct ConfigArgs {
    std::string path;
    std::vector<std::string> overrides;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", path, "experiment configuration (JSON)")->check(CLI::ExistingFile);
        cmd->add_option("--set", overrides, "override a config key, e.g. --set train.epochs=20");
    }

    ExperimentConfig load() const {
        json doc = json::object();
        if (!path.empty()) {
            std::ifstream in(path);
            if (!in) throw std::runtime_error("cannot open " + path);
            try {
                doc = json::parse(in);
            } catch (const json::parse_error& e) {
                throw FormatError(path + ": " + e.what());
            }
        }
        for (const auto& o : overrides) harness::apply_override(doc, o);
        return doc.get<ExperimentConfig>();
    }
};

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    return out;
}

std::vector<eval::ReportRow> read_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return eval::read_csv(in);
}

void write_report(const std::string& path, const std::vector<eval::ReportRow>& rows) {
    auto out = open_out(path);
    eval::write_csv_header(out);
    for (const auto& r : rows) eval::write_csv_row(out, r);
}

void print_table(std::ostream& os, const std::vector<eval::ReportRow>& rows) {
    std::size_t width = 6;
    for (const auto& r : rows) width = std::max(width, r.scheme.size());
    os << std::left << std::setw(static_cast<int>(width)) << "scheme" << std::right << std::setw(8) << "bits"
       << std::setw(11) << "nmse_db" << std::setw(11) << "evm_db" << std::setw(8) << "gamma" << std::setw(12)
       << "gross_mbps" << std::setw(12) << "net_mbps" << '\n';
    os << std::fixed;
    for (const auto& r : rows) {
        os << std::left << std::setw(static_cast<int>(width)) << r.scheme << std::right << std::setprecision(0)
           << std::setw(8) << r.feedback_bits << std::setprecision(2) << std::setw(11) << r.nmse_db << std::setw(11)
           << r.evm_db << std::setw(8) << r.gamma << std::setw(12) << r.gross_mbps << std::setw(12) << r.net_mbps
           << '\n';
    }
    os.unsetf(std::ios::floatfield);
}

std::vector<channel::CfrSequence> load_data(const std::string& path) {
    auto seqs = channel::load_dataset(path);
    if (seqs.empty()) throw std::runtime_error(path + ": dataset is empty");
    return seqs;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"csilab: CSI feedback experiments"};
    app.require_subcommand(1);
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "no progress output");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a channel dataset");
    ConfigArgs gen_cfg;
    gen_cfg.attach(gen);
    std::string gen_split = "train", gen_out;
    gen->add_option("--split", gen_split, "train or test")->check(CLI::IsMember({"train", "test"}));
    gen->add_option("--out", gen_out, "dataset file (.cfrd)")->required();

    // train
    auto* train = app.add_subcommand("train", "train a feedback model");
    ConfigArgs train_cfg;
    train_cfg.attach(train);
    std::string train_scheme, train_data, train_out, train_pretrained;
    bool train_refined = false;
    train->add_option("--scheme", train_scheme, "standard, initial, ad_naive, ad_parallel or ad_unified");
    train->add_flag("--refined", train_refined, "attach a trained refiner");
    train->add_option("--data", train_data, "training dataset (.cfrd)")->required()->check(CLI::ExistingFile);
    train->add_option("--pretrained", train_pretrained, "model whose Type-I pair and codebook are reused")
        ->check(CLI::ExistingFile);
    train->add_option("--out", train_out, "model file (.cfm)")->required();

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "evaluate a model on a dataset");
    ConfigArgs eval_cfg;
    eval_cfg.attach(evaluate);
    std::string eval_model, eval_data, eval_report;
    evaluate->add_option("--model", eval_model, "model file (.cfm)")->required()->check(CLI::ExistingFile);
    evaluate->add_option("--data", eval_data, "test dataset (.cfrd)")->required()->check(CLI::ExistingFile);
    evaluate->add_option("--report", eval_report, "CSV report to write");

    // sweep
    auto* sweep = app.add_subcommand("sweep", "train and evaluate every configured scheme and seed");
    ConfigArgs sweep_cfg;
    sweep_cfg.attach(sweep);
    std::string sweep_report, sweep_summary;
    sweep->add_option("--report", sweep_report, "CSV with one row per scheme and seed")->required();
    sweep->add_option("--summary", sweep_summary, "CSV with rows averaged over seeds");

    // report
    auto* report = app.add_subcommand("report", "average report rows per scheme");
    ConfigArgs report_cfg;
    report_cfg.attach(report);
    std::vector<std::string> report_in;
    std::string report_out;
    report->add_option("--in", report_in, "CSV reports")->required()->check(CLI::ExistingFile);
    report->add_option("--out", report_out, "averaged CSV");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    std::ostream* log = quiet ? nullptr : &err;
    try {
        const int threads = harness::worker_count();
        if (gen->parsed()) {
            const auto cfg = gen_cfg.load();
            const auto split = gen_split == "train" ? harness::Split::Train : harness::Split::Test;
            const auto seqs = harness::generate_split(cfg, split, threads);
            channel::save_dataset(gen_out, seqs);
            out << "wrote " << seqs.size() << " sequences to " << gen_out << '\n';
        } else if (train->parsed()) {
            auto cfg = train_cfg.load();
            if (!train_scheme.empty()) cfg.scheme = pipeline::scheme_from_string(train_scheme);
            if (train_refined) cfg.refined = true;
            const auto seqs = load_data(train_data);
            cfg.channel = seqs.front().config();
            cfg.finalize();
            const auto angles = harness::dataset_angles(seqs, cfg.channel.n_s, threads);
            std::optional<harness::FeedbackModel> pre;
            harness::TrainOptions opt;
            opt.log = log;
            if (!train_pretrained.empty()) {
                pre.emplace(harness::load_model(train_pretrained, &err));
                if (!pre->codec) throw std::invalid_argument(train_pretrained + " has no learned codec");
                opt.pretrained = &*pre->codec;
            }
            const auto model = harness::train_model(cfg, angles, opt);
            harness::save_model(train_out, model);
            out << "wrote " << model.label() << " (" << model.feedback_bits() << " bits/message) to " << train_out
                << '\n';
        } else if (evaluate->parsed()) {
            const auto cfg = eval_cfg.load();
            const auto model = harness::load_model(eval_model, &err);
            const auto seqs = load_data(eval_data);
            const auto metrics = harness::evaluate_model(model, seqs, cfg.eval, threads);
            const auto row = harness::report_row(model.label(), metrics, cfg.eval);
            if (!eval_report.empty()) write_report(eval_report, {row});
            print_table(out, {row});
        } else if (sweep->parsed()) {
            const auto cfg = sweep_cfg.load();
            const auto entries = harness::run_sweep(cfg, threads, log);
            std::vector<eval::ReportRow> rows;
            for (const auto& e : entries) rows.push_back(e.row);
            write_report(sweep_report, rows);
            const auto avg = harness::average_rows(rows, cfg.eval);
            if (!sweep_summary.empty()) write_report(sweep_summary, avg);
            print_table(out, avg);
        } else if (report->parsed()) {
            const auto cfg = report_cfg.load();
            std::vector<eval::ReportRow> rows;
            for (const auto& path : report_in) {
                auto part = read_report(path);
                rows.insert(rows.end(), part.begin(), part.end());
            }
            const auto avg = harness::average_rows(rows, cfg.eval);
            if (!report_out.empty()) write_report(report_out, avg);
            print_table(out, avg);
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

}  // namespace csilab::cli
