#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "csilab/baseline.hpp"
#include "csilab/channel.hpp"
#include "csilab/eval.hpp"
#include "csilab/pipeline.hpp"
#include "csilab/refine.hpp"
#include "csilab/vqcodec.hpp"

namespace csilab::baseline {
/// A grid is written as [b_phi, b_psi].
void to_json(nlohmann::json& j, const UniformGrid& g);
void from_json(const nlohmann::json& j, UniformGrid& g);
}  // namespace csilab::baseline

namespace csilab::harness {

// ------------------------------------------------------------ configuration

struct DataConfig {
    int train_sequences = 2000;
    int test_sequences = 400;
    std::uint64_t seed = 1;
};

struct RefinerConfig {
    int window = 3;
    std::vector<int> hidden{32, 32};
    refine::RefinerTrainConfig train;
};

struct EvalConfig {
    eval::PhyConfig phy;
    eval::OverheadConfig overhead;
    int evm_symbols = 16;
    std::optional<double> snr_db;
    std::uint64_t seed = 7;
};

struct SweepConfig {
    std::vector<pipeline::Scheme> schemes{pipeline::Scheme::Standard, pipeline::Scheme::Initial,
                                          pipeline::Scheme::AdNaive, pipeline::Scheme::AdParallel,
                                          pipeline::Scheme::AdUnified};
    std::vector<baseline::UniformGrid> standard_grids{{7, 5}, {9, 7}};
    std::vector<pipeline::Scheme> refined{pipeline::Scheme::Initial, pipeline::Scheme::AdUnified};
    std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct ExperimentConfig {
    channel::ChannelConfig channel;
    pipeline::Scheme scheme = pipeline::Scheme::AdUnified;
    bool refined = false;
    vq::CodecGeometry codec;            // n_a and n_c follow the channel
    std::optional<int> feedback_bits;   // declared N*B budget, checked if present
    baseline::UniformGrid standard{7, 5};
    pipeline::SelectionConfig selection;
    pipeline::TrainConfig train;        // Type-I stage
    pipeline::TrainConfig ad_train;     // angle-difference stage
    RefinerConfig refiner;
    DataConfig data;
    EvalConfig eval;
    SweepConfig sweep;

    ExperimentConfig();
    /// Fills derived fields and checks every invariant.
    void finalize();
    givens::GivensConfig givens() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_config(const std::filesystem::path& path);
/// Sets a dot-path key (e.g. "train.epochs") in a config document. The value
/// is parsed as JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Worker count: CSILAB_THREADS if set, else the hardware concurrency.
int worker_count();
/// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

// ------------------------------------------------------------ data

enum class Split { Train = 0, Test = 1 };

std::uint64_t sequence_seed(std::uint64_t base, Split split, std::size_t index);
std::vector<channel::CfrSequence> generate_split(const ExperimentConfig& cfg, Split split, int threads);
std::vector<AngleSequence> dataset_angles(const std::vector<channel::CfrSequence>& seqs, int n_s, int threads);

// ------------------------------------------------------------ models

struct FeedbackModel {
    pipeline::Scheme scheme = pipeline::Scheme::Initial;
    channel::ChannelConfig channel;
    baseline::UniformGrid standard{7, 5};
    pipeline::SelectionConfig selection;
    std::optional<vq::CodecModel> codec;
    std::optional<refine::RefinerModel> refiner;

    givens::GivensConfig givens() const;
    /// Bits of one feedback message.
    std::size_t feedback_bits() const;
    /// Label used in reports, e.g. "ad_unified+refined" or "standard(7,5)".
    std::string label() const;
    /// AP output for one sequence of true angles; refined when a refiner is attached.
    AngleSequence reconstruct(const AngleSequence& phi) const;
    /// AP output before refinement.
    AngleSequence reconstruct_unrefined(const AngleSequence& phi) const;

    FeedbackModel clone() const;
};

std::vector<std::uint8_t> encode_model(const FeedbackModel& m);
/// Unknown sections are skipped with a warning on `warn` (if non-null).
FeedbackModel decode_model(std::span<const std::uint8_t> bytes, std::ostream* warn);
void save_model(const std::filesystem::path& path, const FeedbackModel& m);
FeedbackModel load_model(const std::filesystem::path& path, std::ostream* warn);

// ------------------------------------------------------------ orchestration

struct TrainOptions {
    /// Type-I pair and codebook to start from instead of training them.
    const vq::CodecModel* pretrained = nullptr;
    std::ostream* log = nullptr;
};

FeedbackModel train_model(const ExperimentConfig& cfg, const std::vector<AngleSequence>& train,
                          const TrainOptions& opt = {});

/// Attaches and trains a refiner on the model's own reconstructions.
void attach_refiner(FeedbackModel& m, const ExperimentConfig& cfg, const std::vector<AngleSequence>& train,
                    std::ostream* log = nullptr);

struct Metrics {
    double nmse_db = 0;
    double evm_db = 0;
    double feedback_bits = 0;
    std::size_t samples = 0;
};

Metrics evaluate_model(const FeedbackModel& m, const std::vector<channel::CfrSequence>& test, const EvalConfig& cfg,
                       int threads);
eval::ReportRow report_row(const std::string& label, const Metrics& metrics, const EvalConfig& cfg);

struct SweepEntry {
    std::uint64_t seed;
    eval::ReportRow row;
};

/// Trains and evaluates every configured scheme for every seed. The Type-I
/// stage is trained once per seed and shared by all learned schemes.
std::vector<SweepEntry> run_sweep(const ExperimentConfig& cfg, int threads, std::ostream* log = nullptr);

/// Mean of every numeric column per label, in first-seen order; gamma and
/// throughput are recomputed from the mean EVM.
std::vector<eval::ReportRow> average_rows(const std::vector<eval::ReportRow>& rows, const EvalConfig& cfg);

}  // namespace csilab::harness
