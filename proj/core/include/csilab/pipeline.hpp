#pragma once

#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "csilab/baseline.hpp"
#include "csilab/channel.hpp"
#include "csilab/givens.hpp"
#include "csilab/types.hpp"
#include "csilab/vqcodec.hpp"

namespace csilab::pipeline {

using ad::Matrix;
using vq::CodecModel;

enum class Scheme { Standard, Initial, AdNaive, AdParallel, AdUnified };

std::string to_string(Scheme s);
Scheme scheme_from_string(std::string_view name);
bool is_angle_difference(Scheme s);

// ------------------------------------------------------------ angles

/// Minimal-rotation wrap h(x) into [-pi, pi). Requires |x| < 2 pi.
double wrap_angle(double x);
/// Elementwise h over both planes (h').
AngleSet wrap_diff(const AngleSet& diff);
Matrix wrap_diff(const Matrix& diff);

/// Sum over entries of |e^{ja} - e^{jb}|^2.
double angular_distortion(const AngleSet& a, const AngleSet& b);

/// Network row layout of an AngleSet: [plane][angle][subcarrier].
Matrix to_row(const AngleSet& a);
AngleSet from_row(const Matrix& row, int n_a, int n_c, Eigen::Index r = 0);

/// Angles of every snapshot of a channel sequence.
AngleSequence sequence_angles(const channel::CfrSequence& seq, int n_s);

// ------------------------------------------------------------ mode selection

struct SelectionConfig {
    double mu_th = 0.3 * std::numbers::pi;
    int n_th = 20;

    void validate(int n_a, int n_c) const;
};

void to_json(nlohmann::json& j, const SelectionConfig& s);
void from_json(const nlohmann::json& j, SelectionConfig& s);

struct ModeDecision {
    bool indicator = false;  // 1: angle-difference feedback
    int n_d = 0;             // entries with |.| > mu_th
};

/// Counts large entries of an already-wrapped difference over both planes.
ModeDecision select_mode(const AngleSet& wrapped_diff, const SelectionConfig& cfg);

// ------------------------------------------------------------ messages

/// Packed feedback bits. Angle-difference schemes put the indicator in the
/// first bit (bit 7 of byte 0) and the VQ indices after it; initial feedback
/// carries indices only. Serialized as a u32 bit length and the buffer.
struct FeedbackMessage {
    std::vector<std::uint8_t> bits;
    std::size_t bit_length = 0;

    bool indicator() const;
    /// Reads `count` fields of `width` bits starting at bit `offset`.
    std::vector<int> fields(std::size_t offset, std::size_t count, int width) const;

    std::vector<std::uint8_t> serialize() const;
    static FeedbackMessage deserialize(std::span<const std::uint8_t> data);
    bool operator==(const FeedbackMessage& o) const = default;
};

struct IndexField {
    std::span<const int> indices;
    int width;
};

/// With an indicator, the first bit carries it; otherwise the message holds
/// the index fields only.
FeedbackMessage make_message(std::optional<bool> indicator, std::initializer_list<IndexField> fields);

// ------------------------------------------------------------ protocol state

struct StaState {
    bool initialized = false;
    AngleSet prev_phi;   // ground truth of the previous snapshot
    Matrix prev_z;       // previous (stage-1) encoder output, 1 x M
    Matrix prev_zq;      // its stage-1 quantization
    bool prev_mode = false;

    Matrix residual() const { return prev_z - prev_zq; }
};

struct ApState {
    bool initialized = false;
    Matrix prev_zq;       // previous stage-1 quantized latent
    AngleSet prev_hat;    // previous reconstruction
    AngleSet prev_refined;  // parallel: refined estimate made at the previous step
    bool prev_mode = false;
};

struct StaOutput {
    FeedbackMessage message;
    ModeDecision mode;
};

/// One STA step of the given scheme. The first step of a session is always
/// initial feedback.
StaOutput sta_step(Scheme scheme, StaState& state, const AngleSet& phi, const CodecModel& model,
                   const SelectionConfig& sel);
/// One AP step; returns the reconstruction emitted at this step.
AngleSet ap_step(Scheme scheme, ApState& state, const FeedbackMessage& msg, const CodecModel& model);

StaOutput sta_step_unified(StaState& s, const AngleSet& phi, const CodecModel& m, const SelectionConfig& sel);
StaOutput sta_step_naive(StaState& s, const AngleSet& phi, const CodecModel& m, const SelectionConfig& sel);
StaOutput sta_step_parallel(StaState& s, const AngleSet& phi, const CodecModel& m, const SelectionConfig& sel);
AngleSet ap_step_unified(ApState& s, const FeedbackMessage& msg, const CodecModel& m);
AngleSet ap_step_naive(ApState& s, const FeedbackMessage& msg, const CodecModel& m);
AngleSet ap_step_parallel(ApState& s, const FeedbackMessage& msg, const CodecModel& m);

/// Expected message length (indicator included) for a scheme.
std::size_t message_bits(Scheme scheme, const vq::CodecGeometry& geo);

struct SessionTrace {
    AngleSequence hat;
    std::vector<FeedbackMessage> messages;
    std::vector<bool> sta_modes;
    std::vector<bool> ap_modes;
    std::vector<Matrix> sta_zq;  // stage-1 latent after each STA step
    std::vector<Matrix> ap_zq;   // stage-1 latent after each AP step
};

/// Runs STA and AP side by side over a sequence of angle sets.
SessionTrace run_session(Scheme scheme, const AngleSequence& phi, const CodecModel& model,
                         const SelectionConfig& sel);

/// Standard feedback: uniform quantization and CBR packing every snapshot.
AngleSequence run_standard(const AngleSequence& phi, const baseline::UniformGrid& grid,
                           const givens::GivensConfig& cfg, std::size_t* bits_per_message = nullptr);

// ------------------------------------------------------------ training

enum class Distortion { Mse, Angular };

struct TrainConfig {
    double lr = 1e-4;
    int epochs = 150;
    int batch = 64;          // snapshots (initial) or sequences (angle-difference)
    double beta = 0.25;      // commitment weight (beta_1 and beta_2 in the parallel loss)
    int warmup_epochs = 1;   // epochs without quantization before k-means
    int kmeans_iters = 20;
    int type2_epochs = 5;    // angle-difference only: single-step Type-II epochs through the stage-1 codebook
    double type2_lr = 1e-3;
    int residual_epochs = 0; // unified only: Type-II epochs on two-step samples that carry the previous residual
    Distortion distortion = Distortion::Mse;
    std::uint64_t seed = 1;
    std::function<void(int epoch, double loss)> on_epoch;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainHistory {
    std::vector<double> epoch_loss;
    std::vector<double> step_loss;
};

/// Loss of the initial-feedback model on a batch of snapshot rows.
ad::Var initial_loss(ad::Graph& g, const CodecModel& m, const Matrix& x, double beta, Distortion d);

/// One time step of a batch of sessions for the angle-difference trainers.
struct AdStepBatch {
    Matrix phi;             // Phi_t
    Matrix input;           // encoder input: Phi_t (mode 0) or h'(Phi_t - Phi_{t-1}) (mode 1)
    std::vector<char> mode;       // I_t
    std::vector<char> prev_mode;  // I_{t-1}
    // unified / naive
    Matrix prev_residual;   // z_{r,t-1}
    Matrix prev_hat;        // reconstruction at t-1
    // parallel
    Matrix prev_phi;        // Phi_{t-1}
    Matrix prev_input;      // encoder input at t-1
    Matrix prev_zq;         // stage-1 latent sent at t-1
    Matrix prev_refined;    // refined estimate made at t-1 (rows with I_{t-1}=1)
};

struct AdStepResult {
    ad::Var loss;
    Matrix z;        // stage-1 encoder output
    Matrix zq;       // stage-1 quantized latent
    Matrix hat;      // reconstruction at t
    Matrix refined;  // parallel: refined estimate of t-1 (rows with I_t=1)
    std::vector<int> usage_main, usage_type2, usage_residual;  // codeword indices used
};

AdStepResult unified_step_loss(ad::Graph& g, const CodecModel& m, const AdStepBatch& b, double beta, bool naive);
AdStepResult parallel_step_loss(ad::Graph& g, const CodecModel& m, const AdStepBatch& b, double beta);

TrainHistory train_initial(CodecModel& m, const std::vector<AngleSequence>& data, const TrainConfig& cfg);
/// Adds the Type-II pair if missing and trains both pairs jointly.
TrainHistory train_unified(CodecModel& m, const std::vector<AngleSequence>& data, const SelectionConfig& sel,
                           const TrainConfig& cfg, bool naive = false);
/// Adds the Type-II pair and the two parallel codebooks if missing.
TrainHistory train_parallel(CodecModel& m, const std::vector<AngleSequence>& data, const SelectionConfig& sel,
                            const TrainConfig& cfg);

}  // namespace csilab::pipeline
