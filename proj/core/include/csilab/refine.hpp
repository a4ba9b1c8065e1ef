#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "csilab/autodiff.hpp"
#include "csilab/nn.hpp"
#include "csilab/types.hpp"

namespace csilab::refine {

using ad::Matrix;

struct RefinerGeometry {
    int n_a = 5;
    int n_c = 16;
    int window = 3;                 // T
    std::vector<int> hidden{32, 32};

    int frame_size() const { return 2 * n_a * n_c; }
    void validate() const;
};

void to_json(nlohmann::json& j, const RefinerGeometry& g);
void from_json(const nlohmann::json& j, RefinerGeometry& g);

/// Convolutional refiner over a window of T angle sets stacked as T*2 planes.
/// The network output is added to the newest frame; the output layer starts
/// at zero so a fresh refiner is the identity.
class RefinerModel {
   public:
    explicit RefinerModel(RefinerGeometry geometry);
    RefinerModel(RefinerModel&&) noexcept = default;
    RefinerModel& operator=(RefinerModel&&) noexcept = default;

    void init(std::mt19937_64& rng);
    void rebind();
    RefinerModel clone() const;

    const RefinerGeometry& geometry() const { return geo_; }
    int window() const { return geo_.window; }
    ad::ParameterSet& params() { return params_; }
    const ad::ParameterSet& params() const { return params_; }

    /// Rows of T concatenated frames (oldest first) to refined rows.
    ad::Var forward(ad::Graph& g, const Matrix& windows) const;
    Matrix infer(const Matrix& windows) const;

    void round_to_storage();

   private:
    std::vector<int> channels() const;

    RefinerGeometry geo_;
    ad::ParameterSet params_;
    nn::ConvStack net_;
};

/// One refined estimate from exactly T frames, oldest first.
AngleSet refine(const RefinerModel& model, std::span<const AngleSet> window);

/// Source of one window slot: frame index and whether the refined estimate
/// of that frame is used.
struct WindowSlot {
    int index;
    bool refined;
    bool operator==(const WindowSlot&) const = default;
};

/// Window used to refine step t (t >= T): index j < t takes the refined
/// estimate when j >= T and the raw reconstruction otherwise; j = t is raw.
std::vector<WindowSlot> window_slots(int t, int window);

/// Recursive inference over a reconstructed sequence. Steps t < T pass
/// through unrefined.
AngleSequence run_refined_sequence(const RefinerModel& model, const AngleSequence& hat);

/// Mean angular distortion of refined windows against the truth rows.
ad::Var refine_loss(ad::Graph& g, const RefinerModel& model, const Matrix& windows, const Matrix& truth);

struct RefinerTrainConfig {
    int pretrain_epochs = 80;   // E_pre, windows of raw reconstructions
    int recursive_epochs = 20;  // windows with refined inputs
    double pretrain_lr = 1e-3;
    double lr = 1e-4;
    int batch = 64;
    std::uint64_t seed = 1;
    std::function<void(int epoch, bool recursive, double loss)> on_epoch;
};

void to_json(nlohmann::json& j, const RefinerTrainConfig& c);
void from_json(const nlohmann::json& j, RefinerTrainConfig& c);

struct RefinerHistory {
    std::vector<double> pretrain_loss;
    std::vector<double> recursive_loss;
};

/// Trains a refiner on reconstructed sequences `hat` from a frozen feedback
/// model against the ground truth `truth`.
RefinerHistory train_refiner(RefinerModel& model, const std::vector<AngleSequence>& hat,
                             const std::vector<AngleSequence>& truth, const RefinerTrainConfig& cfg);

}  // namespace csilab::refine
