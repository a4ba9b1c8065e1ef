#pragma once

#include <cstdint>
#include <span>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "csilab/types.hpp"

namespace csilab::channel {

/// Synthetic link configuration. Antenna, stream and subcarrier counts are
/// the link geometry; the remaining fields parameterize the clustered
/// multipath generator.
struct ChannelConfig {
    int n_t = 4;
    int n_r = 2;
    int n_s = 2;
    int n_c = 16;           // sampled subcarriers
    int t_len = 32;         // snapshots per sequence
    int paths = 3;
    double rho = 0.99;      // lag-1 correlation of every path gain
    double delay_spread = 50e-9;
    double subcarrier_spacing = 312.5e3;
    int total_subcarriers = 64;  // sampled with uniform stride total/n_c

    // Path geometry comes from environment_seed, so every sequence in a
    // dataset shares the same scatterers up to the per-sequence jitter.
    std::uint64_t environment_seed = 1;
    double angle_jitter = 0.05;  // rad, std of per-sequence AoD/AoA offsets
    double delay_jitter = 0.1;   // relative std of per-sequence delays

    void validate() const;
    int stride() const { return total_subcarriers / n_c; }
};

void to_json(nlohmann::json& j, const ChannelConfig& c);
void from_json(const nlohmann::json& j, ChannelConfig& c);

/// Complex CFR tensor [t][k][r][c] plus the configuration that produced it.
class CfrSequence {
   public:
    CfrSequence() = default;
    CfrSequence(ChannelConfig cfg, std::uint64_t seed);

    const ChannelConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }
    int t_len() const { return cfg_.t_len; }
    int n_c() const { return cfg_.n_c; }
    int n_r() const { return cfg_.n_r; }
    int n_t() const { return cfg_.n_t; }

    Complex& at(int t, int k, int r, int c) { return data_[index(t, k, r, c)]; }
    const Complex& at(int t, int k, int r, int c) const { return data_[index(t, k, r, c)]; }

    /// Channel matrix H_t[k], n_r x n_t.
    CMatrix matrix(int t, int k) const;

    const std::vector<Complex>& data() const { return data_; }
    std::vector<Complex>& data() { return data_; }

    bool operator==(const CfrSequence& o) const;

   private:
    std::size_t index(int t, int k, int r, int c) const {
        return ((static_cast<std::size_t>(t) * cfg_.n_c + k) * cfg_.n_r + r) * cfg_.n_t + c;
    }

    ChannelConfig cfg_;
    std::uint64_t seed_ = 0;
    std::vector<Complex> data_;
};

/// Gauss-Markov clustered multipath sequence. Entries are rounded to
/// float32 so the in-memory sequence equals what save_dataset writes.
CfrSequence generate_cfr_sequence(const ChannelConfig& cfg, std::uint64_t seed);

/// First n_s right singular vectors of h (n_t x n_s), singular values
/// descending, each column rotated so its first nonzero entry is real
/// positive.
CMatrix beamforming_target(const CMatrix& h, int n_s);

/// Beamforming targets for every subcarrier of snapshot t.
std::vector<CMatrix> snapshot_targets(const CfrSequence& seq, int t, int n_s);

void save_dataset(const std::filesystem::path& path, const std::vector<CfrSequence>& seqs);
std::vector<CfrSequence> load_dataset(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_dataset(const std::vector<CfrSequence>& seqs);
/// `base` supplies the non-geometry fields (usually from the sidecar).
std::vector<CfrSequence> decode_dataset(std::span<const std::uint8_t> bytes, const ChannelConfig* base = nullptr);

std::filesystem::path sidecar_path(const std::filesystem::path& dataset);

}  // namespace csilab::channel
