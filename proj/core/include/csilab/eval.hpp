#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csilab/types.hpp"

namespace csilab::eval {

constexpr double kNmseFloorDb = -100.0;
constexpr double kEvmFloorDb = -200.0;

/// 10 log10(ratio), floored.
double to_db(double ratio, double floor_db);

// ------------------------------------------------------------ NMSE

/// sum_k |V_k - Vhat_k|^2 / sum_k |V_k|^2 over the subcarriers of one sample,
/// with V the canonical targets.
double nmse_ratio(const std::vector<CMatrix>& v, const std::vector<CMatrix>& v_hat);

/// Same quantity from the raw targets Vbar: each reconstruction is rotated
/// back by the phase offsets of its own subcarrier before comparison.
double nmse_ratio_raw(const std::vector<CMatrix>& vbar, const std::vector<CMatrix>& v_hat);

/// Averages per-sample ratios; dB is taken of the mean.
class NmseAccumulator {
   public:
    void add(double ratio);
    std::size_t count() const { return n_; }
    double mean() const;
    double db() const { return to_db(mean(), kNmseFloorDb); }

   private:
    double sum_ = 0;
    std::size_t n_ = 0;
};

// ------------------------------------------------------------ EVM

struct EvmOptions {
    int symbols = 64;               // QPSK vectors per subcarrier
    std::optional<double> snr_db;   // per-stream noise after detection
};

/// Error and signal energy summed over transmitted symbols.
struct EvmTally {
    double error = 0;
    double signal = 0;

    EvmTally& operator+=(const EvmTally& o) {
        error += o.error;
        signal += o.signal;
        return *this;
    }
    double ratio() const;
    double db() const { return to_db(ratio(), kEvmFloorDb); }
};

/// Precodes unit-power QPSK streams with the reconstructed targets, sends
/// them through the true channels (n_r x n_t each) and detects with
/// D~ Sigma^-1 U^H from the channel's top singular triplets.
EvmTally simulate_evm(const std::vector<CMatrix>& channels, const std::vector<CMatrix>& v_hat,
                      const EvmOptions& opt, std::mt19937_64& rng);

// ------------------------------------------------------------ throughput

/// EVM coefficient for a measured EVM; 0 above -10 dB, 20/3 from -35 dB down.
double gamma_from_evm(double evm_db);

struct PhyConfig {
    int n_fft = 256;
    int n_cp = 32;
    int n_sp = 234;
    double sample_rate = 20e6;
    int n_s = 2;

    void validate() const;
};

struct OverheadConfig {
    double t_ndpa = 40e-6;
    double t_ndp = 40e-6;
    double t_ack = 40e-6;
    double t_sifs = 16e-6;
    int packet_bytes = 2000;

    void validate() const;
};

void to_json(nlohmann::json& j, const PhyConfig& c);
void from_json(const nlohmann::json& j, PhyConfig& c);
void to_json(nlohmann::json& j, const OverheadConfig& c);
void from_json(const nlohmann::json& j, OverheadConfig& c);

/// Bits per second.
double gross_throughput(double gamma, const PhyConfig& phy);
/// CBR rate: one BPSK stream at code rate 1/2.
double feedback_rate(const PhyConfig& phy);
double net_throughput(double gross, const OverheadConfig& ovh, const PhyConfig& phy, double feedback_bits);

// ------------------------------------------------------------ report

struct ReportRow {
    std::string scheme;
    double feedback_bits = 0;
    double nmse_db = 0;
    double evm_db = 0;
    double gamma = 0;
    double gross_mbps = 0;
    double net_mbps = 0;
};

ReportRow make_row(std::string scheme, double feedback_bits, double nmse_db, double evm_db, const PhyConfig& phy,
                   const OverheadConfig& ovh);

void write_csv_header(std::ostream& os);
void write_csv_row(std::ostream& os, const ReportRow& row);
std::vector<ReportRow> read_csv(std::istream& is);

}  // namespace csilab::eval
