#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "csilab/givens.hpp"
#include "csilab/types.hpp"

namespace csilab::baseline {

/// Bits per phi and psi angle of the standard compressed beamforming report.
struct UniformGrid {
    int b_phi = 5;
    int b_psi = 3;

    UniformGrid() = default;
    UniformGrid(int b_phi, int b_psi);
    void validate() const;

    double phi_step() const;  // pi / 2^(b_phi - 1)
    double psi_step() const;  // pi / 2^(b_psi + 1)
    double phi_level(std::uint32_t k) const { return k * phi_step() + phi_step() / 2; }
    double psi_level(std::uint32_t k) const { return k * psi_step() + psi_step() / 2; }
};

/// Quantizer indices, same layout as the AngleSet planes.
struct UniformIndices {
    Eigen::Matrix<std::uint32_t, Eigen::Dynamic, Eigen::Dynamic> phi;
    Eigen::Matrix<std::uint32_t, Eigen::Dynamic, Eigen::Dynamic> psi;

    bool operator==(const UniformIndices& o) const { return phi == o.phi && psi == o.psi; }
};

/// Nearest level per angle; phi distance is circular. Ties go to the lower index.
std::uint32_t quantize_phi(double phi, const UniformGrid& grid);
std::uint32_t quantize_psi(double psi, const UniformGrid& grid);

UniformIndices quantize_uniform(const AngleSet& angles, const UniformGrid& grid);
AngleSet dequantize_uniform(const UniformIndices& idx, const UniformGrid& grid);

struct CbrBits {
    std::vector<std::uint8_t> bytes;
    std::size_t bit_length = 0;
    int n_a = 0;
    int n_c = 0;
    UniformGrid grid;

    /// u32 bit length followed by the zero-padded bit buffer.
    std::vector<std::uint8_t> serialize() const;
    static CbrBits deserialize(std::span<const std::uint8_t> data, const givens::GivensConfig& cfg,
                               const UniformGrid& grid);
};

/// Per subcarrier: for each reduced column, its phi indices then its psi
/// indices; every field MSB-first.
CbrBits pack_cbr(const UniformIndices& idx, const UniformGrid& grid, const givens::GivensConfig& cfg);
UniformIndices unpack_cbr(const CbrBits& bits, const givens::GivensConfig& cfg);

/// N_c * N_a * (b_phi + b_psi).
std::size_t standard_overhead_bits(int n_a, int n_c, const UniformGrid& grid);

}  // namespace csilab::baseline
