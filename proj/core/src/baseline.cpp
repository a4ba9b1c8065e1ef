#include "csilab/baseline.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "csilab/bitstream.hpp"

namespace csilab::baseline {

namespace {

constexpr double kPi = std::numbers::pi;

// Distances closer than this count as a tie (resolved to the lower index).
constexpr double kTieTolerance = 1e-12;

double circular_distance(double a, double b) {
    double d = std::fmod(std::abs(a - b), 2 * kPi);
    return std::min(d, 2 * kPi - d);
}

}  // namespace

UniformGrid::UniformGrid(int bp, int bs) : b_phi(bp), b_psi(bs) { validate(); }

void UniformGrid::validate() const {
    if (b_phi < 1 || b_phi > 16 || b_psi < 1 || b_psi > 16) {
        throw std::invalid_argument("UniformGrid: bit widths must be in [1, 16]");
    }
}

double UniformGrid::phi_step() const { return kPi / std::ldexp(1.0, b_phi - 1); }
double UniformGrid::psi_step() const { return kPi / std::ldexp(1.0, b_psi + 1); }

std::uint32_t quantize_phi(double phi, const UniformGrid& grid) {
    const std::int64_t levels = std::int64_t{1} << grid.b_phi;
    const double pos = phi / grid.phi_step() - 0.5;
    const auto lo = static_cast<std::int64_t>(std::floor(pos));
    std::uint32_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::int64_t cand : {lo, lo + 1}) {
        const auto k = static_cast<std::uint32_t>(((cand % levels) + levels) % levels);
        const double d = circular_distance(phi, grid.phi_level(k));
        if (d < best_d - kTieTolerance || (d <= best_d + kTieTolerance && k < best)) {
            best = k;
            best_d = d;
        }
    }
    return best;
}

std::uint32_t quantize_psi(double psi, const UniformGrid& grid) {
    const std::int64_t levels = std::int64_t{1} << grid.b_psi;
    const double pos = psi / grid.psi_step() - 0.5;
    const auto lo = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(pos)), 0, levels - 1);
    const auto hi = std::min<std::int64_t>(lo + 1, levels - 1);
    const double dlo = std::abs(psi - grid.psi_level(static_cast<std::uint32_t>(lo)));
    const double dhi = std::abs(psi - grid.psi_level(static_cast<std::uint32_t>(hi)));
    return static_cast<std::uint32_t>(dhi < dlo - kTieTolerance ? hi : lo);
}

UniformIndices quantize_uniform(const AngleSet& angles, const UniformGrid& grid) {
    grid.validate();
    UniformIndices idx;
    idx.phi.resize(angles.n_a(), angles.n_c());
    idx.psi.resize(angles.n_a(), angles.n_c());
    for (int a = 0; a < angles.n_a(); ++a) {
        for (int k = 0; k < angles.n_c(); ++k) {
            idx.phi(a, k) = quantize_phi(angles.phi(a, k), grid);
            idx.psi(a, k) = quantize_psi(angles.psi(a, k), grid);
        }
    }
    return idx;
}

AngleSet dequantize_uniform(const UniformIndices& idx, const UniformGrid& grid) {
    grid.validate();
    AngleSet out(static_cast<int>(idx.phi.rows()), static_cast<int>(idx.phi.cols()));
    for (Eigen::Index a = 0; a < idx.phi.rows(); ++a) {
        for (Eigen::Index k = 0; k < idx.phi.cols(); ++k) {
            out.phi(a, k) = grid.phi_level(idx.phi(a, k));
            out.psi(a, k) = grid.psi_level(idx.psi(a, k));
        }
    }
    return out;
}

std::size_t standard_overhead_bits(int n_a, int n_c, const UniformGrid& grid) {
    return static_cast<std::size_t>(n_c) * n_a * (grid.b_phi + grid.b_psi);
}

CbrBits pack_cbr(const UniformIndices& idx, const UniformGrid& grid, const givens::GivensConfig& cfg) {
    grid.validate();
    const int n_a = cfg.n_a();
    if (idx.phi.rows() != n_a || idx.phi.cols() != cfg.n_c || idx.psi.rows() != n_a || idx.psi.cols() != cfg.n_c) {
        throw std::invalid_argument("pack_cbr: index planes do not match the configuration");
    }
    const int reduced = givens::num_reduced_columns(cfg.n_t, cfg.n_s);
    BitWriter w;
    for (int k = 0; k < cfg.n_c; ++k) {
        if (reduced == 0) {
            w.write(idx.phi(0, k), grid.b_phi);
            w.write(idx.psi(0, k), grid.b_psi);
            continue;
        }
        for (int col = 0; col < reduced; ++col) {
            const int off = cfg.column_offset(col);
            for (int j = 0; j < cfg.column_length(col); ++j) w.write(idx.phi(off + j, k), grid.b_phi);
            for (int j = 0; j < cfg.column_length(col); ++j) w.write(idx.psi(off + j, k), grid.b_psi);
        }
    }
    CbrBits out;
    out.bit_length = w.bit_length();
    out.bytes = std::move(w).take();
    out.n_a = n_a;
    out.n_c = cfg.n_c;
    out.grid = grid;
    return out;
}

UniformIndices unpack_cbr(const CbrBits& bits, const givens::GivensConfig& cfg) {
    const int n_a = cfg.n_a();
    const auto& grid = bits.grid;
    if (bits.bit_length != standard_overhead_bits(n_a, cfg.n_c, grid)) {
        throw std::invalid_argument("unpack_cbr: bit length does not match the configuration");
    }
    UniformIndices idx;
    idx.phi.resize(n_a, cfg.n_c);
    idx.psi.resize(n_a, cfg.n_c);
    BitReader r(bits.bytes, bits.bit_length);
    const int reduced = givens::num_reduced_columns(cfg.n_t, cfg.n_s);
    for (int k = 0; k < cfg.n_c; ++k) {
        if (reduced == 0) {
            idx.phi(0, k) = r.read(grid.b_phi);
            idx.psi(0, k) = r.read(grid.b_psi);
            continue;
        }
        for (int col = 0; col < reduced; ++col) {
            const int off = cfg.column_offset(col);
            for (int j = 0; j < cfg.column_length(col); ++j) idx.phi(off + j, k) = r.read(grid.b_phi);
            for (int j = 0; j < cfg.column_length(col); ++j) idx.psi(off + j, k) = r.read(grid.b_psi);
        }
    }
    return idx;
}

std::vector<std::uint8_t> CbrBits::serialize() const {
    std::vector<std::uint8_t> out;
    put_u32(out, static_cast<std::uint32_t>(bit_length));
    out.insert(out.end(), bytes.begin(), bytes.end());
    return out;
}

CbrBits CbrBits::deserialize(std::span<const std::uint8_t> data, const givens::GivensConfig& cfg,
                             const UniformGrid& grid) {
    ByteCursor cur(data);
    CbrBits out;
    out.bit_length = cur.u32();
    const auto body = cur.bytes((out.bit_length + 7) / 8);
    if (cur.remaining() != 0) throw FormatError("CBR buffer has trailing bytes");
    out.bytes.assign(body.begin(), body.end());
    out.n_a = cfg.n_a();
    out.n_c = cfg.n_c;
    out.grid = grid;
    return out;
}

}  // namespace csilab::baseline
