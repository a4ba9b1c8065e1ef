#include "csilab/givens.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace csilab::givens {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double wrap_positive(double a) {
    double w = std::fmod(a, kTwoPi);
    if (w < 0) w += kTwoPi;
    if (w >= kTwoPi) w -= kTwoPi;
    return w;
}

double phase_of(const Complex& z) { return z == Complex(0.0, 0.0) ? 0.0 : std::arg(z); }

}  // namespace

int num_angle_pairs(int n_t, int n_s) {
    if (n_t < 1 || n_s < 1 || n_s > n_t) throw std::invalid_argument("num_angle_pairs: need 1 <= n_s <= n_t");
    int total = 0;
    for (int i = std::max(n_t - n_s, 1); i <= n_t - 1; ++i) total += i;
    return std::max(total, 1);
}

int num_reduced_columns(int n_t, int n_s) { return std::min(n_s, n_t - 1); }

GivensConfig::GivensConfig(int n_t_, int n_s_, int n_c_) : n_t(n_t_), n_s(n_s_), n_c(n_c_) {
    num_angle_pairs(n_t, n_s);
    if (n_c < 1) throw std::invalid_argument("GivensConfig: n_c must be >= 1");
}

int GivensConfig::column_offset(int col) const {
    int off = 0;
    for (int c = 0; c < col; ++c) off += column_length(c);
    return off;
}

Canonical canonicalize(const CMatrix& vbar) {
    const auto last = vbar.rows() - 1;
    Canonical out;
    out.phase_offsets.resize(vbar.cols());
    for (Eigen::Index j = 0; j < vbar.cols(); ++j) out.phase_offsets(j) = std::polar(1.0, phase_of(vbar(last, j)));
    out.v = vbar * out.phase_offsets.conjugate().asDiagonal();
    // Clear the roundoff imaginary residue so the last row is exactly real.
    for (Eigen::Index j = 0; j < vbar.cols(); ++j) out.v(last, j) = Complex(std::abs(vbar(last, j)), 0.0);
    return out;
}

CMatrix d_matrix(const Eigen::Ref<const Eigen::VectorXd>& phi, int col, int n_t) {
    if (col < 0 || col >= n_t - 1) throw std::out_of_range("d_matrix: column index out of range");
    if (phi.size() != n_t - 1 - col) throw std::invalid_argument("d_matrix: expected n_t - 1 - col phases");
    CMatrix d = CMatrix::Identity(n_t, n_t);
    for (int j = col; j < n_t - 1; ++j) d(j, j) = std::polar(1.0, phi(j - col));
    return d;
}

RMatrix g_matrix(double psi, int row, int col, int n_t) {
    if (col < 0 || row <= col || row >= n_t) throw std::out_of_range("g_matrix: need 0 <= col < row < n_t");
    RMatrix g = RMatrix::Identity(n_t, n_t);
    g(col, col) = std::cos(psi);
    g(col, row) = std::sin(psi);
    g(row, col) = -std::sin(psi);
    g(row, row) = std::cos(psi);
    return g;
}

void extract_column(const CMatrix& vbar, const GivensConfig& cfg, AngleSet& out, int k) {
    const int n_t = cfg.n_t;
    if (vbar.rows() != n_t || vbar.cols() != cfg.n_s) {
        throw std::invalid_argument("extract_angles: target is not n_t x n_s");
    }
    CMatrix v = canonicalize(vbar).v;
    const int reduced = num_reduced_columns(n_t, cfg.n_s);

    for (int col = 0; col < reduced; ++col) {
        const int off = cfg.column_offset(col);
        for (int j = col; j < n_t - 1; ++j) {
            const double phi = phase_of(v(j, col));
            out.phi(off + j - col, k) = wrap_positive(phi);
            v.row(j) *= std::polar(1.0, -phi);
        }
        for (int row = col + 1; row < n_t; ++row) {
            const double a = std::max(v(col, col).real(), 0.0);
            const double b = std::max(v(row, col).real(), 0.0);
            const double psi = std::clamp(std::atan2(b, a), 0.0, std::numbers::pi / 2);
            out.psi(off + row - col - 1, k) = psi;
            const double c = std::cos(psi);
            const double s = std::sin(psi);
            const Eigen::RowVectorXcd top = v.row(col);
            v.row(col) = c * top + s * v.row(row);
            v.row(row) = -s * top + c * v.row(row);
        }
    }

    const double residual = (v - CMatrix::Identity(n_t, cfg.n_s)).norm();
    if (!(residual < 1e-9 * std::max(1.0, vbar.norm()))) {
        throw std::invalid_argument("extract_angles: target is not orthonormal (residual " +
                                    std::to_string(residual) + ")");
    }
}

AngleSet extract_angles(const std::vector<CMatrix>& targets, const GivensConfig& cfg) {
    if (static_cast<int>(targets.size()) != cfg.n_c) {
        throw std::invalid_argument("extract_angles: expected one target per subcarrier");
    }
    AngleSet out(cfg.n_a(), cfg.n_c);
    for (int k = 0; k < cfg.n_c; ++k) extract_column(targets[k], cfg, out, k);
    return out;
}

CMatrix reconstruct_column(const AngleSet& angles, const GivensConfig& cfg, int k) {
    const int n_t = cfg.n_t;
    const int reduced = num_reduced_columns(n_t, cfg.n_s);
    // Apply the factors right-to-left to I_{n_t x n_s}.
    CMatrix x = CMatrix::Identity(n_t, cfg.n_s);
    for (int col = reduced - 1; col >= 0; --col) {
        const int off = cfg.column_offset(col);
        for (int row = n_t - 1; row > col; --row) {
            const double psi = angles.psi(off + row - col - 1, k);
            const double c = std::cos(psi);
            const double s = std::sin(psi);
            const Eigen::RowVectorXcd top = x.row(col);
            x.row(col) = c * top - s * x.row(row);
            x.row(row) = s * top + c * x.row(row);
        }
        for (int j = col; j < n_t - 1; ++j) x.row(j) *= std::polar(1.0, angles.phi(off + j - col, k));
    }
    return x;
}

std::vector<CMatrix> reconstruct_target(const AngleSet& angles, const GivensConfig& cfg) {
    if (angles.n_a() != cfg.n_a() || angles.n_c() != cfg.n_c) {
        throw std::invalid_argument("reconstruct_target: angle planes do not match the configuration");
    }
    std::vector<CMatrix> out;
    out.reserve(cfg.n_c);
    for (int k = 0; k < cfg.n_c; ++k) out.push_back(reconstruct_column(angles, cfg, k));
    return out;
}

}  // namespace csilab::givens
