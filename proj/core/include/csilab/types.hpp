#pragma once

#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace csilab {

using Complex = std::complex<double>;
using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;
using RMatrix = Eigen::MatrixXd;

/// Raised when a persisted artifact (dataset, model, bit buffer) is malformed.
class FormatError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Angle parameters of one snapshot: a phase plane and a rotation plane,
/// each n_a x n_c, in radians. Row a of each plane follows the standard
/// feedback ordering (column by column of the beamforming matrix).
struct AngleSet {
    RMatrix phi;
    RMatrix psi;

    AngleSet() = default;
    AngleSet(int n_a, int n_c) : phi(RMatrix::Zero(n_a, n_c)), psi(RMatrix::Zero(n_a, n_c)) {}

    int n_a() const { return static_cast<int>(phi.rows()); }
    int n_c() const { return static_cast<int>(phi.cols()); }
    int size() const { return 2 * n_a() * n_c(); }

    /// Flattened layout [plane][angle][subcarrier], plane 0 = phi.
    Eigen::VectorXd flatten() const;
    static AngleSet unflatten(const Eigen::Ref<const Eigen::VectorXd>& flat, int n_a, int n_c);

    AngleSet operator+(const AngleSet& o) const;
    AngleSet operator-(const AngleSet& o) const;
    bool operator==(const AngleSet& o) const { return phi == o.phi && psi == o.psi; }
};

/// A time-ordered run of angle sets for one link.
using AngleSequence = std::vector<AngleSet>;

}  // namespace csilab
