#include "csilab/types.hpp"

namespace csilab {

Eigen::VectorXd AngleSet::flatten() const {
    const int na = n_a();
    const int nc = n_c();
    Eigen::VectorXd out(2 * na * nc);
    for (int a = 0; a < na; ++a) {
        for (int k = 0; k < nc; ++k) {
            out(a * nc + k) = phi(a, k);
            out(na * nc + a * nc + k) = psi(a, k);
        }
    }
    return out;
}

AngleSet AngleSet::unflatten(const Eigen::Ref<const Eigen::VectorXd>& flat, int n_a, int n_c) {
    if (flat.size() != 2 * n_a * n_c) {
        throw std::invalid_argument("AngleSet::unflatten: expected " + std::to_string(2 * n_a * n_c) +
                                    " values, got " + std::to_string(flat.size()));
    }
    AngleSet out(n_a, n_c);
    for (int a = 0; a < n_a; ++a) {
        for (int k = 0; k < n_c; ++k) {
            out.phi(a, k) = flat(a * n_c + k);
            out.psi(a, k) = flat(n_a * n_c + a * n_c + k);
        }
    }
    return out;
}

AngleSet AngleSet::operator+(const AngleSet& o) const {
    AngleSet out;
    out.phi = phi + o.phi;
    out.psi = psi + o.psi;
    return out;
}

AngleSet AngleSet::operator-(const AngleSet& o) const {
    AngleSet out;
    out.phi = phi - o.phi;
    out.psi = psi - o.psi;
    return out;
}

}  // namespace csilab
