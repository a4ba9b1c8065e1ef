#pragma once

#include <vector>

#include "csilab/types.hpp"

namespace csilab::givens {

/// Number of phi (and of psi) angles per subcarrier for an n_t x n_s target.
/// A single-antenna transmitter still reports one (zero) angle of each kind.
int num_angle_pairs(int n_t, int n_s);

/// Number of reduced columns, min(n_s, n_t - 1).
int num_reduced_columns(int n_t, int n_s);

struct GivensConfig {
    int n_t = 4;
    int n_s = 2;
    int n_c = 16;

    GivensConfig() = default;
    GivensConfig(int n_t, int n_s, int n_c);

    int n_a() const { return num_angle_pairs(n_t, n_s); }
    /// Row offset of column `col`'s angles inside an AngleSet plane.
    int column_offset(int col) const;
    /// Angles of each kind contributed by column `col` (n_t - 1 - col).
    int column_length(int col) const { return n_t - 1 - col; }
};

struct Canonical {
    CMatrix v;              // last row real, nonnegative
    CVector phase_offsets;  // diagonal of D~, unit modulus
};

/// Removes the last-row phase of every column: v = vbar * conj(diag(d)).
Canonical canonicalize(const CMatrix& vbar);

/// Diagonal phase matrix D_i for reduced column `col` (0-based). `phi` holds
/// the n_t - 1 - col phases of rows col..n_t-2; the trailing entry is 1.
CMatrix d_matrix(const Eigen::Ref<const Eigen::VectorXd>& phi, int col, int n_t);

/// Planar rotation G_li acting on rows/cols (col, row), 0-based, col < row.
RMatrix g_matrix(double psi, int row, int col, int n_t);

/// Extracts (phi, psi) for every subcarrier. Throws if a target is not
/// orthonormal (the reduced matrix does not collapse to I within 1e-9).
AngleSet extract_angles(const std::vector<CMatrix>& targets, const GivensConfig& cfg);

/// Givens product for every subcarrier; valid for any finite angles.
std::vector<CMatrix> reconstruct_target(const AngleSet& angles, const GivensConfig& cfg);

/// Single-subcarrier forms.
void extract_column(const CMatrix& vbar, const GivensConfig& cfg, AngleSet& out, int k);
CMatrix reconstruct_column(const AngleSet& angles, const GivensConfig& cfg, int k);

}  // namespace csilab::givens
