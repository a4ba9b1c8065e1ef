#include "csilab/eval.hpp"

#include <Eigen/Eigenvalues>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "csilab/givens.hpp"

namespace csilab::eval {

double to_db(double ratio, double floor_db) {
    if (ratio < 0 || std::isnan(ratio)) throw std::domain_error("to_db: ratio must be nonnegative");
    if (ratio == 0) return floor_db;
    return std::max(floor_db, 10.0 * std::log10(ratio));
}

namespace {

void check_shapes(const std::vector<CMatrix>& a, const std::vector<CMatrix>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("nmse: subcarrier count mismatch");
    for (std::size_t k = 0; k < a.size(); ++k)
        if (a[k].rows() != b[k].rows() || a[k].cols() != b[k].cols())
            throw std::invalid_argument("nmse: target shape mismatch");
}

}  // namespace

double nmse_ratio(const std::vector<CMatrix>& v, const std::vector<CMatrix>& v_hat) {
    check_shapes(v, v_hat);
    double num = 0, den = 0;
    for (std::size_t k = 0; k < v.size(); ++k) {
        num += (v[k] - v_hat[k]).squaredNorm();
        den += v[k].squaredNorm();
    }
    if (!(den > 0)) throw std::domain_error("nmse: reference has zero norm");
    return num / den;
}

double nmse_ratio_raw(const std::vector<CMatrix>& vbar, const std::vector<CMatrix>& v_hat) {
    check_shapes(vbar, v_hat);
    double num = 0, den = 0;
    for (std::size_t k = 0; k < vbar.size(); ++k) {
        const auto c = givens::canonicalize(vbar[k]);
        num += (vbar[k] - v_hat[k] * c.phase_offsets.asDiagonal()).squaredNorm();
        den += vbar[k].squaredNorm();
    }
    if (!(den > 0)) throw std::domain_error("nmse: reference has zero norm");
    return num / den;
}

void NmseAccumulator::add(double ratio) {
    if (!(ratio >= 0)) throw std::domain_error("nmse: ratio must be nonnegative");
    sum_ += ratio;
    ++n_;
}

double NmseAccumulator::mean() const {
    if (n_ == 0) throw std::logic_error("nmse: no samples");
    return sum_ / static_cast<double>(n_);
}

double EvmTally::ratio() const {
    if (!(signal > 0)) throw std::logic_error("evm: no symbols");
    return error / signal;
}

EvmTally simulate_evm(const std::vector<CMatrix>& channels, const std::vector<CMatrix>& v_hat, const EvmOptions& opt,
                      std::mt19937_64& rng) {
    if (channels.size() != v_hat.size()) throw std::invalid_argument("evm: subcarrier count mismatch");
    if (opt.symbols < 1) throw std::invalid_argument("evm: need at least one symbol");
    const double qpsk = 1.0 / std::sqrt(2.0);
    std::bernoulli_distribution bit(0.5);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double noise_std = opt.snr_db ? std::sqrt(std::pow(10.0, -*opt.snr_db / 10.0) / 2.0) : 0.0;

    EvmTally tally;
    for (std::size_t k = 0; k < channels.size(); ++k) {
        const CMatrix& h = channels[k];
        const int n_s = static_cast<int>(v_hat[k].cols());
        if (h.cols() != v_hat[k].rows() || n_s > h.rows() || n_s > h.cols())
            throw std::invalid_argument("evm: channel and target shapes disagree");
        Eigen::SelfAdjointEigenSolver<CMatrix> eig(CMatrix(h.adjoint() * h));
        // Eigenvalues ascend; the top n_s right singular vectors are the last columns.
        CMatrix vbar(h.cols(), n_s);
        Eigen::VectorXd sigma(n_s);
        for (int i = 0; i < n_s; ++i) {
            const Eigen::Index src = h.cols() - 1 - i;
            vbar.col(i) = eig.eigenvectors().col(src);
            sigma(i) = std::sqrt(std::max(0.0, eig.eigenvalues()(src)));
        }
        if (sigma.minCoeff() <= 1e-12 * std::max(1.0, sigma.maxCoeff())) throw std::domain_error("evm: singular channel");
        const CVector inv_sigma = sigma.cwiseInverse().cast<Complex>();
        const CMatrix u = h * vbar * inv_sigma.asDiagonal();
        const auto canon = givens::canonicalize(vbar);
        const CMatrix w = canon.phase_offsets.cwiseProduct(inv_sigma).asDiagonal() * u.adjoint();
        const CMatrix link = w * h * v_hat[k];

        CVector s(n_s);
        for (int n = 0; n < opt.symbols; ++n) {
            for (int i = 0; i < n_s; ++i) s(i) = Complex(bit(rng) ? qpsk : -qpsk, bit(rng) ? qpsk : -qpsk);
            CVector r = link * s;
            if (opt.snr_db)
                for (int i = 0; i < n_s; ++i) r(i) += Complex(noise_std * gauss(rng), noise_std * gauss(rng));
            tally.error += (s - r).squaredNorm();
            tally.signal += s.squaredNorm();
        }
    }
    return tally;
}

double gamma_from_evm(double evm_db) {
    if (std::isnan(evm_db)) throw std::domain_error("gamma_from_evm: NaN");
    // Upper edge (inclusive) of each interval, best first.
    static constexpr std::array<std::pair<double, double>, 9> table{{{-32, 20.0 / 3.0},
                                                                    {-30, 6.0},
                                                                    {-27, 5.0},
                                                                    {-25, 4.5},
                                                                    {-22, 4.0},
                                                                    {-19, 3.0},
                                                                    {-16, 2.0},
                                                                    {-13, 1.5},
                                                                    {-10, 1.0}}};
    for (const auto& [edge, gamma] : table)
        if (evm_db <= edge) return gamma;
    return 0.0;
}

void PhyConfig::validate() const {
    if (n_fft < 1 || n_cp < 0 || n_sp < 1 || n_sp > n_fft) throw std::invalid_argument("phy: need 1 <= N_sp <= N_fft");
    if (!(sample_rate > 0) || n_s < 1) throw std::invalid_argument("phy: bad sample rate or stream count");
}

void OverheadConfig::validate() const {
    if (t_ndpa < 0 || t_ndp < 0 || t_ack < 0 || t_sifs < 0) throw std::invalid_argument("overhead: durations must be nonnegative");
    if (packet_bytes < 1) throw std::invalid_argument("overhead: packet must be non-empty");
}

void to_json(nlohmann::json& j, const PhyConfig& c) {
    j = {{"n_fft", c.n_fft}, {"n_cp", c.n_cp}, {"n_sp", c.n_sp}, {"sample_rate", c.sample_rate}, {"n_s", c.n_s}};
}

void from_json(const nlohmann::json& j, PhyConfig& c) {
    PhyConfig d;
    c.n_fft = j.value("n_fft", d.n_fft);
    c.n_cp = j.value("n_cp", d.n_cp);
    c.n_sp = j.value("n_sp", d.n_sp);
    c.sample_rate = j.value("sample_rate", d.sample_rate);
    c.n_s = j.value("n_s", d.n_s);
}

void to_json(nlohmann::json& j, const OverheadConfig& c) {
    j = {{"t_ndpa", c.t_ndpa}, {"t_ndp", c.t_ndp}, {"t_ack", c.t_ack}, {"t_sifs", c.t_sifs},
         {"packet_bytes", c.packet_bytes}};
}

void from_json(const nlohmann::json& j, OverheadConfig& c) {
    OverheadConfig d;
    c.t_ndpa = j.value("t_ndpa", d.t_ndpa);
    c.t_ndp = j.value("t_ndp", d.t_ndp);
    c.t_ack = j.value("t_ack", d.t_ack);
    c.t_sifs = j.value("t_sifs", d.t_sifs);
    c.packet_bytes = j.value("packet_bytes", d.packet_bytes);
}

double gross_throughput(double gamma, const PhyConfig& phy) {
    if (gamma < 0) throw std::domain_error("gross_throughput: gamma must be nonnegative");
    return static_cast<double>(phy.n_sp) / (phy.n_fft + phy.n_cp) * phy.n_s * phy.sample_rate * gamma;
}

double feedback_rate(const PhyConfig& phy) {
    return static_cast<double>(phy.n_sp) / (phy.n_fft + phy.n_cp) * phy.sample_rate * 0.5;
}

double net_throughput(double gross, const OverheadConfig& ovh, const PhyConfig& phy, double feedback_bits) {
    if (gross < 0 || feedback_bits < 0) throw std::domain_error("net_throughput: negative input");
    if (gross == 0) return 0.0;
    const double t_data = ovh.packet_bytes * 8.0 / gross;
    const double t_cbr = feedback_bits / feedback_rate(phy);
    const double t_overhead = ovh.t_ndpa + ovh.t_ndp + ovh.t_ack + 3 * ovh.t_sifs + t_cbr;
    return t_data / (t_data + t_overhead) * gross;
}

ReportRow make_row(std::string scheme, double feedback_bits, double nmse_db, double evm_db, const PhyConfig& phy,
                   const OverheadConfig& ovh) {
    ReportRow r;
    r.scheme = std::move(scheme);
    r.feedback_bits = feedback_bits;
    r.nmse_db = nmse_db;
    r.evm_db = evm_db;
    r.gamma = gamma_from_evm(evm_db);
    const double gross = gross_throughput(r.gamma, phy);
    r.gross_mbps = gross / 1e6;
    r.net_mbps = net_throughput(gross, ovh, phy, feedback_bits) / 1e6;
    return r;
}

void write_csv_header(std::ostream& os) { os << "scheme,feedback_bits,nmse_db,evm_db,gamma,gross_mbps,net_mbps\n"; }

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + '"';
}

/// Splits one CSV line, honouring double-quoted fields.
std::vector<std::string> csv_cells(const std::string& line) {
    std::vector<std::string> cells(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cells.back() += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cells.back() += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            cells.emplace_back();
        } else {
            cells.back() += c;
        }
    }
    if (quoted) throw FormatError("report: unterminated quote");
    return cells;
}

}  // namespace

void write_csv_row(std::ostream& os, const ReportRow& r) {
    std::ostringstream line;
    line << std::setprecision(std::numeric_limits<double>::max_digits10) << csv_field(r.scheme) << ',' << r.feedback_bits << ',' << r.nmse_db << ',' << r.evm_db << ','
         << r.gamma << ',' << r.gross_mbps << ',' << r.net_mbps << '\n';
    os << line.str();
}

std::vector<ReportRow> read_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "scheme,feedback_bits,nmse_db,evm_db,gamma,gross_mbps,net_mbps")
        throw FormatError("report: unexpected CSV header");
    std::vector<ReportRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto cells = csv_cells(line);
        if (cells.size() != 7) throw FormatError("report: expected 7 columns");
        ReportRow r;
        r.scheme = cells[0];
        try {
            r.feedback_bits = std::stod(cells[1]);
            r.nmse_db = std::stod(cells[2]);
            r.evm_db = std::stod(cells[3]);
            r.gamma = std::stod(cells[4]);
            r.gross_mbps = std::stod(cells[5]);
            r.net_mbps = std::stod(cells[6]);
        } catch (const std::exception&) {
            throw FormatError("report: malformed number");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace csilab::eval
