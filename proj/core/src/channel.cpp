#include "csilab/channel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "csilab/bitstream.hpp"

namespace csilab::channel {

namespace {

constexpr char kMagic[4] = {'C', 'F', 'R', 'D'};
constexpr std::uint16_t kVersion = 1;

struct PathGeometry {
    double aod;
    double aoa;
    double delay;
    double power;
};

std::vector<PathGeometry> draw_geometry(const ChannelConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 env(cfg.environment_seed);
    std::uniform_real_distribution<double> aod_dist(-std::numbers::pi / 3, std::numbers::pi / 3);
    std::uniform_real_distribution<double> aoa_dist(-std::numbers::pi / 2, std::numbers::pi / 2);
    std::exponential_distribution<double> delay_dist(1.0);

    std::vector<PathGeometry> paths(cfg.paths);
    for (auto& p : paths) {
        p.aod = aod_dist(env);
        p.aoa = aoa_dist(env);
        p.delay = delay_dist(env) * cfg.delay_spread;
        p.power = std::exp(-p.delay / std::max(cfg.delay_spread, 1e-15));
    }
    const double total = std::accumulate(paths.begin(), paths.end(), 0.0,
                                         [](double acc, const PathGeometry& p) { return acc + p.power; });
    for (auto& p : paths) p.power /= total;

    std::seed_seq seq_seed{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x6a177e5u};
    std::mt19937_64 rng(seq_seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    for (auto& p : paths) {
        p.aod += cfg.angle_jitter * unit(rng);
        p.aoa += cfg.angle_jitter * unit(rng);
        p.delay = std::max(0.0, p.delay * (1.0 + cfg.delay_jitter * unit(rng)));
    }
    return paths;
}

CVector steering(int n, double angle) {
    CVector a(n);
    for (int i = 0; i < n; ++i) a(i) = std::polar(1.0, std::numbers::pi * i * std::sin(angle));
    return a;
}

double to_storage(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

void ChannelConfig::validate() const {
    if (n_t < 1 || n_r < 1) throw std::invalid_argument("ChannelConfig: antenna counts must be >= 1");
    if (n_s < 1 || n_s > std::min(n_t, n_r)) {
        throw std::invalid_argument("ChannelConfig: need 1 <= n_s <= min(n_t, n_r)");
    }
    if (n_c < 1) throw std::invalid_argument("ChannelConfig: n_c must be >= 1");
    if (t_len < 1) throw std::invalid_argument("ChannelConfig: t_len must be >= 1");
    if (paths < 1) throw std::invalid_argument("ChannelConfig: paths must be >= 1");
    if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("ChannelConfig: rho must lie in [0, 1]");
    if (total_subcarriers < n_c) throw std::invalid_argument("ChannelConfig: total_subcarriers < n_c");
    if (!(delay_spread >= 0.0) || !(subcarrier_spacing > 0.0)) {
        throw std::invalid_argument("ChannelConfig: invalid delay spread or subcarrier spacing");
    }
}

void to_json(nlohmann::json& j, const ChannelConfig& c) {
    j = nlohmann::json{{"n_t", c.n_t},
                       {"n_r", c.n_r},
                       {"n_s", c.n_s},
                       {"n_c", c.n_c},
                       {"t_len", c.t_len},
                       {"paths", c.paths},
                       {"rho", c.rho},
                       {"delay_spread", c.delay_spread},
                       {"subcarrier_spacing", c.subcarrier_spacing},
                       {"total_subcarriers", c.total_subcarriers},
                       {"environment_seed", c.environment_seed},
                       {"angle_jitter", c.angle_jitter},
                       {"delay_jitter", c.delay_jitter}};
}

void from_json(const nlohmann::json& j, ChannelConfig& c) {
    ChannelConfig d;
    c.n_t = j.value("n_t", d.n_t);
    c.n_r = j.value("n_r", d.n_r);
    c.n_s = j.value("n_s", d.n_s);
    c.n_c = j.value("n_c", d.n_c);
    c.t_len = j.value("t_len", d.t_len);
    c.paths = j.value("paths", d.paths);
    c.rho = j.value("rho", d.rho);
    c.delay_spread = j.value("delay_spread", d.delay_spread);
    c.subcarrier_spacing = j.value("subcarrier_spacing", d.subcarrier_spacing);
    c.total_subcarriers = j.value("total_subcarriers", d.total_subcarriers);
    c.environment_seed = j.value("environment_seed", d.environment_seed);
    c.angle_jitter = j.value("angle_jitter", d.angle_jitter);
    c.delay_jitter = j.value("delay_jitter", d.delay_jitter);
}

CfrSequence::CfrSequence(ChannelConfig cfg, std::uint64_t seed)
    : cfg_(cfg),
      seed_(seed),
      data_(static_cast<std::size_t>(cfg.t_len) * cfg.n_c * cfg.n_r * cfg.n_t) {}

CMatrix CfrSequence::matrix(int t, int k) const {
    CMatrix h(cfg_.n_r, cfg_.n_t);
    for (int r = 0; r < cfg_.n_r; ++r)
        for (int c = 0; c < cfg_.n_t; ++c) h(r, c) = at(t, k, r, c);
    return h;
}

bool CfrSequence::operator==(const CfrSequence& o) const {
    return cfg_.t_len == o.cfg_.t_len && cfg_.n_c == o.cfg_.n_c && cfg_.n_r == o.cfg_.n_r &&
           cfg_.n_t == o.cfg_.n_t && seed_ == o.seed_ && data_ == o.data_;
}

CfrSequence generate_cfr_sequence(const ChannelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const auto paths = draw_geometry(cfg, seed);

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> unit(0.0, std::sqrt(0.5));
    auto cn = [&] { return Complex(unit(rng), unit(rng)); };

    std::vector<Complex> gains(paths.size());
    for (auto& g : gains) g = cn();
    const double innovation = std::sqrt(std::max(0.0, 1.0 - cfg.rho * cfg.rho));

    // Per-path outer products a_r a_t^H, scaled by path power.
    std::vector<CMatrix> outer;
    outer.reserve(paths.size());
    for (const auto& p : paths) {
        outer.push_back(std::sqrt(p.power) * steering(cfg.n_r, p.aoa) * steering(cfg.n_t, p.aod).adjoint());
    }
    // Delay phase per (path, subcarrier).
    const int stride = cfg.stride();
    Eigen::MatrixXcd delay_phase(paths.size(), cfg.n_c);
    for (std::size_t p = 0; p < paths.size(); ++p) {
        for (int k = 0; k < cfg.n_c; ++k) {
            const double f = (k * stride - cfg.total_subcarriers / 2) * cfg.subcarrier_spacing;
            delay_phase(p, k) = std::polar(1.0, -2.0 * std::numbers::pi * f * paths[p].delay);
        }
    }

    CfrSequence seq(cfg, seed);
    for (int t = 0; t < cfg.t_len; ++t) {
        if (t > 0) {
            for (auto& g : gains) g = cfg.rho * g + innovation * cn();
        }
        for (int k = 0; k < cfg.n_c; ++k) {
            CMatrix h = CMatrix::Zero(cfg.n_r, cfg.n_t);
            for (std::size_t p = 0; p < paths.size(); ++p) h += gains[p] * delay_phase(p, k) * outer[p];
            for (int r = 0; r < cfg.n_r; ++r)
                for (int c = 0; c < cfg.n_t; ++c)
                    seq.at(t, k, r, c) = Complex(to_storage(h(r, c).real()), to_storage(h(r, c).imag()));
        }
    }
    return seq;
}

CMatrix beamforming_target(const CMatrix& h, int n_s) {
    if (n_s < 1 || n_s > std::min(h.rows(), h.cols())) {
        throw std::invalid_argument("beamforming_target: need 1 <= n_s <= min(n_r, n_t)");
    }
    if (!h.allFinite()) throw std::invalid_argument("beamforming_target: non-finite channel");

    Eigen::JacobiSVD<CMatrix> svd(h, Eigen::ComputeFullV);
    const CMatrix& v = svd.matrixV();
    const Eigen::VectorXd& sv = svd.singularValues();
    const int n_t = static_cast<int>(h.cols());

    auto first_nonzero = [&](int col) {
        for (int i = 0; i < n_t; ++i)
            if (std::abs(v(i, col)) > 1e-12) return i;
        return n_t;
    };
    auto sigma = [&](int col) { return col < sv.size() ? sv(col) : 0.0; };

    // Columns past rank(h) span the null space; within a near-degenerate
    // block the order is by first nonzero component, then index.
    std::vector<int> order(n_t);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (std::abs(sigma(a) - sigma(b)) >= 1e-9) return sigma(a) > sigma(b);
        return first_nonzero(a) < first_nonzero(b);
    });

    CMatrix out(n_t, n_s);
    for (int j = 0; j < n_s; ++j) {
        const int col = order[j];
        out.col(j) = v.col(col);
        const int lead = first_nonzero(col);
        if (lead < n_t) out.col(j) *= std::polar(1.0, -std::arg(v(lead, col)));
    }
    return out;
}

std::vector<CMatrix> snapshot_targets(const CfrSequence& seq, int t, int n_s) {
    std::vector<CMatrix> out;
    out.reserve(seq.n_c());
    for (int k = 0; k < seq.n_c(); ++k) out.push_back(beamforming_target(seq.matrix(t, k), n_s));
    return out;
}

std::vector<std::uint8_t> encode_dataset(const std::vector<CfrSequence>& seqs) {
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_u16(out, kVersion);
    put_u16(out, 0);
    put_u32(out, static_cast<std::uint32_t>(seqs.size()));
    for (const auto& s : seqs) {
        put_u32(out, static_cast<std::uint32_t>(s.t_len()));
        put_u32(out, static_cast<std::uint32_t>(s.n_c()));
        put_u32(out, static_cast<std::uint32_t>(s.n_r()));
        put_u32(out, static_cast<std::uint32_t>(s.n_t()));
        put_u64(out, s.seed());
        for (const auto& z : s.data()) {
            put_f32(out, static_cast<float>(z.real()));
            put_f32(out, static_cast<float>(z.imag()));
        }
    }
    return out;
}

std::vector<CfrSequence> decode_dataset(std::span<const std::uint8_t> bytes, const ChannelConfig* base) {
    ByteCursor cur(bytes);
    if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin())) throw FormatError("bad magic");
    cur.bytes(4);
    const std::uint16_t version = cur.u16();
    if (version != kVersion) throw FormatError("version mismatch");
    cur.u16();
    const std::uint32_t count = cur.u32();

    std::vector<CfrSequence> seqs;
    seqs.reserve(std::min<std::uint32_t>(count, 1u << 16));
    for (std::uint32_t n = 0; n < count; ++n) {
        ChannelConfig cfg = base ? *base : ChannelConfig{};
        cfg.t_len = static_cast<int>(cur.u32());
        cfg.n_c = static_cast<int>(cur.u32());
        cfg.n_r = static_cast<int>(cur.u32());
        cfg.n_t = static_cast<int>(cur.u32());
        const std::uint64_t seed = cur.u64();
        if (cfg.t_len < 1 || cfg.n_c < 1 || cfg.n_r < 1 || cfg.n_t < 1) throw FormatError("bad dimensions");
        cfg.n_s = std::clamp(cfg.n_s, 1, std::min(cfg.n_t, cfg.n_r));
        const std::size_t entries = static_cast<std::size_t>(cfg.t_len) * cfg.n_c * cfg.n_r * cfg.n_t;
        if (entries * 8 > cur.remaining()) throw FormatError("truncated payload");
        CfrSequence s(cfg, seed);
        for (auto& z : s.data()) {
            const float re = cur.f32();
            const float im = cur.f32();
            z = Complex(re, im);
        }
        seqs.push_back(std::move(s));
    }
    if (cur.remaining() != 0) throw FormatError("trailing bytes after last sequence");
    return seqs;
}

std::filesystem::path sidecar_path(const std::filesystem::path& dataset) {
    auto p = dataset;
    p.replace_extension(".json");
    return p;
}

void save_dataset(const std::filesystem::path& path, const std::vector<CfrSequence>& seqs) {
    const auto bytes = encode_dataset(seqs);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());

    if (!seqs.empty()) {
        std::ofstream side(sidecar_path(path));
        if (!side) throw std::runtime_error("cannot write sidecar for " + path.string());
        side << nlohmann::json(seqs.front().config()).dump(2) << '\n';
    }
}

std::vector<CfrSequence> load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    ChannelConfig base;
    const ChannelConfig* base_ptr = nullptr;
    if (std::ifstream side(sidecar_path(path)); side) {
        base = nlohmann::json::parse(side).get<ChannelConfig>();
        base_ptr = &base;
    }
    return decode_dataset(bytes, base_ptr);
}

}  // namespace csilab::channel
