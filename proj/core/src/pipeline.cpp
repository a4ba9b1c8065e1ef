#include "csilab/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "csilab/bitstream.hpp"

namespace csilab::pipeline {

namespace {

constexpr double kPi = std::numbers::pi;

using vq::Pair;

ad::Var in(ad::Graph& g, const Matrix& m) { return g.input(ad::Tensor::from_matrix(m)); }

Matrix take_rows(const Matrix& m, const std::vector<int>& rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
    return out;
}

void put_rows(Matrix& dst, const std::vector<int>& rows, const Matrix& src) {
    for (std::size_t i = 0; i < rows.size(); ++i) dst.row(rows[i]) = src.row(static_cast<Eigen::Index>(i));
}

void check_finite(double loss) {
    if (!std::isfinite(loss)) throw std::runtime_error("training diverged: non-finite loss");
}

ModeDecision select_mode_row(const Matrix& wrapped, Eigen::Index r, const SelectionConfig& cfg) {
    ModeDecision d;
    for (Eigen::Index c = 0; c < wrapped.cols(); ++c)
        if (std::abs(wrapped(r, c)) > cfg.mu_th) ++d.n_d;
    d.indicator = d.n_d < cfg.n_th;
    return d;
}

}  // namespace

// ------------------------------------------------------------ schemes

std::string to_string(Scheme s) {
    switch (s) {
        case Scheme::Standard: return "standard";
        case Scheme::Initial: return "initial";
        case Scheme::AdNaive: return "ad_naive";
        case Scheme::AdParallel: return "ad_parallel";
        case Scheme::AdUnified: return "ad_unified";
    }
    return "unknown";
}

Scheme scheme_from_string(std::string_view name) {
    for (Scheme s : {Scheme::Standard, Scheme::Initial, Scheme::AdNaive, Scheme::AdParallel, Scheme::AdUnified})
        if (to_string(s) == name) return s;
    throw std::invalid_argument("unknown scheme '" + std::string(name) + "'");
}

bool is_angle_difference(Scheme s) {
    return s == Scheme::AdNaive || s == Scheme::AdParallel || s == Scheme::AdUnified;
}

// ------------------------------------------------------------ angles

double wrap_angle(double x) {
    if (!(std::abs(x) < 2 * kPi)) throw std::domain_error("wrap_angle: |x| must be below 2 pi");
    if (x >= -kPi && x < kPi) return x;
    return x > 0 ? x - 2 * kPi : x + 2 * kPi;
}

AngleSet wrap_diff(const AngleSet& diff) {
    AngleSet out = diff;
    out.phi = out.phi.unaryExpr([](double v) { return wrap_angle(v); });
    out.psi = out.psi.unaryExpr([](double v) { return wrap_angle(v); });
    return out;
}

Matrix wrap_diff(const Matrix& diff) { return diff.unaryExpr([](double v) { return wrap_angle(v); }); }

double angular_distortion(const AngleSet& a, const AngleSet& b) {
    auto plane = [](const RMatrix& x, const RMatrix& y) {
        return ((x.array().cos() - y.array().cos()).square() + (x.array().sin() - y.array().sin()).square()).sum();
    };
    if (a.n_a() != b.n_a() || a.n_c() != b.n_c()) throw std::invalid_argument("angular_distortion: shape mismatch");
    return plane(a.phi, b.phi) + plane(a.psi, b.psi);
}

Matrix to_row(const AngleSet& a) {
    const Eigen::VectorXd f = a.flatten();
    return Matrix(f.transpose());
}

AngleSet from_row(const Matrix& row, int n_a, int n_c, Eigen::Index r) {
    const Eigen::VectorXd f = row.row(r).transpose();
    return AngleSet::unflatten(f, n_a, n_c);
}

AngleSequence sequence_angles(const channel::CfrSequence& seq, int n_s) {
    givens::GivensConfig cfg(seq.n_t(), n_s, seq.n_c());
    AngleSequence out;
    out.reserve(static_cast<std::size_t>(seq.t_len()));
    for (int t = 0; t < seq.t_len(); ++t) out.push_back(givens::extract_angles(channel::snapshot_targets(seq, t, n_s), cfg));
    return out;
}

// ------------------------------------------------------------ mode selection

void SelectionConfig::validate(int n_a, int n_c) const {
    if (!(mu_th > 0 && mu_th < kPi)) throw std::invalid_argument("selection: mu_th must lie in (0, pi)");
    if (n_th < 0 || n_th >= 2 * n_a * n_c) throw std::invalid_argument("selection: n_th must lie in [0, 2 N_a N_c)");
}

void to_json(nlohmann::json& j, const SelectionConfig& s) { j = {{"mu_th", s.mu_th}, {"n_th", s.n_th}}; }

void from_json(const nlohmann::json& j, SelectionConfig& s) {
    SelectionConfig d;
    s.mu_th = j.value("mu_th", d.mu_th);
    s.n_th = j.value("n_th", d.n_th);
}

ModeDecision select_mode(const AngleSet& wrapped_diff, const SelectionConfig& cfg) {
    ModeDecision d;
    d.n_d = static_cast<int>((wrapped_diff.phi.array().abs() > cfg.mu_th).count() +
                             (wrapped_diff.psi.array().abs() > cfg.mu_th).count());
    d.indicator = d.n_d < cfg.n_th;
    return d;
}

// ------------------------------------------------------------ messages

bool FeedbackMessage::indicator() const {
    if (bit_length == 0) throw FormatError("empty feedback message");
    return (bits[0] & 0x80) != 0;
}

std::vector<int> FeedbackMessage::fields(std::size_t offset, std::size_t count, int width) const {
    BitReader r(bits, bit_length);
    for (std::size_t i = 0; i < offset; ++i) r.read_bit();
    std::vector<int> out(count);
    for (auto& v : out) v = static_cast<int>(r.read(width));
    return out;
}

std::vector<std::uint8_t> FeedbackMessage::serialize() const {
    std::vector<std::uint8_t> out;
    put_u32(out, static_cast<std::uint32_t>(bit_length));
    out.insert(out.end(), bits.begin(), bits.end());
    return out;
}

FeedbackMessage FeedbackMessage::deserialize(std::span<const std::uint8_t> data) {
    ByteCursor cur(data);
    FeedbackMessage m;
    m.bit_length = cur.u32();
    const auto body = cur.bytes((m.bit_length + 7) / 8);
    if (cur.remaining() != 0) throw FormatError("trailing bytes");
    m.bits.assign(body.begin(), body.end());
    return m;
}

FeedbackMessage make_message(std::optional<bool> indicator, std::initializer_list<IndexField> fields) {
    BitWriter w;
    if (indicator) w.write_bit(*indicator);
    for (const auto& f : fields)
        for (int idx : f.indices) {
            if (idx < 0 || idx >= (1 << f.width)) throw std::out_of_range("feedback index exceeds its field width");
            w.write(static_cast<std::uint32_t>(idx), f.width);
        }
    FeedbackMessage m;
    m.bit_length = w.bit_length();
    m.bits = std::move(w).take();
    return m;
}

std::size_t message_bits(Scheme scheme, const vq::CodecGeometry& geo) {
    const auto payload = static_cast<std::size_t>(geo.payload_bits());
    switch (scheme) {
        case Scheme::Initial: return payload;
        case Scheme::AdNaive:
        case Scheme::AdParallel:
        case Scheme::AdUnified: return payload + 1;
        case Scheme::Standard: break;
    }
    throw std::invalid_argument("message_bits: standard feedback size depends on the grid");
}

// ------------------------------------------------------------ protocol

namespace {

StaOutput sta_step_sequential(StaState& s, const AngleSet& phi, const CodecModel& m, const SelectionConfig& sel,
                              bool residual) {
    const auto& geo = m.geometry();
    StaOutput out;
    AngleSet diff;
    if (s.initialized) {
        diff = wrap_diff(phi - s.prev_phi);
        out.mode = select_mode(diff, sel);
    }
    Matrix z;
    if (out.mode.indicator) {
        z = m.encode(Pair::TypeII, to_row(diff));
        if (residual) z += s.residual();
    } else {
        z = m.encode(Pair::TypeI, to_row(phi));
    }
    const auto q = vq::vq_quantize(m.codebook(), z);
    out.message = make_message(out.mode.indicator, {{q.indices, geo.bits}});
    s.prev_phi = phi;
    s.prev_z = std::move(z);
    s.prev_zq = q.zq;
    s.prev_mode = out.mode.indicator;
    s.initialized = true;
    return out;
}

AngleSet ap_step_sequential(ApState& s, const FeedbackMessage& msg, const CodecModel& m) {
    const auto& geo = m.geometry();
    if (msg.bit_length != static_cast<std::size_t>(geo.payload_bits()) + 1) throw FormatError("feedback length mismatch");
    const bool mode = msg.indicator();
    if (mode && !s.initialized) throw std::logic_error("angle-difference feedback without history");
    const auto idx = msg.fields(1, static_cast<std::size_t>(geo.groups), geo.bits);
    Matrix zq = vq::lookup(m.codebook(), idx, geo.groups);
    AngleSet hat = mode ? from_row(m.decode(Pair::TypeII, zq), geo.n_a, geo.n_c) + s.prev_hat
                        : from_row(m.decode(Pair::TypeI, zq), geo.n_a, geo.n_c);
    s.prev_zq = std::move(zq);
    s.prev_hat = hat;
    s.prev_mode = mode;
    s.initialized = true;
    return hat;
}

}  // namespace

StaOutput sta_step_unified(StaState& s, const AngleSet& phi, const CodecModel& m, const SelectionConfig& sel) {
    if (!m.has_type2()) throw std::invalid_argument("unified feedback needs the Type-II pair");
    return sta_step_sequential(s, phi, m, sel, true);
}

StaOutput sta_step_naive(StaState& s, const AngleSet& phi, const CodecModel& m, const SelectionConfig& sel) {
    if (!m.has_type2()) throw std::invalid_argument("angle-difference feedback needs the Type-II pair");
    return sta_step_sequential(s, phi, m, sel, false);
}

AngleSet ap_step_unified(ApState& s, const FeedbackMessage& msg, const CodecModel& m) {
    return ap_step_sequential(s, msg, m);
}

AngleSet ap_step_naive(ApState& s, const FeedbackMessage& msg, const CodecModel& m) {
    return ap_step_sequential(s, msg, m);
}

StaOutput sta_step_parallel(StaState& s, const AngleSet& phi, const CodecModel& m, const SelectionConfig& sel) {
    if (!m.has_parallel() || !m.has_type2()) throw std::invalid_argument("parallel feedback needs its codebooks");
    const auto& geo = m.geometry();
    StaOutput out;
    AngleSet diff;
    if (s.initialized) {
        diff = wrap_diff(phi - s.prev_phi);
        out.mode = select_mode(diff, sel);
    }
    Matrix z;
    vq::Quantized q1;
    if (out.mode.indicator) {
        z = m.encode(Pair::TypeII, to_row(diff));
        q1 = vq::vq_quantize(m.type2_stage1(), z);
        const auto q2 = vq::vq_quantize(m.residual(), s.residual());
        out.message = make_message(true, {{q1.indices, m.type2_stage1().bits()}, {q2.indices, m.residual().bits()}});
    } else {
        z = m.encode(Pair::TypeI, to_row(phi));
        q1 = vq::vq_quantize(m.codebook(), z);
        out.message = make_message(false, {{q1.indices, geo.bits}});
    }
    s.prev_phi = phi;
    s.prev_z = std::move(z);
    s.prev_zq = std::move(q1.zq);
    s.prev_mode = out.mode.indicator;
    s.initialized = true;
    return out;
}

AngleSet ap_step_parallel(ApState& s, const FeedbackMessage& msg, const CodecModel& m) {
    const auto& geo = m.geometry();
    if (msg.bit_length != static_cast<std::size_t>(geo.payload_bits()) + 1) throw FormatError("feedback length mismatch");
    const bool mode = msg.indicator();
    const auto n = static_cast<std::size_t>(geo.groups);
    AngleSet hat;
    if (!mode) {
        const auto idx = msg.fields(1, n, geo.bits);
        Matrix zq = vq::lookup(m.codebook(), idx, geo.groups);
        hat = from_row(m.decode(Pair::TypeI, zq), geo.n_a, geo.n_c);
        s.prev_zq = std::move(zq);
    } else {
        if (!s.initialized) throw std::logic_error("angle-difference feedback without history");
        const int b1 = m.type2_stage1().bits();
        const auto idx1 = msg.fields(1, n, b1);
        const auto idx2 = msg.fields(1 + n * b1, n, m.residual().bits());
        Matrix zq1 = vq::lookup(m.type2_stage1(), idx1, geo.groups);
        const Matrix zq2 = vq::lookup(m.residual(), idx2, geo.groups);
        const Matrix prev = s.prev_zq + zq2;
        AngleSet refined = s.prev_mode ? from_row(m.decode(Pair::TypeII, prev), geo.n_a, geo.n_c) + s.prev_refined
                                       : from_row(m.decode(Pair::TypeI, prev), geo.n_a, geo.n_c);
        hat = from_row(m.decode(Pair::TypeII, zq1), geo.n_a, geo.n_c) + refined;
        s.prev_refined = std::move(refined);
        s.prev_zq = std::move(zq1);
    }
    s.prev_hat = hat;
    s.prev_mode = mode;
    s.initialized = true;
    return hat;
}

StaOutput sta_step(Scheme scheme, StaState& state, const AngleSet& phi, const CodecModel& model,
                   const SelectionConfig& sel) {
    switch (scheme) {
        case Scheme::AdUnified: return sta_step_unified(state, phi, model, sel);
        case Scheme::AdNaive: return sta_step_naive(state, phi, model, sel);
        case Scheme::AdParallel: return sta_step_parallel(state, phi, model, sel);
        case Scheme::Initial: {
            const Matrix z = model.encode(Pair::TypeI, to_row(phi));
            const auto q = vq::vq_quantize(model.codebook(), z);
            StaOutput out;
            out.message = make_message(std::nullopt, {{q.indices, model.geometry().bits}});
            state.prev_phi = phi;
            state.prev_z = z;
            state.prev_zq = q.zq;
            state.initialized = true;
            return out;
        }
        case Scheme::Standard: break;
    }
    throw std::invalid_argument("sta_step: standard feedback has no learned codec");
}

AngleSet ap_step(Scheme scheme, ApState& state, const FeedbackMessage& msg, const CodecModel& model) {
    switch (scheme) {
        case Scheme::AdUnified: return ap_step_unified(state, msg, model);
        case Scheme::AdNaive: return ap_step_naive(state, msg, model);
        case Scheme::AdParallel: return ap_step_parallel(state, msg, model);
        case Scheme::Initial: {
            const auto& geo = model.geometry();
            if (msg.bit_length != static_cast<std::size_t>(geo.payload_bits())) throw FormatError("feedback length mismatch");
            const auto idx = msg.fields(0, static_cast<std::size_t>(geo.groups), geo.bits);
            state.prev_zq = vq::lookup(model.codebook(), idx, geo.groups);
            state.prev_hat = from_row(model.decode(Pair::TypeI, state.prev_zq), geo.n_a, geo.n_c);
            state.initialized = true;
            return state.prev_hat;
        }
        case Scheme::Standard: break;
    }
    throw std::invalid_argument("ap_step: standard feedback has no learned codec");
}

SessionTrace run_session(Scheme scheme, const AngleSequence& phi, const CodecModel& model,
                         const SelectionConfig& sel) {
    SessionTrace tr;
    StaState sta;
    ApState ap;
    for (const auto& p : phi) {
        auto out = sta_step(scheme, sta, p, model, sel);
        const auto wire = out.message.serialize();
        tr.hat.push_back(ap_step(scheme, ap, FeedbackMessage::deserialize(wire), model));
        tr.sta_modes.push_back(out.mode.indicator);
        tr.ap_modes.push_back(is_angle_difference(scheme) ? ap.prev_mode : false);
        tr.sta_zq.push_back(sta.prev_zq);
        tr.ap_zq.push_back(ap.prev_zq);
        tr.messages.push_back(std::move(out.message));
    }
    return tr;
}

AngleSequence run_standard(const AngleSequence& phi, const baseline::UniformGrid& grid,
                           const givens::GivensConfig& cfg, std::size_t* bits_per_message) {
    AngleSequence out;
    out.reserve(phi.size());
    for (const auto& p : phi) {
        const auto bits = baseline::pack_cbr(baseline::quantize_uniform(p, grid), grid, cfg);
        if (bits_per_message) *bits_per_message = bits.bit_length;
        const auto wire = bits.serialize();
        const auto received = baseline::CbrBits::deserialize(wire, cfg, grid);
        out.push_back(baseline::dequantize_uniform(baseline::unpack_cbr(received, cfg), grid));
    }
    return out;
}

// ------------------------------------------------------------ training configuration

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"lr", c.lr},
         {"epochs", c.epochs},
         {"batch", c.batch},
         {"beta", c.beta},
         {"warmup_epochs", c.warmup_epochs},
         {"kmeans_iters", c.kmeans_iters},
         {"type2_epochs", c.type2_epochs},
         {"type2_lr", c.type2_lr},
         {"residual_epochs", c.residual_epochs},
         {"distortion", c.distortion == Distortion::Mse ? "mse" : "angular"},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.lr = j.value("lr", d.lr);
    c.epochs = j.value("epochs", d.epochs);
    c.batch = j.value("batch", d.batch);
    c.beta = j.value("beta", d.beta);
    c.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
    c.kmeans_iters = j.value("kmeans_iters", d.kmeans_iters);
    c.type2_epochs = j.value("type2_epochs", d.type2_epochs);
    c.type2_lr = j.value("type2_lr", d.type2_lr);
    c.residual_epochs = j.value("residual_epochs", d.residual_epochs);
    const std::string dist = j.value("distortion", std::string("mse"));
    if (dist == "mse") c.distortion = Distortion::Mse;
    else if (dist == "angular") c.distortion = Distortion::Angular;
    else throw std::invalid_argument("train.distortion must be 'mse' or 'angular'");
    c.seed = j.value("seed", d.seed);
}

// ------------------------------------------------------------ losses

namespace {

ad::Var distortion(ad::Graph& g, ad::Var y, ad::Var target, Distortion d) {
    return d == Distortion::Mse ? g.squared_error(y, target) : g.angular_distortion(y, target);
}

ad::Var vq_total(ad::Graph& g, ad::Var rec, const vq::VqTerms& t, double beta) {
    return g.add(rec, g.add(t.codebook_loss, g.scale(t.commitment_loss, beta)));
}

ad::Var accumulate_loss(ad::Graph& g, ad::Var total, ad::Var part, double weight) {
    ad::Var w = g.scale(part, weight);
    return total.valid() ? g.add(total, w) : w;
}

std::vector<int> rows_where(const std::vector<char>& mode, char want, const std::vector<char>* prev = nullptr,
                            char prev_want = 0) {
    std::vector<int> out;
    for (std::size_t i = 0; i < mode.size(); ++i)
        if (mode[i] == want && (!prev || (*prev)[i] == prev_want)) out.push_back(static_cast<int>(i));
    return out;
}

struct GroupOut {
    Matrix z, zq, hat;
};

// Type-I rows of an angle-difference batch: plain initial feedback.
ad::Var initial_group(ad::Graph& g, const CodecModel& m, const AdStepBatch& b, const std::vector<int>& rows,
                      double beta, AdStepResult& r) {
    const Matrix x = take_rows(b.input, rows);
    ad::Var z = m.encoder(Pair::TypeI).forward(g, in(g, x));
    auto t = vq::vq_block(g, z, m.codebook());
    ad::Var y = m.decoder(Pair::TypeI).forward(g, t.decoder_input);
    ad::Var loss = vq_total(g, g.angular_distortion(y, in(g, take_rows(b.phi, rows))), t, beta);
    put_rows(r.z, rows, g.value(z).values());
    put_rows(r.zq, rows, g.value(t.zq).values());
    put_rows(r.hat, rows, g.value(y).values());
    r.usage_main.insert(r.usage_main.end(), t.indices.begin(), t.indices.end());
    return loss;
}

AdStepResult make_result(const CodecModel& m, const AdStepBatch& b) {
    AdStepResult r;
    const auto n = b.phi.rows();
    r.z = Matrix::Zero(n, m.geometry().latent_size());
    r.zq = r.z;
    r.hat = Matrix::Zero(n, b.phi.cols());
    r.refined = Matrix::Zero(n, b.phi.cols());
    return r;
}

}  // namespace

ad::Var initial_loss(ad::Graph& g, const CodecModel& m, const Matrix& x, double beta, Distortion d) {
    ad::Var xi = in(g, x);
    ad::Var z = m.encoder(Pair::TypeI).forward(g, xi);
    auto t = vq::vq_block(g, z, m.codebook());
    ad::Var y = m.decoder(Pair::TypeI).forward(g, t.decoder_input);
    return vq_total(g, distortion(g, y, xi, d), t, beta);
}

AdStepResult unified_step_loss(ad::Graph& g, const CodecModel& m, const AdStepBatch& b, double beta, bool naive) {
    AdStepResult r = make_result(m, b);
    const double n = static_cast<double>(b.phi.rows());
    ad::Var total;
    const auto rows0 = rows_where(b.mode, 0);
    const auto rows1 = rows_where(b.mode, 1);
    if (!rows0.empty()) total = accumulate_loss(g, total, initial_group(g, m, b, rows0, beta, r), rows0.size() / n);
    if (!rows1.empty()) {
        ad::Var e = m.encoder(Pair::TypeII).forward(g, in(g, take_rows(b.input, rows1)));
        ad::Var z = naive ? e : g.add(e, in(g, take_rows(b.prev_residual, rows1)));
        auto t = vq::vq_block(g, z, m.codebook());
        ad::Var y = g.add(m.decoder(Pair::TypeII).forward(g, t.decoder_input), in(g, take_rows(b.prev_hat, rows1)));
        ad::Var loss = vq_total(g, g.angular_distortion(y, in(g, take_rows(b.phi, rows1))), t, beta);
        total = accumulate_loss(g, total, loss, rows1.size() / n);
        put_rows(r.z, rows1, g.value(z).values());
        put_rows(r.zq, rows1, g.value(t.zq).values());
        put_rows(r.hat, rows1, g.value(y).values());
        r.usage_main.insert(r.usage_main.end(), t.indices.begin(), t.indices.end());
    }
    r.loss = total;
    return r;
}

AdStepResult parallel_step_loss(ad::Graph& g, const CodecModel& m, const AdStepBatch& b, double beta) {
    AdStepResult r = make_result(m, b);
    const double n = static_cast<double>(b.phi.rows());
    ad::Var total;
    const auto rows0 = rows_where(b.mode, 0);
    if (!rows0.empty()) total = accumulate_loss(g, total, initial_group(g, m, b, rows0, beta, r), rows0.size() / n);
    for (char prev : {char(0), char(1)}) {
        const auto rows = rows_where(b.mode, 1, &b.prev_mode, prev);
        if (rows.empty()) continue;
        const Pair prev_pair = prev ? Pair::TypeII : Pair::TypeI;
        // Stage 1 on the current difference.
        ad::Var z1 = m.encoder(Pair::TypeII).forward(g, in(g, take_rows(b.input, rows)));
        auto t1 = vq::vq_block(g, z1, m.type2_stage1());
        // Stage 2 on the previous step's residual, re-encoded so it carries gradient.
        const Matrix prev_zq = take_rows(b.prev_zq, rows);
        ad::Var zp = m.encoder(prev_pair).forward(g, in(g, take_rows(b.prev_input, rows)));
        ad::Var zr = g.sub(zp, in(g, prev_zq));
        auto t2 = vq::vq_block(g, zr, m.residual());
        ad::Var refined = m.decoder(prev_pair).forward(g, g.add(in(g, prev_zq), t2.decoder_input));
        if (prev) refined = g.add(refined, in(g, take_rows(b.prev_refined, rows)));
        ad::Var y = g.add(m.decoder(Pair::TypeII).forward(g, t1.decoder_input), refined);

        ad::Var loss = g.add(g.angular_distortion(y, in(g, take_rows(b.phi, rows))),
                             g.angular_distortion(refined, in(g, take_rows(b.prev_phi, rows))));
        loss = vq_total(g, vq_total(g, loss, t1, beta), t2, beta);
        total = accumulate_loss(g, total, loss, rows.size() / n);

        put_rows(r.z, rows, g.value(z1).values());
        put_rows(r.zq, rows, g.value(t1.zq).values());
        put_rows(r.hat, rows, g.value(y).values());
        put_rows(r.refined, rows, g.value(refined).values());
        r.usage_type2.insert(r.usage_type2.end(), t1.indices.begin(), t1.indices.end());
        r.usage_residual.insert(r.usage_residual.end(), t2.indices.begin(), t2.indices.end());
    }
    r.loss = total;
    return r;
}

// ------------------------------------------------------------ training drivers

namespace {

/// Latent sub-vectors kept for codeword re-seeding.
class LatentPool {
   public:
    LatentPool(int dim, std::size_t capacity) : rows_(static_cast<Eigen::Index>(capacity), dim) {}

    void add(const Matrix& z, std::mt19937_64& rng) {
        const Matrix subs = vq::split_subvectors(z, static_cast<int>(rows_.cols()));
        for (Eigen::Index r = 0; r < subs.rows(); ++r) {
            if (filled_ < rows_.rows()) {
                rows_.row(filled_++) = subs.row(r);
            } else {
                std::uniform_int_distribution<long long> pick(0, seen_);
                const auto slot = pick(rng);
                if (slot < rows_.rows()) rows_.row(static_cast<Eigen::Index>(slot)) = subs.row(r);
            }
            ++seen_;
        }
    }
    bool empty() const { return filled_ == 0; }
    Matrix samples() const { return rows_.topRows(filled_); }
    void clear() {
        filled_ = 0;
        seen_ = 0;
    }

   private:
    Matrix rows_;
    Eigen::Index filled_ = 0;
    long long seen_ = 0;
};

struct Usage {
    std::vector<std::int64_t> count;
    LatentPool pool;
    Usage(const vq::Codebook& cb) : count(static_cast<std::size_t>(cb.size()), 0), pool(cb.dim(), 8192) {}
    void add(const std::vector<int>& idx) {
        for (int i : idx) ++count[static_cast<std::size_t>(i)];
    }
    void reseed(vq::Codebook& cb, std::mt19937_64& rng) {
        if (!pool.empty() && std::any_of(count.begin(), count.end(), [](auto c) { return c > 0; }))
            vq::reseed_dead(cb, count, pool.samples(), rng);
        std::fill(count.begin(), count.end(), 0);
        pool.clear();
    }
};

Matrix stack_rows(const std::vector<AngleSequence>& data) {
    std::size_t n = 0;
    for (const auto& s : data) n += s.size();
    if (n == 0) throw std::invalid_argument("training data is empty");
    const int width = data.front().front().size();
    Matrix x(static_cast<Eigen::Index>(n), width);
    Eigen::Index r = 0;
    for (const auto& s : data)
        for (const auto& a : s) x.row(r++) = to_row(a);
    return x;
}

Matrix subsample(const Matrix& m, Eigen::Index max_rows, std::mt19937_64& rng) {
    if (m.rows() <= max_rows) return m;
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(m.rows()));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    Matrix out(max_rows, m.cols());
    for (Eigen::Index i = 0; i < max_rows; ++i) out.row(i) = m.row(idx[static_cast<std::size_t>(i)]);
    return out;
}

constexpr Eigen::Index kKmeansSamples = 20000;

void kmeans_on(vq::Codebook& cb, const Matrix& latents, int iters, std::mt19937_64& rng) {
    const Matrix subs = vq::split_subvectors(latents, cb.dim());
    vq::kmeans_init(cb, subsample(subs, kKmeansSamples, rng), iters, rng);
}

/// Continuous (unquantized) autoencoder epochs for one encoder/decoder pair.
void warmup_pair(CodecModel& m, Pair pair, const Matrix& x, const TrainConfig& cfg, Distortion d,
                 std::mt19937_64& rng, ad::AdamState& adam) {
    std::vector<Eigen::Index> order(static_cast<std::size_t>(x.rows()));
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < cfg.warmup_epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t end = std::min(order.size(), s + static_cast<std::size_t>(cfg.batch));
            Matrix xb(static_cast<Eigen::Index>(end - s), x.cols());
            for (std::size_t i = s; i < end; ++i) xb.row(static_cast<Eigen::Index>(i - s)) = x.row(order[i]);
            m.params().zero_grad();
            ad::Graph g;
            ad::Var xi = in(g, xb);
            ad::Var y = m.decoder(pair).forward(g, m.encoder(pair).forward(g, xi));
            ad::Var loss = distortion(g, y, xi, d);
            check_finite(g.value(loss).item());
            g.backward(loss);
            ad::adam_step(m.params(), adam);
        }
    }
}

/// Angle-difference steps for Type-II training; `residual` (empty means
/// zero) is added to the encoder output.
struct Type2Samples {
    Matrix input;
    Matrix residual;
    Matrix target;
};

Matrix gather(const Matrix& m, const std::vector<Eigen::Index>& order, std::size_t s, std::size_t e) {
    Matrix out(static_cast<Eigen::Index>(e - s), m.cols());
    for (std::size_t i = s; i < e; ++i) out.row(static_cast<Eigen::Index>(i - s)) = m.row(order[i]);
    return out;
}

/// Quantized Type-II epochs on independent steps. With `anchor` (Type-I
/// input rows) the codebook is shared: every batch also carries the Type-I
/// loss so the codebook keeps serving both pairs. The Type-I networks stay
/// fixed either way.
void train_type2_steps(CodecModel& m, const Type2Samples& x, vq::Codebook& cb, const Matrix* anchor, int epochs,
                       const TrainConfig& cfg, ad::AdamState& adam, std::mt19937_64& rng) {
    std::vector<ad::Parameter*> frozen;
    for (auto& p : m.params())
        if (p->trainable && (p->name.rfind("enc1.", 0) == 0 || p->name.rfind("dec1.", 0) == 0)) {
            p->trainable = false;
            frozen.push_back(p.get());
        }
    std::vector<Eigen::Index> order(static_cast<std::size_t>(x.input.rows()));
    std::iota(order.begin(), order.end(), 0);
    std::uniform_int_distribution<Eigen::Index> pick(0, anchor ? anchor->rows() - 1 : 0);
    for (int e = 0; e < epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t end = std::min(order.size(), s + static_cast<std::size_t>(cfg.batch));
            m.params().zero_grad();
            ad::Graph g;
            ad::Var z = m.encoder(Pair::TypeII).forward(g, in(g, gather(x.input, order, s, end)));
            if (x.residual.size()) z = g.add(z, in(g, gather(x.residual, order, s, end)));
            auto t = vq::vq_block(g, z, cb);
            ad::Var y = m.decoder(Pair::TypeII).forward(g, t.decoder_input);
            ad::Var loss = vq_total(g, g.angular_distortion(y, in(g, gather(x.target, order, s, end))), t, cfg.beta);
            if (anchor) {
                Matrix ab(static_cast<Eigen::Index>(end - s), anchor->cols());
                for (Eigen::Index i = 0; i < ab.rows(); ++i) ab.row(i) = anchor->row(pick(rng));
                loss = g.add(loss, initial_loss(g, m, ab, cfg.beta, Distortion::Angular));
            }
            check_finite(g.value(loss).item());
            g.backward(loss);
            ad::adam_step(m.params(), adam);
        }
    }
    for (auto* p : frozen) p->trainable = true;
}

/// Two-step samples on the true history. For every angle-difference step the
/// previous snapshot is encoded with the pair its own mode selected; its
/// residual latent is added to the current encoding and the target adds the
/// share of the previous error that the residual explains, dec(z) - dec(z_q).
Type2Samples residual_steps(const CodecModel& m, const std::vector<AngleSequence>& data, const SelectionConfig& sel) {
    const Eigen::Index width = data.front().front().size();
    std::vector<Matrix> prev[2], cur[2];  // by previous mode
    for (const auto& s : data) {
        bool prev_mode = false;
        Matrix prev_diff;
        for (std::size_t t = 1; t < s.size(); ++t) {
            Matrix d = wrap_diff(Matrix(to_row(s[t]) - to_row(s[t - 1])));
            const bool mode = select_mode_row(d, 0, sel).indicator;
            if (mode) {
                prev[prev_mode].push_back(prev_mode ? prev_diff : to_row(s[t - 1]));
                cur[prev_mode].push_back(d);
            }
            prev_mode = mode;
            prev_diff = std::move(d);
        }
    }
    const std::size_t n = cur[0].size() + cur[1].size();
    Type2Samples out;
    out.input.resize(static_cast<Eigen::Index>(n), width);
    out.residual.resize(static_cast<Eigen::Index>(n), m.geometry().latent_size());
    out.target.resize(static_cast<Eigen::Index>(n), width);
    Eigen::Index r = 0;
    for (int pm = 0; pm < 2; ++pm) {
        if (cur[pm].empty()) continue;
        const auto rows = static_cast<Eigen::Index>(cur[pm].size());
        Matrix x(rows, width);
        for (Eigen::Index i = 0; i < rows; ++i) {
            x.row(i) = prev[pm][static_cast<std::size_t>(i)];
            out.input.row(r + i) = cur[pm][static_cast<std::size_t>(i)];
        }
        const Pair pair = pm ? Pair::TypeII : Pair::TypeI;
        const Matrix z = m.encode(pair, x);
        const Matrix zq = vq::vq_quantize(m.codebook(), z).zq;
        out.residual.middleRows(r, rows) = z - zq;
        out.target.middleRows(r, rows) = out.input.middleRows(r, rows) + m.decode(pair, z) - m.decode(pair, zq);
        r += rows;
    }
    return out;
}

/// Wrapped differences of consecutive snapshots that select angle-difference mode.
Matrix difference_rows(const std::vector<AngleSequence>& data, const SelectionConfig& sel) {
    std::vector<Matrix> rows;
    for (const auto& s : data)
        for (std::size_t t = 1; t < s.size(); ++t) {
            Matrix d = wrap_diff(to_row(s[t]) - to_row(s[t - 1]));
            if (select_mode_row(d, 0, sel).indicator) rows.push_back(std::move(d));
        }
    if (rows.empty()) return Matrix(0, data.front().front().size());
    Matrix out(static_cast<Eigen::Index>(rows.size()), rows.front().cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows[i];
    return out;
}

}  // namespace

TrainHistory train_initial(CodecModel& m, const std::vector<AngleSequence>& data, const TrainConfig& cfg) {
    if (cfg.batch < 1 || cfg.epochs < 0) throw std::invalid_argument("train: bad batch or epoch count");
    std::mt19937_64 rng(cfg.seed);
    if (!m.params().find(CodecModel::kCodebook)) m.init(rng);
    const Matrix x = stack_rows(data);
    ad::AdamState adam;
    adam.config.lr = cfg.lr;

    warmup_pair(m, Pair::TypeI, x, cfg, cfg.distortion, rng, adam);
    if (cfg.kmeans_iters > 0) kmeans_on(m.codebook(), m.encode(Pair::TypeI, x), cfg.kmeans_iters, rng);

    TrainHistory h;
    Usage usage(m.codebook());
    std::vector<Eigen::Index> order(static_cast<std::size_t>(x.rows()));
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < cfg.epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        double sum = 0;
        int steps = 0;
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t end = std::min(order.size(), s + static_cast<std::size_t>(cfg.batch));
            Matrix xb(static_cast<Eigen::Index>(end - s), x.cols());
            for (std::size_t i = s; i < end; ++i) xb.row(static_cast<Eigen::Index>(i - s)) = x.row(order[i]);
            m.params().zero_grad();
            ad::Graph g;
            ad::Var loss = initial_loss(g, m, xb, cfg.beta, cfg.distortion);
            const double lv = g.value(loss).item();
            check_finite(lv);
            g.backward(loss);
            ad::adam_step(m.params(), adam);
            // The first encoder node after the input is the latent's producer;
            // recompute the latents cheaply for usage bookkeeping instead.
            const Matrix z = m.encode(Pair::TypeI, xb);
            usage.add(vq::vq_quantize(m.codebook(), z).indices);
            usage.pool.add(z, rng);
            h.step_loss.push_back(lv);
            sum += lv;
            ++steps;
        }
        usage.reseed(m.codebook(), rng);
        h.epoch_loss.push_back(sum / std::max(steps, 1));
        if (cfg.on_epoch) cfg.on_epoch(e, h.epoch_loss.back());
    }
    return h;
}

namespace {

enum class AdKind { Unified, Naive, Parallel };

TrainHistory train_ad(CodecModel& m, const std::vector<AngleSequence>& data, const SelectionConfig& sel,
                      const TrainConfig& cfg, AdKind kind) {
    if (cfg.batch < 1 || cfg.epochs < 0) throw std::invalid_argument("train: bad batch or epoch count");
    if (data.empty()) throw std::invalid_argument("training data is empty");
    const auto& geo = m.geometry();
    sel.validate(geo.n_a, geo.n_c);
    std::mt19937_64 rng(cfg.seed);
    m.add_type2(rng);
    if (kind == AdKind::Parallel) m.add_parallel_codebooks(rng);
    ad::AdamState adam;
    adam.config.lr = cfg.lr;

    // Type-II warm-up on difference samples, then codebook initialization.
    const Matrix diffs = difference_rows(data, sel);
    if (diffs.rows() > 0) {
        warmup_pair(m, Pair::TypeII, diffs, cfg, Distortion::Angular, rng, adam);
        if (kind == AdKind::Parallel && cfg.kmeans_iters > 0) {
            kmeans_on(m.type2_stage1(), m.encode(Pair::TypeII, diffs), cfg.kmeans_iters, rng);
            const Matrix x = stack_rows(data);
            const Matrix z1 = m.encode(Pair::TypeI, subsample(x, 4096, rng));
            const Matrix z2 = m.encode(Pair::TypeII, subsample(diffs, 4096, rng));
            Matrix res(z1.rows() + z2.rows(), z1.cols());
            res << z1 - vq::vq_quantize(m.codebook(), z1).zq, z2 - vq::vq_quantize(m.type2_stage1(), z2).zq;
            kmeans_on(m.residual(), res, cfg.kmeans_iters, rng);
        }
        ad::AdamState t2_adam;
        t2_adam.config.lr = cfg.type2_lr;
        const Type2Samples single{diffs, {}, diffs};
        if (kind == AdKind::Parallel) {
            train_type2_steps(m, single, m.type2_stage1(), nullptr, cfg.type2_epochs, cfg, t2_adam, rng);
        } else {
            const Matrix x = stack_rows(data);
            train_type2_steps(m, single, m.codebook(), &x, cfg.type2_epochs, cfg, t2_adam, rng);
            if (kind == AdKind::Unified)
                for (int e = 0; e < cfg.residual_epochs; ++e) {
                    const auto steps = residual_steps(m, data, sel);
                    if (steps.input.rows() > 0) train_type2_steps(m, steps, m.codebook(), &x, 1, cfg, t2_adam, rng);
                }
        }
    }

    const int width = data.front().front().size();
    const int latent = geo.latent_size();
    std::vector<Matrix> seqs;
    for (const auto& s : data) {
        Matrix rows(static_cast<Eigen::Index>(s.size()), width);
        for (std::size_t t = 0; t < s.size(); ++t) rows.row(static_cast<Eigen::Index>(t)) = to_row(s[t]);
        seqs.push_back(std::move(rows));
    }

    // The B-bit codebook was fitted with Type-I; it stays fixed from here on.
    ad::Parameter& main_table = m.params().at(CodecModel::kCodebook);
    const bool main_trainable = main_table.trainable;
    main_table.trainable = false;

    TrainHistory h;
    std::optional<Usage> use_t2, use_res;
    if (kind == AdKind::Parallel) {
        use_t2.emplace(m.type2_stage1());
        use_res.emplace(m.residual());
    }
    std::vector<std::size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < cfg.epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        double sum = 0;
        int steps = 0;
        for (std::size_t s0 = 0; s0 < order.size(); s0 += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t s1 = std::min(order.size(), s0 + static_cast<std::size_t>(cfg.batch));
            const auto n = static_cast<Eigen::Index>(s1 - s0);
            Eigen::Index t_len = seqs[order[s0]].rows();
            for (std::size_t i = s0; i < s1; ++i) t_len = std::min(t_len, seqs[order[i]].rows());

            AdStepBatch b;
            b.prev_residual = Matrix::Zero(n, latent);
            b.prev_zq = Matrix::Zero(n, latent);
            b.prev_hat = Matrix::Zero(n, width);
            b.prev_refined = Matrix::Zero(n, width);
            b.prev_phi = Matrix::Zero(n, width);
            b.prev_input = Matrix::Zero(n, width);
            b.mode.assign(static_cast<std::size_t>(n), 0);
            Matrix prev_z = Matrix::Zero(n, latent);
            for (Eigen::Index t = 0; t < t_len; ++t) {
                b.phi.resize(n, width);
                for (Eigen::Index i = 0; i < n; ++i) b.phi.row(i) = seqs[order[s0 + static_cast<std::size_t>(i)]].row(t);
                b.prev_mode = b.mode;
                b.input = b.phi;
                if (t > 0) {
                    const Matrix diff = wrap_diff(Matrix(b.phi - b.prev_phi));
                    for (Eigen::Index i = 0; i < n; ++i) {
                        const bool mode = select_mode_row(diff, i, sel).indicator;
                        b.mode[static_cast<std::size_t>(i)] = mode;
                        if (mode) b.input.row(i) = diff.row(i);
                    }
                }
                if (kind == AdKind::Unified) b.prev_residual = prev_z - b.prev_zq;

                m.params().zero_grad();
                ad::Graph g;
                AdStepResult r = kind == AdKind::Parallel ? parallel_step_loss(g, m, b, cfg.beta)
                                                          : unified_step_loss(g, m, b, cfg.beta, kind == AdKind::Naive);
                const double lv = g.value(r.loss).item();
                check_finite(lv);
                g.backward(r.loss);
                ad::adam_step(m.params(), adam);

                if (kind == AdKind::Parallel) {
                    use_t2->add(r.usage_type2);
                    use_res->add(r.usage_residual);
                    for (Eigen::Index i = 0; i < n; ++i) {
                        if (!b.mode[static_cast<std::size_t>(i)]) continue;
                        use_t2->pool.add(r.z.row(i), rng);
                        use_res->pool.add(Matrix(r.z.row(i) - r.zq.row(i)), rng);
                    }
                }
                h.step_loss.push_back(lv);
                sum += lv;
                ++steps;

                prev_z = r.z;
                b.prev_zq = r.zq;
                b.prev_hat = r.hat;
                for (Eigen::Index i = 0; i < n; ++i)
                    if (b.mode[static_cast<std::size_t>(i)]) b.prev_refined.row(i) = r.refined.row(i);
                b.prev_phi = b.phi;
                b.prev_input = b.input;
            }
        }
        if (kind == AdKind::Parallel) {
            use_t2->reseed(m.type2_stage1(), rng);
            use_res->reseed(m.residual(), rng);
        }
        h.epoch_loss.push_back(sum / std::max(steps, 1));
        if (cfg.on_epoch) cfg.on_epoch(e, h.epoch_loss.back());
    }
    main_table.trainable = main_trainable;
    return h;
}

}  // namespace

TrainHistory train_unified(CodecModel& m, const std::vector<AngleSequence>& data, const SelectionConfig& sel,
                           const TrainConfig& cfg, bool naive) {
    return train_ad(m, data, sel, cfg, naive ? AdKind::Naive : AdKind::Unified);
}

TrainHistory train_parallel(CodecModel& m, const std::vector<AngleSequence>& data, const SelectionConfig& sel,
                            const TrainConfig& cfg) {
    return train_ad(m, data, sel, cfg, AdKind::Parallel);
}

}  // namespace csilab::pipeline
