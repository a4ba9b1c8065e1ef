#include "csilab/vqcodec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <tuple>

#include "csilab/bitstream.hpp"
#include "csilab/types.hpp"

namespace csilab::vq {

Codebook::Codebook(ad::Parameter& table, int bits) : table_(&table), bits_(bits) {
    if (table.value.values().rows() != (Eigen::Index{1} << bits)) {
        throw std::invalid_argument("Codebook: table rows must equal 2^bits");
    }
}

int nearest_codeword(const Matrix& table, std::span<const double> sub) {
    if (table.rows() == 0) throw std::invalid_argument("nearest_codeword: empty codebook");
    if (static_cast<Eigen::Index>(sub.size()) != table.cols()) throw std::invalid_argument("nearest_codeword: dim mismatch");
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < table.rows(); ++c) {
        double d = 0;
        for (Eigen::Index j = 0; j < table.cols(); ++j) {
            const double e = sub[j] - table(c, j);
            d += e * e;
        }
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(c);
        }
    }
    return best;
}

Matrix split_subvectors(const Matrix& z, int dim) {
    if (dim < 1 || z.cols() % dim != 0) throw std::invalid_argument("latent width not divisible by codeword dim");
    return Eigen::Map<const Matrix>(z.data(), z.size() / dim, dim);
}

Quantized vq_quantize(const Codebook& codebook, const Matrix& z) {
    if (!codebook.valid() || codebook.size() == 0) throw std::invalid_argument("vq_quantize: empty codebook");
    const Matrix& table = codebook.table();
    const int dim = codebook.dim();
    const Matrix subs = split_subvectors(z, dim);
    const Eigen::VectorXd cnorm = table.rowwise().squaredNorm();

    // Expanded distances via GEMM, then an exact recheck of every codeword
    // within rounding range of the best so the lowest-index rule is exact.
    Matrix dist = -2.0 * subs * table.transpose();
    dist.rowwise() += cnorm.transpose();
    const Eigen::VectorXd snorm = subs.rowwise().squaredNorm();

    Quantized out;
    out.indices.resize(static_cast<std::size_t>(subs.rows()));
    Matrix zq_sub(subs.rows(), dim);
    for (Eigen::Index r = 0; r < subs.rows(); ++r) {
        Eigen::Index arg;
        const double m = dist.row(r).minCoeff(&arg);
        const double tol = 1e-9 * (snorm(r) + cnorm.maxCoeff() + 1.0);
        int best = static_cast<int>(arg);
        double best_d = (subs.row(r) - table.row(arg)).squaredNorm();
        for (Eigen::Index c = 0; c < table.rows(); ++c) {
            if (dist(r, c) > m + tol) continue;
            const double d = (subs.row(r) - table.row(c)).squaredNorm();
            if (d < best_d || (d == best_d && c < best)) {
                best_d = d;
                best = static_cast<int>(c);
            }
        }
        out.indices[static_cast<std::size_t>(r)] = best;
        zq_sub.row(r) = table.row(best);
    }
    out.zq = Eigen::Map<const Matrix>(zq_sub.data(), z.rows(), z.cols());
    return out;
}

TwoStage two_stage_quantize(const Codebook& stage1, const Codebook& stage2, const Matrix& z) {
    if (stage1.dim() != stage2.dim()) throw std::invalid_argument("two_stage_quantize: codebook dims differ");
    TwoStage t;
    t.first = vq_quantize(stage1, z);
    t.second = vq_quantize(stage2, z - t.first.zq);
    return t;
}

std::vector<std::uint8_t> indices_to_bits(std::span<const int> indices, int bits) {
    BitWriter w;
    for (int idx : indices) {
        if (idx < 0 || idx >= (1 << bits)) throw std::out_of_range("VQ index does not fit in its bit width");
        w.write(static_cast<std::uint32_t>(idx), bits);
    }
    return std::move(w).take();
}

std::vector<int> bits_to_indices(std::span<const std::uint8_t> bytes, std::size_t count, int bits) {
    const std::size_t need = count * static_cast<std::size_t>(bits);
    if ((need + 7) / 8 != bytes.size()) throw FormatError("VQ payload length mismatch");
    BitReader r(bytes, need);
    std::vector<int> out(count);
    for (auto& v : out) v = static_cast<int>(r.read(bits));
    return out;
}

Matrix lookup(const Codebook& codebook, std::span<const int> indices, int groups) {
    if (groups < 1 || indices.size() % groups != 0) throw std::invalid_argument("lookup: bad group count");
    const int dim = codebook.dim();
    const Eigen::Index rows = static_cast<Eigen::Index>(indices.size() / groups);
    Matrix out(rows, static_cast<Eigen::Index>(groups) * dim);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (int n = 0; n < groups; ++n) {
            const int idx = indices[static_cast<std::size_t>(r) * groups + n];
            if (idx < 0 || idx >= codebook.size()) throw std::out_of_range("lookup: index out of range");
            out.block(r, static_cast<Eigen::Index>(n) * dim, 1, dim) = codebook.table().row(idx);
        }
    return out;
}

Matrix bits_to_zq(std::span<const std::uint8_t> bytes, const Codebook& codebook, int groups) {
    const auto idx = bits_to_indices(bytes, static_cast<std::size_t>(groups), codebook.bits());
    return lookup(codebook, idx, groups);
}

std::pair<ad::Var, ad::Var> vq_loss_terms(ad::Graph& g, ad::Var z, ad::Var zq) {
    ad::Var codebook_term = g.squared_error(g.stop_gradient(z), zq);
    ad::Var commitment_term = g.squared_error(z, g.stop_gradient(zq));
    return {codebook_term, commitment_term};
}

VqTerms vq_block(ad::Graph& g, ad::Var z, const Codebook& codebook) {
    const Matrix& zv = g.value(z).values();
    const int groups = static_cast<int>(zv.cols()) / codebook.dim();
    VqTerms t;
    t.indices = g.choice(vq_quantize(codebook, zv).indices);
    t.zq = g.gather_rows(g.param(codebook.parameter()), t.indices, groups);
    std::tie(t.codebook_loss, t.commitment_loss) = vq_loss_terms(g, z, t.zq);
    t.decoder_input = g.straight_through(z, t.zq);
    return t;
}

void kmeans_init(Codebook& codebook, const Matrix& samples, int iterations, std::mt19937_64& rng) {
    const int k = codebook.size();
    const int dim = codebook.dim();
    if (samples.cols() != dim) throw std::invalid_argument("kmeans_init: sample dim mismatch");
    if (samples.rows() == 0) throw std::invalid_argument("kmeans_init: no samples");
    Matrix& table = codebook.mutable_table();

    std::vector<Eigen::Index> order(static_cast<std::size_t>(samples.rows()));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::normal_distribution<double> jitter(0.0, 1e-3);
    for (int c = 0; c < k; ++c) {
        table.row(c) = samples.row(order[static_cast<std::size_t>(c) % order.size()]);
        // More codewords than samples: perturb the repeats so they stay distinct.
        if (static_cast<std::size_t>(c) >= order.size())
            for (int j = 0; j < dim; ++j) table(c, j) += jitter(rng);
    }

    for (int it = 0; it < iterations; ++it) {
        const Quantized q = vq_quantize(codebook, samples);
        Matrix sums = Matrix::Zero(k, dim);
        std::vector<std::int64_t> count(static_cast<std::size_t>(k), 0);
        for (Eigen::Index r = 0; r < samples.rows(); ++r) {
            const int c = q.indices[static_cast<std::size_t>(r)];
            sums.row(c) += samples.row(r);
            ++count[static_cast<std::size_t>(c)];
        }
        for (int c = 0; c < k; ++c)
            if (count[static_cast<std::size_t>(c)] > 0) table.row(c) = sums.row(c) / double(count[static_cast<std::size_t>(c)]);
        reseed_dead(codebook, count, samples, rng);
    }
    ++codebook.parameter().version;
}

int reseed_dead(Codebook& codebook, std::span<const std::int64_t> usage, const Matrix& samples, std::mt19937_64& rng) {
    if (usage.size() != static_cast<std::size_t>(codebook.size())) throw std::invalid_argument("reseed_dead: usage size");
    std::uniform_int_distribution<Eigen::Index> pick(0, samples.rows() - 1);
    std::normal_distribution<double> jitter(0.0, 1e-3);
    int n = 0;
    for (std::size_t c = 0; c < usage.size(); ++c) {
        if (usage[c] != 0) continue;
        auto row = codebook.mutable_table().row(static_cast<Eigen::Index>(c));
        row = samples.row(pick(rng));
        for (Eigen::Index j = 0; j < row.size(); ++j) row(j) += jitter(rng);
        ++n;
    }
    if (n) ++codebook.parameter().version;
    return n;
}

// ------------------------------------------------------------ codec model

void CodecGeometry::validate() const {
    if (n_a < 1 || n_c < 1) throw std::invalid_argument("codec geometry: n_a and n_c must be positive");
    if (groups < 1 || dim < 1) throw std::invalid_argument("codec geometry: groups and dim must be positive");
    if (bits < 1 || bits > 16) throw std::invalid_argument("codec geometry: bits must be in [1,16]");
    if (residual_bits < 1 || residual_bits >= bits) throw std::invalid_argument("codec geometry: need 1 <= residual_bits < bits");
    for (int h : hidden)
        if (h < 1) throw std::invalid_argument("codec geometry: hidden sizes must be positive");
}

void to_json(nlohmann::json& j, const CodecGeometry& g) {
    j = {{"n_a", g.n_a},       {"n_c", g.n_c},   {"groups", g.groups},
         {"dim", g.dim},       {"bits", g.bits}, {"residual_bits", g.residual_bits},
         {"hidden", g.hidden}};
}

void from_json(const nlohmann::json& j, CodecGeometry& g) {
    CodecGeometry d;
    g.n_a = j.value("n_a", d.n_a);
    g.n_c = j.value("n_c", d.n_c);
    g.groups = j.value("groups", d.groups);
    g.dim = j.value("dim", d.dim);
    g.bits = j.value("bits", d.bits);
    g.residual_bits = j.value("residual_bits", d.residual_bits);
    g.hidden = j.value("hidden", d.hidden);
}

CodecModel::CodecModel(CodecGeometry geometry) : geo_(std::move(geometry)) { geo_.validate(); }

std::vector<int> CodecModel::encoder_sizes() const {
    std::vector<int> s{geo_.input_size()};
    s.insert(s.end(), geo_.hidden.begin(), geo_.hidden.end());
    s.push_back(geo_.latent_size());
    return s;
}

std::vector<int> CodecModel::decoder_sizes() const {
    std::vector<int> s = encoder_sizes();
    std::reverse(s.begin(), s.end());
    return s;
}

namespace {

ad::Parameter& add_codebook(ad::ParameterSet& ps, const char* name, int bits, int dim, std::mt19937_64& rng) {
    auto& p = ps.add(name, {1 << bits, dim});
    std::normal_distribution<double> n(0.0, 0.1);
    for (Eigen::Index i = 0; i < p.value.values().size(); ++i) p.value.values().data()[i] = n(rng);
    return p;
}

}  // namespace

void CodecModel::init(std::mt19937_64& rng) {
    if (params_.find(kCodebook)) throw std::logic_error("CodecModel::init called twice");
    enc1_ = nn::Mlp(params_, "enc1", encoder_sizes());
    dec1_ = nn::Mlp(params_, "dec1", decoder_sizes());
    enc1_.init_uniform(rng);
    dec1_.init_uniform(rng);
    codebook_ = Codebook(add_codebook(params_, kCodebook, geo_.bits, geo_.dim, rng), geo_.bits);
}

void CodecModel::add_type2(std::mt19937_64& rng) {
    if (has_type2_) return;
    enc2_ = nn::Mlp(params_, "enc2", encoder_sizes());
    dec2_ = nn::Mlp(params_, "dec2", decoder_sizes());
    enc2_.init_uniform(rng);
    dec2_.init_uniform(rng);
    has_type2_ = true;
}

void CodecModel::add_parallel_codebooks(std::mt19937_64& rng) {
    if (has_parallel_) return;
    const int b1 = geo_.bits - geo_.residual_bits;
    type2_stage1_ = Codebook(add_codebook(params_, kTypeIIStage1, b1, geo_.dim, rng), b1);
    residual_ = Codebook(add_codebook(params_, kResidual, geo_.residual_bits, geo_.dim, rng), geo_.residual_bits);
    has_parallel_ = true;
}

void CodecModel::rebind() {
    enc1_ = nn::Mlp::bind(params_, "enc1", encoder_sizes());
    dec1_ = nn::Mlp::bind(params_, "dec1", decoder_sizes());
    codebook_ = Codebook(params_.at(kCodebook), geo_.bits);
    has_type2_ = params_.find("enc2.0.weight") != nullptr;
    if (has_type2_) {
        enc2_ = nn::Mlp::bind(params_, "enc2", encoder_sizes());
        dec2_ = nn::Mlp::bind(params_, "dec2", decoder_sizes());
    }
    has_parallel_ = params_.find(kResidual) != nullptr;
    if (has_parallel_) {
        type2_stage1_ = Codebook(params_.at(kTypeIIStage1), geo_.bits - geo_.residual_bits);
        residual_ = Codebook(params_.at(kResidual), geo_.residual_bits);
    }
}

CodecModel CodecModel::clone() const {
    CodecModel m(geo_);
    for (const auto& p : params_) {
        auto& q = m.params_.add(p->name, p->value.shape());
        q.value = p->value;
        q.trainable = p->trainable;
    }
    m.rebind();
    return m;
}

void CodecModel::round_to_storage() {
    for (auto& p : params_) {
        auto& v = p->value.values();
        for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<float>(v.data()[i]);
        ++p->version;
    }
}

}  // namespace csilab::vq
