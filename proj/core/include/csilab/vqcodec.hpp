#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "csilab/autodiff.hpp"
#include "csilab/nn.hpp"

namespace csilab::vq {

using ad::Matrix;

/// Trainable table of 2^bits codewords of length dim, stored in a Parameter.
class Codebook {
   public:
    Codebook() = default;
    Codebook(ad::Parameter& table, int bits);

    int bits() const { return bits_; }
    int size() const { return static_cast<int>(table_->value.values().rows()); }
    int dim() const { return static_cast<int>(table_->value.values().cols()); }
    const Matrix& table() const { return table_->value.values(); }
    Matrix& mutable_table() { return table_->value.values(); }
    ad::Parameter& parameter() const { return *table_; }
    bool valid() const { return table_ != nullptr; }

   private:
    ad::Parameter* table_ = nullptr;
    int bits_ = 0;
};

/// Product quantization result for a batch: row r's sub-vector n maps to
/// codeword indices[r * groups + n].
struct Quantized {
    Matrix zq;
    std::vector<int> indices;
};

/// Nearest codeword to `sub` (length dim); ties go to the lowest index.
int nearest_codeword(const Matrix& table, std::span<const double> sub);

/// Splits every row of z into groups of codebook.dim() and maps each to its
/// nearest codeword.
Quantized vq_quantize(const Codebook& codebook, const Matrix& z);

struct TwoStage {
    Quantized first;
    Quantized second;  // quantization of z - first.zq
};

TwoStage two_stage_quantize(const Codebook& stage1, const Codebook& stage2, const Matrix& z);

/// Packs indices MSB-first, `bits` per index.
std::vector<std::uint8_t> indices_to_bits(std::span<const int> indices, int bits);
std::vector<int> bits_to_indices(std::span<const std::uint8_t> bytes, std::size_t count, int bits);
/// Decodes `groups` indices of codebook.bits() each into one latent row.
Matrix bits_to_zq(std::span<const std::uint8_t> bytes, const Codebook& codebook, int groups);
Matrix lookup(const Codebook& codebook, std::span<const int> indices, int groups);

/// VQ block on the tape: quantization, the two VQ loss terms and the
/// straight-through decoder input.
struct VqTerms {
    ad::Var decoder_input;    // z + sg(z_q - z)
    ad::Var codebook_loss;    // |sg(z) - z_q|^2
    ad::Var commitment_loss;  // |z - sg(z_q)|^2
    ad::Var zq;
    std::vector<int> indices;
};

/// (codebook term, commitment term) for already-quantized z_q.
std::pair<ad::Var, ad::Var> vq_loss_terms(ad::Graph& g, ad::Var z, ad::Var zq);

VqTerms vq_block(ad::Graph& g, ad::Var z, const Codebook& codebook);

/// Lloyd iterations over rows of `samples` (each of length dim); the
/// codebook is seeded with distinct random samples.
void kmeans_init(Codebook& codebook, const Matrix& samples, int iterations, std::mt19937_64& rng);

/// Replaces codewords whose usage count is zero with random samples.
int reseed_dead(Codebook& codebook, std::span<const std::int64_t> usage, const Matrix& samples, std::mt19937_64& rng);

/// Rows of z (N*D wide) split into N rows of D.
Matrix split_subvectors(const Matrix& z, int dim);

// ------------------------------------------------------------ codec model

struct CodecGeometry {
    int n_a = 5;
    int n_c = 16;
    int groups = 8;        // N
    int dim = 16;          // D
    int bits = 8;          // B
    int residual_bits = 4; // B_r (parallel variant)
    std::vector<int> hidden{512, 256};

    int input_size() const { return 2 * n_a * n_c; }
    int latent_size() const { return groups * dim; }
    int payload_bits() const { return groups * bits; }
    void validate() const;
};

void to_json(nlohmann::json& j, const CodecGeometry& g);
void from_json(const nlohmann::json& j, CodecGeometry& g);

enum class Pair { TypeI, TypeII };

/// Encoder/decoder pairs and codebooks. Type-I alone is the initial-feedback
/// model; Type-II plus (optionally) the parallel codebooks extend it for
/// angle-difference feedback.
class CodecModel {
   public:
    static constexpr const char* kCodebook = "vq.codebook";          // B bits, stage 1 / unified
    static constexpr const char* kTypeIIStage1 = "vq.type2_stage1";  // B - B_r bits
    static constexpr const char* kResidual = "vq.residual";          // B_r bits, shared stage 2

    explicit CodecModel(CodecGeometry geometry);
    CodecModel(CodecModel&&) noexcept = default;
    CodecModel& operator=(CodecModel&&) noexcept = default;

    /// Random Type-I pair and codebook.
    void init(std::mt19937_64& rng);
    void add_type2(std::mt19937_64& rng);
    void add_parallel_codebooks(std::mt19937_64& rng);

    /// Rebuilds layer bindings from the parameter names (after loading).
    void rebind();
    CodecModel clone() const;

    const CodecGeometry& geometry() const { return geo_; }
    bool has_type2() const { return has_type2_; }
    bool has_parallel() const { return has_parallel_; }

    const nn::Mlp& encoder(Pair p) const { return p == Pair::TypeI ? enc1_ : enc2_; }
    const nn::Mlp& decoder(Pair p) const { return p == Pair::TypeI ? dec1_ : dec2_; }
    /// Stage-1 codebook used by `p` in the given variant.
    const Codebook& codebook() const { return codebook_; }
    const Codebook& type2_stage1() const { return type2_stage1_; }
    const Codebook& residual() const { return residual_; }
    Codebook& codebook() { return codebook_; }
    Codebook& type2_stage1() { return type2_stage1_; }
    Codebook& residual() { return residual_; }

    Matrix encode(Pair p, const Matrix& x) const { return encoder(p).infer(x); }
    Matrix decode(Pair p, const Matrix& zq) const { return decoder(p).infer(zq); }

    ad::ParameterSet& params() { return params_; }
    const ad::ParameterSet& params() const { return params_; }

    /// Rounds every parameter to float32 (the container's storage precision).
    void round_to_storage();

   private:
    std::vector<int> encoder_sizes() const;
    std::vector<int> decoder_sizes() const;

    CodecGeometry geo_;
    ad::ParameterSet params_;
    nn::Mlp enc1_, dec1_, enc2_, dec2_;
    Codebook codebook_, type2_stage1_, residual_;
    bool has_type2_ = false;
    bool has_parallel_ = false;
};

}  // namespace csilab::vq
