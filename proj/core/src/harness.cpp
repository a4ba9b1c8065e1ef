#include "csilab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "csilab/bitstream.hpp"
#include "csilab/givens.hpp"

namespace csilab::baseline {

void to_json(nlohmann::json& j, const UniformGrid& g) { j = nlohmann::json::array({g.b_phi, g.b_psi}); }

void from_json(const nlohmann::json& j, UniformGrid& g) {
    if (!j.is_array() || j.size() != 2) throw std::invalid_argument("grid must be [b_phi, b_psi]");
    g = UniformGrid(j[0].get<int>(), j[1].get<int>());
}

}  // namespace csilab::baseline

namespace csilab::harness {

using pipeline::Scheme;
using nlohmann::json;

// ------------------------------------------------------------ configuration

namespace {

/// Defaults in `d` with the keys present in `patch` replaced.
template <class T>
T patched(const T& d, const json& patch) {
    json j = d;
    j.update(patch);
    return j.get<T>();
}

json schemes_json(const std::vector<Scheme>& v) {
    json out = json::array();
    for (auto s : v) out.push_back(pipeline::to_string(s));
    return out;
}

std::vector<Scheme> schemes_from(const json& j) {
    std::vector<Scheme> out;
    for (const auto& s : j) out.push_back(pipeline::scheme_from_string(s.get<std::string>()));
    return out;
}

/// Every key of `user` must exist in `reference`; nested objects recurse.
void check_keys(const json& user, const json& reference, const std::string& path) {
    if (!user.is_object()) return;
    for (const auto& [key, value] : user.items()) {
        const std::string here = path.empty() ? key : path + "." + key;
        if (!reference.contains(key)) throw std::invalid_argument("unknown config key '" + here + "'");
        if (value.is_object() && reference[key].is_object()) check_keys(value, reference[key], here);
    }
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
    channel.paths = 2;
    channel.delay_spread = 20e-9;
    ad_train.batch = 16;
    finalize();
}

givens::GivensConfig ExperimentConfig::givens() const { return {channel.n_t, channel.n_s, channel.n_c}; }

void ExperimentConfig::finalize() {
    channel.validate();
    codec.n_a = givens().n_a();
    codec.n_c = channel.n_c;
    codec.validate();
    if (feedback_bits && *feedback_bits != codec.payload_bits())
        throw std::invalid_argument("codec: declared feedback_bits " + std::to_string(*feedback_bits) +
                                    " differs from N*B = " + std::to_string(codec.payload_bits()));
    standard.validate();
    selection.validate(codec.n_a, codec.n_c);
    if (refiner.window < 1) throw std::invalid_argument("refiner.window must be at least 1");
    if (data.train_sequences < 1 || data.test_sequences < 1) throw std::invalid_argument("data: need sequences");
    if (eval.evm_symbols < 1) throw std::invalid_argument("eval.evm_symbols must be positive");
    eval.phy.validate();
    eval.overhead.validate();
    if (eval.phy.n_s != channel.n_s) throw std::invalid_argument("eval.phy.n_s must equal channel.n_s");
    if (refined && refiner.train.batch < 1) throw std::invalid_argument("refiner.train.batch must be positive");
}

void to_json(json& j, const ExperimentConfig& c) {
    json codec = c.codec;
    codec.erase("n_a");
    codec.erase("n_c");
    codec["feedback_bits"] = c.feedback_bits ? json(*c.feedback_bits) : json(nullptr);
    j = {{"channel", c.channel},
         {"scheme", pipeline::to_string(c.scheme)},
         {"refined", c.refined},
         {"codec", codec},
         {"standard", c.standard},
         {"selection", c.selection},
         {"train", c.train},
         {"ad_train", c.ad_train},
         {"refiner", {{"window", c.refiner.window}, {"hidden", c.refiner.hidden}, {"train", c.refiner.train}}},
         {"data",
          {{"train_sequences", c.data.train_sequences},
           {"test_sequences", c.data.test_sequences},
           {"seed", c.data.seed}}},
         {"eval",
          {{"phy", c.eval.phy},
           {"overhead", c.eval.overhead},
           {"evm_symbols", c.eval.evm_symbols},
           {"snr_db", c.eval.snr_db ? json(*c.eval.snr_db) : json(nullptr)},
           {"seed", c.eval.seed}}},
         {"sweep",
          {{"schemes", schemes_json(c.sweep.schemes)},
           {"standard_grids", c.sweep.standard_grids},
           {"refined", schemes_json(c.sweep.refined)},
           {"seeds", c.sweep.seeds}}}};
}

void from_json(const json& j, ExperimentConfig& c) {
    const ExperimentConfig d;
    check_keys(j, json(d), "");
    c = d;
    if (j.contains("channel")) c.channel = patched(d.channel, j["channel"]);
    if (j.contains("scheme")) c.scheme = pipeline::scheme_from_string(j["scheme"].get<std::string>());
    c.refined = j.value("refined", d.refined);
    if (j.contains("codec")) {
        json codec = json(d.codec);
        codec.update(j["codec"]);
        const json fb = codec.value("feedback_bits", json(nullptr));
        c.feedback_bits = fb.is_null() ? std::nullopt : std::optional<int>(fb.get<int>());
        codec.erase("feedback_bits");
        c.codec = codec.get<vq::CodecGeometry>();
    }
    if (j.contains("standard")) c.standard = j["standard"].get<baseline::UniformGrid>();
    if (j.contains("selection")) c.selection = patched(d.selection, j["selection"]);
    if (j.contains("train")) c.train = patched(d.train, j["train"]);
    if (j.contains("ad_train")) c.ad_train = patched(d.ad_train, j["ad_train"]);
    if (j.contains("refiner")) {
        const auto& r = j["refiner"];
        c.refiner.window = r.value("window", d.refiner.window);
        c.refiner.hidden = r.value("hidden", d.refiner.hidden);
        if (r.contains("train"))
            c.refiner.train = patched(d.refiner.train, r["train"]);
    }
    if (j.contains("data")) {
        const auto& x = j["data"];
        c.data.train_sequences = x.value("train_sequences", d.data.train_sequences);
        c.data.test_sequences = x.value("test_sequences", d.data.test_sequences);
        c.data.seed = x.value("seed", d.data.seed);
    }
    if (j.contains("eval")) {
        const auto& x = j["eval"];
        if (x.contains("phy")) c.eval.phy = patched(d.eval.phy, x["phy"]);
        if (x.contains("overhead"))
            c.eval.overhead = patched(d.eval.overhead, x["overhead"]);
        c.eval.evm_symbols = x.value("evm_symbols", d.eval.evm_symbols);
        if (x.contains("snr_db"))
            c.eval.snr_db = x["snr_db"].is_null() ? std::nullopt : std::optional<double>(x["snr_db"].get<double>());
        c.eval.seed = x.value("seed", d.eval.seed);
    }
    if (j.contains("sweep")) {
        const auto& x = j["sweep"];
        if (x.contains("schemes")) c.sweep.schemes = schemes_from(x["schemes"]);
        if (x.contains("standard_grids")) c.sweep.standard_grids = x["standard_grids"].get<std::vector<baseline::UniformGrid>>();
        if (x.contains("refined")) c.sweep.refined = schemes_from(x["refined"]);
        if (x.contains("seeds")) c.sweep.seeds = x["seeds"].get<std::vector<std::uint64_t>>();
    }
    c.finalize();
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return doc.get<ExperimentConfig>();
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override must be key.path=value: " + assignment);
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw std::invalid_argument("empty key segment in " + key);
        if (!node->is_object()) *node = json::object();
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

int worker_count() {
    if (const char* env = std::getenv("CSILAB_THREADS"); env && *env) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (*end != '\0' || v < 1) throw std::invalid_argument("CSILAB_THREADS must be a positive integer");
        return static_cast<int>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    const auto workers = static_cast<std::size_t>(std::clamp<long long>(threads, 1, static_cast<long long>(std::max<std::size_t>(n, 1))));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto work = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                next = n;
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

// ------------------------------------------------------------ data

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t sequence_seed(std::uint64_t base, Split split, std::size_t index) {
    return splitmix(splitmix(splitmix(base) + static_cast<std::uint64_t>(split)) + index);
}

std::vector<channel::CfrSequence> generate_split(const ExperimentConfig& cfg, Split split, int threads) {
    const int count = split == Split::Train ? cfg.data.train_sequences : cfg.data.test_sequences;
    std::vector<channel::CfrSequence> out(static_cast<std::size_t>(count));
    parallel_for(out.size(), threads, [&](std::size_t i) {
        out[i] = channel::generate_cfr_sequence(cfg.channel, sequence_seed(cfg.data.seed, split, i));
    });
    return out;
}

std::vector<AngleSequence> dataset_angles(const std::vector<channel::CfrSequence>& seqs, int n_s, int threads) {
    std::vector<AngleSequence> out(seqs.size());
    parallel_for(seqs.size(), threads, [&](std::size_t i) { out[i] = pipeline::sequence_angles(seqs[i], n_s); });
    return out;
}

// ------------------------------------------------------------ models

givens::GivensConfig FeedbackModel::givens() const { return {channel.n_t, channel.n_s, channel.n_c}; }

std::size_t FeedbackModel::feedback_bits() const {
    if (scheme == Scheme::Standard) return baseline::standard_overhead_bits(givens().n_a(), channel.n_c, standard);
    if (!codec) throw std::logic_error("learned scheme without a codec");
    return pipeline::message_bits(scheme, codec->geometry());
}

std::string FeedbackModel::label() const {
    std::string s = pipeline::to_string(scheme);
    if (scheme == Scheme::Standard) s += "(" + std::to_string(standard.b_phi) + "," + std::to_string(standard.b_psi) + ")";
    if (refiner) s += "+refined";
    return s;
}

AngleSequence FeedbackModel::reconstruct_unrefined(const AngleSequence& phi) const {
    if (scheme == Scheme::Standard) return pipeline::run_standard(phi, standard, givens());
    if (!codec) throw std::logic_error("learned scheme without a codec");
    return pipeline::run_session(scheme, phi, *codec, selection).hat;
}

AngleSequence FeedbackModel::reconstruct(const AngleSequence& phi) const {
    AngleSequence hat = reconstruct_unrefined(phi);
    return refiner ? refine::run_refined_sequence(*refiner, hat) : hat;
}

FeedbackModel FeedbackModel::clone() const {
    FeedbackModel m;
    m.scheme = scheme;
    m.channel = channel;
    m.standard = standard;
    m.selection = selection;
    if (codec) m.codec.emplace(codec->clone());
    if (refiner) m.refiner.emplace(refiner->clone());
    return m;
}

namespace {

constexpr char kModelMagic[4] = {'C', 'F', 'M', 'D'};
constexpr std::uint16_t kModelVersion = 1;

void append_tensors(const ad::ParameterSet& params, const std::string& section, json& tensors,
                    std::vector<std::uint8_t>& blob, std::uint64_t& offset) {
    for (const auto& p : params) {
        const auto& v = p->value.values();
        tensors.push_back({{"section", section},
                           {"name", p->name},
                           {"shape", p->value.shape()},
                           {"offset", offset},
                           {"count", v.size()}});
        for (Eigen::Index i = 0; i < v.size(); ++i) put_f32(blob, static_cast<float>(v.data()[i]));
        offset += static_cast<std::uint64_t>(v.size());
    }
}

}  // namespace

std::vector<std::uint8_t> encode_model(const FeedbackModel& m) {
    json manifest = {{"format", "csilab-model"},
                     {"scheme", pipeline::to_string(m.scheme)},
                     {"channel", m.channel},
                     {"standard", m.standard},
                     {"selection", m.selection}};
    json sections = json::object();
    json tensors = json::array();
    std::vector<std::uint8_t> blob;
    std::uint64_t offset = 0;
    if (m.codec) {
        sections["codec"] = {{"geometry", m.codec->geometry()}};
        append_tensors(m.codec->params(), "codec", tensors, blob, offset);
    }
    if (m.refiner) {
        sections["refiner"] = {{"geometry", m.refiner->geometry()}};
        append_tensors(m.refiner->params(), "refiner", tensors, blob, offset);
    }
    manifest["sections"] = sections;
    manifest["tensors"] = tensors;

    const std::string text = manifest.dump();
    std::vector<std::uint8_t> out(kModelMagic, kModelMagic + 4);
    put_u16(out, kModelVersion);
    put_u16(out, 0);
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), blob.begin(), blob.end());
    return out;
}

FeedbackModel decode_model(std::span<const std::uint8_t> bytes, std::ostream* warn) {
    ByteCursor cur(bytes);
    const auto magic = cur.bytes(4);
    if (!std::equal(magic.begin(), magic.end(), kModelMagic)) throw FormatError("bad magic");
    if (cur.u16() != kModelVersion) throw FormatError("version mismatch");
    cur.u16();
    const std::uint64_t manifest_len = cur.u64();
    if (manifest_len > cur.remaining()) throw FormatError("truncated manifest");
    const auto text = cur.bytes(static_cast<std::size_t>(manifest_len));
    json manifest;
    try {
        manifest = json::parse(text.begin(), text.end());
    } catch (const json::parse_error&) {
        throw FormatError("corrupt manifest");
    }
    if (cur.remaining() % 4 != 0) throw FormatError("tensor size mismatch");
    const std::uint64_t floats = cur.remaining() / 4;
    const auto blob = cur.bytes(cur.remaining());
    auto value_at = [&](std::uint64_t i) {
        ByteCursor c(blob.subspan(static_cast<std::size_t>(i * 4), 4));
        return static_cast<double>(c.f32());
    };

    FeedbackModel m;
    try {
        if (manifest.value("format", "") != "csilab-model") throw FormatError("corrupt manifest");
        m.scheme = pipeline::scheme_from_string(manifest.at("scheme").get<std::string>());
        m.channel = manifest.at("channel").get<channel::ChannelConfig>();
        m.standard = manifest.at("standard").get<baseline::UniformGrid>();
        m.selection = manifest.at("selection").get<pipeline::SelectionConfig>();
        const auto& sections = manifest.at("sections");
        for (const auto& [name, _] : sections.items())
            if (name != "codec" && name != "refiner" && warn)
                *warn << "warning: ignoring unknown model section '" << name << "'\n";
        if (sections.contains("codec")) m.codec.emplace(sections["codec"].at("geometry").get<vq::CodecGeometry>());
        if (sections.contains("refiner"))
            m.refiner.emplace(sections["refiner"].at("geometry").get<refine::RefinerGeometry>());

        std::uint64_t covered = 0;
        for (const auto& t : manifest.at("tensors")) {
            const std::string section = t.at("section").get<std::string>();
            const std::string name = t.at("name").get<std::string>();
            const auto shape = t.at("shape").get<std::vector<int>>();
            const auto off = t.at("offset").get<std::uint64_t>();
            const auto count = t.at("count").get<std::uint64_t>();
            std::uint64_t expect = 1;
            for (int s : shape) {
                if (s < 0) throw FormatError("tensor size mismatch");
                expect *= static_cast<std::uint64_t>(s);
            }
            if (count != expect || off > floats || count > floats - off) throw FormatError("tensor size mismatch");
            covered += count;

            ad::ParameterSet* params = nullptr;
            if (section == "codec" && m.codec) params = &m.codec->params();
            else if (section == "refiner" && m.refiner) params = &m.refiner->params();
            if (!params) continue;  // unknown section, already reported
            ad::Parameter* p = params->find(name);
            if (!p) p = &params->add(name, shape);
            if (p->value.shape() != shape) throw FormatError("tensor size mismatch: " + name);
            auto& v = p->value.values();
            for (std::uint64_t i = 0; i < count; ++i) v.data()[i] = value_at(off + i);
        }
        if (covered != floats) throw FormatError("tensor size mismatch");
        if (m.codec) m.codec->rebind();
        if (m.refiner) m.refiner->rebind();
    } catch (const FormatError&) {
        throw;
    } catch (const std::exception& e) {
        throw FormatError(std::string("corrupt manifest: ") + e.what());
    }
    if (m.scheme != Scheme::Standard && !m.codec) throw FormatError("corrupt manifest: learned scheme without codec");
    return m;
}

void save_model(const std::filesystem::path& path, const FeedbackModel& m) {
    const auto bytes = encode_model(m);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

FeedbackModel load_model(const std::filesystem::path& path, std::ostream* warn) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_model(bytes, warn);
}

// ------------------------------------------------------------ orchestration

namespace {

pipeline::TrainConfig with_log(pipeline::TrainConfig c, std::ostream* log, const std::string& tag) {
    if (log)
        c.on_epoch = [log, tag](int e, double loss) { *log << tag << " epoch " << e + 1 << " loss " << loss << '\n' << std::flush; };
    return c;
}

}  // namespace

FeedbackModel train_model(const ExperimentConfig& cfg, const std::vector<AngleSequence>& train, const TrainOptions& opt) {
    FeedbackModel m;
    m.scheme = cfg.scheme;
    m.channel = cfg.channel;
    m.standard = cfg.standard;
    m.selection = cfg.selection;
    if (cfg.scheme != Scheme::Standard) {
        if (opt.pretrained) {
            if (json(opt.pretrained->geometry()) != json(cfg.codec))
                throw std::invalid_argument("pretrained codec geometry differs from the configuration");
            m.codec.emplace(opt.pretrained->clone());
        } else {
            m.codec.emplace(cfg.codec);
            pipeline::train_initial(*m.codec, train, with_log(cfg.train, opt.log, "initial"));
        }
        const auto ad = with_log(cfg.ad_train, opt.log, pipeline::to_string(cfg.scheme));
        switch (cfg.scheme) {
            case Scheme::AdUnified: pipeline::train_unified(*m.codec, train, cfg.selection, ad, false); break;
            case Scheme::AdNaive: pipeline::train_unified(*m.codec, train, cfg.selection, ad, true); break;
            case Scheme::AdParallel: pipeline::train_parallel(*m.codec, train, cfg.selection, ad); break;
            default: break;
        }
        m.codec->round_to_storage();
    }
    if (cfg.refined) attach_refiner(m, cfg, train, opt.log);
    return m;
}

void attach_refiner(FeedbackModel& m, const ExperimentConfig& cfg, const std::vector<AngleSequence>& train,
                    std::ostream* log) {
    m.refiner.reset();
    std::vector<AngleSequence> hat(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) hat[i] = m.reconstruct_unrefined(train[i]);
    refine::RefinerGeometry geo;
    geo.n_a = m.givens().n_a();
    geo.n_c = m.channel.n_c;
    geo.window = cfg.refiner.window;
    geo.hidden = cfg.refiner.hidden;
    refine::RefinerModel r(geo);
    std::mt19937_64 rng(cfg.refiner.train.seed);
    r.init(rng);
    auto tc = cfg.refiner.train;
    if (log) {
        const std::string tag = m.label() + " refiner";
        tc.on_epoch = [log, tag](int e, bool recursive, double loss) {
            *log << tag << (recursive ? " recursive" : " pretrain") << " epoch " << e + 1 << " loss " << loss << '\n'
                 << std::flush;
        };
    }
    refine::train_refiner(r, hat, train, tc);
    r.round_to_storage();
    m.refiner.emplace(std::move(r));
}

namespace {

struct SequenceScore {
    double nmse_sum = 0;
    std::size_t samples = 0;
    eval::EvmTally evm;
};

}  // namespace

Metrics evaluate_model(const FeedbackModel& m, const std::vector<channel::CfrSequence>& test, const EvalConfig& cfg,
                       int threads) {
    if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
    const auto gc = m.givens();
    std::vector<SequenceScore> scores(test.size());
    parallel_for(test.size(), threads, [&](std::size_t i) {
        const auto& seq = test[i];
        if (seq.n_t() != m.channel.n_t || seq.n_c() != m.channel.n_c || seq.n_r() != m.channel.n_r)
            throw std::invalid_argument("evaluate: dataset geometry differs from the model");
        const AngleSequence phi = pipeline::sequence_angles(seq, m.channel.n_s);
        const AngleSequence hat = m.reconstruct(phi);
        std::mt19937_64 rng(sequence_seed(cfg.seed, Split::Test, i));
        eval::EvmOptions opt;
        opt.symbols = cfg.evm_symbols;
        opt.snr_db = cfg.snr_db;
        auto& s = scores[i];
        for (int t = 0; t < seq.t_len(); ++t) {
            const auto vbar = channel::snapshot_targets(seq, t, m.channel.n_s);
            std::vector<CMatrix> v, h;
            for (int k = 0; k < seq.n_c(); ++k) {
                v.push_back(givens::canonicalize(vbar[static_cast<std::size_t>(k)]).v);
                h.push_back(seq.matrix(t, k));
            }
            const auto v_hat = givens::reconstruct_target(hat[static_cast<std::size_t>(t)], gc);
            s.nmse_sum += eval::nmse_ratio(v, v_hat);
            ++s.samples;
            s.evm += eval::simulate_evm(h, v_hat, opt, rng);
        }
    });
    double nmse_sum = 0;
    std::size_t n = 0;
    eval::EvmTally evm;
    for (const auto& s : scores) {
        nmse_sum += s.nmse_sum;
        n += s.samples;
        evm += s.evm;
    }
    Metrics out;
    out.nmse_db = eval::to_db(nmse_sum / static_cast<double>(n), eval::kNmseFloorDb);
    out.evm_db = evm.db();
    out.feedback_bits = static_cast<double>(m.feedback_bits());
    out.samples = n;
    return out;
}

eval::ReportRow report_row(const std::string& label, const Metrics& metrics, const EvalConfig& cfg) {
    return eval::make_row(label, metrics.feedback_bits, metrics.nmse_db, metrics.evm_db, cfg.phy, cfg.overhead);
}

std::vector<SweepEntry> run_sweep(const ExperimentConfig& base, int threads, std::ostream* log) {
    std::vector<SweepEntry> out;
    auto refined_for = [&](Scheme s) {
        return std::find(base.sweep.refined.begin(), base.sweep.refined.end(), s) != base.sweep.refined.end();
    };
    for (const std::uint64_t seed : base.sweep.seeds) {
        ExperimentConfig cfg = base;
        cfg.data.seed = seed;
        cfg.train.seed = seed;
        cfg.ad_train.seed = seed;
        cfg.refiner.train.seed = seed;
        cfg.eval.seed = seed;
        cfg.refined = false;
        if (log) *log << "seed " << seed << ": generating data\n" << std::flush;
        const auto train_seqs = generate_split(cfg, Split::Train, threads);
        const auto test_seqs = generate_split(cfg, Split::Test, threads);
        const auto train = dataset_angles(train_seqs, cfg.channel.n_s, threads);

        auto emit = [&](FeedbackModel& m) {
            const auto metrics = evaluate_model(m, test_seqs, cfg.eval, threads);
            out.push_back({seed, report_row(m.label(), metrics, cfg.eval)});
            if (log)
                *log << "seed " << seed << ": " << m.label() << " bits " << metrics.feedback_bits << " nmse "
                     << metrics.nmse_db << " dB evm " << metrics.evm_db << " dB\n"
                     << std::flush;
            if (refined_for(m.scheme)) {
                FeedbackModel r = m.clone();
                attach_refiner(r, cfg, train, log);
                const auto rm = evaluate_model(r, test_seqs, cfg.eval, threads);
                out.push_back({seed, report_row(r.label(), rm, cfg.eval)});
                if (log)
                    *log << "seed " << seed << ": " << r.label() << " nmse " << rm.nmse_db << " dB evm " << rm.evm_db
                         << " dB\n"
                         << std::flush;
            }
        };

        std::optional<FeedbackModel> initial;
        for (const Scheme s : base.sweep.schemes) {
            cfg.scheme = s;
            if (s == Scheme::Standard) {
                for (const auto& grid : base.sweep.standard_grids) {
                    cfg.standard = grid;
                    FeedbackModel m = train_model(cfg, train);
                    emit(m);
                }
                continue;
            }
            if (!initial) {
                ExperimentConfig ic = cfg;
                ic.scheme = Scheme::Initial;
                initial.emplace(train_model(ic, train, {nullptr, log}));
            }
            if (s == Scheme::Initial) {
                FeedbackModel m = initial->clone();
                emit(m);
            } else {
                FeedbackModel m = train_model(cfg, train, {&*initial->codec, log});
                emit(m);
            }
        }
    }
    return out;
}

std::vector<eval::ReportRow> average_rows(const std::vector<eval::ReportRow>& rows, const EvalConfig& cfg) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<const eval::ReportRow*>> groups;
    for (const auto& r : rows) {
        if (!groups.count(r.scheme)) order.push_back(r.scheme);
        groups[r.scheme].push_back(&r);
    }
    std::vector<eval::ReportRow> out;
    for (const auto& label : order) {
        const auto& g = groups[label];
        double bits = 0, nmse = 0, evm = 0;
        for (const auto* r : g) {
            bits += r->feedback_bits;
            nmse += r->nmse_db;
            evm += r->evm_db;
        }
        const double n = static_cast<double>(g.size());
        out.push_back(eval::make_row(label, bits / n, nmse / n, evm / n, cfg.phy, cfg.overhead));
    }
    return out;
}

}  // namespace csilab::harness
