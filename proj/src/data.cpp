#include "mvtn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "bytes.hpp"

namespace mvtn {

namespace {

using detail::ByteReader;
using detail::ByteWriter;

constexpr char kFeatureMagic[4] = {'M', 'V', 'T', 'F'};
constexpr std::uint32_t kFeatureVersion = 1;

static_assert(sizeof(float) == 4 && sizeof(double) == 8);

}  // namespace

void write_features(const FeatureSequence& seq, const std::filesystem::path& path) {
    if (seq.frames.rank() != 2)
        throw ContractError("feature frames must be T x k, got " + shape_str(seq.frames.shape));
    if (!all_finite(seq.frames)) throw ContractError("refusing to write non-finite features");
    if (seq.label < 0) throw ContractError("negative label");

    ByteWriter w(path);
    w.raw(kFeatureMagic, 4);
    w.u32(kFeatureVersion);
    w.u32(static_cast<std::uint32_t>(seq.frames.shape[0]));
    w.u32(static_cast<std::uint32_t>(seq.frames.shape[1]));
    w.u32(static_cast<std::uint32_t>(seq.label));
    w.str(seq.modality);
    w.str(seq.sample_id);
    for (double v : seq.frames.data) w.f32(static_cast<float>(v));
}

FeatureSequence read_features(const std::filesystem::path& path) {
    ByteReader r(path);
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kFeatureMagic, 4) != 0) throw FormatError("bad magic, not an MVTF file", 0);
    std::uint32_t version = r.u32();
    if (version != kFeatureVersion)
        throw FormatError("unsupported MVTF version " + std::to_string(version), 4);
    std::uint32_t t = r.u32();
    std::uint32_t k = r.u32();
    if (t == 0 || k == 0 || static_cast<std::uint64_t>(t) * k > (1u << 28))
        throw FormatError("implausible dimensions " + std::to_string(t) + "x" + std::to_string(k), 8);

    FeatureSequence seq;
    seq.label = static_cast<int>(r.u32());
    seq.modality = r.str();
    seq.sample_id = r.str();
    seq.frames = Tensor({static_cast<int>(t), static_cast<int>(k)});
    for (double& v : seq.frames.data) v = static_cast<double>(r.f32());
    return seq;
}

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    nlohmann::json j;
    j["num_classes"] = m.num_classes;
    j["feature_dim"] = m.feature_dim;
    j["seq_len"] = m.seq_len;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : m.entries)
        j["entries"].push_back({{"path", e.path},
                                {"label", e.label},
                                {"modality", e.modality},
                                {"sample_id", e.sample_id}});
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest is not valid JSON: ") + e.what(), 0);
    }
    DatasetManifest m;
    try {
        m.num_classes = j.at("num_classes").get<int>();
        m.feature_dim = j.at("feature_dim").get<int>();
        m.seq_len = j.at("seq_len").get<int>();
        for (const auto& e : j.at("entries")) {
            m.entries.push_back({e.at("path").get<std::string>(), e.at("label").get<int>(),
                                 e.at("modality").get<std::string>(),
                                 e.at("sample_id").get<std::string>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest missing fields: ") + e.what(), 0);
    }
    if (m.num_classes < 2) throw ConfigError("manifest num_classes must be >= 2");
    if (m.feature_dim < 1 || m.seq_len < 1) throw ConfigError("manifest dims must be positive");

    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& e : m.entries) {
        if (e.label < 0 || e.label >= m.num_classes)
            throw ContractError("manifest label " + std::to_string(e.label) + " out of range for " +
                                std::to_string(m.num_classes) + " classes");
        if (e.modality.empty()) throw ContractError("empty modality tag for " + e.sample_id);
        if (!seen.insert({e.modality, e.sample_id}).second)
            throw ContractError("duplicate sample " + e.sample_id + " for modality " + e.modality);
    }
    return m;
}

std::vector<FeatureSequence> load_dataset(const DatasetManifest& m,
                                          const std::filesystem::path& manifest_path) {
    std::filesystem::path base = manifest_path.parent_path();
    std::vector<FeatureSequence> out;
    out.reserve(m.entries.size());
    for (const auto& e : m.entries) {
        FeatureSequence seq = read_features(base / e.path);
        if (seq.frames.shape[0] != m.seq_len || seq.frames.shape[1] != m.feature_dim)
            throw ConfigError("feature file " + e.path + " is " + shape_str(seq.frames.shape) +
                              ", manifest wants (" + std::to_string(m.seq_len) + "," +
                              std::to_string(m.feature_dim) + ")");
        if (seq.label != e.label)
            throw ContractError("label mismatch for " + e.sample_id + ": file says " +
                                std::to_string(seq.label) + ", manifest says " +
                                std::to_string(e.label));
        out.push_back(std::move(seq));
    }
    return out;
}

std::vector<FeatureSequence> synth_dataset(const SynthSpec& spec) {
    if (spec.num_classes < 2 || spec.samples_per_class < 1 || spec.seq_len < 1 ||
        spec.feature_dim < 1)
        throw ConfigError("synth spec dimensions must be positive (>=2 classes)");
    if (spec.class_separation <= 0.0) throw ConfigError("class_separation must be > 0");
    if (spec.noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
    if (spec.modality.empty()) throw ConfigError("modality tag must be nonempty");

    std::mt19937_64 rng(spec.seed);
    int T = spec.seq_len, k = spec.feature_dim;

    // fixed per-class trajectory: frequency c+1 sinusoid through a random
    // two-vector map, scaled by the separation
    std::vector<Tensor> base;
    base.reserve(static_cast<std::size_t>(spec.num_classes));
    for (int c = 0; c < spec.num_classes; ++c) {
        Tensor u = Tensor::normal({k}, 0.0, 1.0, rng);
        Tensor v = Tensor::normal({k}, 0.0, 1.0, rng);
        double norm_u = 0.0, norm_v = 0.0;
        for (int i = 0; i < k; ++i) {
            norm_u += u.at(i) * u.at(i);
            norm_v += v.at(i) * v.at(i);
        }
        norm_u = std::sqrt(norm_u);
        norm_v = std::sqrt(norm_v);
        Tensor traj({T, k});
        double freq = c + 1;
        for (int t = 0; t < T; ++t) {
            double phase = 2.0 * std::numbers::pi * freq * t / T;
            double s = std::sin(phase), co = std::cos(phase);
            for (int i = 0; i < k; ++i)
                traj.at(t, i) = spec.class_separation * (s * u.at(i) / norm_u + co * v.at(i) / norm_v);
        }
        base.push_back(std::move(traj));
    }

    std::vector<FeatureSequence> out;
    out.reserve(static_cast<std::size_t>(spec.num_classes) * spec.samples_per_class);
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (int c = 0; c < spec.num_classes; ++c) {
        for (int s = 0; s < spec.samples_per_class; ++s) {
            FeatureSequence seq;
            seq.frames = base[static_cast<std::size_t>(c)];
            if (spec.noise_sigma > 0.0)
                for (double& v : seq.frames.data) v += noise(rng);
            seq.label = c;
            seq.modality = spec.modality;
            std::ostringstream id;
            id << "c" << c << "_s";
            id.fill('0');
            id.width(3);
            id << s;
            seq.sample_id = id.str();
            out.push_back(std::move(seq));
        }
    }
    return out;
}

std::vector<Batch> batches(const std::vector<FeatureSequence>& dataset, int batch_size,
                           std::uint64_t seed, bool shuffle) {
    if (dataset.empty()) throw ContractError("cannot batch an empty dataset");
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
    int T = dataset[0].frames.shape[0], k = dataset[0].frames.shape[1];
    for (const auto& s : dataset)
        if (s.frames.shape[0] != T || s.frames.shape[1] != k)
            throw ContractError("dataset mixes frame shapes: " + shape_str(s.frames.shape) +
                                " vs (" + std::to_string(T) + "," + std::to_string(k) + ")");

    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (shuffle) {
        std::mt19937_64 rng(seed);
        std::shuffle(order.begin(), order.end(), rng);
    }

    std::vector<Batch> out;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
        std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
        Batch b;
        b.features = Tensor({static_cast<int>(end - start), T, k});
        for (std::size_t i = start; i < end; ++i) {
            const FeatureSequence& s = dataset[order[i]];
            std::copy(s.frames.data.begin(), s.frames.data.end(),
                      b.features.data.begin() +
                          static_cast<std::ptrdiff_t>((i - start) * static_cast<std::size_t>(T) * k));
            b.labels.push_back(s.label);
            b.sample_ids.push_back(s.sample_id);
        }
        out.push_back(std::move(b));
    }
    return out;
}

void write_probs(const std::vector<SampleProbs>& probs, const std::filesystem::path& path) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& p : probs)
        j.push_back({{"sample_id", p.sample_id}, {"modality", p.modality}, {"probs", p.probs}});
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
}

std::vector<SampleProbs> read_probs(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("probability file is not valid JSON: ") + e.what(), 0);
    }
    std::vector<SampleProbs> out;
    try {
        for (const auto& e : j)
            out.push_back({e.at("sample_id").get<std::string>(),
                           e.at("modality").get<std::string>(),
                           e.at("probs").get<std::vector<double>>()});
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("probability file missing fields: ") + e.what(), 0);
    }
    return out;
}

}  // namespace mvtn
