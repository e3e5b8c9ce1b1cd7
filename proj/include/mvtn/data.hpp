#ifndef MVTN_DATA_HPP
#define MVTN_DATA_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mvtn/tensor.hpp"

namespace mvtn {

// One gesture sample: per-frame feature vectors plus label and modality tag.
struct FeatureSequence {
    Tensor frames;  // T x k
    int label = 0;
    std::string modality;
    std::string sample_id;
};

// Binary "MVTF" feature file: header + float32 payload. Values are quantized
// to 32 bits on disk and read back as doubles.
void write_features(const FeatureSequence& seq, const std::filesystem::path& path);
FeatureSequence read_features(const std::filesystem::path& path);

struct ManifestEntry {
    std::string path;  // relative to the manifest file
    int label = 0;
    std::string modality;
    std::string sample_id;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    int num_classes = 0;
    int feature_dim = 0;
    int seq_len = 0;
};

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

// Reads every referenced feature file, checking dims/labels against the
// manifest header. Paths resolve relative to the manifest location.
std::vector<FeatureSequence> load_dataset(const DatasetManifest& m,
                                          const std::filesystem::path& manifest_path);

// Desk-scale stand-in for a gesture corpus: per class, a fixed smooth
// trajectory (class-frequency sinusoid pushed through a seeded random map)
// plus i.i.d. Gaussian noise.
struct SynthSpec {
    int num_classes = 4;
    int samples_per_class = 25;
    int seq_len = 40;
    int feature_dim = 512;
    double class_separation = 1.0;
    double noise_sigma = 0.1;
    std::uint64_t seed = 0;
    std::string modality = "synth";
};

std::vector<FeatureSequence> synth_dataset(const SynthSpec& spec);

struct Batch {
    Tensor features;  // B x T x k
    std::vector<int> labels;
    std::vector<std::string> sample_ids;
};

// Partitions the dataset into batches; the final short batch is kept. With
// shuffle, the order is a permutation drawn from the seed.
std::vector<Batch> batches(const std::vector<FeatureSequence>& dataset, int batch_size,
                           std::uint64_t seed, bool shuffle);

// Per-sample class probabilities, the interchange format for late fusion.
struct SampleProbs {
    std::string sample_id;
    std::string modality;
    std::vector<double> probs;
};

void write_probs(const std::vector<SampleProbs>& probs, const std::filesystem::path& path);
std::vector<SampleProbs> read_probs(const std::filesystem::path& path);

}  // namespace mvtn

#endif  // MVTN_DATA_HPP
