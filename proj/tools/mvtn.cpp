// Command-line front end: synthesize data, train, evaluate, fuse modalities,
// count parameters/MACs, run gradient checks.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mvtn/cost.hpp"
#include "mvtn/data.hpp"
#include "mvtn/fusion.hpp"
#include "mvtn/model.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

// Flat union of model + training settings and paths. Unknown keys are
// rejected so a typo in a hyperparameter cannot silently fall back to a
// default.
struct RunConfig {
    mvtn::ModelConfig model;
    mvtn::TrainConfig train;
    bool num_classes_set = false;
    bool feature_dim_set = false;
    bool seq_len_set = false;
    std::string manifest;
    std::string checkpoint;
    std::string out_dir = ".";
};

const std::set<std::string> kKnownKeys = {
    "d_model",      "stages",     "heads",           "ffn_mult",        "schedule",
    "feature_dim",  "seq_len",    "num_classes",     "use_embeddings",  "dropout",
    "seed",         "lr",         "batch_size",      "epochs",          "lr_decay_epochs",
    "lr_decay_factor", "manifest", "checkpoint",     "out_dir"};

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw mvtn::IoError("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw mvtn::FormatError(std::string("config is not valid JSON: ") + e.what(), 0);
    }
    if (!j.is_object()) throw mvtn::ConfigError("config must be a JSON object");

    std::vector<std::string> unknown;
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!kKnownKeys.count(it.key())) unknown.push_back(it.key());
    if (!unknown.empty()) {
        std::string msg = "unknown config keys:";
        for (const auto& k : unknown) msg += " " + k;
        throw mvtn::ConfigError(msg);
    }

    RunConfig rc;
    try {
        if (j.contains("d_model")) rc.model.d_model = j["d_model"].get<int>();
        if (j.contains("stages")) rc.model.stages = j["stages"].get<int>();
        if (j.contains("heads")) rc.model.heads = j["heads"].get<int>();
        if (j.contains("ffn_mult")) rc.model.ffn_mult = j["ffn_mult"].get<int>();
        if (j.contains("schedule"))
            rc.model.schedule_kind = mvtn::schedule_kind_from_string(j["schedule"].get<std::string>());
        if (j.contains("feature_dim")) {
            rc.model.feature_dim = j["feature_dim"].get<int>();
            rc.feature_dim_set = true;
        }
        if (j.contains("seq_len")) {
            rc.model.seq_len = j["seq_len"].get<int>();
            rc.seq_len_set = true;
        }
        if (j.contains("num_classes")) {
            rc.model.num_classes = j["num_classes"].get<int>();
            rc.num_classes_set = true;
        }
        if (j.contains("use_embeddings")) rc.model.use_embeddings = j["use_embeddings"].get<bool>();
        if (j.contains("dropout")) rc.model.dropout = j["dropout"].get<double>();
        if (j.contains("seed")) {
            rc.model.seed = j["seed"].get<std::uint64_t>();
            rc.train.seed = rc.model.seed;
        }
        if (j.contains("lr")) rc.train.lr = j["lr"].get<double>();
        if (j.contains("batch_size")) rc.train.batch_size = j["batch_size"].get<int>();
        if (j.contains("epochs")) rc.train.epochs = j["epochs"].get<int>();
        if (j.contains("lr_decay_epochs"))
            rc.train.lr_decay_epochs = j["lr_decay_epochs"].get<std::vector<int>>();
        if (j.contains("lr_decay_factor")) rc.train.lr_decay_factor = j["lr_decay_factor"].get<double>();
        if (j.contains("manifest")) rc.manifest = j["manifest"].get<std::string>();
        if (j.contains("checkpoint")) rc.checkpoint = j["checkpoint"].get<std::string>();
        if (j.contains("out_dir")) rc.out_dir = j["out_dir"].get<std::string>();
    } catch (const json::exception& e) {
        throw mvtn::ConfigError(std::string("config field has the wrong type: ") + e.what());
    }
    return rc;
}

void apply_overrides(RunConfig& rc, const std::optional<std::uint64_t>& seed,
                     const std::optional<std::string>& schedule) {
    if (seed) {
        rc.model.seed = *seed;
        rc.train.seed = *seed;
    }
    if (schedule) rc.model.schedule_kind = mvtn::schedule_kind_from_string(*schedule);
}

// Fills dims from the manifest, or cross-checks them when the config pinned
// them explicitly.
void reconcile_with_manifest(RunConfig& rc, const mvtn::DatasetManifest& m) {
    auto fit = [](bool was_set, int& field, int manifest_value, const char* name) {
        if (was_set && field != manifest_value)
            throw mvtn::ConfigError(std::string("config ") + name + "=" + std::to_string(field) +
                                    " disagrees with manifest " + std::to_string(manifest_value));
        field = manifest_value;
    };
    fit(rc.num_classes_set, rc.model.num_classes, m.num_classes, "num_classes");
    fit(rc.feature_dim_set, rc.model.feature_dim, m.feature_dim, "feature_dim");
    fit(rc.seq_len_set, rc.model.seq_len, m.seq_len, "seq_len");
}

double eval_accuracy(const std::vector<mvtn::SampleProbs>& probs,
                     const std::map<std::string, int>& labels) {
    std::int64_t correct = 0;
    for (const auto& p : probs) {
        int best = 0;
        for (std::size_t c = 1; c < p.probs.size(); ++c)
            if (p.probs[c] > p.probs[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
        if (best == labels.at(p.sample_id)) ++correct;
    }
    return probs.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(probs.size());
}

int cmd_synth(const mvtn::SynthSpec& spec, const std::string& out_dir) {
    auto dataset = mvtn::synth_dataset(spec);

    fs::path dir(out_dir);
    fs::create_directories(dir / "features");
    mvtn::DatasetManifest manifest;
    manifest.num_classes = spec.num_classes;
    manifest.feature_dim = spec.feature_dim;
    manifest.seq_len = spec.seq_len;
    for (const auto& seq : dataset) {
        std::string rel = "features/" + seq.sample_id + "_" + seq.modality + ".mvtf";
        mvtn::write_features(seq, dir / rel);
        manifest.entries.push_back({rel, seq.label, seq.modality, seq.sample_id});
    }
    mvtn::write_manifest(manifest, dir / "manifest.json");

    std::cout << "wrote " << dataset.size() << " feature files (" << spec.num_classes
              << " classes x " << spec.samples_per_class << " samples, T=" << spec.seq_len
              << ", k=" << spec.feature_dim << ") under " << dir.string() << "\n";
    std::cout << "manifest: " << (dir / "manifest.json").string() << "\n";
    return kExitOk;
}

int cmd_train(RunConfig rc) {
    if (rc.manifest.empty()) throw mvtn::ConfigError("train needs a manifest path");
    mvtn::DatasetManifest manifest = mvtn::read_manifest(rc.manifest);
    reconcile_with_manifest(rc, manifest);
    rc.model.validate();
    auto dataset = mvtn::load_dataset(manifest, rc.manifest);
    if (dataset.empty()) throw mvtn::ContractError("manifest lists no samples");

    fs::create_directories(rc.out_dir);
    fs::path ckpt = rc.checkpoint.empty() ? fs::path(rc.out_dir) / "model.ckpt"
                                          : fs::path(rc.checkpoint);

    mvtn::ModelParams params = mvtn::ModelParams::init(rc.model);
    mvtn::TrainLog log = mvtn::train(params, rc.model, rc.train, dataset);

    std::ofstream log_out(fs::path(rc.out_dir) / "train_log.jsonl");
    if (!log_out) throw mvtn::IoError("cannot write training log in " + rc.out_dir);
    for (const auto& e : log) {
        json line = {{"epoch", e.epoch}, {"loss", e.loss}, {"accuracy", e.accuracy}, {"lr", e.lr}};
        log_out << line.dump() << "\n";
    }
    mvtn::save_checkpoint(params, rc.model, ckpt);

    const auto& last = log.back();
    std::cout << "trained " << rc.train.epochs << " epochs on " << dataset.size()
              << " samples; final loss " << last.loss << ", accuracy " << last.accuracy << "\n";
    std::cout << "checkpoint: " << ckpt.string() << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest_path,
             const std::string& out_file) {
    auto [params, config] = mvtn::load_checkpoint(checkpoint);
    mvtn::DatasetManifest manifest = mvtn::read_manifest(manifest_path);
    if (manifest.feature_dim != config.feature_dim || manifest.seq_len != config.seq_len ||
        manifest.num_classes != config.num_classes)
        throw mvtn::ConfigError("checkpoint dims (k=" + std::to_string(config.feature_dim) +
                                ",T=" + std::to_string(config.seq_len) +
                                ",n=" + std::to_string(config.num_classes) +
                                ") do not match manifest (k=" + std::to_string(manifest.feature_dim) +
                                ",T=" + std::to_string(manifest.seq_len) +
                                ",n=" + std::to_string(manifest.num_classes) + ")");
    auto dataset = mvtn::load_dataset(manifest, manifest_path);
    if (dataset.empty()) throw mvtn::ContractError("manifest lists no samples");

    std::vector<mvtn::SampleProbs> probs;
    std::map<std::string, int> labels;
    std::int64_t correct = 0;
    for (const auto& batch : mvtn::batches(dataset, 8, 0, false)) {
        mvtn::Tensor p = mvtn::predict_proba(params, config, batch.features);
        for (std::size_t b = 0; b < batch.labels.size(); ++b) {
            mvtn::SampleProbs sp;
            sp.sample_id = batch.sample_ids[b];
            sp.modality = dataset[0].modality;
            for (int c = 0; c < config.num_classes; ++c)
                sp.probs.push_back(p.at(static_cast<int>(b), c));
            int best = 0;
            for (int c = 1; c < config.num_classes; ++c)
                if (sp.probs[static_cast<std::size_t>(c)] > sp.probs[static_cast<std::size_t>(best)])
                    best = c;
            if (best == batch.labels[b]) ++correct;
            labels[sp.sample_id] = batch.labels[b];
            probs.push_back(std::move(sp));
        }
    }
    // modality per entry, not per dataset head, when mixed
    {
        std::map<std::string, std::string> mod_by_id;
        for (const auto& s : dataset) mod_by_id[s.sample_id] = s.modality;
        for (auto& sp : probs) sp.modality = mod_by_id[sp.sample_id];
    }
    mvtn::write_probs(probs, out_file);

    double acc = static_cast<double>(correct) / static_cast<double>(probs.size());
    std::cout << "accuracy " << acc << " over " << probs.size() << " samples\n";
    std::cout << "probabilities: " << out_file << "\n";
    return kExitOk;
}

int cmd_fuse(const std::vector<std::string>& prob_files, const std::string& manifest_path) {
    mvtn::DatasetManifest manifest = mvtn::read_manifest(manifest_path);
    std::map<std::string, int> label_by_id;
    for (const auto& e : manifest.entries) {
        auto it = label_by_id.find(e.sample_id);
        if (it != label_by_id.end() && it->second != e.label)
            throw mvtn::ContractError("sample " + e.sample_id + " has conflicting labels");
        label_by_id[e.sample_id] = e.label;
    }

    std::vector<std::vector<mvtn::SampleProbs>> files;
    for (const auto& f : prob_files) files.push_back(mvtn::read_probs(f));

    // every file must cover exactly the manifest's sample ids
    std::vector<std::string> ids;
    for (const auto& [id, label] : label_by_id) ids.push_back(id);
    if (ids.empty()) throw mvtn::ContractError("manifest lists no samples");
    for (std::size_t fi = 0; fi < files.size(); ++fi) {
        std::set<std::string> have;
        for (const auto& sp : files[fi]) have.insert(sp.sample_id);
        std::string missing;
        for (const auto& id : ids)
            if (!have.count(id)) missing += " " + id;
        if (!missing.empty())
            throw mvtn::ContractError("file " + prob_files[fi] + " is missing samples:" + missing);
        if (have.size() != files[fi].size())
            throw mvtn::ContractError("file " + prob_files[fi] + " repeats sample ids");
        if (files[fi].size() != ids.size())
            throw mvtn::ContractError("file " + prob_files[fi] + " has extra samples");
    }

    std::vector<int> labels;
    std::vector<std::vector<mvtn::ModalityPrediction>> per_sample;
    for (const auto& id : ids) {
        labels.push_back(label_by_id[id]);
        per_sample.emplace_back();
    }
    for (auto& file : files) {
        std::map<std::string, mvtn::SampleProbs*> by_id;
        for (auto& sp : file) by_id[sp.sample_id] = &sp;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            mvtn::SampleProbs* sp = by_id[ids[i]];
            per_sample[i].push_back({sp->modality, {sp->probs}});
        }
    }

    for (std::size_t fi = 0; fi < files.size(); ++fi) {
        std::map<std::string, int> lbl = label_by_id;
        double acc = eval_accuracy(files[fi], lbl);
        std::cout << "modality " << files[fi][0].modality << " (" << prob_files[fi]
                  << "): accuracy " << acc << "\n";
    }
    double fused = mvtn::fuse_accuracy(per_sample, labels);
    std::cout << "fused (" << files.size() << " modalities): accuracy " << fused << "\n";
    return kExitOk;
}

int cmd_count(const RunConfig& rc, const std::string& json_out) {
    json all = json::array();
    for (auto kind : {mvtn::ScheduleKind::PDim, mvtn::ScheduleKind::PDimRev,
                      mvtn::ScheduleKind::PDimPlus, mvtn::ScheduleKind::Columnar}) {
        mvtn::ModelConfig c = rc.model;
        c.schedule_kind = kind;
        try {
            mvtn::CostReport r = mvtn::cost_report(c);
            std::cout << mvtn::cost_report_table(r, c) << "\n";
            all.push_back(json::parse(mvtn::cost_report_json(r, c)));
        } catch (const mvtn::ConfigError& e) {
            std::cout << "schedule " << mvtn::to_string(kind) << ": not applicable (" << e.what()
                      << ")\n\n";
        }
    }
    if (!json_out.empty()) {
        std::ofstream out(json_out);
        if (!out) throw mvtn::IoError("cannot write " + json_out);
        out << all.dump(2) << "\n";
        std::cout << "report: " << json_out << "\n";
    }
    return kExitOk;
}

int cmd_gradcheck(const RunConfig& rc, int batch) {
    rc.model.validate();
    mvtn::GradCheckResult res = mvtn::model_grad_check(rc.model, batch, rc.model.seed);
    std::cout << "max relative error " << res.max_rel_err << " (worst: " << res.worst << ")\n";
    if (res.max_rel_err >= 1e-4) {
        std::cout << "FAIL: gradient check exceeded 1e-4\n";
        return kExitValidation;
    }
    std::cout << "PASS: gradients agree with central differences\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multiscale video transformer: pyramid attention schedules over a desk-scale "
                 "trainable encoder"};
    app.require_subcommand(1);

    std::optional<std::uint64_t> seed_override;
    std::optional<std::string> schedule_override;
    app.add_option("--seed", seed_override, "Override every seed in the config");
    app.add_option("--schedule", schedule_override,
                   "Override the schedule kind (p_dim, p_dim_rev, p_dim_plus, columnar)")
        ->check(CLI::IsMember({"p_dim", "p_dim_rev", "p_dim_plus", "columnar"}));

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic gesture dataset");
    synth->fallthrough();
    mvtn::SynthSpec spec;
    std::string synth_out = "data";
    synth->add_option("--classes", spec.num_classes, "Number of classes");
    synth->add_option("--samples-per-class", spec.samples_per_class, "Samples per class");
    synth->add_option("--seq-len", spec.seq_len, "Frames per sample");
    synth->add_option("--feature-dim", spec.feature_dim, "Per-frame feature width");
    synth->add_option("--separation", spec.class_separation, "Class separation amplitude");
    synth->add_option("--sigma", spec.noise_sigma, "Gaussian noise sigma");
    synth->add_option("--modality", spec.modality, "Modality tag stamped on every sample");
    synth->add_option("--synth-seed", spec.seed, "Generator seed");
    synth->add_option("--out", synth_out, "Output directory");

    // train
    auto* train = app.add_subcommand("train", "Train a model from a manifest");
    train->fallthrough();
    std::string train_config;
    train->add_option("--config", train_config, "RunConfig JSON path")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
    eval->fallthrough();
    std::string eval_ckpt, eval_manifest, eval_out = "probs.json";
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint path")->required();
    eval->add_option("--manifest", eval_manifest, "Manifest path")->required();
    eval->add_option("--out", eval_out, "Probability file to write");

    // fuse
    auto* fuse = app.add_subcommand("fuse", "Late-fuse probability files");
    fuse->fallthrough();
    std::vector<std::string> fuse_files;
    std::string fuse_manifest;
    fuse->add_option("files", fuse_files, "Probability files")->required()->expected(-1);
    fuse->add_option("--manifest", fuse_manifest, "Manifest with ground-truth labels")->required();

    // count
    auto* count = app.add_subcommand("count", "Print the parameter/MAC table for all schedules");
    count->fallthrough();
    std::string count_config, count_json;
    count->add_option("--config", count_config, "RunConfig JSON path");
    count->add_option("--out", count_json, "Also write the reports as JSON");

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the full model");
    gradcheck->fallthrough();
    std::string gc_config;
    int gc_batch = 2;
    gradcheck->add_option("--config", gc_config, "RunConfig JSON path");
    gradcheck->add_option("--batch", gc_batch, "Batch size for the probe");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (*synth) {
            if (seed_override) spec.seed = *seed_override;
            return cmd_synth(spec, synth_out);
        }
        if (*train) {
            RunConfig rc = load_run_config(train_config);
            apply_overrides(rc, seed_override, schedule_override);
            return cmd_train(std::move(rc));
        }
        if (*eval) return cmd_eval(eval_ckpt, eval_manifest, eval_out);
        if (*fuse) return cmd_fuse(fuse_files, fuse_manifest);
        if (*count) {
            RunConfig rc;
            if (!count_config.empty()) rc = load_run_config(count_config);
            if (!rc.num_classes_set) rc.model.num_classes = 25;
            apply_overrides(rc, seed_override, schedule_override);
            return cmd_count(rc, count_json);
        }
        if (*gradcheck) {
            RunConfig rc;
            if (!gc_config.empty()) {
                rc = load_run_config(gc_config);
            } else {
                // small defaults so the finite-difference sweep stays quick
                rc.model.d_model = 16;
                rc.model.stages = 2;
                rc.model.heads = 2;
                rc.model.feature_dim = 8;
                rc.model.seq_len = 3;
                rc.model.num_classes = 3;
            }
            if (!rc.num_classes_set && !gc_config.empty()) rc.model.num_classes = 25;
            apply_overrides(rc, seed_override, schedule_override);
            return cmd_gradcheck(rc, gc_batch);
        }
    } catch (const mvtn::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const mvtn::ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const mvtn::ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const mvtn::IndexError& e) {
        std::cerr << "index error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const mvtn::FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const mvtn::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}
