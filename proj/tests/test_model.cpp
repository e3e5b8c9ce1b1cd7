#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "mvtn/model.hpp"
#include "vanilla_encoder.hpp"

using namespace mvtn;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.d_model = 8;
    c.stages = 2;
    c.heads = 2;
    c.ffn_mult = 2;
    c.schedule_kind = ScheduleKind::PDim;
    c.feature_dim = 6;
    c.seq_len = 3;
    c.num_classes = 3;
    c.seed = 5;
    return c;
}

}  // namespace

TEST_CASE("sinusoidal positional table") {
    Tensor pe = sinusoidal_pe(4, 16);
    for (int i = 0; i < 8; ++i) {
        CHECK(pe.at(0, 2 * i) == 0.0);
        CHECK(pe.at(0, 2 * i + 1) == 1.0);
    }
    CHECK(pe.at(1, 0) == doctest::Approx(0.8414709848078965).epsilon(1e-12));
    CHECK(pe.at(1, 1) == doctest::Approx(0.5403023058681398).epsilon(1e-12));
    CHECK(pe.at(2, 2) == doctest::Approx(0.5911271172152932).epsilon(1e-12));
    CHECK(pe.at(3, 5) == doctest::Approx(0.9553364891256060).epsilon(1e-12));
    for (double v : pe.data) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK_THROWS_AS(sinusoidal_pe(4, 7), ConfigError);
}

TEST_CASE("embed_sequence prepends the class token after the positional add") {
    ModelConfig c = small_config();
    ModelParams p = ModelParams::init(c);
    std::mt19937_64 rng(1);
    Tensor feats = Tensor::uniform({2, c.seq_len, c.feature_dim}, -1.0, 1.0, rng);

    Tape tape;
    ModelVars vars = put_on_tape(tape, p);
    Var emb = embed_sequence(tape, tape.constant(feats), vars, c);
    const Tensor& e = tape.value(emb);
    REQUIRE(e.shape == std::vector<int>{2, c.seq_len + 1, c.d_model});

    // stripping position 0 and subtracting the table recovers the linear map
    Tensor pe = sinusoidal_pe(c.seq_len, c.d_model);
    Tensor lin = linear(feats, p.embed_w, p.embed_b);
    for (int b = 0; b < 2; ++b)
        for (int t = 0; t < c.seq_len; ++t)
            for (int i = 0; i < c.d_model; ++i)
                CHECK(e.at(b, t + 1, i) - pe.at(t, i) ==
                      doctest::Approx(lin.at(b, t, i)).epsilon(1e-12));
    // the class token row carries no positional term
    for (int b = 0; b < 2; ++b)
        for (int i = 0; i < c.d_model; ++i) CHECK(e.at(b, 0, i) == p.class_token.at(i));
}

TEST_CASE("embed_sequence zero path reduces to the positional table") {
    ModelConfig c = small_config();
    ModelParams p = ModelParams::init(c);
    p.embed_w = Tensor::zeros(p.embed_w.shape);
    p.embed_b = Tensor::zeros(p.embed_b.shape);
    p.class_token = Tensor::zeros(p.class_token.shape);

    Tape tape;
    ModelVars vars = put_on_tape(tape, p);
    Var emb = embed_sequence(tape, tape.constant(Tensor::zeros({1, c.seq_len, c.feature_dim})),
                             vars, c);
    const Tensor& e = tape.value(emb);
    Tensor pe = sinusoidal_pe(c.seq_len, c.d_model);
    for (int i = 0; i < c.d_model; ++i) CHECK(e.at(0, 0, i) == 0.0);
    for (int t = 0; t < c.seq_len; ++t)
        for (int i = 0; i < c.d_model; ++i) CHECK(e.at(0, t + 1, i) == pe.at(t, i));
}

TEST_CASE("without embeddings the features pass straight through") {
    ModelConfig c = small_config();
    c.use_embeddings = false;
    c.feature_dim = c.d_model;
    ModelParams p = ModelParams::init(c);
    CHECK(p.embed_w.data.empty());

    std::mt19937_64 rng(2);
    Tensor feats = Tensor::uniform({2, c.seq_len, c.d_model}, -1.0, 1.0, rng);
    Tape tape;
    ModelVars vars = put_on_tape(tape, p);
    Var emb = embed_sequence(tape, tape.constant(feats), vars, c);
    REQUIRE(tape.value(emb).shape == std::vector<int>{2, c.seq_len, c.d_model});

    // config sanity: mismatched width is rejected up front
    ModelConfig bad = c;
    bad.feature_dim = c.d_model + 2;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("encoder stage with zeroed projections is the identity") {
    ModelConfig c = small_config();
    ModelParams p = ModelParams::init(c);
    StageParams& s = p.stages[0];
    s.sra.w_o = Tensor::zeros(s.sra.w_o.shape);
    s.sra.b_o = Tensor::zeros(s.sra.b_o.shape);
    s.ffn_w2 = Tensor::zeros(s.ffn_w2.shape);
    s.ffn_b2 = Tensor::zeros(s.ffn_b2.shape);

    std::mt19937_64 rng(3);
    Tensor x = Tensor::uniform({2, 4, c.d_model}, -1.0, 1.0, rng);
    Tape tape;
    ModelVars vars = put_on_tape(tape, p);
    Var out = encoder_stage_forward(tape, tape.constant(x), vars.stages[0], c);
    const Tensor& o = tape.value(out);
    for (std::size_t i = 0; i < x.data.size(); ++i) CHECK(o.data[i] == x.data[i]);
}

TEST_CASE("stages preserve shape for every schedule") {
    for (auto kind : {ScheduleKind::PDim, ScheduleKind::PDimRev, ScheduleKind::PDimPlus,
                      ScheduleKind::Columnar}) {
        ModelConfig c = small_config();
        c.schedule_kind = kind;
        c.d_model = 16;
        c.stages = 3;
        if (kind == ScheduleKind::PDimPlus) c.heads = 2;  // dims {10,12,16}
        ModelParams p = ModelParams::init(c);
        std::mt19937_64 rng(4);
        Tensor x = Tensor::uniform({2, 5, c.d_model}, -1.0, 1.0, rng);
        Tape tape;
        ModelVars vars = put_on_tape(tape, p);
        Var cur = tape.constant(x);
        for (const StageVars& sv : vars.stages) {
            cur = encoder_stage_forward(tape, cur, sv, c);
            CHECK(tape.value(cur).shape == x.shape);
        }
    }
}

TEST_CASE("forward emits logits of the right shape and is deterministic") {
    for (auto kind : {ScheduleKind::PDim, ScheduleKind::PDimRev, ScheduleKind::PDimPlus,
                      ScheduleKind::Columnar}) {
        ModelConfig c = small_config();
        c.schedule_kind = kind;
        ModelParams p = ModelParams::init(c);
        std::mt19937_64 rng(6);
        Tensor feats = Tensor::uniform({3, c.seq_len, c.feature_dim}, -1.0, 1.0, rng);
        Tensor a = forward(p, c, feats);
        REQUIRE(a.shape == std::vector<int>{3, c.num_classes});
        Tensor b = forward(p, c, feats);
        CHECK(a.data == b.data);  // bit-identical in eval mode
        CHECK(all_finite(a));
    }
}

TEST_CASE("predict_proba is a distribution and respects the logits argmax") {
    ModelConfig c = small_config();
    ModelParams p = ModelParams::init(c);
    std::mt19937_64 rng(7);
    Tensor feats = Tensor::uniform({4, c.seq_len, c.feature_dim}, -1.0, 1.0, rng);
    Tensor logits = forward(p, c, feats);
    Tensor probs = predict_proba(p, c, feats);
    for (int b = 0; b < 4; ++b) {
        double sum = 0.0;
        int amax_l = 0, amax_p = 0;
        for (int j = 0; j < c.num_classes; ++j) {
            CHECK(probs.at(b, j) > 0.0);
            CHECK(probs.at(b, j) < 1.0);
            sum += probs.at(b, j);
            if (logits.at(b, j) > logits.at(b, amax_l)) amax_l = j;
            if (probs.at(b, j) > probs.at(b, amax_p)) amax_p = j;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(amax_l == amax_p);
    }

    // zeroed head gives the uniform distribution
    ModelParams zero_head = ModelParams::init(c);
    zero_head.head_w = Tensor::zeros(zero_head.head_w.shape);
    zero_head.head_b = Tensor::zeros(zero_head.head_b.shape);
    Tensor uniform = predict_proba(zero_head, c, feats);
    for (double v : uniform.data) CHECK(v == doctest::Approx(1.0 / c.num_classes).epsilon(1e-12));
}

TEST_CASE("gradients flow into every parameter for every schedule") {
    for (auto kind : {ScheduleKind::PDim, ScheduleKind::PDimRev, ScheduleKind::PDimPlus,
                      ScheduleKind::Columnar}) {
        ModelConfig c = small_config();
        c.schedule_kind = kind;
        ModelParams p = ModelParams::init(c);
        std::mt19937_64 rng(8);
        Tensor feats = Tensor::uniform({2, c.seq_len, c.feature_dim}, -1.0, 1.0, rng);

        Tape tape;
        std::vector<Var> order;
        ModelVars vars = put_on_tape(tape, p, -1, {}, &order);
        Var loss = tape.cross_entropy(forward_on_tape(tape, vars, c, tape.constant(feats)), {0, 2});
        tape.backward(loss);

        std::size_t i = 0;
        p.for_each([&](const std::string& name, Tensor& t) {
            tape.write_grad(order[i], t);
            double norm = 0.0;
            for (double g : t.grad) norm += g * g;
            INFO(to_string(kind), " ", name);
            CHECK(norm > 0.0);
            ++i;
        });
    }
}

TEST_CASE("one-stage model gradcheck") {
    ModelConfig c = small_config();
    c.stages = 1;
    GradCheckResult res = model_grad_check(c, 2, 11);
    INFO("worst: ", res.worst);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("time-mean readout is invariant to frame permutation without positions") {
    ModelConfig c = small_config();
    c.use_embeddings = false;
    c.feature_dim = c.d_model;
    ModelParams p = ModelParams::init(c);

    std::mt19937_64 rng(9);
    Tensor feats = Tensor::uniform({1, c.seq_len, c.d_model}, -1.0, 1.0, rng);
    std::vector<int> perm{2, 0, 1};
    Tensor permuted({1, c.seq_len, c.d_model});
    for (int t = 0; t < c.seq_len; ++t)
        for (int i = 0; i < c.d_model; ++i)
            permuted.at(0, t, i) = feats.at(0, perm[static_cast<std::size_t>(t)], i);

    ForwardOpts no_pos;
    no_pos.positional = false;
    auto run = [&](const Tensor& f) {
        Tape tape;
        ModelVars vars = put_on_tape(tape, p);
        return tape.value(forward_on_tape(tape, vars, c, tape.constant(f), no_pos));
    };
    Tensor a = run(feats), b = run(permuted);
    for (std::size_t i = 0; i < a.data.size(); ++i)
        CHECK(a.data[i] == doctest::Approx(b.data[i]).epsilon(1e-9));
}

TEST_CASE("columnar model equals the vanilla encoder oracle") {
    ModelConfig c = small_config();
    c.schedule_kind = ScheduleKind::Columnar;
    c.d_model = 12;
    c.heads = 3;
    c.stages = 2;
    ModelParams p = ModelParams::init(c);
    std::mt19937_64 rng(10);
    Tensor feats = Tensor::uniform({2, c.seq_len, c.feature_dim}, -1.0, 1.0, rng);

    Tensor got = forward(p, c, feats);
    auto want = vanilla::forward(p, c, feats);
    REQUIRE(want.size() == got.data.size());
    for (std::size_t i = 0; i < want.size(); ++i)
        CHECK(got.data[i] == doctest::Approx(want[i]).epsilon(1e-10));
}

TEST_CASE("training overfits a single repeated sample") {
    ModelConfig c = small_config();
    c.dropout = 0.0;
    ModelParams p = ModelParams::init(c);
    std::mt19937_64 rng(12);

    std::vector<FeatureSequence> data;
    FeatureSequence seq;
    seq.frames = Tensor::uniform({c.seq_len, c.feature_dim}, -1.0, 1.0, rng);
    seq.label = 1;
    seq.modality = "synth";
    seq.sample_id = "only";
    data.push_back(seq);

    TrainConfig tc;
    tc.lr = 1e-2;
    tc.batch_size = 1;
    tc.epochs = 200;  // one step per epoch
    tc.lr_decay_epochs = {};
    TrainLog log = train(p, c, tc, data);
    CHECK(log.back().loss < 0.01);
    CHECK(log.size() == 200);
}

TEST_CASE("training is deterministic and steps the learning rate") {
    ModelConfig c = small_config();
    c.seed = 21;
    std::mt19937_64 rng(13);
    std::vector<FeatureSequence> data;
    for (int i = 0; i < 6; ++i) {
        FeatureSequence s;
        s.frames = Tensor::uniform({c.seq_len, c.feature_dim}, -1.0, 1.0, rng);
        s.label = i % c.num_classes;
        s.modality = "synth";
        s.sample_id = "s" + std::to_string(i);
        data.push_back(s);
    }

    TrainConfig tc;
    tc.lr = 1e-3;
    tc.batch_size = 2;
    tc.epochs = 5;
    tc.lr_decay_epochs = {3};
    tc.lr_decay_factor = 0.1;
    tc.seed = 77;

    ModelParams p1 = ModelParams::init(c);
    ModelParams p2 = ModelParams::init(c);
    TrainLog a = train(p1, c, tc, data);
    TrainLog b = train(p2, c, tc, data);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].loss == b[i].loss);
        CHECK(a[i].accuracy == b[i].accuracy);
        CHECK(a[i].lr == b[i].lr);
    }
    CHECK(a[0].lr == 1e-3);
    CHECK(a[2].lr == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(a[4].lr == doctest::Approx(1e-4).epsilon(1e-12));

    bool identical = true;
    p1.for_each([&](const std::string& name, Tensor& t) {
        Tensor* other = nullptr;
        p2.for_each([&](const std::string& n2, Tensor& t2) {
            if (n2 == name) other = &t2;
        });
        if (t.data != other->data) identical = false;
    });
    CHECK(identical);

    CHECK_THROWS_AS(train(p1, c, tc, {}), ContractError);
}

TEST_CASE("checkpoint round trip is bit exact") {
    namespace fs = std::filesystem;
    ModelConfig c = small_config();
    ModelParams p = ModelParams::init(c);
    // perturb away from init so the round trip is not trivially the seed
    std::mt19937_64 rng(14);
    p.head_w = Tensor::uniform(p.head_w.shape, -3.0, 3.0, rng);

    fs::path path = fs::temp_directory_path() / "mvtn_test_model.ckpt";
    save_checkpoint(p, c, path);
    auto [loaded, config2] = load_checkpoint(path);
    CHECK(to_json_string(config2) == to_json_string(c));

    std::vector<const Tensor*> orig;
    p.for_each([&](const std::string&, Tensor& t) { orig.push_back(&t); });
    std::size_t i = 0;
    bool equal = true;
    loaded.for_each([&](const std::string&, Tensor& t) {
        if (t.data != orig[i]->data || t.shape != orig[i]->shape) equal = false;
        ++i;
    });
    CHECK(equal);
    CHECK(i == orig.size());
    fs::remove(path);
}

TEST_CASE("corrupted checkpoints fail as format errors") {
    namespace fs = std::filesystem;
    fs::path path = fs::temp_directory_path() / "mvtn_test_bad.ckpt";
    {
        std::ofstream out(path, std::ios::binary);
        out << "MVTaXXXXXXXXXXXXXXXX";
    }
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    {
        std::ofstream out(path, std::ios::binary);
        out << "MVTP";  // truncated right after the magic
    }
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    fs::remove(path);
}

TEST_CASE("model config json round trip") {
    ModelConfig c = small_config();
    c.schedule_kind = ScheduleKind::PDimPlus;
    c.heads = 2;
    c.use_embeddings = false;
    c.feature_dim = c.d_model;
    ModelConfig back = model_config_from_json_string(to_json_string(c));
    CHECK(to_json_string(back) == to_json_string(c));
    CHECK_THROWS_AS(model_config_from_json_string("{"), FormatError);
    CHECK_THROWS_AS(model_config_from_json_string("{}"), FormatError);
}
