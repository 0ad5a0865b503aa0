#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "support.hpp"
#include "vidcount/model.hpp"

using namespace vidcount;
using testsupport::make_mini_pipeline;
using testsupport::miniature_config;
using testsupport::random_clip;

TEST_CASE("model config validation") {
    ModelConfig cfg = miniature_config();
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.ref_frame() == 1);

    ModelConfig bad = cfg;
    bad.num_queries = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.crop_size = 17;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.token_dim = 6;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.reference_frame = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.downsample_factor = 4;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("scaled dot attention") {
    SUBCASE("single key collapses to its value row") {
        Tensor q({2, 3}, {5, -2, 9, 0, 0, 1});
        Tensor k({1, 3}, {1, 1, 1});
        Tensor v({1, 4}, {0.1, 0.2, 0.3, 0.4});
        Tensor out = scaled_dot_attention(q, k, v);
        REQUIRE(out.shape == std::vector<int>{2, 4});
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 4; ++j) CHECK(out.at({i, j}) == doctest::Approx(v.at({0, j})));
    }
    SUBCASE("equal logits average the values") {
        Tensor q({1, 2}, {0.0, 0.0});
        Tensor k({2, 2}, {1, 0, 0, 1});
        Tensor v({2, 2}, {2, 0, 0, 4});
        Tensor out = scaled_dot_attention(q, k, v);
        CHECK(out.at({0, 0}) == doctest::Approx(1.0));
        CHECK(out.at({0, 1}) == doctest::Approx(2.0));
    }
    SUBCASE("hand-evaluated softmax weights") {
        Tensor q({1, 2}, {1, 0});
        Tensor k({2, 2}, {1, 0, 0, 1});
        Tensor v({2, 2}, {1, 0, 0, 1});
        Tensor out = scaled_dot_attention(q, k, v);
        CHECK(std::fabs(out.at({0, 0}) - 0.6698) < 1e-3);
        CHECK(std::fabs(out.at({0, 1}) - 0.3302) < 1e-3);
    }
}

TEST_CASE("backbone produces shared downsampled features") {
    ModelConfig cfg = miniature_config();
    ParamStore params = init_params(cfg, 41);
    Rng rng(7);
    std::vector<Tensor> clip = random_clip(cfg, rng);
    clip[1] = clip[0];  // identical frames
    std::vector<Tensor> feats = backbone_forward(clip, params, cfg);
    REQUIRE(feats.size() == 2);
    CHECK(feats[0].shape == std::vector<int>{2, 2, cfg.token_dim});
    CHECK(feats[0].values == feats[1].values);
}

TEST_CASE("density branch outputs non-negative crop-sized maps") {
    ModelConfig cfg = miniature_config();
    ParamStore params = init_params(cfg, 42);
    Rng rng(9);
    std::vector<Tensor> clip = random_clip(cfg, rng);
    std::vector<Tensor> feats = backbone_forward(clip, params, cfg);
    auto [df, dm] = density_branch(feats[0], params, cfg);
    CHECK(df.shape == std::vector<int>{2, 2, cfg.density_dim});
    REQUIRE(dm.shape == std::vector<int>{cfg.crop_size, cfg.crop_size, 1});
    for (double v : dm.values) CHECK(v >= 0.0);
}

TEST_CASE("temporal attention") {
    SUBCASE("single frame equals the value projection of its token") {
        ModelConfig cfg = miniature_config();
        cfg.frames = 1;
        ParamStore params = init_params(cfg, 43);
        Rng rng(12);
        Tensor df = Tensor::zeros({2, 2, cfg.density_dim});
        for (double& v : df.values) v = rng.uniform(-1, 1);
        Tensor out = temporal_attention({df}, params, cfg);
        REQUIRE(out.shape == std::vector<int>{2, 2, cfg.density_dim});
        const Tensor& wv = params.at("temporal.wv");
        const Tensor& bv = params.at("temporal.bv");
        const Tensor& pos = params.at("temporal.pos");
        for (int loc = 0; loc < 4; ++loc) {
            for (int c = 0; c < cfg.density_dim; ++c) {
                double expect = bv.values[size_t(c)];
                for (int i = 0; i < cfg.density_dim; ++i) {
                    const double token =
                        df.values[size_t(loc) * cfg.density_dim + i] + pos.values[size_t(i)];
                    expect += token * wv.values[size_t(i) * cfg.density_dim + c];
                }
                CHECK(out.values[size_t(loc) * cfg.density_dim + c] == doctest::Approx(expect));
            }
        }
    }
    SUBCASE("five-frame stack keeps the spatial extent") {
        ModelConfig cfg = miniature_config();
        cfg.frames = 5;
        ParamStore params = init_params(cfg, 44);
        Rng rng(13);
        std::vector<Tensor> stack;
        for (int t = 0; t < 5; ++t) {
            Tensor df = Tensor::zeros({2, 2, cfg.density_dim});
            for (double& v : df.values) v = rng.uniform(-1, 1);
            stack.push_back(std::move(df));
        }
        Tensor out = temporal_attention(stack, params, cfg);
        CHECK(out.shape == std::vector<int>{2, 2, cfg.density_dim});
        CHECK_THROWS_AS(temporal_attention({stack[0]}, params, cfg), DataError);
    }
    SUBCASE("every frame receives gradient") {
        ModelConfig cfg = miniature_config();
        cfg.frames = 3;
        ParamStore params = init_params(cfg, 45);
        Rng rng(14);
        Tape tape;
        TapeScope scope(tape);
        std::vector<Tensor> stack;
        for (int t = 0; t < 3; ++t) {
            Tensor df = Tensor::zeros({2, 2, cfg.density_dim});
            for (double& v : df.values) v = rng.uniform(-1, 1);
            watch(df);
            stack.push_back(std::move(df));
        }
        Tensor out = temporal_attention(stack, params, cfg);
        Tensor weights = Tensor::zeros(out.shape);
        for (double& v : weights.values) v = rng.uniform(0.5, 1.5);
        GradientMap g = backpropagate(reduce_sum(multiply(out, weights)));
        for (const Tensor& df : stack) {
            REQUIRE(g.contains(df.node));
            double norm = 0;
            for (double v : g.at(df.node)) norm += std::fabs(v);
            CHECK(norm > 1e-8);
        }
    }
}

TEST_CASE("encoder follows the layer recurrence") {
    ModelConfig cfg = miniature_config();
    cfg.encoder_layers = 1;
    ParamStore params = init_params(cfg, 46);
    Rng rng(15);
    const int hs = cfg.feature_size();
    Tensor ref = Tensor::zeros({hs, hs, cfg.token_dim});
    for (double& v : ref.values) v = rng.uniform(-1, 1);
    Tensor ta = Tensor::zeros({hs, hs, cfg.density_dim});
    for (double& v : ta.values) v = rng.uniform(-1, 1);

    SUBCASE("memory shape") {
        Tensor mem = encoder_forward(ref, ta, params, cfg);
        CHECK(mem.shape == std::vector<int>{hs * hs, cfg.token_dim});
    }
    SUBCASE("zero injection reduces to the bare recurrence") {
        for (double& v : params.at("encoder.inject.w").values) v = 0.0;
        for (double& v : params.at("encoder.inject.b").values) v = 0.0;
        Tensor mem = encoder_forward(ref, ta, params, cfg);

        auto ln_affine = [&](const Tensor& x, const std::string& prefix) {
            return add(multiply(layer_norm(x), params.at(prefix + ".g")), params.at(prefix + ".b"));
        };
        Tensor f0 = add(reshape(ref, {hs * hs, cfg.token_dim}),
                        sine_position_table(hs, hs, cfg.token_dim));
        Tensor fprime = multi_head_attention(ln_affine(f0, "enc0.ln1"), ln_affine(f0, "enc0.ln1"),
                                             ln_affine(f0, "enc0.ln1"), params, "enc0.attn",
                                             cfg.heads);
        Tensor ffn_in = ln_affine(fprime, "enc0.ln2");
        Tensor ffn = add(matmul(relu(add(matmul(ffn_in, params.at("enc0.fc.w1")),
                                         params.at("enc0.fc.b1"))),
                                params.at("enc0.fc.w2")),
                         params.at("enc0.fc.b2"));
        Tensor expect = add(fprime, ffn);
        REQUIRE(mem.values.size() == expect.values.size());
        for (size_t i = 0; i < mem.values.size(); ++i) {
            CHECK(mem.values[i] == doctest::Approx(expect.values[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("density-guided queries") {
    ModelConfig cfg = miniature_config();
    Rng rng(16);
    const int hs = cfg.feature_size();
    Tensor ta = Tensor::zeros({hs, hs, cfg.density_dim});
    for (double& v : ta.values) v = rng.uniform(-1, 1);

    SUBCASE("add mode with zeroed projection returns the embeddings") {
        ModelConfig add_cfg = cfg;
        add_cfg.query_mode = QueryMode::kAdd;
        ParamStore params = init_params(add_cfg, 47);
        for (double& v : params.at("query.proj.w").values) v = 0.0;
        for (double& v : params.at("query.proj.b").values) v = 0.0;
        Tensor q = build_queries(ta, params, add_cfg);
        CHECK(q.values == params.at("query.embed").values);
    }
    SUBCASE("both modes produce num_queries x d") {
        for (QueryMode mode : {QueryMode::kAdd, QueryMode::kConcat}) {
            ModelConfig mc = cfg;
            mc.query_mode = mode;
            ParamStore params = init_params(mc, 48);
            Tensor q = build_queries(ta, params, mc);
            CHECK(q.shape == std::vector<int>{cfg.num_queries, cfg.token_dim});
        }
    }
    SUBCASE("modes disagree on identical inputs") {
        ModelConfig add_cfg = cfg, cat_cfg = cfg;
        add_cfg.query_mode = QueryMode::kAdd;
        cat_cfg.query_mode = QueryMode::kConcat;
        Tensor qa = build_queries(ta, init_params(add_cfg, 49), add_cfg);
        Tensor qc = build_queries(ta, init_params(cat_cfg, 49), cat_cfg);
        double max_diff = 0;
        for (size_t i = 0; i < qa.values.size(); ++i) {
            max_diff = std::max(max_diff, std::fabs(qa.values[i] - qc.values[i]));
        }
        CHECK(max_diff > 0.0);
    }
}

TEST_CASE("decoder is permutation invariant over key/value pairs") {
    ModelConfig cfg = miniature_config();
    ParamStore params = init_params(cfg, 50);
    Rng rng(17);
    const int n_tok = cfg.feature_size() * cfg.feature_size();
    Tensor memory = Tensor::zeros({n_tok, cfg.token_dim});
    for (double& v : memory.values) v = rng.uniform(-1, 1);
    Tensor pos = sine_position_table(cfg.feature_size(), cfg.feature_size(), cfg.token_dim);
    Tensor queries = Tensor::zeros({cfg.num_queries, cfg.token_dim});
    for (double& v : queries.values) v = rng.uniform(-1, 1);

    Tensor base = decoder_forward(queries, memory, pos, params, cfg);
    CHECK(base.shape == std::vector<int>{cfg.num_queries, cfg.token_dim});

    std::vector<int> perm(static_cast<size_t>(n_tok));
    for (int i = 0; i < n_tok; ++i) perm[size_t(i)] = (i * 3 + 1) % n_tok;
    Tensor memory_p = memory, pos_p = pos;
    for (int i = 0; i < n_tok; ++i) {
        for (int c = 0; c < cfg.token_dim; ++c) {
            memory_p.values[size_t(i) * cfg.token_dim + c] =
                memory.values[size_t(perm[size_t(i)]) * cfg.token_dim + c];
            pos_p.values[size_t(i) * cfg.token_dim + c] =
                pos.values[size_t(perm[size_t(i)]) * cfg.token_dim + c];
        }
    }
    Tensor permuted = decoder_forward(queries, memory_p, pos_p, params, cfg);
    for (size_t i = 0; i < base.values.size(); ++i) {
        CHECK(std::fabs(base.values[i] - permuted.values[i]) <= 1e-9);
    }
}

TEST_CASE("prediction heads stay in the unit interval") {
    ModelConfig cfg = miniature_config();
    ParamStore params = init_params(cfg, 51);
    Rng rng(18);
    Tensor emb = Tensor::zeros({cfg.num_queries, cfg.token_dim});
    for (double& v : emb.values) v = rng.uniform(-10, 10);
    ModelOutput out = prediction_heads(emb, params, cfg);
    REQUIRE(out.coords.shape == std::vector<int>{cfg.num_queries, 2});
    REQUIRE(out.confidence.shape == std::vector<int>{cfg.num_queries});
    for (double v : out.coords.values) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    for (double v : out.confidence.values) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }

    for (const char* name : {"head.reg.w1", "head.reg.b1", "head.reg.w2", "head.reg.b2",
                             "head.cls.w", "head.cls.b"}) {
        for (double& v : params.at(name).values) v = 0.0;
    }
    ModelOutput mid = prediction_heads(Tensor::zeros({cfg.num_queries, cfg.token_dim}), params, cfg);
    for (double v : mid.coords.values) CHECK(v == doctest::Approx(0.5));
    for (double v : mid.confidence.values) CHECK(v == doctest::Approx(0.5));
}

TEST_CASE("model forward composition") {
    SUBCASE("five-frame clip yields queries plus one map per frame") {
        ModelConfig cfg = miniature_config();
        cfg.frames = 5;
        ParamStore params = init_params(cfg, 52);
        Rng rng(19);
        ModelOutput out = model_forward(random_clip(cfg, rng), params, cfg);
        CHECK(out.coords.shape == std::vector<int>{cfg.num_queries, 2});
        CHECK(out.densities.size() == 5);
        CHECK(to_predictions(out).size() == size_t(cfg.num_queries));
    }
    SUBCASE("single-frame clip degenerates gracefully") {
        ModelConfig cfg = miniature_config();
        cfg.frames = 1;
        ParamStore params = init_params(cfg, 53);
        Rng rng(20);
        ModelOutput out = model_forward(random_clip(cfg, rng), params, cfg);
        CHECK(out.densities.size() == 1);
    }
    SUBCASE("deterministic outputs") {
        ModelConfig cfg = miniature_config();
        ParamStore params = init_params(cfg, 54);
        Rng rng(21);
        std::vector<Tensor> clip = random_clip(cfg, rng);
        ModelOutput a = model_forward(clip, params, cfg);
        ModelOutput b = model_forward(clip, params, cfg);
        CHECK(a.coords.values == b.coords.values);
        CHECK(a.confidence.values == b.confidence.values);
        for (size_t t = 0; t < a.densities.size(); ++t) {
            CHECK(a.densities[t].values == b.densities[t].values);
        }
    }
    SUBCASE("permuting identical frames leaves features unchanged") {
        ModelConfig cfg = miniature_config();
        ParamStore params = init_params(cfg, 55);
        Rng rng(22);
        std::vector<Tensor> clip = random_clip(cfg, rng);
        clip[1] = clip[0];
        ModelOutput a = model_forward(clip, params, cfg);
        std::swap(clip[0], clip[1]);
        ModelOutput b = model_forward(clip, params, cfg);
        CHECK(a.coords.values == b.coords.values);
    }
}

TEST_CASE("gradients flow end to end through representative parameter groups") {
    testsupport::MiniPipeline p = make_mini_pipeline(1234);
    for (const char* name : {"backbone.conv0.w", "density.conv1.b", "temporal.wq",
                             "encoder.inject.w", "enc0.attn.wv", "query.embed", "query.cat.w",
                             "dec0.cross.wk", "head.reg.w2", "head.cls.b"}) {
        INFO("parameter " << std::string(name));
        CHECK(testsupport::robust_param_gradient_error(p, name) < 1e-4);
    }
    // the full loss as a function of the query embeddings, checked at the
    // plain step size
    CHECK(testsupport::param_gradient_error(p, "query.embed", 1e-4) < 1e-4);
}

TEST_CASE("checkpoint round-trip is bit exact") {
    namespace fs = std::filesystem;
    fs::create_directories("model_test_tmp");
    const std::string path = "model_test_tmp/ckpt.bin";

    ModelConfig cfg = miniature_config();
    ParamStore params = init_params(cfg, 77);
    std::vector<std::pair<std::string, std::vector<double>>> extras;
    extras.push_back({"trainer.step", {42.0}});
    extras.push_back({"adam.m.head.cls.w", std::vector<double>(8, 0.125)});
    save_checkpoint(path, cfg, params, extras);

    Checkpoint loaded = load_checkpoint(path);
    CHECK(loaded.config.crop_size == cfg.crop_size);
    CHECK(loaded.config.query_mode == cfg.query_mode);
    REQUIRE(loaded.params.size() == params.size());
    for (const std::string& name : params.names()) {
        CHECK(loaded.params.at(name).values == params.at(name).values);
    }
    REQUIRE(loaded.find_extra("trainer.step") != nullptr);
    CHECK((*loaded.find_extra("trainer.step"))[0] == 42.0);

    SUBCASE("corrupt and wrong files are rejected") {
        write_text_file("model_test_tmp/bad.bin", "definitely not a checkpoint");
        CHECK_THROWS_AS(load_checkpoint("model_test_tmp/bad.bin"), DataError);
    }
}
