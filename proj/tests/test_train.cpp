#include <cmath>

#include "doctest.h"
#include "lapkv/train.hpp"

using namespace lapkv;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.d_model = 8;
    cfg.vocab_size = 12;
    cfg.max_position = 512;
    return cfg;
}

std::vector<int> random_tokens(int n, int vocab, Rng& rng) {
    std::vector<int> t(n);
    for (int& v : t) v = rng.uniform_int(0, vocab - 1);
    return t;
}

}  // namespace

TEST_CASE("analytic gradients match central finite differences on every group") {
    ModelConfig cfg = tiny_config();
    ToyTransformer model = ToyTransformer::random_init(cfg, 99);
    Rng rng(99);
    const auto tokens = random_tokens(9, cfg.vocab_size, rng);

    ParamGrads grads = ParamGrads::zeros_like(model);
    sequence_loss_grad(model, tokens, -1, -1, grads);

    const double eps = 1e-4;
    auto views = param_views(model, grads);
    double worst = 0.0;
    std::string worst_group;
    for (const ParamView& view : views) {
        // probe a deterministic subset of each group to keep the test quick
        const size_t stride = std::max<size_t>(1, view.len / 17);
        for (size_t i = 0; i < view.len; i += stride) {
            const double saved = view.param[i];
            view.param[i] = saved + eps;
            const double up = sequence_loss(model, tokens, -1, -1);
            view.param[i] = saved - eps;
            const double down = sequence_loss(model, tokens, -1, -1);
            view.param[i] = saved;
            const double fd = (up - down) / (2.0 * eps);
            const double rel = std::abs(fd - view.grad[i]) /
                               std::max({1.0, std::abs(fd), std::abs(view.grad[i])});
            if (rel > worst) {
                worst = rel;
                worst_group = view.name;
            }
        }
    }
    INFO("worst group: " << worst_group);
    CHECK(worst <= 1e-4);
}

TEST_CASE("masked loss checks gradients too") {
    ModelConfig cfg = tiny_config();
    ToyTransformer model = ToyTransformer::random_init(cfg, 7);
    std::vector<int> tokens{1, 2, 9, 3, 4, 10, 5, 6, 11};

    ParamGrads grads = ParamGrads::zeros_like(model);
    sequence_loss_grad(model, tokens, 9, 12, grads);

    const double eps = 1e-4;
    auto views = param_views(model, grads);
    for (const ParamView& view : views) {
        const size_t stride = std::max<size_t>(1, view.len / 7);
        for (size_t i = 0; i < view.len; i += stride) {
            const double saved = view.param[i];
            view.param[i] = saved + eps;
            const double up = sequence_loss(model, tokens, 9, 12);
            view.param[i] = saved - eps;
            const double down = sequence_loss(model, tokens, 9, 12);
            view.param[i] = saved;
            const double fd = (up - down) / (2.0 * eps);
            const double rel = std::abs(fd - view.grad[i]) /
                               std::max({1.0, std::abs(fd), std::abs(view.grad[i])});
            CHECK(rel <= 1e-4);
        }
    }
}

TEST_CASE("zero learning rate leaves the weights untouched") {
    ModelConfig cfg = tiny_config();
    ToyTransformer model = ToyTransformer::random_init(cfg, 5);
    const Matrix before = model.layers[0].wq;

    TrainConfig tc;
    tc.steps = 1;
    tc.batch_size = 2;
    tc.learning_rate = 0.0;
    tc.log_every = 0;
    Rng rng(5);
    std::vector<std::vector<int>> data{random_tokens(8, cfg.vocab_size, rng),
                                       random_tokens(8, cfg.vocab_size, rng)};
    train(model, data, tc);
    for (size_t i = 0; i < before.size(); ++i) {
        CHECK(model.layers[0].wq.data[i] == before.data[i]);
    }
}

TEST_CASE("loss decreases over 200 steps on repeated structure") {
    ModelConfig cfg = tiny_config();
    ToyTransformer model = ToyTransformer::random_init(cfg, 21);
    Rng rng(21);
    // simple next-token structure: short repeated motifs
    std::vector<std::vector<int>> data;
    for (int i = 0; i < 16; ++i) {
        std::vector<int> seq;
        const int a = rng.uniform_int(0, cfg.vocab_size - 1);
        const int b = rng.uniform_int(0, cfg.vocab_size - 1);
        for (int r = 0; r < 5; ++r) {
            seq.push_back(a);
            seq.push_back(b);
        }
        data.push_back(seq);
    }
    TrainConfig tc;
    tc.steps = 200;
    tc.batch_size = 4;
    tc.learning_rate = 0.2;
    tc.momentum = 0.9;
    tc.log_every = 0;
    tc.seed = 1;
    TrainResult result = train(model, data, tc);
    CHECK(result.losses.back() < result.losses.front());
}

TEST_CASE("training is deterministic for a fixed seed") {
    ModelConfig cfg = tiny_config();
    Rng rng(33);
    std::vector<std::vector<int>> data{random_tokens(10, cfg.vocab_size, rng),
                                       random_tokens(10, cfg.vocab_size, rng)};
    TrainConfig tc;
    tc.steps = 20;
    tc.batch_size = 2;
    tc.learning_rate = 0.1;
    tc.log_every = 0;
    tc.seed = 3;

    ToyTransformer a = ToyTransformer::random_init(cfg, 8);
    ToyTransformer b = ToyTransformer::random_init(cfg, 8);
    TrainResult ra = train(a, data, tc);
    TrainResult rb = train(b, data, tc);
    CHECK(ra.losses == rb.losses);
    for (size_t i = 0; i < a.embed.size(); ++i) CHECK(a.embed.data[i] == b.embed.data[i]);
}

TEST_CASE("worker pools do not change the result for a fixed thread count") {
    ModelConfig cfg = tiny_config();
    Rng rng(44);
    std::vector<std::vector<int>> data;
    for (int i = 0; i < 6; ++i) data.push_back(random_tokens(12, cfg.vocab_size, rng));
    TrainConfig tc;
    tc.steps = 15;
    tc.batch_size = 4;
    tc.learning_rate = 0.05;
    tc.log_every = 0;
    tc.seed = 9;
    tc.threads = 2;

    ToyTransformer a = ToyTransformer::random_init(cfg, 12);
    ToyTransformer b = ToyTransformer::random_init(cfg, 12);
    TrainResult ra = train(a, data, tc);
    TrainResult rb = train(b, data, tc);
    CHECK(ra.losses == rb.losses);
    for (size_t i = 0; i < a.unembed.size(); ++i) CHECK(a.unembed.data[i] == b.unembed.data[i]);
}

TEST_CASE("diverged training aborts with the failing step") {
    ModelConfig cfg = tiny_config();
    ToyTransformer model = ToyTransformer::random_init(cfg, 13);
    // poison one weight so the loss goes non-finite immediately
    model.unembed.at(0, 0) = std::numeric_limits<double>::quiet_NaN();
    Rng rng(13);
    std::vector<std::vector<int>> data{random_tokens(6, cfg.vocab_size, rng)};
    TrainConfig tc;
    tc.steps = 3;
    tc.batch_size = 1;
    tc.log_every = 0;
    bool threw = false;
    try {
        train(model, data, tc);
    } catch (const std::runtime_error& e) {
        threw = true;
        CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
    CHECK(threw);
}

TEST_CASE("training loss equals the inference path loss") {
    // the trainer keeps its own forward; pin it to the memory-capable one
    ModelConfig cfg = tiny_config();
    ToyTransformer model = ToyTransformer::random_init(cfg, 55);
    Rng rng(55);
    const auto tokens = random_tokens(7, cfg.vocab_size, rng);

    const double train_loss = sequence_loss(model, tokens, -1, -1);

    KvMemory empty = KvMemory::empty(cfg.num_layers, cfg.d_model);
    ForwardTrace trace = forward(model, empty, tokens, {});
    double ce = 0.0;
    for (size_t t = 0; t + 1 < tokens.size(); ++t) {
        std::vector<double> p(trace.logits[0].row(static_cast<int>(t)),
                              trace.logits[0].row(static_cast<int>(t)) + cfg.vocab_size);
        softmax_inplace(p.data(), cfg.vocab_size);
        ce -= std::log(p[tokens[t + 1]]);
    }
    ce /= static_cast<double>(tokens.size() - 1);
    CHECK(train_loss == doctest::Approx(ce).epsilon(1e-12));
}
