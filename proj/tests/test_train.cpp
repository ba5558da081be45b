#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "fvlm/checkpoint.hpp"
#include "fvlm/errors.hpp"
#include "fvlm/train.hpp"

using namespace fvlm;

namespace {

std::filesystem::path temp_dir(const char* tag) {
    auto dir = std::filesystem::temp_directory_path() /
               (std::string("fvlm_train_") + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(bool(f));
    return std::string((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
}

ModelConfig smoke_model() {
    ModelConfig m;
    m.image_size = 16;
    m.patch_size = 8;
    m.embed_dim = 8;
    m.encoder_layers = 1;
    m.decoder_layers = 1;
    m.heads = 2;
    m.ffn_hidden = 16;
    m.max_tokens = 160;
    return m;
}

std::vector<FundusRecord> smoke_records(std::size_t n, std::size_t image_size) {
    std::vector<FundusRecord> records;
    for (std::size_t i = 0; i < n; ++i) {
        FundusRecord rec;
        const std::vector<std::string> diseases =
            i % 2 ? std::vector<std::string>{"Glaucoma"}
                  : std::vector<std::string>{"Macular Edema"};
        rec.diseases = diseases;
        rec.abnormal = true;
        rec.description = build_description(diseases, true);
        rec.signs = derive_signs(diseases);
        rec.dialogue = {{"What condition is shown?", diseases[0] + "."},
                        {"Which signs support it?", "Typical fundus changes."},
                        {"What should happen next?", "Refer to a specialist."}};
        rec.image.inline_image = synthetic_image(image_size, 100 + i);
        records.push_back(rec);
    }
    return records;
}

}  // namespace

TEST_CASE("absolute lr follows the batch scaling rule") {
    CHECK(compute_absolute_lr(0.001, 32) == 1.25e-4);
    CHECK(compute_absolute_lr(0.001, 256) == 0.001);
    CHECK(compute_absolute_lr(0.003, 64) == 2 * compute_absolute_lr(0.003, 32));
    CHECK(compute_absolute_lr(0.02, 16) == 2 * compute_absolute_lr(0.02, 8));
    CHECK_THROWS_AS(compute_absolute_lr(0.001, 0), ContractError);
}

TEST_CASE("lr schedule hits its landmarks exactly") {
    const double peak = 3e-4;
    CHECK(lr_at(0, 100, 10, peak) == 0.0);
    CHECK(lr_at(10, 100, 10, peak) == peak);
    CHECK(lr_at(100, 100, 10, peak) == 0.0);
    CHECK(lr_at(0, 100, 0, peak) == peak);

    CHECK(lr_at(5, 100, 10, peak) == doctest::Approx(peak * 0.5).epsilon(1e-15));
    CHECK(lr_at(55, 100, 10, peak) ==
          doctest::Approx(peak * 0.5).epsilon(1e-12));

    // single peak, rising then falling, never negative
    double prev = -1.0;
    bool falling = false;
    for (std::size_t s = 0; s <= 100; ++s) {
        const double lr = lr_at(s, 100, 10, peak);
        CHECK(lr >= 0.0);
        CHECK(lr <= peak);
        if (lr < prev) falling = true;
        if (falling) CHECK(lr <= prev);
        prev = lr;
    }

    // continuity: adjacent steps never jump by more than peak/warmup
    for (std::size_t s = 0; s < 100; ++s) {
        const double a = lr_at(s, 100, 10, peak);
        const double b = lr_at(s + 1, 100, 10, peak);
        CHECK(std::fabs(b - a) <= peak / 10.0 + 1e-18);
    }

    CHECK_THROWS_AS(lr_at(0, 0, 0, peak), ContractError);
    CHECK_THROWS_AS(lr_at(0, 10, 10, peak), ContractError);
    CHECK_THROWS_AS(lr_at(11, 10, 2, peak), ContractError);
}

TEST_CASE("adamw matches the scripted quadratic reference") {
    // theta0 = 1, g = theta, lr = 0.1, betas (0.9, 0.81), no decay
    const double expected[6] = {0.900000001,         0.7998615936877403,
                                0.6994950311910177,  0.5988205354805738,
                                0.4977814007075007,  0.39636842071500966};
    std::vector<Param> params = {{"theta", {1}, {1.0}}};
    OptimizerState state;
    AdamWConfig opt;
    opt.lr = 0.1;
    opt.beta1 = 0.9;
    opt.beta2 = 0.81;
    for (int t = 0; t < 6; ++t) {
        std::map<std::string, std::vector<double>> grads{
            {"theta", {params[0].value[0]}}};
        adamw_step(params, grads, state, opt);
        CHECK(params[0].value[0] == doctest::Approx(expected[t]).epsilon(1e-12));
    }
    CHECK(state.step == 6);
}

TEST_CASE("adamw single-step closed forms") {
    SUBCASE("zero gradient applies only the decoupled decay") {
        std::vector<Param> params = {{"theta", {2}, {1.0, -3.0}}};
        OptimizerState state;
        AdamWConfig opt;
        opt.lr = 0.1;
        opt.weight_decay = 0.02;
        adamw_step(params, {{"theta", {0.0, 0.0}}}, state, opt);
        CHECK(params[0].value[0] == doctest::Approx(0.998).epsilon(1e-15));
        CHECK(params[0].value[1] == doctest::Approx(-2.994).epsilon(1e-15));
    }
    SUBCASE("unit gradient from zero moves by about -lr") {
        std::vector<Param> params = {{"theta", {1}, {0.0}}};
        OptimizerState state;
        AdamWConfig opt;
        opt.lr = 1e-3;
        adamw_step(params, {{"theta", {1.0}}}, state, opt);
        CHECK(params[0].value[0] ==
              doctest::Approx(-0.0009999999900000003).epsilon(1e-15));
    }
    SUBCASE("decay is applied before the adam update") {
        // theta0 = 2, g = 1, lr = 0.1, wd = 0.5: decay-first gives 1.800000001
        std::vector<Param> params = {{"theta", {1}, {2.0}}};
        OptimizerState state;
        AdamWConfig opt;
        opt.lr = 0.1;
        opt.beta2 = 0.999;
        opt.weight_decay = 0.5;
        adamw_step(params, {{"theta", {1.0}}}, state, opt);
        CHECK(params[0].value[0] == doctest::Approx(1.800000001).epsilon(1e-12));
        adamw_step(params, {{"theta", {1.0}}}, state, opt);
        CHECK(params[0].value[0] ==
              doctest::Approx(1.6100000019500005).epsilon(1e-12));
    }
    SUBCASE("large gradients are not clipped; moment memory persists") {
        std::vector<Param> params = {{"theta", {1}, {0.0}}};
        OptimizerState state;
        AdamWConfig opt;
        opt.lr = 0.01;
        adamw_step(params, {{"theta", {1000.0}}}, state, opt);
        CHECK(params[0].value[0] ==
              doctest::Approx(-0.009999999999899999).epsilon(1e-12));
        adamw_step(params, {{"theta", {1.0}}}, state, opt);
        CHECK(params[0].value[0] ==
              doctest::Approx(-0.016794014422634455).epsilon(1e-12));
    }
}

TEST_CASE("adamw validates gradients and state") {
    std::vector<Param> params = {{"theta", {1}, {1.0}}};
    OptimizerState state;
    AdamWConfig opt;
    opt.lr = 0.1;

    CHECK_THROWS_AS(adamw_step(params, {}, state, opt), ContractError);
    CHECK_THROWS_AS(adamw_step(params, {{"theta", {1.0, 2.0}}}, state, opt),
                    DimensionError);
    try {
        adamw_step(params, {{"theta", {std::nan("")}}}, state, opt);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("theta") != std::string::npos);
    }

    AdamWConfig bad = opt;
    bad.lr = -1.0;
    CHECK_THROWS_AS(adamw_step(params, {{"theta", {0.0}}}, state, bad),
                    ContractError);
    bad = opt;
    bad.beta1 = 1.0;
    CHECK_THROWS_AS(adamw_step(params, {{"theta", {0.0}}}, state, bad),
                    ContractError);
}

TEST_CASE("train config parses keys and reports bad input") {
    const std::string text = R"(# smoke config
image_size = 16
patch_size = 8
embed_dim = 8
encoder_layers = 1
decoder_layers = 1
heads = 2
ffn_hidden = 16
max_tokens = 128   # keep sequences small
sign_threshold = 0.4
pooled_projector_input = true
base_lr = 0.002
beta1 = 0.85
beta2 = 0.9
weight_decay = 0.01
batch_size = 4
pretrain_epochs = 3
finetune_epochs = 5
warmup_epochs = 1
lr_floor = 0
clip_weight = 0.5
cls_weight = 2
llm_weight = 1
label_smoothing = 0.05
seed = 7
)";
    TrainConfig cfg = parse_train_config(text);
    CHECK(cfg.model.image_size == 16);
    CHECK(cfg.model.embed_dim == 8);
    CHECK(cfg.model.max_tokens == 128);
    CHECK(cfg.model.sign_threshold == 0.4);
    CHECK(cfg.model.pooled_projector_input);
    CHECK(cfg.base_lr == 0.002);
    CHECK(cfg.beta1 == 0.85);
    CHECK(cfg.beta2 == 0.9);
    CHECK(cfg.weight_decay == 0.01);
    CHECK(cfg.batch_size == 4);
    CHECK(cfg.pretrain_epochs == 3);
    CHECK(cfg.finetune_epochs == 5);
    CHECK(cfg.loss_weights.clip == 0.5);
    CHECK(cfg.loss_weights.cls == 2.0);
    CHECK(cfg.loss_weights.llm == 1.0);
    CHECK(cfg.label_smoothing == 0.05);
    CHECK(cfg.seed == 7);

    TrainConfig defaults = parse_train_config("");
    CHECK(defaults.base_lr == 0.001);
    CHECK(defaults.beta1 == 0.9);
    CHECK(defaults.beta2 == 0.95);
    CHECK(defaults.weight_decay == 0.02);
    CHECK(defaults.batch_size == 8);
    CHECK(defaults.pretrain_epochs == 10);
    CHECK(defaults.finetune_epochs == 30);
    CHECK(defaults.warmup_epochs == 1);
    CHECK(defaults.seed == 42);

    try {
        parse_train_config("no_such_key = 3\n");
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        CHECK(std::string(e.what()).find("no_such_key") != std::string::npos);
    }
    try {
        parse_train_config("embed_dim = wide\n");
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        CHECK(std::string(e.what()).find("embed_dim") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_train_config("just words\n"), ContractError);
    CHECK_THROWS_AS(parse_train_config("lr_floor = 0.1\n"), ContractError);
    CHECK_THROWS_AS(parse_train_config("batch_size = 0\n"), ContractError);
    CHECK_THROWS_AS(parse_train_config("beta1 = 1.0\n"), ContractError);
    CHECK_THROWS_AS(
        parse_train_config("clip_weight = 0\ncls_weight = 0\nllm_weight = 0\n"),
        ContractError);
}

TEST_CASE("metrics csv round trips exactly") {
    auto dir = temp_dir("metrics");
    std::vector<StepMetrics> metrics;
    for (std::size_t s = 0; s < 5; ++s) {
        StepMetrics m;
        m.step = s;
        m.lr = 1.25e-4 * double(s) / 3.0;
        m.clip = 0.31326168751822286 + double(s);
        m.cls = 4.1588830833596715 / double(s + 1);
        m.llm = 16.635532333438686 * 0.9;
        m.total = m.clip + m.cls + m.llm;
        metrics.push_back(m);
    }
    const std::string path = (dir / "metrics.csv").string();
    write_metrics_csv(metrics, path);
    std::vector<StepMetrics> back = read_metrics_csv(path);
    REQUIRE(back.size() == metrics.size());
    for (std::size_t i = 0; i < metrics.size(); ++i) {
        CHECK(back[i].step == metrics[i].step);
        CHECK(back[i].lr == metrics[i].lr);
        CHECK(back[i].clip == metrics[i].clip);
        CHECK(back[i].cls == metrics[i].cls);
        CHECK(back[i].llm == metrics[i].llm);
        CHECK(back[i].total == metrics[i].total);
    }
    // one line per step, no header
    std::string raw = slurp(path);
    CHECK(std::count(raw.begin(), raw.end(), '\n') == 5);

    std::ofstream bad((dir / "bad.csv").string());
    bad << "1,2,3\n";
    bad.close();
    CHECK_THROWS_AS(read_metrics_csv((dir / "bad.csv").string()),
                    CorruptionError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoints round trip through f32 exactly") {
    auto dir = temp_dir("ckpt");
    ModelConfig cfg = smoke_model();
    ModelParams model(cfg, 23);

    const std::string path = (dir / "model.ckpt").string();
    save_checkpoint(path, model);
    LoadedCheckpoint loaded = load_checkpoint(path);
    CHECK_FALSE(loaded.has_state);
    CHECK(loaded.model.config().embed_dim == cfg.embed_dim);
    CHECK(loaded.model.config().max_tokens == cfg.max_tokens);

    ModelParams quantized = model;
    quantized.quantize_to_f32();
    REQUIRE(loaded.model.params().size() == quantized.params().size());
    for (std::size_t i = 0; i < quantized.params().size(); ++i) {
        CHECK(loaded.model.params()[i].name == quantized.params()[i].name);
        CHECK(loaded.model.params()[i].value == quantized.params()[i].value);
    }

    // save -> load -> save is byte-identical
    const std::string path2 = (dir / "model2.ckpt").string();
    save_checkpoint(path2, loaded.model);
    CHECK(slurp(path) == slurp(path2));

    std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoints carry optimizer state") {
    auto dir = temp_dir("ckpt_state");
    ModelConfig cfg = smoke_model();
    ModelParams model(cfg, 29);
    OptimizerState state;
    state.step = 17;
    for (const Param& p : model.params()) {
        state.m[p.name].assign(p.value.size(), 0.25);
        state.v[p.name].assign(p.value.size(), 0.125);
    }
    const std::string path = (dir / "with_state.ckpt").string();
    save_checkpoint(path, model, &state);
    LoadedCheckpoint loaded = load_checkpoint(path);
    CHECK(loaded.has_state);
    CHECK(loaded.state.step == 17);
    CHECK(loaded.state.m.at("dec.head")[0] == 0.25);
    CHECK(loaded.state.v.at("dec.head")[0] == 0.125);
    CHECK(loaded.state.m.size() == model.params().size());
    std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint loader rejects damage and future versions") {
    auto dir = temp_dir("ckpt_damage");
    ModelConfig cfg = smoke_model();
    ModelParams model(cfg, 31);
    const std::string path = (dir / "model.ckpt").string();
    save_checkpoint(path, model);
    const std::string good = slurp(path);

    auto write_variant = [&](std::string bytes) {
        const std::string p = (dir / "variant.ckpt").string();
        std::ofstream f(p, std::ios::binary | std::ios::trunc);
        f.write(bytes.data(), std::streamsize(bytes.size()));
        f.close();
        return p;
    };

    CHECK_THROWS_AS(load_checkpoint(write_variant(good.substr(0, good.size() / 2))),
                    CorruptionError);
    CHECK_THROWS_AS(load_checkpoint(write_variant(good.substr(0, 10))),
                    CorruptionError);

    std::string flipped = good;
    flipped[good.size() / 2] = char(flipped[good.size() / 2] ^ 0x40);
    CHECK_THROWS_AS(load_checkpoint(write_variant(flipped)), CorruptionError);

    std::string bad_magic = good;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(load_checkpoint(write_variant(bad_magic)), CorruptionError);

    std::string future = good;
    future[4] = 2;  // version lives right after the magic
    CHECK_THROWS_AS(load_checkpoint(write_variant(future)), MigrationError);

    CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()),
                    ContractError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("generation is unchanged by a checkpoint round trip") {
    auto dir = temp_dir("ckpt_gen");
    ModelConfig cfg = smoke_model();
    ModelParams model(cfg, 37);
    model.quantize_to_f32();
    Image img = synthetic_image(cfg.image_size, 8);
    std::vector<int> prompt = encode_bytes("What is shown?");

    std::vector<int> before = generate(model, img, prompt, 8);
    const std::string path = (dir / "gen.ckpt").string();
    save_checkpoint(path, model);
    LoadedCheckpoint loaded = load_checkpoint(path);
    std::vector<int> after = generate(loaded.model, img, prompt, 8);
    CHECK(before == after);
    std::filesystem::remove_all(dir);
}

TEST_CASE("finetune smoke run learns and logs") {
    auto dir = temp_dir("finetune");
    TrainConfig cfg;
    cfg.model = smoke_model();
    cfg.batch_size = 4;
    cfg.finetune_epochs = 6;
    cfg.warmup_epochs = 1;
    cfg.base_lr = 0.5;  // absolute lr 0.5*4/256 ~ 7.8e-3
    cfg.seed = 11;

    std::vector<FundusRecord> records = smoke_records(8, cfg.model.image_size);
    ModelParams model(cfg.model, 41);
    TrainResult result = run_finetune(records, model, cfg, dir.string());

    const std::size_t steps_per_epoch = 2;
    CHECK(result.metrics.size() == steps_per_epoch * cfg.finetune_epochs);
    CHECK(result.skipped == 0);
    for (std::size_t i = 0; i < result.metrics.size(); ++i) {
        CHECK(result.metrics[i].step == i);
        CHECK(std::isfinite(result.metrics[i].total));
        CHECK(result.metrics[i].total > 0.0);
    }

    // smoothed loss should drop over the run
    auto mean_total = [&](std::size_t from, std::size_t to) {
        double s = 0.0;
        for (std::size_t i = from; i < to; ++i) s += result.metrics[i].total;
        return s / double(to - from);
    };
    const std::size_t n = result.metrics.size();
    CHECK(mean_total(n - 3, n) < mean_total(0, 3));

    // per-epoch checkpoints with retention of the last two
    CHECK(result.checkpoints.size() == 2);
    CHECK(std::filesystem::exists(result.checkpoints[0]));
    CHECK(std::filesystem::exists(result.checkpoints[1]));
    CHECK(result.checkpoints[1].find("epoch6") != std::string::npos);
    std::size_t ckpt_files = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.path().extension() == ".ckpt") ++ckpt_files;
    CHECK(ckpt_files == 2);

    std::vector<StepMetrics> logged =
        read_metrics_csv((dir / "metrics.csv").string());
    REQUIRE(logged.size() == result.metrics.size());
    for (std::size_t i = 0; i < logged.size(); ++i) {
        CHECK(logged[i].lr == result.metrics[i].lr);
        CHECK(logged[i].total == result.metrics[i].total);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("two seeded finetune runs are bit-identical") {
    TrainConfig cfg;
    cfg.model = smoke_model();
    cfg.batch_size = 3;
    cfg.finetune_epochs = 3;
    cfg.warmup_epochs = 1;
    cfg.seed = 99;

    std::vector<FundusRecord> records = smoke_records(5, cfg.model.image_size);

    ModelParams m1(cfg.model, 7);
    ModelParams m2(cfg.model, 7);
    TrainResult r1 = run_finetune(records, m1, cfg);
    TrainResult r2 = run_finetune(records, m2, cfg);

    REQUIRE(r1.metrics.size() == r2.metrics.size());
    for (std::size_t i = 0; i < r1.metrics.size(); ++i) {
        CHECK(r1.metrics[i].lr == r2.metrics[i].lr);
        CHECK(r1.metrics[i].clip == r2.metrics[i].clip);
        CHECK(r1.metrics[i].cls == r2.metrics[i].cls);
        CHECK(r1.metrics[i].llm == r2.metrics[i].llm);
        CHECK(r1.metrics[i].total == r2.metrics[i].total);
    }
    for (std::size_t i = 0; i < m1.params().size(); ++i)
        CHECK(m1.params()[i].value == m2.params()[i].value);
}

TEST_CASE("finetune skips invalid records with a count") {
    TrainConfig cfg;
    cfg.model = smoke_model();
    cfg.batch_size = 4;
    cfg.finetune_epochs = 2;
    cfg.warmup_epochs = 1;

    std::vector<FundusRecord> records = smoke_records(5, cfg.model.image_size);
    records[2].dialogue.pop_back();           // only two rounds
    records[4].description = "wrong prefix";  // breaks description contract

    ModelParams model(cfg.model, 3);
    TrainResult result = run_finetune(records, model, cfg);
    CHECK(result.skipped == 2);
    CHECK(result.metrics.size() == cfg.finetune_epochs);  // 3 usable, batch 4

    std::vector<FundusRecord> tiny_images = smoke_records(2, 8);
    CHECK_THROWS_AS(run_finetune(tiny_images, model, cfg), ContractError);
    CHECK_THROWS_AS(run_finetune({}, model, cfg), ContractError);
}

TEST_CASE("llm-only weights zero the contrastive and sign columns") {
    TrainConfig cfg;
    cfg.model = smoke_model();
    cfg.batch_size = 4;
    cfg.finetune_epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.loss_weights.clip = 0.0;
    cfg.loss_weights.cls = 0.0;
    cfg.loss_weights.llm = 1.0;

    std::vector<FundusRecord> records = smoke_records(4, cfg.model.image_size);
    ModelParams model(cfg.model, 5);
    TrainResult result = run_finetune(records, model, cfg);
    for (const StepMetrics& m : result.metrics) {
        CHECK(m.clip == 0.0);
        CHECK(m.cls == 0.0);
        CHECK(m.llm == m.total);
    }
}

TEST_CASE("pretrain optimizes captions with llm loss only") {
    TrainConfig cfg;
    cfg.model = smoke_model();
    cfg.batch_size = 4;
    cfg.pretrain_epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.seed = 17;

    std::vector<PretrainPair> pairs;
    for (std::size_t i = 0; i < 4; ++i) {
        PretrainPair p;
        p.image.inline_image = synthetic_image(cfg.model.image_size, 50 + i);
        p.caption = "fundus with visible optic disc " + std::to_string(i);
        p.modality = Modality::Fundus;
        pairs.push_back(p);
    }
    PretrainPair chart;
    chart.image.inline_image = synthetic_image(cfg.model.image_size, 99);
    chart.caption = "a table";
    chart.modality = Modality::TableChart;
    pairs.push_back(chart);

    ModelParams model(cfg.model, 2);
    TrainResult result = run_pretrain(pairs, model, cfg);
    CHECK(result.skipped == 1);
    CHECK(result.metrics.size() == cfg.pretrain_epochs);
    for (const StepMetrics& m : result.metrics) {
        CHECK(m.clip == 0.0);
        CHECK(m.cls == 0.0);
        CHECK(m.llm == m.total);
    }

    // per-token loss at init sits near the uniform baseline ln(vocab)
    std::size_t target_tokens = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::string answer =
            prepend_modality(clean_caption(pairs[i].caption), pairs[i].modality);
        const std::string& q = select_instruction(
            answer, cfg.seed ^ ((i + 1) * 0x9e3779b97f4a7c15ull));
        TokenStream ts = encode_dialogue({{q, answer}});
        for (std::uint8_t t : ts.is_target) target_tokens += t;
    }
    const double per_token =
        result.metrics[0].llm / (double(target_tokens) / 4.0);
    CHECK(per_token == doctest::Approx(std::log(259.0)).epsilon(0.15));

    CHECK_THROWS_AS(run_pretrain({}, model, cfg), ContractError);
    CHECK_THROWS_AS(run_pretrain({chart}, model, cfg), ContractError);
}

TEST_CASE("warmup must leave room for decay") {
    TrainConfig cfg;
    cfg.model = smoke_model();
    cfg.batch_size = 4;
    cfg.finetune_epochs = 1;
    cfg.warmup_epochs = 1;
    std::vector<FundusRecord> records = smoke_records(4, cfg.model.image_size);
    ModelParams model(cfg.model, 3);
    CHECK_THROWS_AS(run_finetune(records, model, cfg), ContractError);
}
