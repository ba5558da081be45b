#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>
#include <sstream>

#include "fvlm/assets.hpp"
#include "fvlm/checkpoint.hpp"
#include "fvlm/cli.hpp"
#include "fvlm/forge.hpp"
#include "fvlm/image.hpp"
#include "fvlm/model.hpp"
#include "fvlm/stats.hpp"
#include "fvlm/tokenizer.hpp"
#include "fvlm/train.hpp"

namespace py = pybind11;
using namespace fvlm;

namespace {

// Model output is raw bytes; decode with replacement so callers always get str.
py::str lossy_str(const std::string& text) {
    return py::reinterpret_steal<py::str>(PyUnicode_DecodeUTF8(
        text.data(), static_cast<py::ssize_t>(text.size()), "replace"));
}

py::tuple run_cli(const std::vector<std::string>& args,
                  const std::string& stdin_text) {
    std::istringstream in(stdin_text);
    std::ostringstream out, err;
    const int status = run_command(args, in, out, err);
    return py::make_tuple(status, lossy_str(out.str()), lossy_str(err.str()));
}

py::str generate_text(const std::string& checkpoint,
                      const std::string& question,
                      const std::string& corpus, std::size_t max_new) {
    LoadedCheckpoint loaded = load_checkpoint(checkpoint);
    Image image;
    if (corpus.empty()) {
        image = synthetic_image(loaded.model.config().image_size, 42);
    } else {
        auto records = read_fundus_corpus(corpus);
        if (records.empty()) throw ContractError("'" + corpus + "' holds no records");
        image = load_image(records[0].image,
                           std::filesystem::path(corpus).parent_path().string());
    }
    std::vector<int> prompt = {kBos};
    for (int t : encode_bytes(question)) prompt.push_back(t);
    const std::vector<int> result = generate(loaded.model, image, prompt, max_new);
    return lossy_str(decode_bytes(
        {result.begin() + std::ptrdiff_t(prompt.size()), result.end()}));
}

py::dict checkpoint_info(const std::string& path) {
    LoadedCheckpoint loaded = load_checkpoint(path);
    const ModelConfig& cfg = loaded.model.config();
    py::dict config;
    config["image_size"] = cfg.image_size;
    config["patch_size"] = cfg.patch_size;
    config["embed_dim"] = cfg.embed_dim;
    config["encoder_layers"] = cfg.encoder_layers;
    config["decoder_layers"] = cfg.decoder_layers;
    config["heads"] = cfg.heads;
    config["vocab_size"] = cfg.vocab_size;
    config["max_tokens"] = cfg.max_tokens;
    config["sign_count"] = cfg.sign_count;
    config["ffn_hidden"] = cfg.ffn_hidden;
    config["sign_threshold"] = cfg.sign_threshold;
    config["pooled_projector_input"] = cfg.pooled_projector_input;
    std::vector<std::string> names;
    for (const Param& p : loaded.model.params()) names.push_back(p.name);
    py::dict info;
    info["config"] = config;
    info["parameters"] = names;
    info["total_elements"] = loaded.model.total_elements();
    info["has_optimizer_state"] = loaded.has_state;
    return info;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "fundus vision-language model core";
    m.attr("__version__") = "0.1.0";
    m.attr("BOS") = kBos;
    m.attr("EOS") = kEos;
    m.attr("PAD") = kPad;
    m.attr("VOCAB_SIZE") = kVocabSize;
    m.attr("SIGN_NAMES") = std::vector<std::string>(kSignNames.begin(),
                                                    kSignNames.end());

    py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
    py::register_exception<CorruptionError>(m, "CorruptionError",
                                            PyExc_ValueError);
    py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);

    m.def("encode_bytes", &encode_bytes, py::arg("text"),
          "Byte-level tokens for a string (no BOS/EOS added).");
    m.def("decode_bytes", &decode_bytes, py::arg("tokens"),
          "Inverse of encode_bytes; skips BOS/PAD, stops at EOS.");

    m.def("build_description", &build_description, py::arg("diseases"),
          py::arg("abnormal"),
          "Rule-based description line for a disease list.");
    m.def(
        "derive_signs",
        [](const std::vector<std::string>& diseases) {
            const SignVector v = derive_signs(diseases);
            return std::vector<int>(v.begin(), v.end());
        },
        py::arg("diseases"),
        "Six 0/1 sign indicators in canonical order.");
    m.def("clean_caption", &clean_caption, py::arg("text"),
          "Removes marker/color words; idempotent.");
    m.def("render_dialogue_prompt", &render_dialogue_prompt, py::arg("keyword"));
    m.def(
        "select_instruction",
        [](const std::string& answer, std::uint64_t seed) {
            return select_instruction(answer, seed);
        },
        py::arg("answer"), py::arg("seed"),
        "Seeded instruction template matched to the answer length.");

    m.def("normal_quantile", &normal_quantile, py::arg("p"));
    m.def(
        "wilson_interval",
        [](std::size_t k, std::size_t n, double confidence) {
            const WilsonInterval w = wilson_interval(k, n, confidence);
            return py::make_tuple(w.point, w.lower, w.upper);
        },
        py::arg("successes"), py::arg("n"), py::arg("confidence") = 0.95,
        "(point, lower, upper) Wilson score interval.");
    m.def(
        "bootstrap_ci",
        [](const std::vector<double>& values, std::size_t resamples,
           double confidence, std::uint64_t seed) {
            const Interval iv = bootstrap_ci(values, resamples, confidence, seed);
            return py::make_tuple(iv.lower, iv.upper);
        },
        py::arg("values"), py::arg("resamples") = 10000,
        py::arg("confidence") = 0.95, py::arg("seed") = 42,
        "Percentile bootstrap CI of the mean.");
    m.def("t_test_two_sided", &t_test_two_sided, py::arg("a"), py::arg("b"),
          "Welch two-sided p-value.");
    m.def("proportion_test", &proportion_test, py::arg("k1"), py::arg("n1"),
          py::arg("k2"), py::arg("n2"), py::arg("confidence") = 0.95,
          "Two-sided z test using Wilson standard errors.");
    m.def(
        "judge_accuracy",
        [](const std::set<std::string>& predicted,
           const std::set<std::string>& required,
           const std::set<std::string>& optional) {
            GroundTruth t;
            t.required = required;
            t.optional = optional;
            return judge_accuracy(predicted, t);
        },
        py::arg("predicted"), py::arg("required"),
        py::arg("optional") = std::set<std::string>{},
        "required <= predicted <= required | optional.");

    m.def("compute_absolute_lr", &compute_absolute_lr, py::arg("base_lr"),
          py::arg("batch_size"), "base_lr * batch / 256.");
    m.def("lr_at", &lr_at, py::arg("step"), py::arg("total_steps"),
          py::arg("warmup_steps"), py::arg("peak"),
          "Linear warmup then half-cosine decay to 0.");

    m.def("run", &run_cli, py::arg("args"), py::arg("stdin_text") = "",
          "Run a CLI command; returns (status, stdout, stderr).");
    m.def("generate_text", &generate_text, py::arg("checkpoint"),
          py::arg("question"), py::arg("corpus") = "",
          py::arg("max_new") = 256,
          "One greedy-decoded answer from a checkpoint.");
    m.def("checkpoint_info", &checkpoint_info, py::arg("path"),
          "Config, parameter names, and sizes stored in a checkpoint.");
}
