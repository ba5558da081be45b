#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fvlm/forge.hpp"
#include "fvlm/model.hpp"
#include "fvlm/objectives.hpp"

namespace fvlm {

struct TrainConfig {
    ModelConfig model;
    double base_lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.02;
    std::size_t batch_size = 8;
    std::size_t pretrain_epochs = 10;
    std::size_t finetune_epochs = 30;
    std::size_t warmup_epochs = 1;
    double lr_floor = 0.0;  // the cosine schedule bottoms out at exactly 0
    LossWeights loss_weights;
    double label_smoothing = 0.0;
    std::uint64_t seed = 42;

    void validate() const;
};

/// key = value lines; '#' starts a comment. Unknown keys and malformed
/// values are reported with the offending key.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::string& path);

/// base_lr * batch / 256.
double compute_absolute_lr(double base_lr, std::size_t batch_size);

/// Linear ramp 0 -> peak over `warmup_steps`, then half-cosine decay to
/// exactly 0 at `total_steps`. Both landmark values are returned exactly.
double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
             double peak);

struct OptimizerState {
    std::uint64_t step = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
};

struct AdamWConfig {
    double lr = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Decoupled weight decay first (theta -= lr * wd * theta), then the
/// bias-corrected Adam update. Moments are created on first use; gradients
/// are validated for finiteness with the parameter named on failure.
void adamw_step(std::vector<Param>& params,
                const std::map<std::string, std::vector<double>>& grads,
                OptimizerState& state, const AdamWConfig& opt);

struct StepMetrics {
    std::size_t step = 0;
    double lr = 0.0;
    double clip = 0.0;
    double cls = 0.0;
    double llm = 0.0;
    double total = 0.0;
};

/// One line per step: step,lr,clip,cls,llm,total with %.17g reals.
void write_metrics_csv(const std::vector<StepMetrics>& metrics,
                       const std::string& path);
std::vector<StepMetrics> read_metrics_csv(const std::string& path);

struct TrainResult {
    std::vector<StepMetrics> metrics;
    std::size_t skipped = 0;       // records dropped before training
    std::vector<std::string> checkpoints;  // retained paths, oldest first
};

/// Caption pairs -> single-round instruction dialogues, optimized with
/// loss weights forced to (0, 0, 1). TableChart or unloadable pairs are
/// skipped and counted. Writes per-epoch checkpoints (last 2 kept) and
/// metrics.csv into out_dir unless it is empty.
TrainResult run_pretrain(const std::vector<PretrainPair>& corpus,
                         ModelParams& model, const TrainConfig& cfg,
                         const std::string& out_dir = "",
                         const std::string& corpus_dir = "");

/// Full three-objective training over fundus records; records failing
/// corpus validation are skipped with a warning and counted.
TrainResult run_finetune(const std::vector<FundusRecord>& corpus,
                         ModelParams& model, const TrainConfig& cfg,
                         const std::string& out_dir = "",
                         const std::string& corpus_dir = "");

}  // namespace fvlm
