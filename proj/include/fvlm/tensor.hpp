#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fvlm/errors.hpp"

// Tape-based reverse-mode autodiff over f64 tensors (1-D and 2-D).
// A Tape owns every node of one computation graph; Tensor is a cheap handle.
// Replaying the tape re-executes all forward closures in creation order,
// which is what the finite-difference checker leans on.

namespace fvlm {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

struct TensorData {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized lazily on first backward()
    bool requires_grad = false;
    std::uint32_t id = 0;
};

class Tape;

class Tensor {
public:
    Tensor() = default;

    const Shape& shape() const { return data_->shape; }
    std::size_t size() const { return data_->value.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    const std::vector<double>& value() const { return data_->value; }
    const std::vector<double>& grad() const;
    double scalar() const;
    bool requires_grad() const { return data_->requires_grad; }
    bool defined() const { return data_ != nullptr; }

    Tape* tape() const { return tape_; }
    const std::shared_ptr<TensorData>& ptr() const { return data_; }

private:
    friend class Tape;
    Tape* tape_ = nullptr;
    std::shared_ptr<TensorData> data_;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Differentiable input. `values` must match the shape's element count.
    Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = true);
    /// Non-differentiable input (masks, targets, fixed scalars).
    Tensor constant(Shape shape, std::vector<double> values);

    /// Reverse pass from a scalar root. Grads of earlier calls are discarded;
    /// within one call, fan-out accumulates additively.
    void backward(const Tensor& root);

    /// Re-run every forward closure in creation order.
    void replay();

    std::size_t node_count() const { return nodes_.size(); }

    // Op-implementation hooks.
    Tensor alloc(const char* op, Shape shape, bool requires_grad);
    void define(const Tensor& out, std::function<void()> fwd, std::function<void()> bwd);

private:
    struct Node {
        std::shared_ptr<TensorData> data;
        std::function<void()> fwd;
        std::function<void()> bwd;
        const char* op = "";
    };
    std::vector<Node> nodes_;
};

// ---- primitives ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// x [r x c] plus a length-c bias broadcast over rows.
Tensor add_rowvec(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);
/// Multiply by a [1]-shaped tensor (e.g. a learned temperature).
Tensor scale_by(const Tensor& x, const Tensor& s);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor exp_elem(const Tensor& x);
/// Row-wise softmax; throws NumericError on non-finite input.
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);
Tensor sum_all(const Tensor& x);
Tensor mean_rows(const Tensor& x);
Tensor l2_normalize_rows(const Tensor& x);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor gather_rows(const Tensor& table, std::vector<std::size_t> ids);
Tensor reshape(const Tensor& x, Shape shape);

/// (SiLU(x·w_gate) ⊙ (x·w_up)) · w_down.
Tensor swiglu_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up,
                  const Tensor& w_down);
/// softmax(q·kᵀ/√d_h + mask)·v over rows; the causal mask adds -1e30 to
/// strictly-upper entries, which underflows to exactly zero attention.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            bool causal);

/// Mean over rows, sum over columns of BCE(sigmoid(logit), target); probabilities
/// are clamped to [eps, 1-eps] and clamped entries get exactly zero gradient.
Tensor multilabel_bce_with_logits(const Tensor& logits, const Tensor& targets,
                                  double eps = 1e-12);
/// Sum over rows with mask!=0 of -log softmax(logits_row)[target]; scalar out.
Tensor masked_token_nll(const Tensor& logits, std::vector<std::size_t> targets,
                        std::vector<std::uint8_t> mask);

// ---- gradient checking -----------------------------------------------------

struct GradCheckParam {
    std::string name;
    Shape shape;
    std::vector<double> value;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t checked = 0;
};

using GraphBuilder =
    std::function<Tensor(Tape&, const std::map<std::string, Tensor>&)>;

/// Central finite differences against the tape's analytic gradients.
/// rel err = |a-n| / max(|a|,|n|,1); throws NumericError on non-finite values.
GradCheckResult grad_check(const GraphBuilder& build,
                           const std::vector<GradCheckParam>& params,
                           double step = 1e-5);

}  // namespace fvlm
