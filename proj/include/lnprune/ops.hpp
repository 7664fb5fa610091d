#pragma once

#include <vector>

#include "lnprune/tensor.hpp"

namespace lnprune {

// Parameter value with its gradient; grad is empty until a backward pass
// fills it, and must match value's shape when present.
struct GradPair {
    Tensor value;
    Tensor grad;

    bool has_grad() const { return !grad.empty(); }
    void check() const;  // throws ShapeError if grad present with wrong shape
};

// 2-D convolution, cross-correlation orientation, NCHW layout.
// input [N,C,H,W], weights [D,C,k,k], bias [D] -> [N,D,H',W'] with
// H' = (H + 2*pad - k)/stride + 1. Inner products accumulate in 64-bit
// and round to float32 once per output element.
Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                      i64 stride, i64 pad);

struct ConvGrads {
    Tensor input;
    Tensor weights;
    Tensor bias;
};
ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& input, const Tensor& weights,
                          i64 stride, i64 pad);

Tensor relu_forward(const Tensor& x);
// Subgradient at exactly 0 is 0: grad passes only where x > 0.
Tensor relu_backward(const Tensor& grad_out, const Tensor& x);

struct MaxPoolOut {
    Tensor out;
    // Flat index into the input tensor of the winning element, one per output
    // element, in output-flat order. Ties go to the lowest flat index.
    std::vector<i64> argmax;
};
MaxPoolOut maxpool2d_forward(const Tensor& x, i64 window, i64 stride);
Tensor maxpool2d_backward(const Tensor& grad_out, const std::vector<i64>& argmax,
                          const Shape& input_shape);

// Global average pool: [N,C,H,W] -> [N,C] per-channel spatial mean.
Tensor gap_forward(const Tensor& x);
Tensor gap_backward(const Tensor& grad_out, i64 height, i64 width);

// Affine map: x [N,F], weights [O,F], bias [O] -> [N,O].
Tensor dense_forward(const Tensor& x, const Tensor& weights, const Tensor& bias);

struct DenseGrads {
    Tensor input;
    Tensor weights;
    Tensor bias;
};
DenseGrads dense_backward(const Tensor& grad_out, const Tensor& x, const Tensor& weights);

// Row-wise softmax with max-subtraction, [N,C] -> [N,C].
Tensor softmax_forward(const Tensor& logits);

struct XentOut {
    double loss = 0.0;           // mean cross-entropy over the batch
    Tensor grad_logits;          // (softmax - one_hot) / N
};
XentOut softmax_xent(const Tensor& logits, const std::vector<i64>& labels);

}  // namespace lnprune
