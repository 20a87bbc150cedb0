//! Dense-tensor primitives: matrix multiply, 2-D convolution, ReLU, the
//! fully-connected layer and softmax cross-entropy, each with an exact
//! hand-derived backward pass.
//!
//! Everything is f64 and single-threaded; identical inputs give bitwise
//! identical outputs.

use crate::error::{Error, Result};
use crate::tape::LayerTape;
use crate::tensor::Tensor;

/// Standard matrix product of rank-2 tensors `[m x k] * [k x n] -> [m x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    for r in 0..m {
        for t in 0..k {
            let av = a.at2(r, t);
            for c in 0..n {
                *out.at2_mut(r, c) += av * b.at2(t, c);
            }
        }
    }
    Ok(out)
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || (padded - kernel) % stride != 0 {
        return Err(Error::Config(format!(
            "conv2d output size ({padded} - {kernel}) / {stride} + 1 is not a positive integer"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Cross-correlation (no kernel flip) of `x [C_in x H x W]` with
/// `kernels [C_out x C_in x kh x kw]` plus a per-output-channel bias.
pub fn conv2d_forward(
    x: &Tensor,
    kernels: &Tensor,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Result<(Tensor, LayerTape)> {
    if x.rank() != 3 || kernels.rank() != 4 || kernels.shape()[1] != x.shape()[0] {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?}, kernels {:?}", x.shape(), kernels.shape()),
        ));
    }
    let (c_out, c_in, kh, kw) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    if bias.len() != c_out {
        return Err(Error::shape(
            "conv2d",
            format!("bias length {} vs {} output channels", bias.len(), c_out),
        ));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let h_out = conv_out_dim(h, kh, stride, pad)?;
    let w_out = conv_out_dim(w, kw, stride, pad)?;

    let mut out = Tensor::zeros(&[c_out, h_out, w_out]);
    for co in 0..c_out {
        for i in 0..h_out {
            for j in 0..w_out {
                let mut acc = bias[co];
                for ci in 0..c_in {
                    for u in 0..kh {
                        // convert to signed once so padding underflow is explicit
                        let r = (i * stride + u) as isize - pad as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let c = (j * stride + v) as isize - pad as isize;
                            if c < 0 || c >= w as isize {
                                continue;
                            }
                            acc += x.at3(ci, r as usize, c as usize) * kernels.at4(co, ci, u, v);
                        }
                    }
                }
                *out.at3_mut(co, i, j) = acc;
            }
        }
    }
    let tape = LayerTape::Conv2d {
        input: x.clone(),
        kernels: kernels.clone(),
        stride,
        pad,
    };
    Ok((out, tape))
}

/// Exact gradients of [`conv2d_forward`] with respect to its input, kernels
/// and bias.
pub fn conv2d_backward(tape: LayerTape, grad_out: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (input, kernels, stride, pad) = match tape {
        LayerTape::Conv2d {
            input,
            kernels,
            stride,
            pad,
        } => (input, kernels, stride, pad),
        other => {
            return Err(Error::Contract(format!(
                "conv2d_backward received a {} tape",
                other.kind()
            )))
        }
    };
    let (c_out, c_in, kh, kw) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let h_out = conv_out_dim(h, kh, stride, pad)?;
    let w_out = conv_out_dim(w, kw, stride, pad)?;
    if grad_out.shape() != [c_out, h_out, w_out] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out {:?} vs forward output [{c_out}, {h_out}, {w_out}]",
                grad_out.shape()
            ),
        ));
    }

    let mut grad_x = Tensor::zeros(input.shape());
    let mut grad_k = Tensor::zeros(kernels.shape());
    let mut grad_b = vec![0.0; c_out];
    for co in 0..c_out {
        for i in 0..h_out {
            for j in 0..w_out {
                let g = grad_out.at3(co, i, j);
                grad_b[co] += g;
                for ci in 0..c_in {
                    for u in 0..kh {
                        let r = (i * stride + u) as isize - pad as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let c = (j * stride + v) as isize - pad as isize;
                            if c < 0 || c >= w as isize {
                                continue;
                            }
                            *grad_k.at4_mut(co, ci, u, v) += g * input.at3(ci, r as usize, c as usize);
                            *grad_x.at3_mut(ci, r as usize, c as usize) +=
                                g * kernels.at4(co, ci, u, v);
                        }
                    }
                }
            }
        }
    }
    Ok((grad_x, grad_k, grad_b))
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> (Tensor, LayerTape) {
    let out = Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0));
    (out, LayerTape::Relu { input: x.clone() })
}

/// Masks the gradient where the forward input was `<= 0` (gradient 0 at
/// exactly 0).
pub fn relu_backward(tape: LayerTape, grad_out: &Tensor) -> Result<Tensor> {
    let input = match tape {
        LayerTape::Relu { input } => input,
        other => {
            return Err(Error::Contract(format!(
                "relu_backward received a {} tape",
                other.kind()
            )))
        }
    };
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("grad_out {:?} vs input {:?}", grad_out.shape(), input.shape()),
        ));
    }
    Ok(Tensor::from_fn(input.shape(), |i| {
        if input.data()[i] > 0.0 {
            grad_out.data()[i]
        } else {
            0.0
        }
    }))
}

/// 2x2 stride-2 mean pooling; requires even spatial dims.
pub fn avgpool2_forward(x: &Tensor) -> Result<(Tensor, LayerTape)> {
    if x.rank() != 3 {
        return Err(Error::shape("avgpool2", format!("{:?}", x.shape())));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "avgpool2 requires even spatial dims, got {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros(&[c, h / 2, w / 2]);
    for k in 0..c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                *out.at3_mut(k, i, j) = 0.25
                    * (x.at3(k, 2 * i, 2 * j)
                        + x.at3(k, 2 * i, 2 * j + 1)
                        + x.at3(k, 2 * i + 1, 2 * j)
                        + x.at3(k, 2 * i + 1, 2 * j + 1));
            }
        }
    }
    Ok((
        out,
        LayerTape::AvgPool2 {
            input_shape: [c, h, w],
        },
    ))
}

pub fn avgpool2_backward(tape: LayerTape, grad_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = match tape {
        LayerTape::AvgPool2 { input_shape } => input_shape,
        other => {
            return Err(Error::Contract(format!(
                "avgpool2_backward received a {} tape",
                other.kind()
            )))
        }
    };
    if grad_out.shape() != [c, h / 2, w / 2] {
        return Err(Error::shape(
            "avgpool2_backward",
            format!("grad_out {:?} vs [{c}, {}, {}]", grad_out.shape(), h / 2, w / 2),
        ));
    }
    let mut grad_x = Tensor::zeros(&[c, h, w]);
    for k in 0..c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let g = 0.25 * grad_out.at3(k, i, j);
                *grad_x.at3_mut(k, 2 * i, 2 * j) = g;
                *grad_x.at3_mut(k, 2 * i, 2 * j + 1) = g;
                *grad_x.at3_mut(k, 2 * i + 1, 2 * j) = g;
                *grad_x.at3_mut(k, 2 * i + 1, 2 * j + 1) = g;
            }
        }
    }
    Ok(grad_x)
}

/// Affine map `logits = w . x + b` with `x [d]`, `w [c x d]`, `b [c]`.
pub fn fc_forward(x: &Tensor, w: &Tensor, b: &[f64]) -> Result<(Tensor, LayerTape)> {
    if x.rank() != 1 || w.rank() != 2 || w.shape()[1] != x.len() || b.len() != w.shape()[0] {
        return Err(Error::shape(
            "fc",
            format!("x {:?}, w {:?}, b [{}]", x.shape(), w.shape(), b.len()),
        ));
    }
    let (c, d) = (w.shape()[0], w.shape()[1]);
    let mut out = Tensor::zeros(&[c]);
    for r in 0..c {
        let mut acc = b[r];
        for t in 0..d {
            acc += w.at2(r, t) * x.data()[t];
        }
        out.data_mut()[r] = acc;
    }
    Ok((
        out,
        LayerTape::Fc {
            input: x.clone(),
            weight: w.clone(),
        },
    ))
}

/// Exact gradients of [`fc_forward`]: `(grad_x, grad_w, grad_b)`.
pub fn fc_backward(tape: LayerTape, grad_out: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (input, weight) = match tape {
        LayerTape::Fc { input, weight } => (input, weight),
        other => {
            return Err(Error::Contract(format!(
                "fc_backward received a {} tape",
                other.kind()
            )))
        }
    };
    let (c, d) = (weight.shape()[0], weight.shape()[1]);
    if grad_out.rank() != 1 || grad_out.len() != c {
        return Err(Error::shape(
            "fc_backward",
            format!("grad_out {:?} vs [{c}]", grad_out.shape()),
        ));
    }
    let mut grad_x = Tensor::zeros(&[d]);
    let mut grad_w = Tensor::zeros(&[c, d]);
    let grad_b = grad_out.data().to_vec();
    for r in 0..c {
        let g = grad_out.data()[r];
        for t in 0..d {
            grad_x.data_mut()[t] += g * weight.at2(r, t);
            *grad_w.at2_mut(r, t) = g * input.data()[t];
        }
    }
    Ok((grad_x, grad_w, grad_b))
}

/// Softmax cross-entropy over a logits vector, computed with max-subtraction.
///
/// Returns `(-log softmax(logits)[label], softmax(logits) - onehot(label))`.
pub fn softmax_ce(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    if logits.rank() != 1 {
        return Err(Error::shape("softmax_ce", format!("{:?}", logits.shape())));
    }
    let c = logits.len();
    if label >= c {
        return Err(Error::Config(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits.data()[label] - max);
    let mut grad = Tensor::from_vec(&[c], exps.iter().map(|e| e / sum).collect())?;
    grad.data_mut()[label] -= 1.0;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = tensor2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = tensor2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&eye, &b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = tensor2(1, 2, &[1.0, 2.0]);
        let b = tensor2(2, 1, &[3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = tensor2(2, 3, &[0.0; 6]);
        let b = tensor2(2, 2, &[0.0; 4]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_vec(&[1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let (y, _) = conv2d_forward(&x, &k, &[0.0], 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_counting_case() {
        let x = Tensor::filled(&[1, 3, 3], 1.0);
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let (y, _) = conv2d_forward(&x, &k, &[0.0], 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let x = Tensor::zeros(&[1, 5, 5]);
        let k = Tensor::zeros(&[1, 1, 2, 2]);
        // (5 - 2) / 2 is not an integer
        assert!(matches!(
            conv2d_forward(&x, &k, &[0.0], 2, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv_backward_zero_grad_gives_zero() {
        let x = Tensor::from_fn(&[2, 4, 4], |i| i as f64 * 0.1);
        let k = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64).sin());
        let (y, tape) = conv2d_forward(&x, &k, &[0.1, 0.2, 0.3], 1, 1).unwrap();
        let (gx, gk, gb) = conv2d_backward(tape, &Tensor::zeros(y.shape())).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gk.data().iter().all(|&v| v == 0.0));
        assert!(gb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_identity_kernel_passes_grad_through() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64);
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let (_, tape) = conv2d_forward(&x, &k, &[0.0], 1, 0).unwrap();
        let g = Tensor::from_fn(&[1, 3, 3], |i| (i as f64) - 4.0);
        let (gx, _, _) = conv2d_backward(tape, &g).unwrap();
        assert_eq!(gx, g);
    }

    #[test]
    fn conv_backward_rejects_wrong_tape() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let (_, tape) = relu(&x);
        let err = conv2d_backward(tape, &x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn relu_forward_and_subgradient_at_zero() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let (y, tape) = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::from_vec(&[3], vec![5.0, 5.0, 5.0]).unwrap();
        let gx = relu_backward(tape, &g).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn fc_identity_and_hand_case() {
        let x = Tensor::from_vec(&[2], vec![10.0, 20.0]).unwrap();
        let eye = tensor2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let (y, _) = fc_forward(&x, &eye, &[0.0, 0.0]).unwrap();
        assert_eq!(y.data(), x.data());

        let w = tensor2(1, 2, &[1.0, 2.0]);
        let (y, _) = fc_forward(&x, &w, &[3.0]).unwrap();
        assert_eq!(y.data(), &[53.0]);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let logits = Tensor::zeros(&[4]);
        let (loss, grad) = softmax_ce(&logits, 2).unwrap();
        assert!((loss - 4.0_f64.ln()).abs() < 1e-15);
        assert!((grad.data()[2] - (0.25 - 1.0)).abs() < 1e-15);
        let grad_sum: f64 = grad.data().iter().sum();
        assert!(grad_sum.abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_shift_invariance_exact_on_integer_logits() {
        let logits = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let shifted = Tensor::from_vec(&[3], vec![1001.0, 1002.0, 1003.0]).unwrap();
        let (l0, g0) = softmax_ce(&logits, 1).unwrap();
        let (l1, g1) = softmax_ce(&shifted, 1).unwrap();
        assert_eq!(l0, l1);
        assert_eq!(g0, g1);
    }

    #[test]
    fn softmax_ce_label_out_of_range() {
        let logits = Tensor::zeros(&[3]);
        assert!(matches!(softmax_ce(&logits, 3), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_ce_single_class_loss_is_exactly_zero() {
        let logits = Tensor::from_vec(&[1], vec![7.5]).unwrap();
        let (loss, grad) = softmax_ce(&logits, 0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.data(), &[0.0]);
    }

    #[test]
    fn avgpool2_hand_case() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, tape) = avgpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[2.5]);
        let g = Tensor::from_vec(&[1, 1, 1], vec![4.0]).unwrap();
        let gx = avgpool2_backward(tape, &g).unwrap();
        assert_eq!(gx.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn avgpool2_rejects_odd_dims() {
        let x = Tensor::zeros(&[1, 3, 2]);
        assert!(matches!(avgpool2_forward(&x), Err(Error::Config(_))));
    }
}
