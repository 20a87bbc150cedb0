//! Parameter-free spatial attention, global average pooling, and stripe
//! pooling.
//!
//! The attention layer sums a `C x H x W` feature map along the channel axis
//! into a 2-D intensity matrix, softmaxes the flattened matrix into
//! per-position weights `p(i, j)`, and rescales every channel of the feature
//! map by those weights. It has no trainable parameters; its backward pass is
//! the closed-form Jacobian implemented in [`sa_backward`] and materialized by
//! [`sa_jacobian`].

use crate::error::{Error, Result};
use crate::tape::LayerTape;
use crate::tensor::Tensor;

/// Largest flattened side allowed when materializing the dense SA Jacobian.
pub const SA_JACOBIAN_MAX_SIDE: usize = 4096;

/// Per-position attention weights over an `H x W` feature-map grid.
///
/// `p` is a probability distribution over spatial positions: every entry is
/// strictly positive and the entries sum to 1. `a` retains the raw channel
/// sums the softmax was computed from, for diagnostics.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub p: Tensor,
    pub a: Tensor,
}

/// Pooling convention for [`gap_forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapMode {
    /// `G_k = (1 / HW) * sum_{i,j} f_k(i, j)`
    Mean,
    /// `G_k = sum_{i,j} f_k(i, j)`
    Sum,
}

/// Row partition used by [`stripe_pool`]: stripe `s` covers rows
/// `[floor(s * H / m), floor((s + 1) * H / m))`.
#[derive(Debug, Clone)]
pub struct StripeLayout {
    bounds: Vec<usize>,
}

impl StripeLayout {
    pub fn new(height: usize, m: usize) -> Result<StripeLayout> {
        if m == 0 || m > height {
            return Err(Error::Config(format!(
                "stripe count {m} must be in 1..={height} (feature-map height)"
            )));
        }
        let bounds = (0..=m).map(|s| s * height / m).collect();
        Ok(StripeLayout { bounds })
    }

    pub fn stripes(&self) -> usize {
        self.bounds.len() - 1
    }

    /// Half-open row range of stripe `s`.
    pub fn rows(&self, s: usize) -> std::ops::Range<usize> {
        self.bounds[s]..self.bounds[s + 1]
    }
}

fn check_feature_map(op: &'static str, f: &Tensor) -> Result<()> {
    if f.rank() != 3 {
        return Err(Error::shape(op, format!("expected C x H x W, got {:?}", f.shape())));
    }
    Ok(())
}

/// Softmax over the channel sums of `f`, then per-position rescaling:
/// `F_k(i, j) = f_k(i, j) * p(i, j)`.
pub fn sa_forward(f: &Tensor) -> Result<(Tensor, AttentionMap, LayerTape)> {
    check_feature_map("sa_forward", f)?;
    if !f.is_finite() {
        return Err(Error::NonFinite("sa_forward input".into()));
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);

    let mut a = Tensor::zeros(&[h, w]);
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                *a.at2_mut(i, j) += f.at3(k, i, j);
            }
        }
    }
    let max = a.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = Tensor::from_fn(&[h, w], |i| (a.data()[i] - max).exp());
    let sum: f64 = p.data().iter().sum();
    p.scale(1.0 / sum);

    let mut out = Tensor::zeros(f.shape());
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                *out.at3_mut(k, i, j) = f.at3(k, i, j) * p.at2(i, j);
            }
        }
    }
    let tape = LayerTape::Sa {
        input: f.clone(),
        p: p.clone(),
    };
    Ok((out, AttentionMap { p, a }, tape))
}

/// Closed-form backward pass of the attention layer.
///
/// The full Jacobian contraction
/// `grad_f[t](m,n) = sum_{k,i,j} grad_out[k](i,j) * dF_k(i,j)/df_t(m,n)`
/// reduces to
/// `grad_f = p (*) grad_out + broadcast_over_channels(q (*) p - <q, p> * p)`
/// with `q(i,j) = sum_k grad_out[k](i,j) * f[k](i,j)`. [`sa_jacobian`]
/// materializes the unreduced three-case form; the two must agree to 1e-12.
pub fn sa_backward(tape: LayerTape, grad_out: &Tensor) -> Result<Tensor> {
    let (f, p) = match tape {
        LayerTape::Sa { input, p } => (input, p),
        other => {
            return Err(Error::Contract(format!(
                "sa_backward received a {} tape",
                other.kind()
            )))
        }
    };
    if grad_out.shape() != f.shape() {
        return Err(Error::shape(
            "sa_backward",
            format!("grad_out {:?} vs input {:?}", grad_out.shape(), f.shape()),
        ));
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);

    let mut q = Tensor::zeros(&[h, w]);
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                *q.at2_mut(i, j) += grad_out.at3(k, i, j) * f.at3(k, i, j);
            }
        }
    }
    let dot: f64 = q
        .data()
        .iter()
        .zip(p.data())
        .map(|(qv, pv)| qv * pv)
        .sum();
    let mut grad_f = Tensor::zeros(f.shape());
    for t in 0..c {
        for m in 0..h {
            for n in 0..w {
                let pv = p.at2(m, n);
                *grad_f.at3_mut(t, m, n) =
                    pv * grad_out.at3(t, m, n) + q.at2(m, n) * pv - dot * pv;
            }
        }
    }
    Ok(grad_f)
}

/// Dense Jacobian of the attention layer, for tests and diagnostics.
///
/// Entry `[(k,i,j), (t,m,n)]` is `dF_k(i,j)/df_t(m,n)`, laid out with the
/// output index flattened along rows and the input index along columns:
///
/// * same channel and position: `f_k(i,j) p(i,j) (1 - p(i,j)) + p(i,j)`
/// * same position, different channel: `f_k(i,j) p(i,j) (1 - p(i,j))`
/// * different position: `-f_k(i,j) p(i,j) p(m,n)`
pub fn sa_jacobian(f: &Tensor) -> Result<Tensor> {
    check_feature_map("sa_jacobian", f)?;
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let side = c * h * w;
    if side > SA_JACOBIAN_MAX_SIDE {
        return Err(Error::Config(format!(
            "sa_jacobian side {side} exceeds the {SA_JACOBIAN_MAX_SIDE}-entry guard"
        )));
    }
    let (_, att, _) = sa_forward(f)?;
    let p = &att.p;

    let mut jac = Tensor::zeros(&[side, side]);
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                let row = (k * h + i) * w + j;
                let fv = f.at3(k, i, j);
                let pij = p.at2(i, j);
                for t in 0..c {
                    for m in 0..h {
                        for n in 0..w {
                            let col = (t * h + m) * w + n;
                            let val = if i == m && j == n {
                                let same = fv * pij * (1.0 - pij);
                                if k == t {
                                    same + pij
                                } else {
                                    same
                                }
                            } else {
                                -fv * pij * p.at2(m, n)
                            };
                            *jac.at2_mut(row, col) = val;
                        }
                    }
                }
            }
        }
    }
    Ok(jac)
}

/// Global average pooling (or plain summation) over the spatial axes.
pub fn gap_forward(f: &Tensor, mode: GapMode) -> Result<(Tensor, LayerTape)> {
    check_feature_map("gap_forward", f)?;
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let scale = match mode {
        GapMode::Mean => 1.0 / (h * w) as f64,
        GapMode::Sum => 1.0,
    };
    let mut g = Tensor::zeros(&[c]);
    for k in 0..c {
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                acc += f.at3(k, i, j);
            }
        }
        g.data_mut()[k] = acc * scale;
    }
    Ok((
        g,
        LayerTape::Gap {
            input_shape: [c, h, w],
            mode,
        },
    ))
}

pub fn gap_backward(tape: LayerTape, grad_g: &Tensor) -> Result<Tensor> {
    let ([c, h, w], mode) = match tape {
        LayerTape::Gap { input_shape, mode } => (input_shape, mode),
        other => {
            return Err(Error::Contract(format!(
                "gap_backward received a {} tape",
                other.kind()
            )))
        }
    };
    if grad_g.rank() != 1 || grad_g.len() != c {
        return Err(Error::shape(
            "gap_backward",
            format!("grad_g {:?} vs [{c}]", grad_g.shape()),
        ));
    }
    let scale = match mode {
        GapMode::Mean => 1.0 / (h * w) as f64,
        GapMode::Sum => 1.0,
    };
    let mut grad_f = Tensor::zeros(&[c, h, w]);
    for k in 0..c {
        let g = grad_g.data()[k] * scale;
        for i in 0..h {
            for j in 0..w {
                *grad_f.at3_mut(k, i, j) = g;
            }
        }
    }
    Ok(grad_f)
}

/// Partitions the height axis into `m` contiguous horizontal stripes and
/// mean-pools each stripe into a `[C]` part vector.
pub fn stripe_pool(f: &Tensor, m: usize) -> Result<(Vec<Tensor>, LayerTape)> {
    check_feature_map("stripe_pool", f)?;
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let layout = StripeLayout::new(h, m)?;
    let mut parts = Vec::with_capacity(m);
    for s in 0..m {
        let rows = layout.rows(s);
        let scale = 1.0 / (rows.len() * w) as f64;
        let mut part = Tensor::zeros(&[c]);
        for k in 0..c {
            let mut acc = 0.0;
            for i in rows.clone() {
                for j in 0..w {
                    acc += f.at3(k, i, j);
                }
            }
            part.data_mut()[k] = acc * scale;
        }
        parts.push(part);
    }
    Ok((
        parts,
        LayerTape::Stripe {
            input_shape: [c, h, w],
            layout,
        },
    ))
}

/// Distributes each part gradient uniformly over the positions of its stripe.
pub fn stripe_backward(tape: LayerTape, grad_parts: &[Tensor]) -> Result<Tensor> {
    let ([c, h, w], layout) = match tape {
        LayerTape::Stripe {
            input_shape,
            layout,
        } => (input_shape, layout),
        other => {
            return Err(Error::Contract(format!(
                "stripe_backward received a {} tape",
                other.kind()
            )))
        }
    };
    if grad_parts.len() != layout.stripes() {
        return Err(Error::Contract(format!(
            "stripe_backward received {} part gradients for {} stripes",
            grad_parts.len(),
            layout.stripes()
        )));
    }
    let mut grad_f = Tensor::zeros(&[c, h, w]);
    for (s, grad_part) in grad_parts.iter().enumerate() {
        if grad_part.rank() != 1 || grad_part.len() != c {
            return Err(Error::shape(
                "stripe_backward",
                format!("part gradient {:?} vs [{c}]", grad_part.shape()),
            ));
        }
        let rows = layout.rows(s);
        let scale = 1.0 / (rows.len() * w) as f64;
        for k in 0..c {
            let g = grad_part.data()[k] * scale;
            for i in rows.clone() {
                for j in 0..w {
                    *grad_f.at3_mut(k, i, j) = g;
                }
            }
        }
    }
    Ok(grad_f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sa_single_position_is_identity() {
        let f = Tensor::from_vec(&[3, 1, 1], vec![-2.0, 0.5, 7.0]).unwrap();
        let (out, att, tape) = sa_forward(&f).unwrap();
        assert_eq!(att.p.data(), &[1.0]);
        assert_eq!(out, f);

        let g = Tensor::from_vec(&[3, 1, 1], vec![1.0, -1.0, 2.0]).unwrap();
        let grad = sa_backward(tape, &g).unwrap();
        assert_eq!(grad, g);
    }

    #[test]
    fn sa_constant_map_is_uniform() {
        let f = Tensor::filled(&[1, 2, 2], 4.0);
        let (out, att, _) = sa_forward(&f).unwrap();
        for &pv in att.p.data() {
            assert!((pv - 0.25).abs() < 1e-15);
        }
        for &v in out.data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sa_matches_direct_softmax_oracle() {
        // independent oracle: flatten, exponentiate, normalize, multiply back
        let f = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, att, _) = sa_forward(&f).unwrap();

        let exps: Vec<f64> = f.data().iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        for idx in 0..4 {
            let expected_p = exps[idx] / sum;
            assert!((att.p.data()[idx] - expected_p).abs() < 1e-14);
            assert!((out.data()[idx] - f.data()[idx] * expected_p).abs() < 1e-14);
        }
    }

    #[test]
    fn sa_backward_zero_grad() {
        let f = Tensor::from_fn(&[2, 3, 3], |i| (i as f64 * 0.37).cos());
        let (_, _, tape) = sa_forward(&f).unwrap();
        let grad = sa_backward(tape, &Tensor::zeros(f.shape())).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sa_backward_rejects_wrong_tape() {
        let f = Tensor::zeros(&[1, 2, 2]);
        let (_, tape) = gap_forward(&f, GapMode::Mean).unwrap();
        assert!(matches!(
            sa_backward(tape, &f),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sa_jacobian_single_position_is_identity() {
        let f = Tensor::from_vec(&[2, 1, 1], vec![3.0, -1.0]).unwrap();
        let jac = sa_jacobian(&f).unwrap();
        assert_eq!(jac.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn sa_jacobian_size_guard() {
        let f = Tensor::zeros(&[2, 64, 64]);
        assert!(matches!(sa_jacobian(&f), Err(Error::Config(_))));
    }

    #[test]
    fn gap_constant_mean() {
        let f = Tensor::filled(&[2, 3, 4], 3.0);
        let (g, _) = gap_forward(&f, GapMode::Mean).unwrap();
        assert_eq!(g.data(), &[3.0, 3.0]);
    }

    #[test]
    fn gap_sum_counting() {
        let f = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (g, _) = gap_forward(&f, GapMode::Sum).unwrap();
        assert_eq!(g.data(), &[10.0]);
    }

    #[test]
    fn gap_backward_distributes() {
        let f = Tensor::zeros(&[1, 2, 2]);
        let (_, tape) = gap_forward(&f, GapMode::Mean).unwrap();
        let gg = Tensor::from_vec(&[1], vec![8.0]).unwrap();
        let gf = gap_backward(tape, &gg).unwrap();
        assert_eq!(gf.data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn stripe_m1_equals_gap_mean() {
        let f = Tensor::from_fn(&[2, 4, 3], |i| (i as f64).sqrt());
        let (parts, _) = stripe_pool(&f, 1).unwrap();
        let (g, _) = gap_forward(&f, GapMode::Mean).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0], g);
    }

    #[test]
    fn stripe_m_equals_h_gives_row_means() {
        let f = Tensor::from_vec(&[1, 2, 2], vec![1.0, 3.0, 5.0, 9.0]).unwrap();
        let (parts, _) = stripe_pool(&f, 2).unwrap();
        assert_eq!(parts[0].data(), &[2.0]);
        assert_eq!(parts[1].data(), &[7.0]);
    }

    #[test]
    fn stripe_uneven_heights_go_to_later_stripes() {
        // H = 5, m = 2: rows 0..2 and 2..5
        let layout = StripeLayout::new(5, 2).unwrap();
        assert_eq!(layout.rows(0), 0..2);
        assert_eq!(layout.rows(1), 2..5);

        let f = Tensor::from_fn(&[1, 5, 1], |i| i as f64);
        let (parts, _) = stripe_pool(&f, 2).unwrap();
        assert_eq!(parts[0].data(), &[0.5]); // mean of rows 0, 1
        assert_eq!(parts[1].data(), &[3.0]); // mean of rows 2, 3, 4
    }

    #[test]
    fn stripe_rejects_m_above_height() {
        let f = Tensor::zeros(&[1, 3, 3]);
        assert!(matches!(stripe_pool(&f, 4), Err(Error::Config(_))));
    }

    #[test]
    fn stripe_backward_distributes_within_stripes() {
        let f = Tensor::zeros(&[1, 5, 2]);
        let (_, tape) = stripe_pool(&f, 2).unwrap();
        let gp = vec![
            Tensor::from_vec(&[1], vec![8.0]).unwrap(),
            Tensor::from_vec(&[1], vec![12.0]).unwrap(),
        ];
        let gf = stripe_backward(tape, &gp).unwrap();
        // stripe 0: 2 rows x 2 cols -> 8 / 4 = 2; stripe 1: 3 x 2 -> 12 / 6 = 2
        assert!(gf.data().iter().all(|&v| v == 2.0));
    }
}
