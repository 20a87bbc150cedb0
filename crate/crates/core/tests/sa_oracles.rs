//! Independent oracles for the spatial attention layer: a literal four-index
//! Jacobian contraction over the three gradient cases, a chain-rule
//! construction of the dense Jacobian, exact sign-structure assertions, and
//! the attention-map invariants.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use sapl_core::attention::{gap_forward, sa_backward, sa_forward, sa_jacobian, GapMode};
use sapl_core::Tensor;

fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Attention weights computed by the plain textbook softmax (no
/// max-subtraction), as an independent route.
fn oracle_p(f: &Tensor) -> Vec<f64> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut a = vec![0.0; h * w];
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                a[i * w + j] += f.at3(k, i, j);
            }
        }
    }
    let exps: Vec<f64> = a.iter().map(|v| v.exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Literal four-index contraction of the three-case gradient formula:
/// for every input entry `(t, m, n)`, sum the upstream gradient against the
/// case value for every output entry `(k, i, j)`.
fn literal_sa_grad(f: &Tensor, grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let p = oracle_p(f);
    let at = |i: usize, j: usize| p[i * w + j];
    let mut grad = Tensor::zeros(f.shape());
    for t in 0..c {
        for m in 0..h {
            for n in 0..w {
                let mut acc = 0.0;
                for k in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let entry = if i == m && j == n {
                                if k == t {
                                    f.at3(k, i, j) * at(i, j) * (1.0 - at(i, j)) + at(i, j)
                                } else {
                                    f.at3(k, i, j) * at(i, j) * (1.0 - at(i, j))
                                }
                            } else {
                                -f.at3(k, i, j) * at(i, j) * at(m, n)
                            };
                            acc += grad_out.at3(k, i, j) * entry;
                        }
                    }
                }
                *grad.at3_mut(t, m, n) = acc;
            }
        }
    }
    grad
}

/// Dense Jacobian built by composing the product rule with the softmax
/// derivative (no case split): `J = f_k(i,j) * p(i,j) (delta - p(m,n)) +
/// p(i,j) delta_kt delta_(ij)(mn)`.
fn chain_rule_jacobian(f: &Tensor) -> Tensor {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let p = oracle_p(f);
    let side = c * h * w;
    let mut jac = Tensor::zeros(&[side, side]);
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                let row = (k * h + i) * w + j;
                for t in 0..c {
                    for m in 0..h {
                        for n in 0..w {
                            let col = (t * h + m) * w + n;
                            let delta_pos = if i == m && j == n { 1.0 } else { 0.0 };
                            let dp = p[i * w + j] * (delta_pos - p[m * w + n]);
                            let mut val = f.at3(k, i, j) * dp;
                            if k == t && i == m && j == n {
                                val += p[i * w + j];
                            }
                            *jac.at2_mut(row, col) = val;
                        }
                    }
                }
            }
        }
    }
    jac
}

fn all_shapes(max_c: usize, max_h: usize, max_w: usize) -> Vec<[usize; 3]> {
    let mut shapes = Vec::new();
    for c in 1..=max_c {
        for h in 1..=max_h {
            for w in 1..=max_w {
                shapes.push([c, h, w]);
            }
        }
    }
    shapes
}

#[test]
fn sa_backward_matches_literal_four_index_loop() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for shape in all_shapes(4, 4, 4) {
        let f = rand_tensor(&mut rng, &shape, 0.0, 2.0);
        let grad_out = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let (_, _, tape) = sa_forward(&f).unwrap();
        let got = sa_backward(tape, &grad_out).unwrap();
        let want = literal_sa_grad(&f, &grad_out);
        assert!(
            got.max_abs_diff(&want) < 1e-12,
            "shape {shape:?}: {}",
            got.max_abs_diff(&want)
        );
    }
}

#[test]
fn sa_jacobian_matches_chain_rule_construction() {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    for shape in all_shapes(3, 3, 3) {
        let f = rand_tensor(&mut rng, &shape, -1.0, 2.0);
        let got = sa_jacobian(&f).unwrap();
        let want = chain_rule_jacobian(&f);
        assert!(got.max_abs_diff(&want) < 1e-12, "shape {shape:?}");
    }
}

#[test]
fn jacobian_vector_product_equals_sa_backward() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    for shape in all_shapes(3, 3, 3) {
        let f = rand_tensor(&mut rng, &shape, 0.0, 1.5);
        let grad_out = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let jac = sa_jacobian(&f).unwrap();
        let side = shape.iter().product::<usize>();

        // grad_f[col] = sum_row grad_out[row] * J[row, col]
        let mut jvp = vec![0.0; side];
        for row in 0..side {
            let g = grad_out.data()[row];
            for (col, slot) in jvp.iter_mut().enumerate() {
                *slot += g * jac.at2(row, col);
            }
        }
        let (_, _, tape) = sa_forward(&f).unwrap();
        let got = sa_backward(tape, &grad_out).unwrap();
        for (a, b) in got.data().iter().zip(&jvp) {
            assert!((a - b).abs() < 1e-12, "shape {shape:?}");
        }
    }
}

#[test]
fn jacobian_sign_structure_is_exact_for_nonneg_features() {
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    for shape in all_shapes(3, 3, 3) {
        let f = rand_tensor(&mut rng, &shape, 0.0, 2.0);
        let jac = sa_jacobian(&f).unwrap();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let row = (k * h + i) * w + j;
                    for t in 0..c {
                        for m in 0..h {
                            for n in 0..w {
                                let col = (t * h + m) * w + n;
                                let v = jac.at2(row, col);
                                if i == m && j == n {
                                    assert!(v >= 0.0, "same-position entry {v} < 0");
                                } else {
                                    assert!(v <= 0.0, "cross-position entry {v} > 0");
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn attention_map_is_a_distribution() {
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    for _ in 0..50 {
        let shape = [
            rng.gen_range(1..=4),
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
        ];
        let f = rand_tensor(&mut rng, &shape, -5.0, 5.0);
        let (_, att, _) = sa_forward(&f).unwrap();
        let sum: f64 = att.p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
        assert!(att.p.data().iter().all(|&v| v > 0.0));
    }
}

#[test]
fn sa_output_sum_is_the_p_weighted_mean() {
    let mut rng = ChaCha20Rng::seed_from_u64(16);
    let f = rand_tensor(&mut rng, &[3, 4, 5], -2.0, 2.0);
    let (attended, att, _) = sa_forward(&f).unwrap();
    let (g, _) = gap_forward(&attended, GapMode::Sum).unwrap();
    for k in 0..3 {
        let weighted: f64 = (0..4)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .map(|(i, j)| f.at3(k, i, j) * att.p.at2(i, j))
            .sum();
        assert!((g.data()[k] - weighted).abs() < 1e-12);
    }

    // spatially constant map: sum-pooled SA output equals mean-pooled input
    let constant = Tensor::from_fn(&[3, 4, 5], |i| (i / 20) as f64 + 0.5);
    let (attended, _, _) = sa_forward(&constant).unwrap();
    let (sa_sum, _) = gap_forward(&attended, GapMode::Sum).unwrap();
    let (plain_mean, _) = gap_forward(&constant, GapMode::Mean).unwrap();
    assert!(sa_sum.max_abs_diff(&plain_mean) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Adding a per-channel spatial constant shifts every channel sum by the
    /// same amount, which the softmax cancels.
    #[test]
    fn p_invariant_under_per_channel_constant_shift(
        seed in 0u64..1000,
        shift in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let shape = [rng.gen_range(1..=3usize), rng.gen_range(1..=4usize), rng.gen_range(1..=4usize)];
        let f = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let per_channel: Vec<f64> = (0..shape[0]).map(|k| shift + k as f64 * 0.25).collect();
        let shifted = Tensor::from_fn(&shape, |idx| {
            let k = idx / (shape[1] * shape[2]);
            f.data()[idx] + per_channel[k]
        });
        let (_, att_a, _) = sa_forward(&f).unwrap();
        let (_, att_b, _) = sa_forward(&shifted).unwrap();
        prop_assert!(att_a.p.max_abs_diff(&att_b.p) < 1e-12);
    }

    /// At a single spatial position the layer is the identity.
    #[test]
    fn sa_is_identity_at_1x1(seed in 0u64..1000) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let c = rng.gen_range(1..=6usize);
        let f = rand_tensor(&mut rng, &[c, 1, 1], -4.0, 4.0);
        let (out, att, _) = sa_forward(&f).unwrap();
        prop_assert_eq!(out, f);
        prop_assert_eq!(att.p.data(), &[1.0][..]);
    }
}
