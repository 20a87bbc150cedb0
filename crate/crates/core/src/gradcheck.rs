//! Central finite-difference verification of every differentiable layer and
//! of the full model. The checks here only ever call the *forward* paths, so
//! they stay independent of the hand-derived backward implementations they
//! judge.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::attention::{
    gap_backward, gap_forward, sa_backward, sa_forward, stripe_backward, stripe_pool, GapMode,
};
use crate::error::Result;
use crate::model::{backward, forward_train, init_params, total_loss, ModelConfig, StageConfig};
use crate::numerics::{
    avgpool2_backward, avgpool2_forward, conv2d_backward, conv2d_forward, fc_backward, fc_forward,
    relu, relu_backward, softmax_ce,
};
use crate::tensor::Tensor;

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold for individual layers.
pub const LAYER_TOL: f64 = 1e-5;
/// Pass threshold for the end-to-end parameter check.
pub const E2E_TOL: f64 = 1e-4;

/// Worst relative error observed for one layer.
#[derive(Debug, Clone)]
pub struct LayerReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl LayerReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Test hook: flips the sign of the attention backward pass so the suite
    /// must flag the `sa` layer.
    pub corrupt_sa: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            corrupt_sa: false,
        }
    }
}

/// `|a - b| / max(|a| + |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Central finite difference of `f` w.r.t. entry `idx` of `x`.
pub fn central_diff(x: &mut Tensor, idx: usize, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    let orig = x.data()[idx];
    x.data_mut()[idx] = orig + FD_STEP;
    let plus = f(x);
    x.data_mut()[idx] = orig - FD_STEP;
    let minus = f(x);
    x.data_mut()[idx] = orig;
    (plus - minus) / (2.0 * FD_STEP)
}

fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Compares an analytic input gradient against finite differences of the
/// probe loss `sum(w (*) forward(x))`, returning the worst relative error.
fn check_against_fd(
    x: &mut Tensor,
    analytic: &Tensor,
    forward_loss: impl FnMut(&Tensor) -> f64 + Copy,
) -> f64 {
    let mut worst: f64 = 0.0;
    for idx in 0..x.len() {
        let fd = central_diff(x, idx, forward_loss);
        worst = worst.max(relative_error(fd, analytic.data()[idx]));
    }
    worst
}

fn check_conv2d(rng: &mut ChaCha20Rng) -> Result<f64> {
    let mut x = rand_tensor(rng, &[2, 5, 6], -1.0, 1.0);
    let mut k = rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0);
    let bias: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let probe = rand_tensor(rng, &[3, 5, 6], -1.0, 1.0);

    let (_, tape) = conv2d_forward(&x, &k, &bias, 1, 1)?;
    let (gx, gk, gb) = conv2d_backward(tape, &probe)?;

    let dot = |out: &Tensor| -> f64 {
        out.data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let k_f = k.clone();
    let b_f = bias.clone();
    let mut worst = check_against_fd(&mut x, &gx, |xv| {
        dot(&conv2d_forward(xv, &k_f, &b_f, 1, 1).unwrap().0)
    });
    let x_f = x.clone();
    worst = worst.max(check_against_fd(&mut k, &gk, |kv| {
        dot(&conv2d_forward(&x_f, kv, &b_f, 1, 1).unwrap().0)
    }));
    let k_f = k.clone();
    let mut b_t = Tensor::from_vec(&[3], bias)?;
    let gb_t = Tensor::from_vec(&[3], gb)?;
    worst = worst.max(check_against_fd(&mut b_t, &gb_t, |bv| {
        dot(&conv2d_forward(&x_f, &k_f, bv.data(), 1, 1).unwrap().0)
    }));
    Ok(worst)
}

fn check_relu(rng: &mut ChaCha20Rng) -> Result<f64> {
    // keep inputs away from the kink at 0
    let mut x = Tensor::from_fn(&[3, 4, 4], |_| {
        let mag = rng.gen_range(0.001..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    });
    let probe = rand_tensor(rng, &[3, 4, 4], -1.0, 1.0);
    let (_, tape) = relu(&x);
    let gx = relu_backward(tape, &probe)?;
    let dot = |out: &Tensor| -> f64 {
        out.data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    Ok(check_against_fd(&mut x, &gx, |xv| dot(&relu(xv).0)))
}

fn check_avgpool2(rng: &mut ChaCha20Rng) -> Result<f64> {
    let mut x = rand_tensor(rng, &[2, 4, 6], -1.0, 1.0);
    let probe = rand_tensor(rng, &[2, 2, 3], -1.0, 1.0);
    let (_, tape) = avgpool2_forward(&x)?;
    let gx = avgpool2_backward(tape, &probe)?;
    let dot = |out: &Tensor| -> f64 {
        out.data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    Ok(check_against_fd(&mut x, &gx, |xv| {
        dot(&avgpool2_forward(xv).unwrap().0)
    }))
}

fn check_fc(rng: &mut ChaCha20Rng) -> Result<f64> {
    let mut x = rand_tensor(rng, &[7], -1.0, 1.0);
    let mut w = rand_tensor(rng, &[4, 7], -1.0, 1.0);
    let bias: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let probe = rand_tensor(rng, &[4], -1.0, 1.0);

    let (_, tape) = fc_forward(&x, &w, &bias)?;
    let (gx, gw, gb) = fc_backward(tape, &probe)?;
    let dot = |out: &Tensor| -> f64 {
        out.data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let w_f = w.clone();
    let b_f = bias.clone();
    let mut worst = check_against_fd(&mut x, &gx, |xv| {
        dot(&fc_forward(xv, &w_f, &b_f).unwrap().0)
    });
    let x_f = x.clone();
    worst = worst.max(check_against_fd(&mut w, &gw, |wv| {
        dot(&fc_forward(&x_f, wv, &b_f).unwrap().0)
    }));
    let w_f = w.clone();
    let mut b_t = Tensor::from_vec(&[4], bias)?;
    let gb_t = Tensor::from_vec(&[4], gb)?;
    worst = worst.max(check_against_fd(&mut b_t, &gb_t, |bv| {
        dot(&fc_forward(&x_f, &w_f, bv.data()).unwrap().0)
    }));
    Ok(worst)
}

fn check_softmax_ce(rng: &mut ChaCha20Rng) -> Result<f64> {
    let mut logits = rand_tensor(rng, &[6], -2.0, 2.0);
    let label = rng.gen_range(0..6);
    let (_, grad) = softmax_ce(&logits, label)?;
    Ok(check_against_fd(&mut logits, &grad, |lv| {
        softmax_ce(lv, label).unwrap().0
    }))
}

fn check_sa(rng: &mut ChaCha20Rng, corrupt: bool) -> Result<f64> {
    let mut f = rand_tensor(rng, &[3, 2, 2], 0.0, 1.5);
    let probe = rand_tensor(rng, &[3, 2, 2], -1.0, 1.0);
    let (_, _, tape) = sa_forward(&f)?;
    let mut gf = sa_backward(tape, &probe)?;
    if corrupt {
        gf.scale(-1.0);
    }
    let dot = |out: &Tensor| -> f64 {
        out.data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    Ok(check_against_fd(&mut f, &gf, |fv| {
        dot(&sa_forward(fv).unwrap().0)
    }))
}

fn check_gap(rng: &mut ChaCha20Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for mode in [GapMode::Mean, GapMode::Sum] {
        let mut f = rand_tensor(rng, &[3, 4, 5], -1.0, 1.0);
        let probe = rand_tensor(rng, &[3], -1.0, 1.0);
        let (_, tape) = gap_forward(&f, mode)?;
        let gf = gap_backward(tape, &probe)?;
        let dot = |g: &Tensor| -> f64 {
            g.data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        worst = worst.max(check_against_fd(&mut f, &gf, |fv| {
            dot(&gap_forward(fv, mode).unwrap().0)
        }));
    }
    Ok(worst)
}

fn check_stripe(rng: &mut ChaCha20Rng) -> Result<f64> {
    let mut f = rand_tensor(rng, &[3, 5, 4], -1.0, 1.0);
    let probes: Vec<Tensor> = (0..2).map(|_| rand_tensor(rng, &[3], -1.0, 1.0)).collect();
    let (_, tape) = stripe_pool(&f, 2)?;
    let gf = stripe_backward(tape, &probes)?;
    let dot = |parts: &[Tensor]| -> f64 {
        parts
            .iter()
            .zip(&probes)
            .map(|(p, w)| {
                p.data()
                    .iter()
                    .zip(w.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum()
    };
    Ok(check_against_fd(&mut f, &gf, |fv| {
        dot(&stripe_pool(fv, 2).unwrap().0)
    }))
}

/// The tiny two-stage configuration used by the end-to-end check.
pub fn tiny_e2e_config() -> ModelConfig {
    ModelConfig {
        input_shape: [2, 8, 8],
        stages: vec![StageConfig::new(4), StageConfig::new(6)],
        num_classes: 3,
        parts: 2,
        reduced_dim: 5,
        lambda: 0.2,
        sa_on_ds: true,
        sa_on_backbone: true,
        seed: 0,
    }
}

/// Finite-difference check of every parameter gradient of the total loss on
/// a tiny model with a frozen input.
pub fn check_end_to_end(cfg: &ModelConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = init_params(cfg)?;
    // nudge away from the all-zero-bias init so no ReLU sits on its kink
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        for v in params.get_mut(name)?.data_mut() {
            *v += rng.gen_range(0.01..0.02);
        }
    }
    let image = rand_tensor(&mut rng, &cfg.input_shape, 0.0, 1.0);
    let label = rng.gen_range(0..cfg.num_classes);

    let (record, _) = forward_train(&params, cfg, &image, label)?;
    let grads = backward(cfg, record)?;

    let names: Vec<String> = grads.iter().map(|(n, _)| n.clone()).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let shape = params.get(&name)?.shape().to_vec();
        for idx in 0..shape.iter().product::<usize>() {
            let orig = params.get(&name)?.data()[idx];
            params.get_mut(&name)?.data_mut()[idx] = orig + FD_STEP;
            let (_, plus) = forward_train(&params, cfg, &image, label)?;
            params.get_mut(&name)?.data_mut()[idx] = orig - FD_STEP;
            let (_, minus) = forward_train(&params, cfg, &image, label)?;
            params.get_mut(&name)?.data_mut()[idx] = orig;
            let fd =
                (total_loss(&plus, cfg.lambda) - total_loss(&minus, cfg.lambda)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(fd, grads.get(&name)?.data()[idx]));
        }
    }
    Ok(worst)
}

/// Runs the whole suite: every primitive layer over several seeds, then the
/// end-to-end parameter check on the tiny config.
pub fn run_full_suite(opts: &GradcheckOptions) -> Result<Vec<LayerReport>> {
    let mut reports = Vec::new();
    let seeds = 5;
    let layer =
        |name: &'static str,
         f: &mut dyn FnMut(&mut ChaCha20Rng) -> Result<f64>|
         -> Result<LayerReport> {
            let mut worst: f64 = 0.0;
            for s in 0..seeds {
                let mut rng = ChaCha20Rng::seed_from_u64(opts.seed.wrapping_add(s));
                worst = worst.max(f(&mut rng)?);
            }
            Ok(LayerReport {
                name,
                max_rel_err: worst,
                threshold: LAYER_TOL,
            })
        };
    reports.push(layer("conv2d", &mut check_conv2d)?);
    reports.push(layer("relu", &mut check_relu)?);
    reports.push(layer("avgpool2", &mut check_avgpool2)?);
    reports.push(layer("fc", &mut check_fc)?);
    reports.push(layer("softmax_ce", &mut check_softmax_ce)?);
    reports.push(layer("sa", &mut |rng| check_sa(rng, opts.corrupt_sa))?);
    reports.push(layer("gap", &mut check_gap)?);
    reports.push(layer("stripe", &mut check_stripe)?);

    let cfg = tiny_e2e_config();
    reports.push(LayerReport {
        name: "end_to_end",
        max_rel_err: check_end_to_end(&cfg, opts.seed)?,
        threshold: E2E_TOL,
    });
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let reports = run_full_suite(&GradcheckOptions::default()).unwrap();
        for r in &reports {
            assert!(
                r.passed(),
                "{} failed: {} >= {}",
                r.name,
                r.max_rel_err,
                r.threshold
            );
        }
        let names: Vec<&str> = reports.iter().map(|r| r.name).collect();
        assert_eq!(
            names,
            vec![
                "conv2d",
                "relu",
                "avgpool2",
                "fc",
                "softmax_ce",
                "sa",
                "gap",
                "stripe",
                "end_to_end"
            ]
        );
    }

    #[test]
    fn corrupted_sa_is_flagged() {
        let reports = run_full_suite(&GradcheckOptions {
            seed: 1,
            corrupt_sa: true,
        })
        .unwrap();
        let failing: Vec<&str> = reports
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.name)
            .collect();
        assert_eq!(failing, vec!["sa"]);
    }
}
