//! Desk-scale classifier: a staged plain CNN backbone with deeply supervised
//! attention branches, stripe part classifiers, a shared reduction layer and
//! a global head, trained with SGD + momentum.
//!
//! Branch layout per forward pass:
//!
//! * every intermediate stage output feeds a supervision branch
//!   (SA when `sa_on_ds`) -> GAP -> FC -> cross-entropy;
//! * the final stage output (SA first when `sa_on_backbone`) is split into
//!   `m` horizontal stripes, each mean-pooled, passed through a shared
//!   reduction to `reduced_dim`, and classified by an independent head;
//! * the mean of the reduced part vectors feeds the global head.
//!
//! The total loss is `(1 - lambda) * sum(part losses) + lambda * (sum(branch
//! losses) + global loss)`. The backward pass is assembled by hand from the
//! per-layer tapes; branch gradients accumulate additively into the shared
//! backbone parameters.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::attention::{gap_backward, gap_forward, sa_backward, sa_forward, stripe_backward, stripe_pool, GapMode};
use crate::error::{Error, Result};
use crate::numerics::{
    avgpool2_backward, avgpool2_forward, conv2d_backward, conv2d_forward, fc_backward, fc_forward,
    relu, relu_backward, softmax_ce,
};
use crate::tape::LayerTape;
use crate::tensor::Tensor;

/// One backbone stage: a convolution, ReLU, and an optional trailing 2x2
/// stride-2 mean-pool that halves the spatial resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub downsample: bool,
}

impl StageConfig {
    pub fn new(out_channels: usize) -> StageConfig {
        StageConfig {
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
            downsample: true,
        }
    }
}

/// Full architecture + training-seed description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input image shape, `C x H x W`.
    pub input_shape: [usize; 3],
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    /// Stripe count `m` for the part classifiers.
    pub parts: usize,
    /// Reduced part-feature dimension.
    pub reduced_dim: usize,
    /// Mixing weight between part losses and supervision + global losses.
    pub lambda: f64,
    /// Apply spatial attention inside the supervision branches.
    pub sa_on_ds: bool,
    /// Apply spatial attention to the final backbone map before striping.
    pub sa_on_backbone: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn with_defaults(num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_shape: [3, 64, 32],
            stages: vec![
                StageConfig::new(16),
                StageConfig::new(32),
                StageConfig::new(64),
                StageConfig::new(128),
            ],
            num_classes,
            parts: 2,
            reduced_dim: 32,
            lambda: 0.2,
            sa_on_ds: true,
            sa_on_backbone: false,
            seed: 0,
        }
    }

    /// Output shape of every stage, front to back.
    pub fn stage_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = Vec::with_capacity(self.stages.len());
        let [_, mut h, mut w] = self.input_shape;
        for (idx, st) in self.stages.iter().enumerate() {
            let conv_dim = |d: usize| -> Result<usize> {
                let padded = d + 2 * st.pad;
                if st.stride == 0 || padded < st.kernel || (padded - st.kernel) % st.stride != 0 {
                    return Err(Error::Config(format!(
                        "stage {}: conv geometry invalid for input dim {d} (kernel {}, stride {}, pad {})",
                        idx + 1,
                        st.kernel,
                        st.stride,
                        st.pad
                    )));
                }
                Ok((padded - st.kernel) / st.stride + 1)
            };
            h = conv_dim(h)?;
            w = conv_dim(w)?;
            if st.downsample {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config(format!(
                        "stage {}: cannot downsample odd map {h}x{w}",
                        idx + 1
                    )));
                }
                h /= 2;
                w /= 2;
            }
            shapes.push([st.out_channels, h, w]);
        }
        Ok(shapes)
    }

    /// Indices of the stage outputs that carry a supervision branch: every
    /// intermediate stage, capped at three branches.
    pub fn ds_stages(&self) -> Vec<usize> {
        (0..self.stages.len().saturating_sub(1)).take(3).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        if self.num_classes == 0 || self.parts == 0 || self.reduced_dim == 0 {
            return Err(Error::Config(
                "num_classes, parts and reduced_dim must be positive".into(),
            ));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config("input shape dims must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} must lie in [0, 1]",
                self.lambda
            )));
        }
        let shapes = self.stage_shapes()?;
        let final_h = shapes[shapes.len() - 1][1];
        if self.parts > final_h {
            return Err(Error::Config(format!(
                "parts {} exceeds final feature-map height {final_h}",
                self.parts
            )));
        }
        Ok(())
    }

    pub fn embedding_len(&self) -> usize {
        self.parts * self.reduced_dim
    }
}

/// Named parameter map. Keys are stable and sorted, so iteration order — and
/// with it every optimizer step and checkpoint — is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    entries: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn from_entries(entries: BTreeMap<String, Tensor>) -> Params {
        Params { entries }
    }

    fn add_scaled(&mut self, other: &Params, s: f64) -> Result<()> {
        for (name, g) in &other.entries {
            self.get_mut(name)?.add_scaled(g, s)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.entries.values_mut() {
            t.scale(s);
        }
    }
}

/// Parameter names in a fixed order together with their shapes.
fn param_layout(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let shapes = cfg.stage_shapes()?;
    let mut layout = Vec::new();
    let mut in_c = cfg.input_shape[0];
    for (s, st) in cfg.stages.iter().enumerate() {
        layout.push((
            format!("stage{}.kernel", s + 1),
            vec![st.out_channels, in_c, st.kernel, st.kernel],
        ));
        layout.push((format!("stage{}.bias", s + 1), vec![st.out_channels]));
        in_c = st.out_channels;
    }
    for &s in &cfg.ds_stages() {
        layout.push((
            format!("ds{}.weight", s + 1),
            vec![cfg.num_classes, shapes[s][0]],
        ));
        layout.push((format!("ds{}.bias", s + 1), vec![cfg.num_classes]));
    }
    let final_c = shapes[shapes.len() - 1][0];
    layout.push(("reduce.weight".into(), vec![cfg.reduced_dim, final_c]));
    layout.push(("reduce.bias".into(), vec![cfg.reduced_dim]));
    for p in 0..cfg.parts {
        layout.push((
            format!("part{}.weight", p + 1),
            vec![cfg.num_classes, cfg.reduced_dim],
        ));
        layout.push((format!("part{}.bias", p + 1), vec![cfg.num_classes]));
    }
    layout.push(("main.weight".into(), vec![cfg.num_classes, cfg.reduced_dim]));
    layout.push(("main.bias".into(), vec![cfg.num_classes]));
    Ok(layout)
}

/// Zero-valued parameters with the config's shapes (gradient / velocity
/// accumulators).
pub fn zeros_like(cfg: &ModelConfig) -> Result<Params> {
    let mut entries = BTreeMap::new();
    for (name, shape) in param_layout(cfg)? {
        entries.insert(name, Tensor::zeros(&shape));
    }
    Ok(Params { entries })
}

/// Kaiming-uniform initialization (fan-in scaling) for kernels and weights,
/// zero biases, deterministic in `cfg.seed`.
pub fn init_params(cfg: &ModelConfig) -> Result<Params> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut entries = BTreeMap::new();
    for (name, shape) in param_layout(cfg)? {
        let tensor = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            // fan_in: product of all dims but the first (output) dim
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
        };
        entries.insert(name, tensor);
    }
    Ok(Params { entries })
}

/// Theoretical standard deviation of the Kaiming-uniform draw for a given
/// fan-in; exposed for the init statistics check.
pub fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Per-head forward state: classifier tape plus the loss gradient w.r.t. its
/// logits.
#[derive(Debug)]
struct HeadRecord {
    fc_tape: LayerTape,
    grad_logits: Tensor,
}

#[derive(Debug)]
struct DsRecord {
    stage: usize,
    sa_tape: Option<LayerTape>,
    gap_tape: LayerTape,
    head: HeadRecord,
}

/// Everything the backward pass needs from one training forward pass.
#[derive(Debug)]
pub struct ForwardRecord {
    conv_tapes: Vec<LayerTape>,
    relu_tapes: Vec<LayerTape>,
    pool_tapes: Vec<Option<LayerTape>>,
    stage_shapes: Vec<[usize; 3]>,
    ds: Vec<DsRecord>,
    backbone_sa_tape: Option<LayerTape>,
    stripe_tape: LayerTape,
    reduce_tapes: Vec<LayerTape>,
    reduced: Vec<Tensor>,
    part_heads: Vec<HeadRecord>,
    main_head: HeadRecord,
    /// Global-head logits, kept for accuracy reporting.
    pub main_logits: Tensor,
}

impl ForwardRecord {
    /// Reduced part vectors in stripe order (the inference features).
    pub fn reduced_parts(&self) -> &[Tensor] {
        &self.reduced
    }
}

/// Per-image loss components.
#[derive(Debug, Clone)]
pub struct Losses {
    pub ds: Vec<f64>,
    pub parts: Vec<f64>,
    pub main: f64,
}

/// `(1 - lambda) * sum(parts) + lambda * sum(ds) + lambda * main`.
pub fn total_loss(losses: &Losses, lambda: f64) -> f64 {
    let part_sum: f64 = losses.parts.iter().sum();
    let ds_sum: f64 = losses.ds.iter().sum();
    (1.0 - lambda) * part_sum + lambda * ds_sum + lambda * losses.main
}

struct BackboneRun {
    outputs: Vec<Tensor>,
    conv_tapes: Vec<LayerTape>,
    relu_tapes: Vec<LayerTape>,
    pool_tapes: Vec<Option<LayerTape>>,
}

fn run_backbone(params: &Params, cfg: &ModelConfig, image: &Tensor) -> Result<BackboneRun> {
    if image.shape() != cfg.input_shape {
        return Err(Error::shape(
            "forward",
            format!("image {:?} vs config {:?}", image.shape(), cfg.input_shape),
        ));
    }
    let mut outputs = Vec::with_capacity(cfg.stages.len());
    let mut conv_tapes = Vec::new();
    let mut relu_tapes = Vec::new();
    let mut pool_tapes = Vec::new();
    let mut x = image.clone();
    for (s, st) in cfg.stages.iter().enumerate() {
        let kernels = params.get(&format!("stage{}.kernel", s + 1))?;
        let bias = params.get(&format!("stage{}.bias", s + 1))?;
        let (conv_out, conv_tape) = conv2d_forward(&x, kernels, bias.data(), st.stride, st.pad)?;
        let (relu_out, relu_tape) = relu(&conv_out);
        let (out, pool_tape) = if st.downsample {
            let (pooled, tape) = avgpool2_forward(&relu_out)?;
            (pooled, Some(tape))
        } else {
            (relu_out, None)
        };
        conv_tapes.push(conv_tape);
        relu_tapes.push(relu_tape);
        pool_tapes.push(pool_tape);
        outputs.push(out.clone());
        x = out;
    }
    Ok(BackboneRun {
        outputs,
        conv_tapes,
        relu_tapes,
        pool_tapes,
    })
}

struct PartPath {
    backbone_sa_tape: Option<LayerTape>,
    stripe_tape: LayerTape,
    reduce_tapes: Vec<LayerTape>,
    reduced: Vec<Tensor>,
}

fn run_part_path(params: &Params, cfg: &ModelConfig, final_map: &Tensor) -> Result<PartPath> {
    let (striped_input, backbone_sa_tape) = if cfg.sa_on_backbone {
        let (attended, _, tape) = sa_forward(final_map)?;
        (attended, Some(tape))
    } else {
        (final_map.clone(), None)
    };
    let (parts, stripe_tape) = stripe_pool(&striped_input, cfg.parts)?;
    let w_red = params.get("reduce.weight")?;
    let b_red = params.get("reduce.bias")?;
    let mut reduce_tapes = Vec::with_capacity(parts.len());
    let mut reduced = Vec::with_capacity(parts.len());
    for part in &parts {
        let (r, tape) = fc_forward(part, w_red, b_red.data())?;
        reduce_tapes.push(tape);
        reduced.push(r);
    }
    Ok(PartPath {
        backbone_sa_tape,
        stripe_tape,
        reduce_tapes,
        reduced,
    })
}

/// Full training forward pass for one labeled image.
pub fn forward_train(
    params: &Params,
    cfg: &ModelConfig,
    image: &Tensor,
    label: usize,
) -> Result<(ForwardRecord, Losses)> {
    if label >= cfg.num_classes {
        return Err(Error::Config(format!(
            "label {label} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let backbone = run_backbone(params, cfg, image)?;

    // supervision branches off the intermediate stage outputs
    let mut ds_records = Vec::new();
    let mut ds_losses = Vec::new();
    for &s in &cfg.ds_stages() {
        let f = &backbone.outputs[s];
        let (pooled, sa_tape, gap_tape) = if cfg.sa_on_ds {
            let (attended, _, sa_tape) = sa_forward(f)?;
            let (g, gap_tape) = gap_forward(&attended, GapMode::Sum)?;
            (g, Some(sa_tape), gap_tape)
        } else {
            let (g, gap_tape) = gap_forward(f, GapMode::Mean)?;
            (g, None, gap_tape)
        };
        let w = params.get(&format!("ds{}.weight", s + 1))?;
        let b = params.get(&format!("ds{}.bias", s + 1))?;
        let (logits, fc_tape) = fc_forward(&pooled, w, b.data())?;
        let (loss, grad_logits) = softmax_ce(&logits, label)?;
        ds_losses.push(loss);
        ds_records.push(DsRecord {
            stage: s,
            sa_tape,
            gap_tape,
            head: HeadRecord {
                fc_tape,
                grad_logits,
            },
        });
    }

    // part path off the final stage output
    let final_map = &backbone.outputs[backbone.outputs.len() - 1];
    let part_path = run_part_path(params, cfg, final_map)?;

    let mut part_heads = Vec::with_capacity(cfg.parts);
    let mut part_losses = Vec::with_capacity(cfg.parts);
    for (p, reduced) in part_path.reduced.iter().enumerate() {
        let w = params.get(&format!("part{}.weight", p + 1))?;
        let b = params.get(&format!("part{}.bias", p + 1))?;
        let (logits, fc_tape) = fc_forward(reduced, w, b.data())?;
        let (loss, grad_logits) = softmax_ce(&logits, label)?;
        part_losses.push(loss);
        part_heads.push(HeadRecord {
            fc_tape,
            grad_logits,
        });
    }

    // global head over the mean of the reduced part vectors
    let mut pooled = Tensor::zeros(&[cfg.reduced_dim]);
    for r in &part_path.reduced {
        pooled.add_assign(r)?;
    }
    pooled.scale(1.0 / cfg.parts as f64);
    let w_main = params.get("main.weight")?;
    let b_main = params.get("main.bias")?;
    let (main_logits, main_tape) = fc_forward(&pooled, w_main, b_main.data())?;
    let (main_loss, main_grad) = softmax_ce(&main_logits, label)?;

    let record = ForwardRecord {
        conv_tapes: backbone.conv_tapes,
        relu_tapes: backbone.relu_tapes,
        pool_tapes: backbone.pool_tapes,
        stage_shapes: backbone.outputs.iter().map(|t| {
            let s = t.shape();
            [s[0], s[1], s[2]]
        }).collect(),
        ds: ds_records,
        backbone_sa_tape: part_path.backbone_sa_tape,
        stripe_tape: part_path.stripe_tape,
        reduce_tapes: part_path.reduce_tapes,
        reduced: part_path.reduced,
        part_heads,
        main_head: HeadRecord {
            fc_tape: main_tape,
            grad_logits: main_grad,
        },
        main_logits,
    };
    let losses = Losses {
        ds: ds_losses,
        parts: part_losses,
        main: main_loss,
    };
    Ok((record, losses))
}

/// Exact gradient of [`total_loss`] with respect to every parameter. Consumes
/// the record; each tape is used exactly once.
pub fn backward(cfg: &ModelConfig, record: ForwardRecord) -> Result<Params> {
    let lambda = cfg.lambda;
    let mut grads = zeros_like(cfg)?;
    let n_stages = cfg.stages.len();
    let mut stage_grads: Vec<Tensor> = record
        .stage_shapes
        .iter()
        .map(|s| Tensor::zeros(s))
        .collect();

    // global head
    let mut main_grad = record.main_head.grad_logits;
    main_grad.scale(lambda);
    let (d_pooled, gw_main, gb_main) = fc_backward(record.main_head.fc_tape, &main_grad)?;
    grads.get_mut("main.weight")?.add_assign(&gw_main)?;
    grads
        .get_mut("main.bias")?
        .add_assign(&Tensor::from_vec(&[gb_main.len()], gb_main)?)?;
    let mut reduced_grads: Vec<Tensor> = Vec::with_capacity(cfg.parts);
    for _ in 0..cfg.parts {
        let mut g = d_pooled.clone();
        g.scale(1.0 / cfg.parts as f64);
        reduced_grads.push(g);
    }

    // part heads
    for (p, head) in record.part_heads.into_iter().enumerate() {
        let mut g = head.grad_logits;
        g.scale(1.0 - lambda);
        let (d_reduced, gw, gb) = fc_backward(head.fc_tape, &g)?;
        grads
            .get_mut(&format!("part{}.weight", p + 1))?
            .add_assign(&gw)?;
        grads
            .get_mut(&format!("part{}.bias", p + 1))?
            .add_assign(&Tensor::from_vec(&[gb.len()], gb)?)?;
        reduced_grads[p].add_assign(&d_reduced)?;
    }

    // shared reduction: gradients from all parts accumulate into one weight
    let mut part_grads: Vec<Tensor> = Vec::with_capacity(cfg.parts);
    for (tape, d_reduced) in record.reduce_tapes.into_iter().zip(&reduced_grads) {
        let (d_part, gw, gb) = fc_backward(tape, d_reduced)?;
        grads.get_mut("reduce.weight")?.add_assign(&gw)?;
        grads
            .get_mut("reduce.bias")?
            .add_assign(&Tensor::from_vec(&[gb.len()], gb)?)?;
        part_grads.push(d_part);
    }

    // stripe pooling back onto the final stage output
    let d_striped = stripe_backward(record.stripe_tape, &part_grads)?;
    let d_final = match record.backbone_sa_tape {
        Some(tape) => sa_backward(tape, &d_striped)?,
        None => d_striped,
    };
    stage_grads[n_stages - 1].add_assign(&d_final)?;

    // supervision branches
    for ds in record.ds {
        let mut g = ds.head.grad_logits;
        g.scale(lambda);
        let (d_pooled, gw, gb) = fc_backward(ds.head.fc_tape, &g)?;
        grads
            .get_mut(&format!("ds{}.weight", ds.stage + 1))?
            .add_assign(&gw)?;
        grads
            .get_mut(&format!("ds{}.bias", ds.stage + 1))?
            .add_assign(&Tensor::from_vec(&[gb.len()], gb)?)?;
        let d_map = gap_backward(ds.gap_tape, &d_pooled)?;
        let d_branch = match ds.sa_tape {
            Some(tape) => sa_backward(tape, &d_map)?,
            None => d_map,
        };
        stage_grads[ds.stage].add_assign(&d_branch)?;
    }

    // backbone chain, last stage first
    let mut flowing: Option<Tensor> = None;
    let mut pool_tapes = record.pool_tapes;
    let mut relu_tapes = record.relu_tapes;
    let mut conv_tapes = record.conv_tapes;
    for s in (0..n_stages).rev() {
        let pool_tape = pool_tapes.pop().expect("one pool slot per stage");
        let relu_tape = relu_tapes.pop().expect("one relu tape per stage");
        let conv_tape = conv_tapes.pop().expect("one conv tape per stage");
        let mut d = stage_grads[s].clone();
        if let Some(extra) = flowing.take() {
            d.add_assign(&extra)?;
        }
        let d = match pool_tape {
            Some(tape) => avgpool2_backward(tape, &d)?,
            None => d,
        };
        let d = relu_backward(relu_tape, &d)?;
        let (d_input, gk, gb) = conv2d_backward(conv_tape, &d)?;
        grads
            .get_mut(&format!("stage{}.kernel", s + 1))?
            .add_assign(&gk)?;
        grads
            .get_mut(&format!("stage{}.bias", s + 1))?
            .add_assign(&Tensor::from_vec(&[gb.len()], gb)?)?;
        flowing = Some(d_input);
    }
    Ok(grads)
}

/// Classic momentum update: `v <- momentum * v + g; w <- w - lr * v`.
pub fn sgd_step(
    params: &mut Params,
    grads: &Params,
    lr: f64,
    momentum: f64,
    velocity: &mut Params,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let v = velocity.get_mut(name)?;
        if v.shape() != g.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("velocity {:?} vs grad {:?} for '{name}'", v.shape(), g.shape()),
            ));
        }
        v.scale(momentum);
        v.add_assign(g)?;
        let v_snapshot = v.clone();
        params.get_mut(name)?.add_scaled(&v_snapshot, -lr)?;
    }
    Ok(())
}

/// The feature map produced by every backbone stage, for CAM inspection.
pub fn stage_features(params: &Params, cfg: &ModelConfig, image: &Tensor) -> Result<Vec<Tensor>> {
    Ok(run_backbone(params, cfg, image)?.outputs)
}

/// Inference feature: the `m` reduced part vectors concatenated in stripe
/// order, without normalization.
pub fn extract_embedding(params: &Params, cfg: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    let backbone = run_backbone(params, cfg, image)?;
    let final_map = &backbone.outputs[backbone.outputs.len() - 1];
    let part_path = run_part_path(params, cfg, final_map)?;
    let mut data = Vec::with_capacity(cfg.embedding_len());
    for r in &part_path.reduced {
        data.extend_from_slice(r.data());
    }
    Tensor::from_vec(&[cfg.embedding_len()], data)
}

/// Argmax of the global-head logits.
pub fn classify(params: &Params, cfg: &ModelConfig, image: &Tensor) -> Result<usize> {
    let (record, _) = forward_train(params, cfg, image, 0)?;
    let logits = record.main_logits;
    let mut best = 0;
    for i in 1..logits.len() {
        if logits.data()[i] > logits.data()[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Fraction of samples whose global-head argmax equals the label.
pub fn accuracy(params: &Params, cfg: &ModelConfig, data: &[(Tensor, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("accuracy over empty dataset".into()));
    }
    let mut hits = 0usize;
    for (image, label) in data {
        if classify(params, cfg, image)? == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Two-phase learning-rate schedule: base rate, then a multiplicative drop.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub drop_factor: f64,
    /// First epoch (0-based) that uses the dropped rate.
    pub drop_epoch: usize,
}

impl LrSchedule {
    /// The default shape: drop by 10x after two thirds of the epochs.
    pub fn two_phase(base_lr: f64, epochs: usize) -> LrSchedule {
        LrSchedule {
            base_lr,
            drop_factor: 0.1,
            drop_epoch: epochs * 2 / 3,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        if epoch >= self.drop_epoch {
            self.base_lr * self.drop_factor
        } else {
            self.base_lr
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub augment: bool,
}

/// Per-epoch aggregate losses for the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_part: f64,
    pub mean_ds: f64,
}

/// Mini-batch SGD over seeded-shuffled data. Deterministic in `cfg.seed`:
/// repeated runs produce bitwise-identical parameters and loss logs.
pub fn train(
    cfg: &ModelConfig,
    data: &[(Tensor, usize)],
    opts: &TrainOptions,
) -> Result<(Params, Vec<EpochStats>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    for (_, label) in data {
        if *label >= cfg.num_classes {
            return Err(Error::Config(format!(
                "label {label} out of range for {} classes",
                cfg.num_classes
            )));
        }
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut params = init_params(cfg)?;
    let mut velocity = zeros_like(cfg)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut log = Vec::with_capacity(opts.epochs);
    let n_ds = cfg.ds_stages().len();

    for epoch in 0..opts.epochs {
        let lr = opts.schedule.at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        // Fisher-Yates; rand::seq::SliceRandom would also do, written out to
        // pin the exact draw sequence the determinism contract relies on.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut total_acc = 0.0;
        let mut part_acc = 0.0;
        let mut ds_acc = 0.0;
        for (batch_idx, batch) in order.chunks(opts.batch_size).enumerate() {
            let mut grad_acc = zeros_like(cfg)?;
            for &sample_idx in batch {
                let (image, label) = &data[sample_idx];
                let image = if opts.augment {
                    crate::dataset::augment(image, &mut rng)
                } else {
                    image.clone()
                };
                let (record, losses) = forward_train(&params, cfg, &image, *label)?;
                let loss = total_loss(&losses, cfg.lambda);
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss diverged at epoch {epoch}, batch {batch_idx}"
                    )));
                }
                total_acc += loss;
                part_acc += losses.parts.iter().sum::<f64>() / cfg.parts as f64;
                if n_ds > 0 {
                    ds_acc += losses.ds.iter().sum::<f64>() / n_ds as f64;
                }
                let grads = backward(cfg, record)?;
                grad_acc.add_scaled(&grads, 1.0)?;
            }
            grad_acc.scale(1.0 / batch.len() as f64);
            sgd_step(&mut params, &grad_acc, lr, opts.momentum, &mut velocity)?;
        }
        let n = data.len() as f64;
        log.push(EpochStats {
            epoch,
            mean_total: total_acc / n,
            mean_part: part_acc / n,
            mean_ds: ds_acc / n,
        });
    }
    Ok((params, log))
}
