use sapl_core::dataset::{body_zones, generate_toy, Split, ToySpec};
use sapl_core::model::{train, LrSchedule, ModelConfig, StageConfig, TrainOptions};
use sapl_core::retrieval::evaluate_model;
use sapl_core::Tensor;
use std::time::Instant;

fn arm(
    label: &str,
    epochs: usize,
    lr: f64,
    stages: &[usize],
    seeds: u64,
) {
    let t0 = Instant::now();
    let (h, w) = (32usize, 16usize);
    let mut r1_sa = Vec::new();
    let mut r1_plain = Vec::new();
    for run in 0..seeds {
        let spec = ToySpec {
            num_identities: 24,
            images_per_identity_per_camera: 4,
            num_cameras: 2,
            height: h,
            width: w,
            noise_std: 0.05,
            occlusion: body_zones(h, w)[1],
            seed: 100 + run,
        };
        let samples = generate_toy(&spec).unwrap();
        let pairs: Vec<(Tensor, usize)> = samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| (s.image.clone(), s.identity))
            .collect();
        let num_classes = spec.train_identities();
        for sa in [true, false] {
            let cfg = ModelConfig {
                input_shape: [3, h, w],
                stages: stages.iter().map(|&c| StageConfig::new(c)).collect(),
                num_classes,
                parts: 2,
                reduced_dim: 16,
                lambda: 0.2,
                sa_on_ds: sa,
                sa_on_backbone: false,
                seed: run + 1,
            };
            let opts = TrainOptions {
                epochs,
                batch_size: 8,
                schedule: LrSchedule::two_phase(lr, epochs),
                momentum: 0.9,
                augment: true,
            };
            let (params, _) = train(&cfg, &pairs, &opts).unwrap();
            let res = evaluate_model(&params, &cfg, &samples, 10).unwrap();
            if sa { r1_sa.push(res.cmc_at(1)) } else { r1_plain.push(res.cmc_at(1)) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{:.2}", x)).collect::<Vec<_>>().join(" ");
    println!(
        "[{label}] sa [{}] plain [{}]\n[{label}] mean sa {:.4} plain {:.4} gap {:+.4} ({:.0}s)",
        fmt(&r1_sa), fmt(&r1_plain), mean(&r1_sa), mean(&r1_plain),
        mean(&r1_sa) - mean(&r1_plain), t0.elapsed().as_secs_f64()
    );
}

fn main() {
    arm("A: 20ep lr.03 4stage", 20, 0.03, &[8, 16, 32, 64], 8);
    arm("B: 30ep lr.02 4stage", 30, 0.02, &[8, 16, 32, 64], 8);
    arm("C: 20ep lr.03 3stage", 20, 0.03, &[8, 16, 32], 8);
}
