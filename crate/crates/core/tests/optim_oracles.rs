use echoatt::optim::{AdamW, AdamWConfig, CosineSchedule};
use echoatt::rng;
use echoatt::Tensor;

/// Straight-from-the-definition AdamW over plain vectors.
fn reference_adamw(p0: &[f64], grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> Vec<f64> {
    let mut p = p0.to_vec();
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..p.len() {
            p[i] *= 1.0 - lr * wd;
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    p
}

/// Plain Adam, no decay term at all.
fn reference_adam(p0: &[f64], grads: &[Vec<f64>], lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut p = p0.to_vec();
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / (1.0 - b1.powi(t))) / ((v[i] / (1.0 - b2.powi(t))).sqrt() + eps);
        }
    }
    p
}

fn run(cfg: AdamWConfig, p0: &Tensor, grads: &[Vec<f64>], lr: f64) -> Vec<f64> {
    let mut p = p0.clone().with_requires_grad(true);
    let mut opt = AdamW::new(cfg);
    for g in grads {
        p.zero_grad();
        p.accumulate_grad(g);
        opt.step([("w".to_string(), &mut p)], lr).unwrap();
    }
    p.data().to_vec()
}

fn random_trajectory(seed: u64) -> (Tensor, Vec<Vec<f64>>) {
    let mut r = rng::stream(seed, "adam");
    let p0 = Tensor::uniform(&[7], -2.0, 2.0, &mut r);
    let grads = (0..10)
        .map(|_| Tensor::uniform(&[7], -3.0, 3.0, &mut r).into_data())
        .collect();
    (p0, grads)
}

#[test]
fn ten_steps_match_reference_adamw() {
    for seed in 0..5 {
        let (p0, grads) = random_trajectory(seed);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let ours = run(cfg, &p0, &grads, 0.05);
        let theirs = reference_adamw(p0.data(), &grads, 0.05, 0.9, 0.999, 1e-8, 0.1);
        for (a, b) in ours.iter().zip(&theirs) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn zero_decay_is_adam() {
    let (p0, grads) = random_trajectory(9);
    let ours = run(AdamWConfig::default(), &p0, &grads, 0.01);
    let adam = reference_adam(p0.data(), &grads, 0.01);
    for (a, b) in ours.iter().zip(&adam) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn identical_inputs_give_identical_trajectories() {
    let (p0, grads) = random_trajectory(3);
    let cfg = AdamWConfig {
        weight_decay: 0.01,
        ..Default::default()
    };
    assert_eq!(run(cfg.clone(), &p0, &grads, 0.02), run(cfg, &p0, &grads, 0.02));
}

#[test]
fn schedule_endpoints() {
    let s = CosineSchedule::new(1e-4, 400, 0.005).unwrap();
    assert_eq!(s.warmup_steps(), 2);
    assert_eq!(s.lr_at(2).unwrap(), 1e-4);
    assert!((s.lr_at(201).unwrap() - 0.5e-4).abs() < 1e-18);
    assert_eq!(s.lr_at(400).unwrap(), 0.0);
    assert!(matches!(s.lr_at(401), Err(echoatt::Error::Contract(_))));
    assert!(CosineSchedule::new(1e-4, 10, 1.0).is_err());
}
