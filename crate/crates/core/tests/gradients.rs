//! Analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabroute::gate::{backward, forward, init_gate, GateDims, Mode};
use tabroute::trainer::{total_loss, PathCostVector, TrainConfig};
use tabroute::PathScores;

struct Draw {
    z: [f64; 3],
    s: PathScores,
    c: PathCostVector,
    cfg: TrainConfig,
}

// Ranges keep every probability far above the KL floor, where the clamped
// loss is flat and the analytic gradient does not apply.
fn draw(rng: &mut ChaCha8Rng) -> Draw {
    Draw {
        z: [0; 3].map(|_| rng.gen_range(-3.0..3.0)),
        s: [0; 3].map(|_| rng.gen_range(0..=1u8)),
        c: PathCostVector::new([0; 3].map(|_| rng.gen_range(0.1..2.0))).unwrap(),
        cfg: TrainConfig {
            lambda: rng.gen_range(0.0..2.0),
            tau: rng.gen_range(0.1..2.0),
            tau_g: rng.gen_range(0.5..3.0),
            ..TrainConfig::default()
        },
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale(a).max(scale(b)).max(1e-8)
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = draw(&mut rng);
        let analytic = total_loss(&d.z, &d.s, &d.c, &d.cfg).unwrap().grad;
        let numeric: Vec<f64> = (0..3)
            .map(|i| {
                let mut zp = d.z;
                let mut zm = d.z;
                zp[i] += h;
                zm[i] -= h;
                let lp = total_loss(&zp, &d.s, &d.c, &d.cfg).unwrap().total;
                let lm = total_loss(&zm, &d.s, &d.c, &d.cfg).unwrap().total;
                (lp - lm) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn gate_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dims = GateDims::new(12, 6);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let d = draw(&mut rng);
        let mut params = init_gate(dims, trial);
        for b in params.b1_mut() {
            *b = rng.gen_range(-0.2..0.2);
        }
        let x: Vec<f64> = (0..dims.input).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mode = if trial % 2 == 0 { Mode::Eval } else { Mode::Train };
        let loss_at = |p: &tabroute::gate::GateParameters| {
            let (z, _) = forward(p, &x, mode, trial).unwrap();
            total_loss(&z, &d.s, &d.c, &d.cfg).unwrap().total
        };
        let (z, cache) = forward(&params, &x, mode, trial).unwrap();
        // Skip draws with a pre-activation so close to the ReLU kink that the
        // finite difference straddles it.
        if cache.pre_activation.iter().any(|a| a.abs() < 1e-4) {
            continue;
        }
        let dz = total_loss(&z, &d.s, &d.c, &d.cfg).unwrap().grad;
        let analytic = backward(&params, &cache, &dz).unwrap();
        let mut numeric = vec![0.0; params.num_params()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = params.as_flat()[i];
            params.as_flat_mut()[i] = orig + h;
            let lp = loss_at(&params);
            params.as_flat_mut()[i] = orig - h;
            let lm = loss_at(&params);
            params.as_flat_mut()[i] = orig;
            *n = (lp - lm) / (2.0 * h);
        }
        worst = worst.max(rel_err(analytic.as_flat(), &numeric));
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}
