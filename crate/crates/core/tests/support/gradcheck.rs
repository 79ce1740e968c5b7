//! Central finite-difference check of `backward` against the scalar
//! forward path.

use tactiforce_core::mlp::{backward, forward, mse_loss, DropoutMasks, MlpParams, Mode};
use tactiforce_core::rng::SeededRng;

/// Loss through the scalar single-sample path, independent of the batched
/// GEMM route used by `backward`.
fn scalar_loss(p: &MlpParams, xs: &[[f64; 5]], ts: &[[f64; 3]], masks: Option<&DropoutMasks>) -> f64 {
    let hidden = p.hidden_sizes();
    let preds: Vec<[f64; 3]> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| match masks {
            None => forward(p, x, Mode::Infer),
            Some(m) => {
                let rows: Vec<&[f64]> = m
                    .layers
                    .iter()
                    .zip(&hidden)
                    .map(|(l, &h)| &l[i * h..(i + 1) * h])
                    .collect();
                forward(p, x, Mode::Train(&rows))
            }
        })
        .collect();
    mse_loss(&preds, ts).unwrap()
}

fn perturbed(p: &MlpParams, index: usize, delta: f64) -> MlpParams {
    let mut q = p.clone();
    let mut i = 0;
    for l in &mut q.layers {
        for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
            if i == index {
                *v += delta;
            }
            i += 1;
        }
    }
    q
}

/// Returns the worst relative error over all parameters.
pub fn gradient_check(seed: u64, hidden: &[usize], batch: usize, dropout: f64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut p = MlpParams::init(hidden, seed.wrapping_mul(31).wrapping_add(1));
    // nonzero biases keep pre-activations off the ReLU kink
    for l in &mut p.layers {
        for b in &mut l.bias {
            *b = rng.uniform_in(-0.5, 0.5);
        }
    }
    let xs: Vec<[f64; 5]> = (0..batch)
        .map(|_| core::array::from_fn(|_| rng.uniform()))
        .collect();
    let ts: Vec<[f64; 3]> = (0..batch)
        .map(|_| core::array::from_fn(|_| rng.uniform_in(-1.0, 1.0)))
        .collect();
    let masks = (dropout > 0.0).then(|| DropoutMasks::sample(&p, batch, dropout, &mut rng));
    let flat_x: Vec<f64> = xs.iter().flatten().copied().collect();
    let flat_t: Vec<f64> = ts.iter().flatten().copied().collect();
    let (_, grads) = backward(&p, &flat_x, &flat_t, masks.as_ref()).unwrap();
    let analytic = grads.flat();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let up = scalar_loss(&perturbed(&p, i, step), &xs, &ts, masks.as_ref());
        let down = scalar_loss(&perturbed(&p, i, -step), &xs, &ts, masks.as_ref());
        let numeric = (up - down) / (2.0 * step);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}
