//! Throughput of the frame to force pipeline.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use tactiforce_core::mlp::{MlpParams, Predictor};
use tactiforce_core::poisson::{max_depth, Reconstructor};
use tactiforce_core::regress::{eval_force, PolyCurve};
use tactiforce_core::sim::{press_frame, GelConfig, Indenter, IndenterShape, LightingModel, TactileFrame};

/// Distinct presses cycled through during a run.
const PRESS_VARIANTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
}

impl StageStats {
    pub fn from_secs(samples: &[f64]) -> Self {
        let mut ms: Vec<f64> = samples.iter().map(|s| s * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let rank = |q: f64| {
            if ms.is_empty() {
                return 0.0;
            }
            let i = ((q * ms.len() as f64).ceil() as usize).clamp(1, ms.len());
            ms[i - 1]
        };
        StageStats {
            p50_ms: rank(0.5),
            p95_ms: rank(0.95),
            mean_ms: if ms.is_empty() { 0.0 } else { ms.iter().sum::<f64>() / ms.len() as f64 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stages {
    pub mlp: StageStats,
    pub solver: StageStats,
    pub regression: StageStats,
    pub total: StageStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Frames per second of pipeline time.
    pub fps: f64,
    /// s, pipeline time summed over frames
    pub busy_s: f64,
    pub median_filter: bool,
    pub stages: Stages,
    pub config_fingerprint: String,
}

/// Pressed frames at the gel centre with depths spread over the range.
pub fn bench_frames(gel: &GelConfig, lm: &LightingModel) -> tactiforce_core::Result<Vec<TactileFrame>> {
    let shape = IndenterShape::CALIBRATION_BALL;
    let (xm, ym) = gel.extent_mm();
    let hi = gel.max_indent.min(1.0);
    (0..PRESS_VARIANTS)
        .map(|i| {
            let mut d = hi * (i as f64 + 1.0) / PRESS_VARIANTS as f64;
            let fit = (xm.min(ym) / 2.0 - 2.0 * gel.pixel_pitch).max(0.0);
            while d > 0.0 && shape.contact_radius(d) > fit {
                d *= 0.5;
            }
            let ind = Indenter {
                shape,
                center: gel.center_mm(),
                press_depth: d,
            };
            press_frame(gel, lm, &ind).map(|(_, f)| f)
        })
        .collect()
}

/// Times `frames` passes of predict, reconstruct plus peak, and curve
/// evaluation, single-threaded.
pub fn run_bench(
    gel: &GelConfig,
    lm: &LightingModel,
    params: &MlpParams,
    curve: &PolyCurve,
    frames: usize,
    median_filter: bool,
    config_fingerprint: String,
) -> anyhow::Result<BenchReport> {
    gel.validate()?;
    params.validate()?;
    let inputs = bench_frames(gel, lm)?;
    let predictor = Predictor::new(params);
    let rec = Reconstructor::new(gel.height_px, gel.width_px, gel.pixel_pitch)?;
    for f in inputs.iter().take(2) {
        let n = predictor.predict(f);
        std::hint::black_box(max_depth(&rec.depth_from_normals(&n)?, median_filter));
    }

    let (mut mlp, mut solver, mut regression, mut total) = (
        Vec::with_capacity(frames),
        Vec::with_capacity(frames),
        Vec::with_capacity(frames),
        Vec::with_capacity(frames),
    );
    for k in 0..frames {
        let frame = &inputs[k % inputs.len()];
        let t0 = Instant::now();
        let normals = predictor.predict(frame);
        let t1 = Instant::now();
        let depth = max_depth(&rec.depth_from_normals(&normals)?, median_filter);
        let t2 = Instant::now();
        std::hint::black_box(eval_force(curve, depth));
        let t3 = Instant::now();
        mlp.push((t1 - t0).as_secs_f64());
        solver.push((t2 - t1).as_secs_f64());
        regression.push((t3 - t2).as_secs_f64());
        total.push((t3 - t0).as_secs_f64());
    }
    let busy: f64 = total.iter().sum();
    Ok(BenchReport {
        height: gel.height_px,
        width: gel.width_px,
        frames,
        fps: if busy > 0.0 { frames as f64 / busy } else { f64::INFINITY },
        busy_s: busy,
        median_filter,
        stages: Stages {
            mlp: StageStats::from_secs(&mlp),
            solver: StageStats::from_secs(&solver),
            regression: StageStats::from_secs(&regression),
            total: StageStats::from_secs(&total),
        },
        config_fingerprint,
    })
}
