//! Depth-to-force calibration: a constant-displacement press protocol, a
//! cubic least-squares fit, and clamped evaluation for live estimation.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::least_squares;
use crate::mlp::{MlpParams, Predictor};
use crate::poisson::{max_depth, Reconstructor};
use crate::sim::{self, GelConfig, HertzParams, Indenter, IndenterShape, LightingModel, TactileFrame};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibSample {
    /// mm
    pub depth: f64,
    /// N
    pub force: f64,
}

/// `p1 d^3 + p2 d^2 + p3 d + p4` in physical units (d in mm, result in N).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyCurve {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
    pub r_squared: f64,
    pub d_min: f64,
    pub d_max: f64,
    /// Depth divisor used to condition the fit.
    pub depth_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ForceEstimate {
    /// N, floored at zero
    pub force: f64,
    /// Set when the depth fell outside the calibrated range.
    pub clamped: bool,
}

impl PolyCurve {
    /// Raw polynomial, no clamping or flooring.
    pub fn poly(&self, d: f64) -> f64 {
        ((self.p1 * d + self.p2) * d + self.p3) * d + self.p4
    }

    /// `dp/dd` of the raw polynomial.
    pub fn slope(&self, d: f64) -> f64 {
        (3.0 * self.p1 * d + 2.0 * self.p2) * d + self.p3
    }
}

/// Least-squares cubic on depths rescaled by their maximum.
pub fn fit_poly3(samples: &[CalibSample]) -> Result<PolyCurve> {
    let mut depths: Vec<f64> = samples.iter().map(|s| s.depth).collect();
    depths.sort_by(f64::total_cmp);
    depths.dedup();
    if depths.len() < 4 {
        return Err(Error::DegenerateFit {
            distinct: depths.len(),
        });
    }
    if samples
        .iter()
        .any(|s| !(s.depth.is_finite() && s.force.is_finite()))
    {
        return Err(Error::NonFinite("calibration samples"));
    }
    let d_min = depths[0];
    let d_max = depths[depths.len() - 1];
    let scale = d_max.abs().max(d_min.abs());
    let design: Vec<f64> = samples
        .iter()
        .flat_map(|s| {
            let u = s.depth / scale;
            [u * u * u, u * u, u, 1.0]
        })
        .collect();
    let forces: Vec<f64> = samples.iter().map(|s| s.force).collect();
    let q = least_squares(&design, samples.len(), 4, &forces).ok_or(Error::DegenerateFit {
        distinct: depths.len(),
    })?;
    let mut curve = PolyCurve {
        p1: q[0] / (scale * scale * scale),
        p2: q[1] / (scale * scale),
        p3: q[2] / scale,
        p4: q[3],
        r_squared: 0.0,
        d_min,
        d_max,
        depth_scale: scale,
    };
    curve.r_squared = r_squared(&curve, samples);
    Ok(curve)
}

/// `1 - SS_res / SS_tot`; for constant targets 1 on a perfect fit, else 0.
pub fn r_squared(curve: &PolyCurve, samples: &[CalibSample]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.force).sum::<f64>() / n;
    let ss_tot: f64 = samples.iter().map(|s| (s.force - mean).powi(2)).sum();
    let ss_res = ss_residual(curve, samples);
    let magnitude = samples.iter().map(|s| s.force * s.force).sum::<f64>().max(1.0);
    if ss_tot <= 1e-24 * magnitude {
        if ss_res <= 1e-20 * magnitude {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}

pub fn ss_residual(curve: &PolyCurve, samples: &[CalibSample]) -> f64 {
    samples
        .iter()
        .map(|s| (s.force - curve.poly(s.depth)).powi(2))
        .sum()
}

/// Force at `depth`, with depth clamped to the calibrated range.
pub fn eval_force(curve: &PolyCurve, depth: f64) -> ForceEstimate {
    let clamped = !(curve.d_min..=curve.d_max).contains(&depth);
    let d = depth.clamp(curve.d_min, curve.d_max);
    ForceEstimate {
        force: curve.poly(d).max(0.0),
        clamped,
    }
}

/// Where calibration depths come from.
#[derive(Debug, Clone, Copy)]
pub enum DepthSource<'a> {
    /// The simulator's own depth map.
    Oracle,
    /// Render, predict normals with the network, integrate.
    Full(&'a MlpParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub probe: IndenterShape,
    /// Offset of the press point from the gel centre, mm.
    pub offset: (f64, f64),
    pub steps: usize,
    /// mm per press
    pub step_depth: f64,
    pub material: HertzParams,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            probe: IndenterShape::CALIBRATION_PROBE,
            offset: (0.0, 0.0),
            steps: 25,
            step_depth: 0.04,
            material: HertzParams::default(),
        }
    }
}

/// Presses at `k * step_depth` for `k = 1..=steps`; each sample pairs the
/// recovered peak depth with the Hertzian ground-truth force.
pub fn run_calibration(
    gel: &GelConfig,
    lm: &LightingModel,
    cfg: &CalibrationConfig,
    source: DepthSource<'_>,
) -> Result<Vec<CalibSample>> {
    if cfg.steps < 4 {
        return Err(Error::domain(format!(
            "calibration needs at least 4 presses, got {}",
            cfg.steps
        )));
    }
    if !(cfg.step_depth > 0.0) {
        return Err(Error::domain("step_depth must be > 0"));
    }
    let (cx, cy) = gel.center_mm();
    let mut stage = match source {
        DepthSource::Oracle => None,
        DepthSource::Full(p) => Some(DepthPipeline::new(p, gel)?),
    };
    (1..=cfg.steps)
        .map(|k| {
            let ind = Indenter {
                shape: cfg.probe,
                center: (cx + cfg.offset.0, cy + cfg.offset.1),
                press_depth: k as f64 * cfg.step_depth,
            };
            let depth_map = sim::indent_depth(gel, &ind)?;
            let force = sim::truth_force(&depth_map, &cfg.material);
            let depth = match stage.as_mut() {
                None => depth_map.max(),
                Some(stage) => {
                    let frame = sim::render(&sim::normals_from_depth(&depth_map), lm);
                    stage.max_depth(&frame)?
                }
            };
            Ok(CalibSample { depth, force })
        })
        .collect()
}

/// Frame to peak depth: network normals, Poisson integration, median max.
#[derive(Debug, Clone)]
pub struct DepthPipeline {
    predictor: Predictor,
    reconstructor: Reconstructor,
    median: bool,
}

impl DepthPipeline {
    pub fn new(params: &MlpParams, gel: &GelConfig) -> Result<Self> {
        params.validate()?;
        Ok(DepthPipeline {
            predictor: Predictor::new(params),
            reconstructor: Reconstructor::new(gel.height_px, gel.width_px, gel.pixel_pitch)?,
            median: true,
        })
    }

    /// Toggle the 3x3 median before the peak (on by default).
    pub fn with_median(mut self, on: bool) -> Self {
        self.median = on;
        self
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    pub fn reconstructor(&self) -> &Reconstructor {
        &self.reconstructor
    }

    pub fn depth_map(&self, frame: &TactileFrame) -> Result<sim::DepthMap> {
        let normals = self.predictor.predict(frame);
        self.reconstructor.depth_from_normals(&normals)
    }

    pub fn max_depth(&self, frame: &TactileFrame) -> Result<f64> {
        Ok(max_depth(&self.depth_map(frame)?, self.median))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceRecord {
    pub frame_id: u64,
    /// s, copied from the frame
    pub stamp: f64,
    pub force_n: f64,
    pub max_depth_mm: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamError {
    pub frame_id: u64,
    pub error: Error,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamOutput {
    pub records: Vec<ForceRecord>,
    pub errors: Vec<StreamError>,
}

/// The full frame-to-force estimator.
#[derive(Debug, Clone)]
pub struct ForceEstimator {
    pub pipeline: DepthPipeline,
    pub curve: PolyCurve,
}

impl ForceEstimator {
    pub fn new(params: &MlpParams, gel: &GelConfig, curve: PolyCurve) -> Result<Self> {
        Ok(ForceEstimator {
            pipeline: DepthPipeline::new(params, gel)?,
            curve,
        })
    }

    pub fn estimate(&self, frame: &TactileFrame) -> Result<ForceRecord> {
        let depth = self.pipeline.max_depth(frame)?;
        let est = eval_force(&self.curve, depth);
        Ok(ForceRecord {
            frame_id: frame.frame_id,
            stamp: frame.timestamp,
            force_n: est.force,
            max_depth_mm: depth,
            clamped: est.clamped,
        })
    }
}

/// One record per frame in order; failing frames are reported and skipped.
pub fn force_stream<'a>(
    estimator: &ForceEstimator,
    frames: impl IntoIterator<Item = &'a TactileFrame>,
) -> StreamOutput {
    let mut out = StreamOutput::default();
    for frame in frames {
        match estimator.estimate(frame) {
            Ok(rec) => out.records.push(rec),
            Err(error) => out.errors.push(StreamError {
                frame_id: frame.frame_id,
                error,
            }),
        }
    }
    out
}
