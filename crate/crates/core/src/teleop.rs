//! Position-force bilateral teleoperation on a single deterministic timeline.
//!
//! Positions are gripper aperture half-widths in metres; smaller means more
//! closed. The follower position-tracks the leader, the leader renders the
//! sensed force back to the operator. Contact happens when the aperture
//! falls below the half-width of the grasped object.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regress::{eval_force, ForceEstimator, PolyCurve};
use crate::rng::SeededRng;
use crate::sim::{self, GelConfig, HertzParams, Indenter, IndenterShape, LightingModel, TactileFrame};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TeleopState {
    /// s
    pub t: f64,
    /// m, operator command
    pub x_h: f64,
    /// m
    pub x_l: f64,
    /// m
    pub x_fd: f64,
    /// m
    pub x_f: f64,
    /// m/s
    pub v_f: f64,
    /// N, rendered to the operator
    pub f_l: f64,
    /// N
    pub f_ld: f64,
    /// N, latest sensor sample
    pub f_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FollowerModel {
    /// kg
    pub mass: f64,
    /// N/m
    pub kp: f64,
    /// N s/m
    pub kd: f64,
    /// m
    pub x_min: f64,
    /// m
    pub x_max: f64,
}

impl Default for FollowerModel {
    fn default() -> Self {
        FollowerModel {
            mass: 0.1,
            kp: 2000.0,
            kd: 20.0,
            x_min: 0.0,
            x_max: 0.05,
        }
    }
}

impl FollowerModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(Error::domain("follower mass must be > 0"));
        }
        if !(self.kp >= 0.0 && self.kd >= 0.0) {
            return Err(Error::domain("kp and kd must be >= 0"));
        }
        if !(self.x_min < self.x_max) {
            return Err(Error::domain("x_min must be < x_max"));
        }
        Ok(())
    }
}

/// Operator hand: a spring that yields to the rendered force with a
/// first-order lag, plus a grip reflex that stops closing once contact is
/// felt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorModel {
    /// N/m
    pub k_h: f64,
    /// s
    pub tau: f64,
    /// N; `None` disables the reflex.
    pub reflex_force: Option<f64>,
}

impl Default for OperatorModel {
    fn default() -> Self {
        OperatorModel {
            k_h: 500.0,
            tau: 0.1,
            reflex_force: Some(0.2),
        }
    }
}

impl OperatorModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_h > 0.0) {
            return Err(Error::domain("k_h must be > 0"));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::domain("tau must be >= 0"));
        }
        if let Some(f) = self.reflex_force {
            if !(f > 0.0) {
                return Err(Error::domain("reflex_force must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectModel {
    /// m
    pub half_width: f64,
    /// Shape pressed into the gel on contact.
    pub shape: IndenterShape,
    /// mm of gel press per mm of penetration
    pub depth_gain: f64,
}

impl Default for ObjectModel {
    fn default() -> Self {
        ObjectModel {
            half_width: 0.0125,
            shape: IndenterShape::CALIBRATION_PROBE,
            depth_gain: 1.0,
        }
    }
}

impl ObjectModel {
    /// Gel press depth in mm for aperture `x_f` (m).
    pub fn press_depth(&self, x_f: f64) -> f64 {
        (self.half_width - x_f).max(0.0) * 1000.0 * self.depth_gain
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleopModels {
    pub follower: FollowerModel,
    pub operator: OperatorModel,
    /// Gel reaction on the follower.
    pub material: HertzParams,
}

impl TeleopModels {
    pub fn validate(&self) -> Result<()> {
        self.follower.validate()?;
        self.operator.validate()?;
        if !(self.material.k >= 0.0) {
            return Err(Error::domain("material k must be >= 0"));
        }
        Ok(())
    }
}

/// Anything that turns a gel press into a force reading.
pub trait ForceSensor {
    /// `press_depth` in mm, `t` in s.
    fn sense(&mut self, press_depth: f64, t: f64) -> Result<f64>;

    /// Frame behind the last reading, for sensors that render one.
    fn last_frame(&self) -> Option<&TactileFrame> {
        None
    }
}

/// Exact Hertzian reading of the press.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdealSensor(pub HertzParams);

impl ForceSensor for IdealSensor {
    fn sense(&mut self, press_depth: f64, _t: f64) -> Result<f64> {
        Ok(self.0.force(press_depth))
    }
}

/// Simulated depth map, peak depth through a calibration curve.
#[derive(Debug, Clone)]
pub struct OracleSensor {
    pub gel: GelConfig,
    pub shape: IndenterShape,
    pub curve: PolyCurve,
}

impl ForceSensor for OracleSensor {
    fn sense(&mut self, press_depth: f64, _t: f64) -> Result<f64> {
        let ind = Indenter {
            shape: self.shape,
            center: self.gel.center_mm(),
            press_depth,
        };
        let depth = sim::indent_depth(&self.gel, &ind)?;
        Ok(eval_force(&self.curve, depth.max()).force)
    }
}

/// Rendered frame through the full normal, depth and force pipeline.
#[derive(Debug, Clone)]
pub struct PipelineSensor {
    pub gel: GelConfig,
    pub lighting: LightingModel,
    pub shape: IndenterShape,
    pub estimator: ForceEstimator,
    frame: Option<TactileFrame>,
    next_id: u64,
}

impl PipelineSensor {
    pub fn new(
        gel: GelConfig,
        lighting: LightingModel,
        shape: IndenterShape,
        estimator: ForceEstimator,
    ) -> Self {
        PipelineSensor {
            gel,
            lighting,
            shape,
            estimator,
            frame: None,
            next_id: 0,
        }
    }
}

impl ForceSensor for PipelineSensor {
    fn sense(&mut self, press_depth: f64, t: f64) -> Result<f64> {
        let ind = Indenter {
            shape: self.shape,
            center: self.gel.center_mm(),
            press_depth,
        };
        let (_, mut frame) = sim::press_frame(&self.gel, &self.lighting, &ind)?;
        frame.timestamp = t;
        frame.frame_id = self.next_id;
        self.next_id += 1;
        let force = self.estimator.estimate(&frame)?.force_n;
        self.frame = Some(frame);
        Ok(force)
    }

    fn last_frame(&self) -> Option<&TactileFrame> {
        self.frame.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    /// s
    pub t: f64,
    /// m
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub label: String,
    /// s, inclusive
    pub start: f64,
    /// s, exclusive
    pub end: f64,
    #[serde(default)]
    pub feedback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// s
    pub duration: f64,
    /// Hz
    pub control_rate: f64,
    /// Hz
    pub sensor_rate: f64,
    /// Used outside every phase.
    pub feedback_enabled: bool,
    /// Piecewise-linear operator command, held flat past either end.
    pub script: Vec<Waypoint>,
    pub object: Option<ObjectModel>,
    pub phases: Vec<Phase>,
    /// N, standard deviation of additive sensor noise
    pub sensor_noise: f64,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            duration: 1.0,
            control_rate: 1000.0,
            sensor_rate: 30.0,
            feedback_enabled: false,
            script: alloc::vec![Waypoint { t: 0.0, x: 0.02 }],
            object: None,
            phases: Vec::new(),
            sensor_noise: 0.0,
            seed: 0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(Error::domain("duration must be finite and >= 0"));
        }
        if !(self.control_rate > 0.0 && self.control_rate.is_finite()) {
            return Err(Error::domain("control_rate must be > 0"));
        }
        if !(self.sensor_rate > 0.0 && self.sensor_rate <= self.control_rate) {
            return Err(Error::domain("sensor_rate must be in (0, control_rate]"));
        }
        if self.script.is_empty() {
            return Err(Error::domain("script needs at least one waypoint"));
        }
        if self
            .script
            .iter()
            .any(|w| !(w.t.is_finite() && w.x.is_finite()))
        {
            return Err(Error::domain("script waypoints must be finite"));
        }
        if self.script.windows(2).any(|w| !(w[0].t <= w[1].t)) {
            return Err(Error::domain("script times must be nondecreasing"));
        }
        if self.phases.iter().any(|p| !(p.start <= p.end)) {
            return Err(Error::domain("phase start must be <= end"));
        }
        if let Some(obj) = &self.object {
            if !(obj.half_width > 0.0 && obj.depth_gain >= 0.0) {
                return Err(Error::domain("object half_width must be > 0, depth_gain >= 0"));
            }
        }
        if !(self.sensor_noise >= 0.0) {
            return Err(Error::domain("sensor_noise must be >= 0"));
        }
        Ok(())
    }

    pub fn command_at(&self, t: f64) -> f64 {
        let s = &self.script;
        let i = s.partition_point(|w| w.t <= t);
        if i == 0 {
            return s[0].x;
        }
        if i == s.len() {
            return s[i - 1].x;
        }
        let (a, b) = (s[i - 1], s[i]);
        let span = b.t - a.t;
        if span <= 0.0 {
            return b.x;
        }
        a.x + (b.x - a.x) * (t - a.t) / span
    }

    pub fn phase_at(&self, t: f64) -> Option<&Phase> {
        self.phases.iter().find(|p| p.start <= t && t < p.end)
    }

    pub fn steps(&self) -> usize {
        libm::round(self.duration * self.control_rate) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub t: f64,
    pub x_h: f64,
    pub x_l: f64,
    pub x_fd: f64,
    pub x_f: f64,
    pub v_f: f64,
    pub f_l: f64,
    pub f_ld: f64,
    pub f_s: f64,
    pub region: String,
}

impl TelemetryRecord {
    pub fn new(s: &TeleopState, region: &str) -> Self {
        TelemetryRecord {
            t: s.t,
            x_h: s.x_h,
            x_l: s.x_l,
            x_fd: s.x_fd,
            x_f: s.x_f,
            v_f: s.v_f,
            f_l: s.f_l,
            f_ld: s.f_ld,
            f_s: s.f_s,
            region: region.into(),
        }
    }
}

pub type TelemetryLog = Vec<TelemetryRecord>;

/// Stepper holding everything that persists between control ticks.
pub struct Teleop<'s> {
    models: TeleopModels,
    object: Option<ObjectModel>,
    sensor: Box<dyn ForceSensor + 's>,
    sensor_rate: f64,
    noise: f64,
    rng: SeededRng,
    state: TeleopState,
    hold: Option<f64>,
    deflection: f64,
    last_tick: Option<i64>,
    sensed: bool,
}

impl<'s> Teleop<'s> {
    /// Starts at rest with every position at `x0`.
    pub fn new(
        models: TeleopModels,
        object: Option<ObjectModel>,
        sensor: Box<dyn ForceSensor + 's>,
        sensor_rate: f64,
        x0: f64,
    ) -> Result<Self> {
        models.validate()?;
        if !(sensor_rate > 0.0) {
            return Err(Error::domain("sensor_rate must be > 0"));
        }
        if !x0.is_finite() {
            return Err(Error::NonFinite("initial position"));
        }
        let x0 = x0.clamp(models.follower.x_min, models.follower.x_max);
        Ok(Teleop {
            models,
            object,
            sensor,
            sensor_rate,
            noise: 0.0,
            rng: SeededRng::new(0),
            state: TeleopState {
                x_h: x0,
                x_l: x0,
                x_fd: x0,
                x_f: x0,
                ..TeleopState::default()
            },
            hold: None,
            deflection: 0.0,
            last_tick: None,
            sensed: false,
        })
    }

    pub fn with_noise(mut self, std_dev: f64, seed: u64) -> Self {
        self.noise = std_dev;
        self.rng = SeededRng::new(seed);
        self
    }

    pub fn state(&self) -> &TeleopState {
        &self.state
    }

    pub fn sensor(&self) -> &dyn ForceSensor {
        &*self.sensor
    }

    /// True if the last step took a new sensor sample.
    pub fn sensed(&self) -> bool {
        self.sensed
    }

    /// Advances by `dt` toward operator intent `x_cmd`; `t_next` is the
    /// absolute time after the step.
    pub fn step(&mut self, x_cmd: f64, feedback: bool, dt: f64, t_next: f64) -> Result<&TeleopState> {
        if !(dt > 0.0) {
            return Err(Error::domain("dt must be > 0"));
        }
        if !(x_cmd.is_finite() && t_next.is_finite()) {
            return Err(Error::NonFinite("operator command"));
        }
        let TeleopModels {
            follower: fm,
            operator: op,
            material,
        } = self.models;
        let s = &mut self.state;

        // operator
        if !feedback {
            self.hold = None;
        } else if let Some(h) = self.hold {
            if x_cmd >= h {
                self.hold = None;
            }
        } else if let Some(threshold) = op.reflex_force {
            if s.f_l >= threshold {
                self.hold = Some(s.x_h);
            }
        }
        s.x_h = match self.hold {
            Some(h) => x_cmd.max(h),
            None => x_cmd,
        };

        // leader
        if feedback {
            let target = s.f_l / op.k_h;
            let alpha = if op.tau > 0.0 {
                1.0 - libm::exp(-dt / op.tau)
            } else {
                1.0
            };
            self.deflection += alpha * (target - self.deflection);
        } else {
            self.deflection = 0.0;
        }
        s.x_l = s.x_h + self.deflection;
        s.x_fd = s.x_l;

        // follower
        let press = self.object.map_or(0.0, |o| o.press_depth(s.x_f));
        let f_env = material.force(press);
        let f_drive = fm.kp * (s.x_fd - s.x_f) - fm.kd * s.v_f;
        s.v_f += (f_drive + f_env) / fm.mass * dt;
        s.x_f += s.v_f * dt;
        if s.x_f < fm.x_min || s.x_f > fm.x_max {
            s.x_f = s.x_f.clamp(fm.x_min, fm.x_max);
            s.v_f = 0.0;
        }
        s.t = t_next;

        // sensor, zero-order hold between ticks
        let tick = libm::floor(t_next * self.sensor_rate) as i64;
        self.sensed = self.last_tick != Some(tick);
        if self.sensed {
            self.last_tick = Some(tick);
            let press = self.object.map_or(0.0, |o| o.press_depth(s.x_f));
            let mut f = self.sensor.sense(press, t_next)?;
            if self.noise > 0.0 {
                f = (f + self.noise * self.rng.normal()).max(0.0);
            }
            s.f_s = f;
        }
        s.f_ld = s.f_s;
        s.f_l = if feedback { s.f_ld } else { 0.0 };

        if ![s.x_h, s.x_l, s.x_f, s.v_f, s.f_s].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("teleop state"));
        }
        Ok(&self.state)
    }
}

/// Fixed-step run of a scripted scenario, one record per control tick.
pub fn run_scenario(
    sc: &Scenario,
    models: &TeleopModels,
    sensor: Box<dyn ForceSensor + '_>,
) -> Result<TelemetryLog> {
    sc.validate()?;
    let mut sim = Teleop::new(*models, sc.object, sensor, sc.sensor_rate, sc.command_at(0.0))?
        .with_noise(sc.sensor_noise, sc.seed);
    let n = sc.steps();
    let dt = 1.0 / sc.control_rate;
    let mut log = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / sc.control_rate;
        let phase = sc.phase_at(t);
        let feedback = phase.map_or(sc.feedback_enabled, |p| p.feedback);
        let label = phase.map_or("", |p| p.label.as_str());
        let t_next = (k + 1) as f64 / sc.control_rate;
        let state = sim.step(sc.command_at(t), feedback, dt, t_next)?;
        log.push(TelemetryRecord::new(state, label));
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub samples: usize,
    /// m
    pub mean_desired: f64,
    /// m
    pub mean_actual: f64,
    /// m
    pub mean_error: f64,
    /// N
    pub max_force: f64,
}

/// Means of `x_h`, `x_f`, `|x_h - x_f|` and the peak `f_s` over records.
pub fn metrics<'a>(records: impl IntoIterator<Item = &'a TelemetryRecord>) -> Result<RegionMetrics> {
    let mut n = 0usize;
    let (mut sd, mut sa, mut se) = (0.0, 0.0, 0.0);
    let mut max_force = f64::NEG_INFINITY;
    for r in records {
        n += 1;
        sd += r.x_h;
        sa += r.x_f;
        se += (r.x_h - r.x_f).abs();
        max_force = max_force.max(r.f_s);
    }
    if n == 0 {
        return Err(Error::domain("empty region"));
    }
    let nf = n as f64;
    Ok(RegionMetrics {
        samples: n,
        mean_desired: sd / nf,
        mean_actual: sa / nf,
        mean_error: se / nf,
        max_force,
    })
}

pub fn region_metrics(log: &[TelemetryRecord], region: &str) -> Result<RegionMetrics> {
    metrics(log.iter().filter(|r| r.region == region))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn record(x_h: f64, x_f: f64, f_s: f64) -> TelemetryRecord {
        TelemetryRecord::new(
            &TeleopState {
                x_h,
                x_f,
                f_s,
                ..TeleopState::default()
            },
            "r",
        )
    }

    fn hold_scenario(feedback: bool) -> Scenario {
        Scenario {
            duration: 3.0,
            feedback_enabled: feedback,
            script: vec![
                Waypoint { t: 0.0, x: 0.02 },
                Waypoint { t: 1.0, x: 0.0075 },
            ],
            object: Some(ObjectModel::default()),
            ..Scenario::default()
        }
    }

    #[test]
    fn two_sample_region() {
        let log = vec![record(0.010, 0.012, 1.0), record(0.014, 0.012, 2.0)];
        let m = region_metrics(&log, "r").unwrap();
        assert!((m.mean_desired - 0.012).abs() < 1e-15);
        assert!((m.mean_actual - 0.012).abs() < 1e-15);
        assert!((m.mean_error - 0.002).abs() < 1e-15);
        assert_eq!(m.max_force, 2.0);
        assert!(region_metrics(&log, "x").is_err());
    }

    #[test]
    fn constant_region() {
        let log = vec![record(0.01, 0.01, 0.0); 5];
        let m = region_metrics(&log, "r").unwrap();
        assert_eq!(m.mean_error, 0.0);
        assert_eq!(m.mean_desired, 0.01);
        assert_eq!(m.mean_actual, 0.01);
    }

    #[test]
    fn command_interpolation() {
        let sc = Scenario {
            script: vec![
                Waypoint { t: 1.0, x: 0.01 },
                Waypoint { t: 2.0, x: 0.02 },
                Waypoint { t: 2.0, x: 0.03 },
            ],
            ..Scenario::default()
        };
        assert_eq!(sc.command_at(0.0), 0.01);
        assert!((sc.command_at(1.5) - 0.015).abs() < 1e-15);
        assert_eq!(sc.command_at(2.0), 0.03);
        assert_eq!(sc.command_at(9.0), 0.03);
    }

    #[test]
    fn zero_duration_is_empty() {
        let sc = Scenario {
            duration: 0.0,
            ..Scenario::default()
        };
        let log = run_scenario(&sc, &TeleopModels::default(), Box::new(IdealSensor::default())).unwrap();
        assert!(log.is_empty());
    }

    #[test]
    fn bad_dt_and_rates() {
        let mut t = Teleop::new(
            TeleopModels::default(),
            None,
            Box::new(IdealSensor::default()),
            30.0,
            0.02,
        )
        .unwrap();
        assert!(t.step(0.02, false, 0.0, 0.0).is_err());
        assert!(t.step(0.02, false, f64::NAN, 0.0).is_err());
        assert!(t.step(f64::NAN, false, 0.001, 0.001).is_err());
        let sc = Scenario {
            sensor_rate: 2000.0,
            ..Scenario::default()
        };
        assert!(sc.validate().is_err());
    }

    #[test]
    fn blocked_follower_without_feedback() {
        // static balance: kp (pen - 5 mm) = k pen^1.5 at pen = 1 mm
        let log = run_scenario(
            &hold_scenario(false),
            &TeleopModels::default(),
            Box::new(IdealSensor::default()),
        )
        .unwrap();
        let last = log.last().unwrap();
        assert!((last.x_f - 0.0115).abs() < 1e-5, "{}", last.x_f);
        assert!(((last.x_h - last.x_f).abs() - 0.004).abs() < 1e-5);
        assert!((last.f_s - 8.0).abs() < 0.05);
        assert_eq!(last.f_l, 0.0);
    }

    #[test]
    fn feedback_deflects_hand() {
        let models = TeleopModels::default();
        let log = run_scenario(&hold_scenario(true), &models, Box::new(IdealSensor::default())).unwrap();
        let last = log.last().unwrap();
        assert!(last.f_s > 0.0);
        let deflection = last.x_l - last.x_h;
        assert!((deflection - last.f_s / models.operator.k_h).abs() < 1e-6);
        assert!((last.x_h - last.x_f).abs() < 1e-3);
    }
}
