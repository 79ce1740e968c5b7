//! Synthetic stand-in for the gel sensor and the press rigs.
//!
//! A rigid indenter is intersected with the undeformed gel plane, the
//! penetration is blurred to mimic elastomer spreading, normals come from
//! finite differences of the depth, and a three-light Lambertian model
//! turns normals into an RGB frame. Ground-truth force is Hertzian.
//!
//! Geometry: pixel `(r, c)` sits at `(x, y) = (c, r) * pixel_pitch` mm.
//! Depth is positive into the gel. Normals follow the convention that the
//! depth field itself is the height being differentiated, so a ramp
//! `z = a x` has normal `(-a, 0, 1) / sqrt(1 + a^2)`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GelConfig {
    pub width_px: usize,
    pub height_px: usize,
    /// mm per pixel
    pub pixel_pitch: f64,
    /// mm
    pub max_indent: f64,
    /// pixels
    pub smoothing_sigma: f64,
}

impl Default for GelConfig {
    fn default() -> Self {
        GelConfig {
            width_px: 320,
            height_px: 240,
            pixel_pitch: 0.0625,
            max_indent: 1.5,
            smoothing_sigma: 2.0,
        }
    }
}

impl GelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width_px < 8 || self.height_px < 8 {
            return Err(Error::domain(format!(
                "gel must be at least 8x8 pixels, got {}x{}",
                self.height_px, self.width_px
            )));
        }
        if !(self.pixel_pitch > 0.0 && self.pixel_pitch.is_finite()) {
            return Err(Error::domain("pixel_pitch must be > 0"));
        }
        if !(self.max_indent > 0.0 && self.max_indent.is_finite()) {
            return Err(Error::domain("max_indent must be > 0"));
        }
        if !(self.smoothing_sigma >= 0.0 && self.smoothing_sigma.is_finite()) {
            return Err(Error::domain("smoothing_sigma must be >= 0"));
        }
        Ok(())
    }

    /// Physical extent `(width_mm, height_mm)` between the outer pixel centres.
    pub fn extent_mm(&self) -> (f64, f64) {
        (
            (self.width_px - 1) as f64 * self.pixel_pitch,
            (self.height_px - 1) as f64 * self.pixel_pitch,
        )
    }

    /// Centre of the gel plane in mm.
    pub fn center_mm(&self) -> (f64, f64) {
        let (w, h) = self.extent_mm();
        (w / 2.0, h / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IndenterShape {
    Sphere { radius: f64 },
    CylinderFlat { radius: f64 },
    /// Cylinder of `radius` whose end is a spherical cap of `cap_radius`.
    CylinderCurved { radius: f64, cap_radius: f64 },
}

impl IndenterShape {
    /// Steel calibration ball, 6 mm diameter.
    pub const CALIBRATION_BALL: IndenterShape = IndenterShape::Sphere { radius: 3.0 };
    /// 5 mm radius cylinder probe with a hemispherical end facing the gel.
    pub const CALIBRATION_PROBE: IndenterShape = IndenterShape::CylinderCurved {
        radius: 5.0,
        cap_radius: 5.0,
    };

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            IndenterShape::Sphere { radius } | IndenterShape::CylinderFlat { radius } => radius > 0.0,
            IndenterShape::CylinderCurved { radius, cap_radius } => {
                radius > 0.0 && cap_radius >= radius
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid indenter radii: {self:?}")))
        }
    }

    /// Indenter surface depth below the gel plane at radial distance `rho`
    /// for a press of `press` mm. Positive means penetration.
    pub fn penetration(&self, press: f64, rho: f64) -> f64 {
        let v = match *self {
            IndenterShape::Sphere { radius } => {
                if rho >= radius {
                    return 0.0;
                }
                press - (radius - libm::sqrt(radius * radius - rho * rho))
            }
            IndenterShape::CylinderFlat { radius } => {
                if rho > radius {
                    return 0.0;
                }
                press
            }
            IndenterShape::CylinderCurved { radius, cap_radius } => {
                if rho > radius {
                    return 0.0;
                }
                press - (cap_radius - libm::sqrt(cap_radius * cap_radius - rho * rho))
            }
        };
        v.max(0.0)
    }

    /// Radius of the contact disc for a press of `press` mm.
    pub fn contact_radius(&self, press: f64) -> f64 {
        if press <= 0.0 {
            return 0.0;
        }
        match *self {
            IndenterShape::Sphere { radius } => {
                if press >= radius {
                    radius
                } else {
                    libm::sqrt(press * (2.0 * radius - press))
                }
            }
            IndenterShape::CylinderFlat { radius } => radius,
            IndenterShape::CylinderCurved { radius, cap_radius } => {
                let cap = if press >= cap_radius {
                    cap_radius
                } else {
                    libm::sqrt(press * (2.0 * cap_radius - press))
                };
                cap.min(radius)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Indenter {
    pub shape: IndenterShape,
    /// mm, gel-plane coordinates
    pub center: (f64, f64),
    /// mm
    pub press_depth: f64,
}

impl Indenter {
    /// Analytic unit normal of the indented surface at `(x, y)` mm, using the
    /// same convention as [`normals_from_depth`]. Outside the contact disc the
    /// gel is flat. Only defined for spherical tips.
    pub fn analytic_normal(&self, x: f64, y: f64) -> [f64; 3] {
        let cap = match self.shape {
            IndenterShape::Sphere { radius } => radius,
            IndenterShape::CylinderCurved { cap_radius, .. } => cap_radius,
            IndenterShape::CylinderFlat { .. } => return [0.0, 0.0, 1.0],
        };
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let rho = libm::sqrt(dx * dx + dy * dy);
        if rho >= self.shape.contact_radius(self.press_depth) || self.press_depth <= 0.0 {
            return [0.0, 0.0, 1.0];
        }
        let s = libm::sqrt(cap * cap - rho * rho);
        [dx / cap, dy / cap, s / cap]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Light {
    /// Unit vector the light travels along; z < 0 means it shines up at the
    /// gel from the camera side.
    pub direction: [f64; 3],
    pub color_gain: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LightingModel {
    pub lights: [Light; 3],
    pub ambient: [f64; 3],
}

impl Default for LightingModel {
    fn default() -> Self {
        let elevation = core::f64::consts::FRAC_PI_4;
        let make = |azimuth_deg: f64, gain: [f64; 3]| {
            let az = azimuth_deg.to_radians();
            let horiz = libm::cos(elevation);
            Light {
                direction: [
                    -horiz * libm::cos(az),
                    -horiz * libm::sin(az),
                    -libm::sin(elevation),
                ],
                color_gain: gain,
            }
        };
        LightingModel {
            lights: [
                make(0.0, [0.6, 0.0, 0.0]),
                make(120.0, [0.0, 0.6, 0.0]),
                make(240.0, [0.0, 0.0, 0.6]),
            ],
            ambient: [0.25, 0.25, 0.25],
        }
    }
}

impl LightingModel {
    pub fn validate(&self) -> Result<()> {
        for (i, light) in self.lights.iter().enumerate() {
            let d = light.direction;
            let norm = libm::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::domain(format!("light {i} direction is not unit length")));
            }
            if d[2] >= 0.0 {
                return Err(Error::domain(format!("light {i} must have negative z direction")));
            }
            if light.color_gain.iter().any(|g| !(0.0..=1.0).contains(g)) {
                return Err(Error::domain(format!("light {i} gain outside [0, 1]")));
            }
        }
        for c in 0..3 {
            let a = self.ambient[c];
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::domain("ambient outside [0, 1]"));
            }
            let total = a + self.lights.iter().map(|l| l.color_gain[c]).sum::<f64>();
            if total > 1.0 + 1e-12 {
                return Err(Error::domain(format!(
                    "channel {c}: ambient plus gains is {total}, exceeds 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HertzParams {
    /// N / mm^1.5
    pub k: f64,
}

impl Default for HertzParams {
    fn default() -> Self {
        HertzParams { k: 8.0 }
    }
}

impl HertzParams {
    /// `k * depth^1.5`, zero for non-positive depth.
    pub fn force(&self, depth_mm: f64) -> f64 {
        if depth_mm <= 0.0 {
            0.0
        } else {
            self.k * depth_mm * libm::sqrt(depth_mm)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    /// mm, positive into the gel
    pub values: Grid<f64>,
    /// mm / pixel
    pub pixel_pitch: f64,
}

impl DepthMap {
    pub fn zeros(height: usize, width: usize, pixel_pitch: f64) -> Self {
        DepthMap {
            values: Grid::filled(height, width, 0.0),
            pixel_pitch,
        }
    }

    pub fn max(&self) -> f64 {
        self.values.max_value().max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub vectors: Grid<[f64; 3]>,
}

impl NormalMap {
    pub fn flat(height: usize, width: usize) -> Self {
        NormalMap {
            vectors: Grid::filled(height, width, [0.0, 0.0, 1.0]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TactileFrame {
    pub pixels: Grid<[f32; 3]>,
    /// s
    pub timestamp: f64,
    pub frame_id: u64,
}

/// Rigid-indenter penetration, Gaussian spread, clamped border ring.
pub fn indent_depth(gel: &GelConfig, ind: &Indenter) -> Result<DepthMap> {
    gel.validate()?;
    ind.shape.validate()?;
    if !(ind.press_depth >= 0.0) {
        return Err(Error::domain("press_depth must be >= 0"));
    }
    if ind.press_depth > gel.max_indent {
        return Err(Error::domain(format!(
            "press_depth {} mm exceeds max_indent {} mm",
            ind.press_depth, gel.max_indent
        )));
    }
    let (h, w) = (gel.height_px, gel.width_px);
    let pitch = gel.pixel_pitch;
    let footprint = ind.shape.contact_radius(ind.press_depth);
    if footprint > 0.0 {
        let margin = 2.0 * pitch;
        let (xmax, ymax) = gel.extent_mm();
        let (cx, cy) = ind.center;
        if cx - footprint < margin
            || cy - footprint < margin
            || cx + footprint > xmax - margin
            || cy + footprint > ymax - margin
        {
            return Err(Error::domain(format!(
                "indenter footprint (radius {footprint:.3} mm at {cx:.3},{cy:.3}) leaves the gel"
            )));
        }
    }

    let cx_px = ind.center.0 / pitch;
    let cy_px = ind.center.1 / pitch;
    let mut values = Grid::from_fn(h, w, |r, c| {
        let dx = (c as f64 - cx_px) * pitch;
        let dy = (r as f64 - cy_px) * pitch;
        ind.shape
            .penetration(ind.press_depth, libm::sqrt(dx * dx + dy * dy))
    });
    if gel.smoothing_sigma > 0.0 {
        values = gaussian_blur(&values, gel.smoothing_sigma);
    }
    for r in 0..h {
        for c in 0..w {
            if values.on_border(r, c) {
                values[(r, c)] = 0.0;
            }
        }
    }
    Ok(DepthMap {
        values,
        pixel_pitch: pitch,
    })
}

/// Separable Gaussian with zero padding, kernel truncated at 3 sigma.
pub(crate) fn gaussian_blur(src: &Grid<f64>, sigma: f64) -> Grid<f64> {
    let radius = libm::ceil(3.0 * sigma) as usize;
    let mut kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = src.shape();
    let mut tmp = Grid::filled(h, w, 0.0);
    for r in 0..h {
        let row = src.row(r);
        let out = tmp.row_mut(r);
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                let cc = c as isize + k as isize - radius as isize;
                if cc >= 0 && (cc as usize) < w {
                    acc += wk * row[cc as usize];
                }
            }
            *o = acc;
        }
    }
    let mut out = Grid::filled(h, w, 0.0);
    for r in 0..h {
        for (k, &wk) in kernel.iter().enumerate() {
            let rr = r as isize + k as isize - radius as isize;
            if rr < 0 || rr as usize >= h {
                continue;
            }
            let src_row = tmp.row(rr as usize);
            let dst = out.row_mut(r);
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += wk * s;
            }
        }
    }
    out
}

/// Central-difference derivative along x (columns) in value units per mm.
/// One-sided at the left and right borders.
pub(crate) fn diff_x(f: &Grid<f64>, r: usize, c: usize, h: f64) -> f64 {
    let w = f.width();
    if w < 2 {
        return 0.0;
    }
    if c == 0 {
        (f[(r, 1)] - f[(r, 0)]) / h
    } else if c + 1 == w {
        (f[(r, c)] - f[(r, c - 1)]) / h
    } else {
        (f[(r, c + 1)] - f[(r, c - 1)]) / (2.0 * h)
    }
}

pub(crate) fn diff_y(f: &Grid<f64>, r: usize, c: usize, h: f64) -> f64 {
    let ht = f.height();
    if ht < 2 {
        return 0.0;
    }
    if r == 0 {
        (f[(1, c)] - f[(0, c)]) / h
    } else if r + 1 == ht {
        (f[(r, c)] - f[(r - 1, c)]) / h
    } else {
        (f[(r + 1, c)] - f[(r - 1, c)]) / (2.0 * h)
    }
}

pub fn normals_from_depth(d: &DepthMap) -> NormalMap {
    let (h, w) = d.values.shape();
    let pitch = d.pixel_pitch;
    let vectors = Grid::from_fn(h, w, |r, c| {
        let gx = diff_x(&d.values, r, c, pitch);
        let gy = diff_y(&d.values, r, c, pitch);
        let inv = 1.0 / libm::sqrt(1.0 + gx * gx + gy * gy);
        [-gx * inv, -gy * inv, inv]
    });
    NormalMap { vectors }
}

pub fn shade(n: [f64; 3], lm: &LightingModel) -> [f32; 3] {
    let mut out = lm.ambient;
    for light in &lm.lights {
        let d = light.direction;
        let lambert = (-(n[0] * d[0] + n[1] * d[1] + n[2] * d[2])).max(0.0);
        for (o, g) in out.iter_mut().zip(light.color_gain) {
            *o += g * lambert;
        }
    }
    out.map(|v| v.clamp(0.0, 1.0) as f32)
}

pub fn render(n: &NormalMap, lm: &LightingModel) -> TactileFrame {
    TactileFrame {
        pixels: n.vectors.map(|&v| shade(v, lm)),
        timestamp: 0.0,
        frame_id: 0,
    }
}

/// Hertzian ground truth from the deepest pixel of a depth map.
pub fn truth_force(d: &DepthMap, material: &HertzParams) -> f64 {
    material.force(d.max())
}

/// Convenience: depth, normals and frame for one press.
pub fn press_frame(gel: &GelConfig, lm: &LightingModel, ind: &Indenter) -> Result<(DepthMap, TactileFrame)> {
    let depth = indent_depth(gel, ind)?;
    let frame = render(&normals_from_depth(&depth), lm);
    Ok((depth, frame))
}

/// Angle between two (not necessarily unit) vectors, degrees.
pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let na = libm::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
    let nb = libm::sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]);
    libm::acos((dot / (na * nb)).clamp(-1.0, 1.0)).to_degrees()
}
