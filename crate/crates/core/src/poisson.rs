//! Depth from normals: slope field, divergence, and a Dirichlet Poisson
//! solve diagonalised by the type-I discrete sine transform.
//!
//! The solver works on the interior `(H-2) x (W-2)` pixels of an `H x W`
//! grid; the outer ring is the zero boundary. It returns the surface height
//! `z` (an indentation is negative), and [`height_to_depth`] turns that into
//! a non-negative depth map.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "std")]
use alloc::sync::Arc;
#[cfg(feature = "std")]
use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::dgemm;
use crate::sim::{diff_x, diff_y, DepthMap, NormalMap};

/// `n_z` floor applied before dividing by it.
pub const NZ_FLOOR: f64 = 0.05;

/// Transforms up to this length default to the direct O(N^2) route.
pub const DIRECT_MAX_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub gx: Grid<f64>,
    pub gy: Grid<f64>,
    /// mm / pixel
    pub pixel_pitch: f64,
}

impl GradientField {
    pub fn scaled(&self, alpha: f64) -> GradientField {
        GradientField {
            gx: self.gx.map(|v| alpha * v),
            gy: self.gy.map(|v| alpha * v),
            pixel_pitch: self.pixel_pitch,
        }
    }
}

/// `gx = n_x / n_z`, `gy = n_y / n_z` with `n_z` floored at [`NZ_FLOOR`].
pub fn gradients_from_normals(n: &NormalMap, pixel_pitch: f64) -> GradientField {
    let gx = n.vectors.map(|v| v[0] / v[2].max(NZ_FLOOR));
    let gy = n.vectors.map(|v| v[1] / v[2].max(NZ_FLOOR));
    GradientField {
        gx,
        gy,
        pixel_pitch,
    }
}

/// `d gx/dx + d gy/dy`, central differences, one-sided on the border.
pub fn divergence(g: &GradientField) -> Grid<f64> {
    let (h, w) = g.gx.shape();
    let p = g.pixel_pitch;
    Grid::from_fn(h, w, |r, c| diff_x(&g.gx, r, c, p) + diff_y(&g.gy, r, c, p))
}

/// Reference DST-I, `X_k = sum_n x_n sin(pi (k+1)(n+1) / (N+1))`.
pub fn dst1_direct(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let scale = core::f64::consts::PI / (n + 1) as f64;
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(j, v)| v * libm::sin(scale * ((k + 1) * (j + 1)) as f64))
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DstRoute {
    /// Dense sine matrix applied with a GEMM.
    Direct,
    /// Folded sequence through a complex FFT of length `N + 1`.
    #[cfg(feature = "std")]
    Fft,
}

impl DstRoute {
    fn for_len(n: usize) -> DstRoute {
        #[cfg(feature = "std")]
        if n > DIRECT_MAX_LEN {
            return DstRoute::Fft;
        }
        let _ = n;
        DstRoute::Direct
    }
}

/// Unnormalised DST-I of fixed length applied to every row of a buffer.
#[derive(Clone)]
enum SineTransform {
    /// Symmetric `n x n` sine matrix.
    Direct { n: usize, table: Vec<f64> },
    #[cfg(feature = "std")]
    Fft {
        n: usize,
        fft: Arc<dyn Fft<f64>>,
        /// `sin(pi j / (n + 1))` for `j = 0..=n`
        sines: Vec<f64>,
    },
}

impl core::fmt::Debug for SineTransform {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SineTransform::Direct { n, .. } => write!(f, "Direct({n})"),
            #[cfg(feature = "std")]
            SineTransform::Fft { n, .. } => write!(f, "Fft({n})"),
        }
    }
}

impl SineTransform {
    fn new(n: usize, route: DstRoute) -> Self {
        match route {
            DstRoute::Direct => {
                let scale = core::f64::consts::PI / (n + 1) as f64;
                let table = (0..n * n)
                    .map(|i| libm::sin(scale * ((i / n + 1) * (i % n + 1)) as f64))
                    .collect();
                SineTransform::Direct { n, table }
            }
            #[cfg(feature = "std")]
            DstRoute::Fft => {
                let fft = FftPlanner::new().plan_fft_forward(n + 1);
                let step = core::f64::consts::PI / (n + 1) as f64;
                let sines = (0..=n).map(|j| libm::sin(step * j as f64)).collect();
                SineTransform::Fft { n, fft, sines }
            }
        }
    }

    /// Transform each of the `data.len() / n` contiguous rows in place.
    fn apply_rows(&self, data: &mut [f64]) {
        match self {
            SineTransform::Direct { n, table } => {
                let rows = data.len() / n;
                let mut out = vec![0.0; data.len()];
                dgemm(
                    rows,
                    *n,
                    *n,
                    1.0,
                    data,
                    (*n as isize, 1),
                    table,
                    (*n as isize, 1),
                    0.0,
                    &mut out,
                );
                data.copy_from_slice(&out);
            }
            #[cfg(feature = "std")]
            SineTransform::Fft { n, fft, sines } => fft_rows(*n, fft.as_ref(), sines, data),
        }
    }
}

/// DST-I of every row through a length `n + 1` DFT. With `M = n + 1` and
/// `f_0 = f_M = 0`, the folded sequence
/// `y_j = sin(pi j / M) (f_j + f_{M-j}) + (f_j - f_{M-j}) / 2`
/// has spectrum `Y` with `F_{2k} = -Im Y_k` and
/// `F_{2k+1} = F_{2k-1} + Re Y_k`, `F_1 = Re Y_0 / 2`.
/// Two rows share one complex FFT, separated by conjugate symmetry.
#[cfg(feature = "std")]
fn fft_rows(n: usize, fft: &dyn Fft<f64>, sines: &[f64], data: &mut [f64]) {
    let m = n + 1;
    let rows = data.len() / n;
    let pairs = rows.div_ceil(2);
    let fold = |row: &[f64], j: usize| {
        let (a, b) = (row[j - 1], row[n - j]);
        sines[j] * (a + b) + 0.5 * (a - b)
    };
    let mut buf = vec![Complex::new(0.0, 0.0); pairs * m];
    for p in 0..pairs {
        let a = &data[2 * p * n..(2 * p + 1) * n];
        let b = (2 * p + 1 < rows).then(|| &data[(2 * p + 1) * n..(2 * p + 2) * n]);
        let seg = &mut buf[p * m..(p + 1) * m];
        for j in 1..=n {
            seg[j] = Complex::new(fold(a, j), b.map_or(0.0, |b| fold(b, j)));
        }
    }
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    fft.process_with_scratch(&mut buf, &mut scratch);
    for p in 0..pairs {
        let seg = &buf[p * m..(p + 1) * m];
        let unpack = |row: &mut [f64], spectrum: &dyn Fn(usize) -> Complex<f64>| {
            row[0] = spectrum(0).re / 2.0;
            for k in 1..=n / 2 {
                let y = spectrum(k);
                row[2 * k - 1] = -y.im;
                if 2 * k < n {
                    row[2 * k] = row[2 * k - 2] + y.re;
                }
            }
        };
        let mirror = |k: usize| seg[(m - k) % m].conj();
        unpack(&mut data[2 * p * n..(2 * p + 1) * n], &|k| (seg[k] + mirror(k)) * 0.5);
        if 2 * p + 1 < rows {
            unpack(&mut data[(2 * p + 1) * n..(2 * p + 2) * n], &|k| {
                (seg[k] - mirror(k)) * Complex::new(0.0, -0.5)
            });
        }
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    const B: usize = 32;
    for rb in (0..rows).step_by(B) {
        for cb in (0..cols).step_by(B) {
            for r in rb..(rb + B).min(rows) {
                for c in cb..(cb + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Precomputed eigenvalues and sine transforms for one grid size.
/// Immutable after construction; every call allocates its own scratch.
#[derive(Debug, Clone)]
pub struct DstPlan {
    height: usize,
    width: usize,
    h: f64,
    /// Eigenvalues along rows of the interior (`M` of them).
    lambda: Vec<f64>,
    /// Eigenvalues along columns of the interior (`N` of them).
    mu: Vec<f64>,
    /// `1 / (lambda_i + mu_j)` with the inverse-transform scale folded in.
    inv_eig: Vec<f64>,
    along_cols: SineTransform,
    along_rows: SineTransform,
}

fn eigenvalues(n: usize, h: f64) -> Vec<f64> {
    (1..=n)
        .map(|i| 2.0 * (libm::cos(core::f64::consts::PI * i as f64 / (n + 1) as f64) - 1.0) / (h * h))
        .collect()
}

impl DstPlan {
    /// Plan for a full `height x width` grid with spacing `h` (mm).
    pub fn new(height: usize, width: usize, h: f64) -> Result<Self> {
        let m = height.saturating_sub(2);
        let n = width.saturating_sub(2);
        Self::with_routes(height, width, h, DstRoute::for_len(m), DstRoute::for_len(n))
    }

    /// Plan forcing one transform route in both directions.
    pub fn with_route(height: usize, width: usize, h: f64, route: DstRoute) -> Result<Self> {
        Self::with_routes(height, width, h, route, route)
    }

    /// Plan with separate routes down columns and along rows.
    pub fn with_routes(
        height: usize,
        width: usize,
        h: f64,
        col_route: DstRoute,
        row_route: DstRoute,
    ) -> Result<Self> {
        if height < 3 || width < 3 {
            return Err(Error::GridTooSmall { height, width });
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::domain("grid spacing must be > 0"));
        }
        let (m, n) = (height - 2, width - 2);
        let lambda = eigenvalues(m, h);
        let mu = eigenvalues(n, h);
        let scale = 4.0 / ((m + 1) * (n + 1)) as f64;
        let inv_eig = lambda
            .iter()
            .flat_map(|l| mu.iter().map(move |u| scale / (l + u)))
            .collect();
        Ok(DstPlan {
            height,
            width,
            h,
            lambda,
            mu,
            inv_eig,
            along_cols: SineTransform::new(m, col_route),
            along_rows: SineTransform::new(n, row_route),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// Eigenvalues of the 1-D second-difference operator along the
    /// interior rows and columns.
    pub fn eigenvalues(&self) -> (&[f64], &[f64]) {
        (&self.lambda, &self.mu)
    }

    /// Unnormalised 2-D DST-I of an `M x N` interior buffer, in place.
    pub fn dst2(&self, interior: &mut [f64]) {
        let (m, n) = (self.height - 2, self.width - 2);
        debug_assert_eq!(interior.len(), m * n);
        self.along_rows.apply_rows(interior);
        let mut t = vec![0.0; m * n];
        transpose(interior, m, n, &mut t);
        self.along_cols.apply_rows(&mut t);
        transpose(&t, n, m, interior);
    }

    /// Inverse of [`DstPlan::dst2`].
    pub fn idst2(&self, interior: &mut [f64]) {
        let (m, n) = (self.height - 2, self.width - 2);
        self.dst2(interior);
        let scale = 4.0 / ((m + 1) * (n + 1)) as f64;
        interior.iter_mut().for_each(|v| *v *= scale);
    }

    /// Solve `lap5(z) = f` on the interior with `z = 0` on the ring.
    /// Border values of `f` are ignored.
    pub fn solve(&self, f: &Grid<f64>) -> Result<Grid<f64>> {
        if f.shape() != (self.height, self.width) {
            return Err(Error::Shape {
                what: "poisson right-hand side",
                expected: (self.height, self.width),
                found: f.shape(),
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("poisson right-hand side"));
        }
        let (m, n) = (self.height - 2, self.width - 2);
        let mut buf = Vec::with_capacity(m * n);
        for r in 1..=m {
            buf.extend_from_slice(&f.row(r)[1..=n]);
        }
        self.dst2(&mut buf);
        for (v, k) in buf.iter_mut().zip(&self.inv_eig) {
            *v *= k;
        }
        self.dst2(&mut buf);
        let mut z = Grid::filled(self.height, self.width, 0.0);
        for (r, row) in buf.chunks_exact(n).enumerate() {
            z.row_mut(r + 1)[1..=n].copy_from_slice(row);
        }
        Ok(z)
    }
}

/// One-shot Poisson solve; see [`DstPlan::solve`].
pub fn solve_poisson(f: &Grid<f64>, h: f64) -> Result<Grid<f64>> {
    DstPlan::new(f.height(), f.width(), h)?.solve(f)
}

/// Depth is `max(0, -z)`; the ring stays exactly zero.
pub fn height_to_depth(z: &Grid<f64>, pixel_pitch: f64) -> DepthMap {
    let (h, w) = z.shape();
    let values = Grid::from_fn(h, w, |r, c| {
        if z.on_border(r, c) {
            0.0
        } else {
            (-z[(r, c)]).max(0.0)
        }
    });
    DepthMap {
        values,
        pixel_pitch,
    }
}

/// Reusable normals-to-depth stage for a fixed frame size.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    plan: DstPlan,
}

impl Reconstructor {
    pub fn new(height: usize, width: usize, pixel_pitch: f64) -> Result<Self> {
        Ok(Reconstructor {
            plan: DstPlan::new(height, width, pixel_pitch)?,
        })
    }

    pub fn plan(&self) -> &DstPlan {
        &self.plan
    }

    pub fn depth_from_gradients(&self, g: &GradientField) -> Result<DepthMap> {
        let z = self.plan.solve(&divergence(g))?;
        Ok(height_to_depth(&z, g.pixel_pitch))
    }

    pub fn depth_from_normals(&self, n: &NormalMap) -> Result<DepthMap> {
        if n.vectors.shape() != self.plan.shape() {
            return Err(Error::Shape {
                what: "normal map",
                expected: self.plan.shape(),
                found: n.vectors.shape(),
            });
        }
        self.depth_from_gradients(&gradients_from_normals(n, self.plan.spacing()))
    }
}

pub fn depth_from_normals(n: &NormalMap, pixel_pitch: f64) -> Result<DepthMap> {
    let (h, w) = n.vectors.shape();
    Reconstructor::new(h, w, pixel_pitch)?.depth_from_normals(n)
}

/// Median of nine by a fixed 19-exchange network.
#[inline(always)]
fn median9(mut p: [f64; 9]) -> f64 {
    macro_rules! exchange {
        ($($a:literal $b:literal),*) => {$(
            let (lo, hi) = if p[$a] < p[$b] { (p[$a], p[$b]) } else { (p[$b], p[$a]) };
            p[$a] = lo;
            p[$b] = hi;
        )*};
    }
    exchange!(1 2, 4 5, 7 8, 0 1, 3 4, 6 7, 1 2, 4 5, 7 8, 0 3, 5 8, 4 7, 3 6, 1 4, 2 5, 4 7, 4 2, 6 4, 4 2);
    p[4]
}

/// 3x3 median; border pixels use their in-bounds neighbourhood.
pub fn median3x3(g: &Grid<f64>) -> Grid<f64> {
    let (h, w) = g.shape();
    let mut window = [0.0f64; 9];
    Grid::from_fn(h, w, |r, c| {
        if r > 0 && c > 0 && r + 1 < h && c + 1 < w {
            let (a, b, d) = (g.row(r - 1), g.row(r), g.row(r + 1));
            return median9([
                a[c - 1], a[c], a[c + 1], b[c - 1], b[c], b[c + 1], d[c - 1], d[c], d[c + 1],
            ]);
        }
        let mut k = 0;
        for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                window[k] = g[(rr, cc)];
                k += 1;
            }
        }
        let win = &mut window[..k];
        win.sort_unstable_by(f64::total_cmp);
        win[k / 2]
    })
}

/// Peak deformation, optionally after a 3x3 median to reject spikes.
pub fn max_depth(d: &DepthMap, median: bool) -> f64 {
    let peak = if median {
        median3x3(&d.values).max_value()
    } else {
        d.values.max_value()
    };
    peak.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_network_matches_sort() {
        let mut rng = crate::rng::SeededRng::new(4);
        for _ in 0..2000 {
            let mut p = [0.0; 9];
            p.iter_mut().for_each(|v| *v = (rng.index(7) as f64) - 3.0);
            let mut sorted = p;
            sorted.sort_by(f64::total_cmp);
            assert_eq!(median9(p), sorted[4]);
        }
    }

    #[test]
    fn flat_normals_zero_gradients() {
        let g = gradients_from_normals(&NormalMap::flat(6, 7), 0.1);
        assert!(g.gx.iter().chain(g.gy.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_tilt_gradient() {
        let a = 0.4;
        let s = libm::sqrt(1.0 + a * a);
        let n = NormalMap {
            vectors: Grid::filled(5, 5, [-a / s, 0.0, 1.0 / s]),
        };
        let g = gradients_from_normals(&n, 0.1);
        assert!(g.gx.iter().all(|v| (v + a).abs() < 1e-15));
        assert!(g.gy.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn divergence_of_linear_ramp() {
        let h = 0.2;
        let g = GradientField {
            gx: Grid::from_fn(8, 9, |_, c| c as f64 * h),
            gy: Grid::filled(8, 9, 0.0),
            pixel_pitch: h,
        };
        let d = divergence(&g);
        for r in 1..7 {
            for c in 1..8 {
                assert!((d[(r, c)] - 1.0).abs() < 1e-12);
            }
        }
        let zero = GradientField {
            gx: Grid::filled(4, 4, 0.0),
            gy: Grid::filled(4, 4, 0.0),
            pixel_pitch: 1.0,
        };
        assert!(divergence(&zero).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn solver_needs_interior() {
        assert!(matches!(
            solve_poisson(&Grid::filled(2, 5, 0.0), 1.0),
            Err(Error::GridTooSmall { .. })
        ));
    }

    #[test]
    fn zero_rhs_zero_solution() {
        let z = solve_poisson(&Grid::filled(12, 17, 0.0), 0.1).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn median_rejects_spike() {
        let mut d = DepthMap::zeros(9, 9, 0.1);
        d.values[(4, 4)] = 1.0;
        assert_eq!(max_depth(&d, true), 0.0);
        assert_eq!(max_depth(&d, false), 1.0);
        assert_eq!(max_depth(&DepthMap::zeros(5, 5, 0.1), true), 0.0);
    }

    #[test]
    fn depth_ring_is_exactly_zero() {
        let z = Grid::from_fn(6, 6, |r, c| -((r * c) as f64) - 1.0);
        let d = height_to_depth(&z, 0.1);
        for r in 0..6 {
            for c in 0..6 {
                if d.values.on_border(r, c) {
                    assert_eq!(d.values[(r, c)], 0.0);
                } else {
                    assert!(d.values[(r, c)] > 0.0);
                }
            }
        }
    }
}
