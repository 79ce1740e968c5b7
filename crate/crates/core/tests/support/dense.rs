//! Dense reference for the 5-point Dirichlet Laplacian: assemble the full
//! matrix and factor it with partially pivoted LU.

pub struct DenseLaplacian {
    rows: usize,
    cols: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

impl DenseLaplacian {
    /// Interior of an `height x width` grid with spacing `h`.
    pub fn new(height: usize, width: usize, h: f64) -> Self {
        let (m, n) = (height - 2, width - 2);
        let size = m * n;
        let mut a = vec![0.0; size * size];
        let inv = 1.0 / (h * h);
        for r in 0..m {
            for c in 0..n {
                let i = r * n + c;
                a[i * size + i] = -4.0 * inv;
                if r > 0 {
                    a[i * size + i - n] = inv;
                }
                if r + 1 < m {
                    a[i * size + i + n] = inv;
                }
                if c > 0 {
                    a[i * size + i - 1] = inv;
                }
                if c + 1 < n {
                    a[i * size + i + 1] = inv;
                }
            }
        }
        let mut piv: Vec<usize> = (0..size).collect();
        for k in 0..size {
            let p = (k..size)
                .max_by(|&x, &y| a[x * size + k].abs().total_cmp(&a[y * size + k].abs()))
                .unwrap();
            if p != k {
                for j in 0..size {
                    a.swap(k * size + j, p * size + j);
                }
                piv.swap(k, p);
            }
            let d = a[k * size + k];
            for i in k + 1..size {
                let f = a[i * size + k] / d;
                if f == 0.0 {
                    continue;
                }
                a[i * size + k] = f;
                for j in k + 1..size {
                    a[i * size + j] -= f * a[k * size + j];
                }
            }
        }
        DenseLaplacian {
            rows: m,
            cols: n,
            lu: a,
            piv,
        }
    }

    /// Solve for a full-grid right-hand side (border ignored); returns the
    /// full grid with a zero ring, row-major.
    pub fn solve(&self, f: &[f64], width: usize) -> Vec<f64> {
        let (m, n) = (self.rows, self.cols);
        let size = m * n;
        let rhs: Vec<f64> = (0..size)
            .map(|i| f[(i / n + 1) * width + i % n + 1])
            .collect();
        let mut y: Vec<f64> = self.piv.iter().map(|&p| rhs[p]).collect();
        for i in 0..size {
            for j in 0..i {
                y[i] -= self.lu[i * size + j] * y[j];
            }
        }
        for i in (0..size).rev() {
            for j in i + 1..size {
                y[i] -= self.lu[i * size + j] * y[j];
            }
            y[i] /= self.lu[i * size + i];
        }
        let mut out = vec![0.0; (m + 2) * width];
        for i in 0..size {
            out[(i / n + 1) * width + i % n + 1] = y[i];
        }
        out
    }
}

/// 5-point Laplacian of a full grid at interior points (border = 0).
pub fn apply_laplacian(z: &[f64], height: usize, width: usize, h: f64) -> Vec<f64> {
    let mut out = vec![0.0; height * width];
    for r in 1..height - 1 {
        for c in 1..width - 1 {
            let i = r * width + c;
            out[i] = (z[i - 1] + z[i + 1] + z[i - width] + z[i + width] - 4.0 * z[i]) / (h * h);
        }
    }
    out
}
