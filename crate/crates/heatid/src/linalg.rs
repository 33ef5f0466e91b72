//! Symmetric banded storage and Cholesky factorization.
//!
//! The implicit time-step matrix (I + Δt·A_h) is symmetric positive definite
//! with bandwidth 1 (1D) or the interior row length (2D). It is factored once
//! per coefficient pair and the factor is reused across every time step and
//! adjoint sweep, so a direct banded LLᵀ is the whole linear-algebra story.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    /// A pivot was not strictly positive; the matrix is not SPD.
    #[error("Cholesky pivot {pivot} at column {column} is not positive")]
    NotPositiveDefinite { column: usize, pivot: f64 },
}

/// Lower band of a symmetric matrix: `band(d, j) = A[j + d][j]`.
#[derive(Debug, Clone)]
pub struct SymBandMatrix {
    n: usize,
    bandwidth: usize,
    // bands[d * n + j] = A[j + d][j], zero-padded past the edge.
    bands: Vec<f64>,
}

impl SymBandMatrix {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            bands: vec![0.0; (bandwidth + 1) * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn set(&mut self, d: usize, j: usize, value: f64) {
        debug_assert!(d <= self.bandwidth && j + d < self.n);
        self.bands[d * self.n + j] = value;
    }

    #[inline]
    pub fn get(&self, d: usize, j: usize) -> f64 {
        self.bands[d * self.n + j]
    }

    /// Symmetric matrix-vector product (used by tests and diagnostics).
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            y[j] += self.get(0, j) * x[j];
            let dmax = self.bandwidth.min(self.n - 1 - j);
            for d in 1..=dmax {
                let v = self.get(d, j);
                y[j + d] += v * x[j];
                y[j] += v * x[j + d];
            }
        }
        y
    }

    /// Factors A = L·Lᵀ in band form. Fails if any pivot is non-positive.
    pub fn cholesky(&self) -> Result<BandCholesky, LinalgError> {
        let n = self.n;
        let bw = self.bandwidth;
        let mut l = self.bands.clone();
        for j in 0..n {
            let mut diag = l[j];
            let kmin = j.saturating_sub(bw);
            for k in kmin..j {
                let v = l[(j - k) * n + k];
                diag -= v * v;
            }
            if diag <= 0.0 || !diag.is_finite() {
                return Err(LinalgError::NotPositiveDefinite { column: j, pivot: diag });
            }
            let pivot = diag.sqrt();
            l[j] = pivot;
            let rmax = bw.min(n - 1 - j);
            for r in 1..=rmax {
                let i = j + r;
                let mut s = l[r * n + j];
                let kmin = i.saturating_sub(bw);
                for k in kmin..j {
                    s -= l[(i - k) * n + k] * l[(j - k) * n + k];
                }
                l[r * n + j] = s / pivot;
            }
        }
        Ok(BandCholesky { n, bandwidth: bw, l })
    }
}

/// Banded Cholesky factor; solves A x = b by two triangular sweeps.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bandwidth: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Solves A x = b in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let bw = self.bandwidth;
        // L y = b
        for i in 0..n {
            let kmin = i.saturating_sub(bw);
            let mut s = b[i];
            for k in kmin..i {
                s -= self.l[(i - k) * n + k] * b[k];
            }
            b[i] = s / self.l[i];
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let dmax = bw.min(n - 1 - i);
            let mut s = b[i];
            for d in 1..=dmax {
                s -= self.l[d * n + i] * b[i + d];
            }
            b[i] = s / self.l[i];
        }
    }
}
