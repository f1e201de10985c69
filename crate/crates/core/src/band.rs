//! Banded symmetric positive-definite kernels.
//!
//! Mesh precisions become narrow-banded after a reverse Cuthill-McKee
//! relabelling, so a fixed-bandwidth Cholesky factor is both compact and
//! cache friendly. Besides the factorization this module provides the
//! Takahashi recursion for the entries of the inverse inside the band,
//! which is what the marginal-likelihood gradient and the posterior
//! marginal variances need.

use sprs::CsMat;

use crate::error::{Error, Result};

/// Lower half of a symmetric band matrix, stored row by row.
///
/// Row `i` keeps columns `i - width ..= i`; slots left of column 0 are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    n: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, width: usize) -> Self {
        let width = width.min(n.saturating_sub(1));
        BandMatrix { n, width, data: vec![0.0; n * (width + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.width);
        i * (self.width + 1) + (j + self.width - i)
    }

    /// Entry `(i, j)` of the symmetric matrix; zero outside the band.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.width {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `value` to the symmetric pair `(i, j)`/`(j, i)`.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.width, "entry ({i}, {j}) outside band {}", self.width);
        let k = self.idx(i, j);
        self.data[k] += value;
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// `(x^T A y)` restricted to the stored band, for symmetric `A`.
    pub fn quad_form(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            let lo = i - i.min(self.width);
            for j in lo..i {
                let a = self.data[self.idx(i, j)];
                acc += a * (x[i] * y[j] + x[j] * y[i]);
            }
            acc += self.data[self.idx(i, i)] * x[i] * y[i];
        }
        acc
    }
}

/// Cholesky factor `A = L L^T` of a symmetric positive-definite band matrix.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    l: BandMatrix,
}

impl BandCholesky {
    pub fn factor(mut a: BandMatrix) -> Result<Self> {
        let n = a.n;
        let w = a.width;
        let stride = w + 1;
        for i in 0..n {
            let lo = i - i.min(w);
            for j in lo..=i {
                // L[i][k] * L[j][k] for k in max(lo, j - w) .. j
                let klo = lo.max(j - j.min(w));
                let ri = i * stride + w - i;
                let rj = j * stride + w - j;
                let mut s = a.data[ri + j];
                let xi = &a.data[ri + klo..ri + j];
                let xj = &a.data[rj + klo..rj + j];
                s -= dot(xi, xj);
                if j < i {
                    let d = a.data[rj + j];
                    a.data[ri + j] = s / d;
                } else {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite {
                            context: format!("band Cholesky, n = {n}, width = {w}"),
                            pivot: i,
                        });
                    }
                    a.data[ri + i] = s.sqrt();
                }
            }
        }
        Ok(BandCholesky { l: a })
    }

    pub fn dim(&self) -> usize {
        self.l.n
    }

    pub fn width(&self) -> usize {
        self.l.width
    }

    #[inline]
    fn l(&self, i: usize, j: usize) -> f64 {
        self.l.data[self.l.idx(i, j)]
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.l.n).map(|i| self.l(i, i).ln()).sum::<f64>()
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower(&self, b: &mut [f64]) {
        let w = self.l.width;
        let stride = w + 1;
        for i in 0..self.l.n {
            let lo = i - i.min(w);
            let ri = i * stride + w - i;
            let s = dot(&self.l.data[ri + lo..ri + i], &b[lo..i]);
            b[i] = (b[i] - s) / self.l.data[ri + i];
        }
    }

    /// Solves `L^T x = y` in place.
    pub fn solve_upper(&self, y: &mut [f64]) {
        let w = self.l.width;
        let stride = w + 1;
        for i in (0..self.l.n).rev() {
            let ri = i * stride + w - i;
            let xi = y[i] / self.l.data[ri + i];
            y[i] = xi;
            let lo = i - i.min(w);
            for (yk, lik) in y[lo..i].iter_mut().zip(&self.l.data[ri + lo..ri + i]) {
                *yk -= lik * xi;
            }
        }
    }

    /// Solves `A x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        self.solve_lower(b);
        self.solve_upper(b);
    }

    /// Entries of `A^{-1}` inside the band (Takahashi recursion).
    ///
    /// Column `j` below the diagonal is `-S c` where `S` is the already
    /// computed trailing block and `c = L[j+1.., j] / L[j, j]`. The product
    /// is taken row by row over the stored lower triangle.
    pub fn selected_inverse(&self) -> BandMatrix {
        let n = self.l.n;
        let w = self.l.width;
        let stride = w + 1;
        let mut s = BandMatrix::zeros(n, w);
        let mut c = vec![0.0; w];
        let mut y = vec![0.0; w];
        for j in (0..n).rev() {
            let m = (j + w).min(n - 1) - j;
            let ljj = self.l(j, j);
            for (t, ct) in c[..m].iter_mut().enumerate() {
                *ct = self.l(j + 1 + t, j) / ljj;
            }
            y[..m].iter_mut().for_each(|v| *v = 0.0);
            for t in 0..m {
                let i = j + 1 + t;
                let ri = i * stride + w - i;
                let row = &s.data[ri + j + 1..ri + i];
                let diag = s.data[ri + i];
                y[t] += dot(row, &c[..t]) + diag * c[t];
                let ct = c[t];
                for (yk, r) in y[..t].iter_mut().zip(row) {
                    *yk += ct * r;
                }
            }
            let mut acc = 0.0;
            for t in 0..m {
                let i = j + 1 + t;
                let id = i * stride + w - i + j;
                s.data[id] = -y[t];
                acc += c[t] * y[t];
            }
            let id = j * stride + w;
            s.data[id] = 1.0 / (ljj * ljj) + acc;
        }
        s
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reverse Cuthill-McKee relabelling of a symmetric sparsity pattern.
///
/// Returns `pos` with `pos[old] = new`. If the input labelling already has
/// a narrower band (structured grids often do) it is kept.
pub fn rcm_positions(pattern: &CsMat<f64>) -> Vec<usize> {
    // structure only: values of a floating-point product need not be bit-symmetric
    let ones: CsMat<f64> = pattern.map(|_| 1.0);
    let ordering = sprs::linalg::reverse_cuthill_mckee(ones.view());
    let order: Vec<usize> = ordering.perm.vec();
    let mut pos = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        pos[old] = new;
    }
    let identity: Vec<usize> = (0..pos.len()).collect();
    if bandwidth(pattern, &identity) < bandwidth(pattern, &pos) {
        identity
    } else {
        pos
    }
}

/// Largest `|pos[i] - pos[j]|` over the stored entries of `pattern`.
pub fn bandwidth(pattern: &CsMat<f64>, pos: &[usize]) -> usize {
    let mut w = 0;
    for (_, (i, j)) in pattern.iter() {
        w = w.max(pos[i].abs_diff(pos[j]));
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_band_spd(n: usize, w: usize, seed: u64) -> BandMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = BandMatrix::zeros(n, w);
        for i in 0..n {
            for j in i.saturating_sub(w)..i {
                a.add(i, j, rng.random_range(-1.0..1.0));
            }
            a.add(i, i, 2.0 * w as f64 + 1.0);
        }
        a
    }

    #[test]
    fn factor_matches_dense() {
        let a = random_band_spd(30, 4, 1);
        let dense = a.to_dense();
        let chol = BandCholesky::factor(a).unwrap();
        let dchol = dense.clone().cholesky().unwrap();
        let ld: f64 = 2.0 * dchol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        assert!((chol.log_det() - ld).abs() < 1e-10);

        let b: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let mut x = b.clone();
        chol.solve(&mut x);
        let xd = dchol.solve(&nalgebra::DVector::from_vec(b));
        for i in 0..30 {
            assert!((x[i] - xd[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn selected_inverse_matches_dense_inverse() {
        for (n, w) in [(1, 0), (5, 2), (25, 3), (40, 7)] {
            let a = random_band_spd(n, w, n as u64);
            let inv: DMatrix<f64> = a.to_dense().try_inverse().unwrap();
            let s = BandCholesky::factor(a).unwrap().selected_inverse();
            for i in 0..n {
                for j in i.saturating_sub(s.width())..=i {
                    assert!((s.get(i, j) - inv[(i, j)]).abs() < 1e-12, "({i},{j})");
                }
            }
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut a = BandMatrix::zeros(3, 1);
        a.add(0, 0, 1.0);
        a.add(1, 0, 2.0);
        a.add(1, 1, 1.0);
        a.add(2, 2, 1.0);
        assert!(matches!(BandCholesky::factor(a), Err(Error::NotPositiveDefinite { pivot: 1, .. })));
    }

    #[test]
    fn quad_form_matches_dense() {
        let a = random_band_spd(12, 3, 9);
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
        let y: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let d = a.to_dense();
        let expect =
            (nalgebra::DVector::from_vec(x.clone()).transpose() * d * nalgebra::DVector::from_vec(y.clone()))[(0, 0)];
        assert!((a.quad_form(&x, &y) - expect).abs() < 1e-10);
    }

    #[test]
    fn rcm_reduces_bandwidth_of_shuffled_path() {
        // path graph with scrambled labels
        let n = 50;
        let label: Vec<usize> = (0..n).map(|i| (i * 17) % n).collect();
        let mut tri = sprs::TriMat::new((n, n));
        for i in 0..n {
            tri.add_triplet(label[i], label[i], 2.0);
            if i + 1 < n {
                tri.add_triplet(label[i], label[i + 1], -1.0);
                tri.add_triplet(label[i + 1], label[i], -1.0);
            }
        }
        let m: CsMat<f64> = tri.to_csr();
        let identity: Vec<usize> = (0..n).collect();
        assert!(bandwidth(&m, &identity) > 10);
        let pos = rcm_positions(&m);
        assert_eq!(bandwidth(&m, &pos), 1);
    }

    #[test]
    fn rcm_ignores_rounding_asymmetry() {
        let mut tri = sprs::TriMat::new((3, 3));
        for i in 0..3 {
            tri.add_triplet(i, i, 2.0);
        }
        tri.add_triplet(0, 1, -1.0);
        tri.add_triplet(1, 0, -1.0 + 1e-16);
        tri.add_triplet(1, 2, -1.0);
        tri.add_triplet(2, 1, -1.0);
        let m: CsMat<f64> = tri.to_csr();
        assert_eq!(bandwidth(&m, &rcm_positions(&m)), 1);
    }
}
