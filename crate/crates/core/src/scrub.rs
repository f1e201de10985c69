//! PCA-leverage scrubbing of high-influence volumes.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ScrubOptions {
    /// Volumes with leverage strictly above `multiplier * median` are flagged.
    pub multiplier: f64,
    /// Sessions with a larger flagged fraction are excluded.
    pub exclusion_fraction: f64,
}

impl Default for ScrubOptions {
    fn default() -> Self {
        ScrubOptions { multiplier: 4.0, exclusion_fraction: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScrubReport {
    pub leverage: Vec<f64>,
    pub median: f64,
    /// True = remove.
    pub flags: Vec<bool>,
    pub fraction_flagged: f64,
    pub session_excluded: bool,
    pub n_components: usize,
}

impl ScrubReport {
    /// `volume,leverage,flag` rows with header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("volume,leverage,flag\n");
        for (t, (l, f)) in self.leverage.iter().zip(&self.flags).enumerate() {
            let _ = writeln!(s, "{t},{l:e},{}", *f as u8);
        }
        s
    }
}

/// Hat-matrix diagonal of the regression on the principal components whose
/// variance exceeds the average over the nonzero components.
///
/// The returned values sum to the number of retained components.
pub fn leverage(y: &DMatrix<f64>) -> Result<(Vec<f64>, usize)> {
    let t = y.nrows();
    if t < 3 {
        return Err(Error::invalid(format!("leverage needs at least 3 volumes, got {t}")));
    }
    let mut yc = y.clone();
    for mut col in yc.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let gram = &yc * yc.transpose();
    let eig = SymmetricEigen::new(gram);
    let lmax = eig.eigenvalues.amax();
    if !(lmax > 0.0) || !lmax.is_finite() {
        return Err(Error::invalid("data have rank zero after centering"));
    }
    let tol = lmax * 1e-10 * t as f64;
    let positive: Vec<usize> = (0..t).filter(|&i| eig.eigenvalues[i] > tol).collect();
    let mean = positive.iter().map(|&i| eig.eigenvalues[i]).sum::<f64>() / positive.len() as f64;
    let mut retained: Vec<usize> = positive.iter().copied().filter(|&i| eig.eigenvalues[i] > mean).collect();
    if retained.is_empty() {
        // all nonzero components tie
        retained = positive;
    }
    let mut lev = vec![0.0; t];
    for &i in &retained {
        for (r, l) in lev.iter_mut().enumerate() {
            let u = eig.eigenvectors[(r, i)];
            *l += u * u;
        }
    }
    Ok((lev, retained.len()))
}

pub fn scrub_session(y: &DMatrix<f64>, opts: &ScrubOptions) -> Result<ScrubReport> {
    let (lev, r) = leverage(y)?;
    Ok(report_from_leverage(lev, r, opts))
}

pub fn report_from_leverage(leverage: Vec<f64>, n_components: usize, opts: &ScrubOptions) -> ScrubReport {
    let median = median(&leverage);
    let threshold = opts.multiplier * median;
    let flags: Vec<bool> = leverage.iter().map(|&l| l > threshold).collect();
    let n_flagged = flags.iter().filter(|&&f| f).count();
    let fraction = n_flagged as f64 / leverage.len().max(1) as f64;
    ScrubReport {
        median,
        session_excluded: fraction > opts.exclusion_fraction,
        fraction_flagged: fraction,
        flags,
        leverage,
        n_components,
    }
}

/// Midpoint median.
pub fn median(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
