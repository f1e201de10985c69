//! Massive-univariate GLM with Bonferroni and Benjamini-Hochberg control.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::prep::SessionData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sidedness {
    #[default]
    TwoSided,
    /// Tests `beta > 0`.
    Positive,
}

#[derive(Debug, Clone)]
pub struct ClassicalFit {
    /// `V x K`.
    pub beta_hat: DMatrix<f64>,
    /// `V x K`.
    pub se: DMatrix<f64>,
    /// t statistics of the amplitude (first) regressor.
    pub tstat: Vec<f64>,
    pub pvals: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub df: usize,
    pub m: usize,
}

impl ClassicalFit {
    /// `vertex,beta,se,t,p` rows for the amplitude regressor.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("vertex,beta,se,t,p\n");
        for v in 0..self.m {
            let _ = writeln!(
                s,
                "{v},{:e},{:e},{:e},{:e}",
                self.beta_hat[(v, 0)],
                self.se[(v, 0)],
                self.tstat[v],
                self.pvals[v]
            );
        }
        s
    }
}

/// Per-vertex OLS of the residualized data on the residualized task design.
pub fn fit_classical(session: &SessionData, sided: Sidedness) -> Result<ClassicalFit> {
    let x = &session.x_task;
    let y = &session.y;
    let k = x.ncols();
    let df = session.glm_df();
    if k == 0 {
        return Err(Error::invalid("session has no task regressors"));
    }
    if session.n_kept() < session.n_removed + k + 1 || df == 0 {
        return Err(Error::invalid(format!("{} kept volumes leave no residual degrees of freedom", session.n_kept())));
    }
    let xtx = x.transpose() * x;
    let chol = xtx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("task design is singular (a task regressor is zero or collinear)"))?;
    let xtx_inv = chol.inverse();
    let beta = chol.solve(&(x.transpose() * y)); // K x V
    let resid = y - x * &beta;
    let v = y.ncols();
    let tdist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::invalid(e.to_string()))?;
    let mut se = DMatrix::zeros(v, k);
    let mut sigma2 = Vec::with_capacity(v);
    let mut tstat = Vec::with_capacity(v);
    let mut pvals = Vec::with_capacity(v);
    for j in 0..v {
        let s2 = resid.column(j).norm_squared() / df as f64;
        sigma2.push(s2);
        for c in 0..k {
            se[(j, c)] = (s2 * xtx_inv[(c, c)]).sqrt();
        }
        let t = beta[(0, j)] / se[(j, 0)];
        let p = if t.is_nan() {
            1.0
        } else {
            match sided {
                Sidedness::TwoSided => 2.0 * tdist.sf(t.abs()),
                Sidedness::Positive => tdist.sf(t),
            }
        };
        tstat.push(t);
        pvals.push(p.clamp(0.0, 1.0));
    }
    Ok(ClassicalFit { beta_hat: beta.transpose(), se, tstat, pvals, sigma2, df, m: v })
}

fn check(pvals: &[f64], alpha: f64) -> Result<()> {
    if pvals.is_empty() {
        return Err(Error::invalid("no p-values"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if let Some(p) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("p-value {p} outside [0, 1]")));
    }
    Ok(())
}

/// Rejects `p <= alpha / m`.
pub fn bonferroni(pvals: &[f64], alpha: f64) -> Result<Vec<bool>> {
    check(pvals, alpha)?;
    let thr = alpha / pvals.len() as f64;
    Ok(pvals.iter().map(|&p| p <= thr).collect())
}

/// Benjamini-Hochberg step-up procedure.
pub fn bh_fdr(pvals: &[f64], alpha: f64) -> Result<Vec<bool>> {
    check(pvals, alpha)?;
    let m = pvals.len();
    let mut sorted = pvals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cutoff = (1..=m).rev().find(|&k| sorted[k - 1] <= k as f64 * alpha / m as f64).map(|k| sorted[k - 1]);
    Ok(match cutoff {
        Some(c) => pvals.iter().map(|&p| p <= c).collect(),
        None => vec![false; m],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prep::{nuisance_regress, polynomial_trends};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn session(y: DMatrix<f64>, x: DMatrix<f64>, n: DMatrix<f64>) -> SessionData {
        let r = nuisance_regress(&y, &x, &n).unwrap();
        SessionData {
            subject_id: "s".into(),
            visit_id: "v".into(),
            keep_flags: vec![true; y.nrows()],
            y: r.y,
            x_task: r.x,
            nuisance: n,
            n_removed: r.n_removed,
        }
    }

    #[test]
    fn null_data_rejects_at_nominal_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(120, 2, &mut rng);
        let y = randn(120, 1000, &mut rng);
        let fit = fit_classical(&session(y, x, polynomial_trends(120)), Sidedness::TwoSided).unwrap();
        let frac = fit.pvals.iter().filter(|&&p| p < 0.05).count() as f64 / 1000.0;
        assert!((frac - 0.05).abs() <= 0.02, "rate {frac}");
        assert_eq!(fit.df, 120 - 3 - 2);
    }

    #[test]
    fn noiseless_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = randn(60, 2, &mut rng);
        let y = DMatrix::from_fn(60, 4, |i, _| 2.0 * x[(i, 0)]);
        let fit = fit_classical(&session(y, x, DMatrix::zeros(60, 0)), Sidedness::TwoSided).unwrap();
        for v in 0..4 {
            assert!((fit.beta_hat[(v, 0)] - 2.0).abs() < 1e-12);
            assert!(fit.se[(v, 0)] < 1e-10);
            assert!(fit.pvals[v] < 1e-12);
        }
    }

    #[test]
    fn matches_joint_design_oracle() {
        // Frisch-Waugh-Lovell: residualized fit equals the task block of the joint OLS
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let t = 150;
            let x = randn(t, 2, &mut rng);
            let n = randn(t, 4, &mut rng);
            let y = randn(t, 30, &mut rng);
            let fit = fit_classical(&session(y.clone(), x.clone(), n.clone()), Sidedness::TwoSided).unwrap();
            let mut full = DMatrix::zeros(t, 7);
            full.columns_mut(0, 2).copy_from(&x);
            full.column_mut(2).fill(1.0);
            full.columns_mut(3, 4).copy_from(&n);
            let qr = full.clone().qr();
            let coef = qr.r().solve_upper_triangular(&(qr.q().transpose() * &y)).unwrap();
            let resid = &y - &full * &coef;
            let inv = (full.transpose() * &full).try_inverse().unwrap();
            for v in 0..30 {
                assert!((coef[(0, v)] - fit.beta_hat[(v, 0)]).abs() < 1e-8);
                assert!((coef[(1, v)] - fit.beta_hat[(v, 1)]).abs() < 1e-8);
                let s2 = resid.column(v).norm_squared() / (t - 7) as f64;
                assert!(((s2 * inv[(0, 0)]).sqrt() - fit.se[(v, 0)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_task_column_is_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut x = randn(40, 2, &mut rng);
        x.column_mut(1).fill(0.0);
        let s = session(randn(40, 3, &mut rng), x, DMatrix::zeros(40, 0));
        assert!(fit_classical(&s, Sidedness::TwoSided).is_err());
    }

    #[test]
    fn bonferroni_examples() {
        // threshold 0.025 admits both
        assert_eq!(bonferroni(&[0.01, 0.02], 0.05).unwrap(), vec![true, true]);
        assert_eq!(bonferroni(&[0.01, 0.03], 0.05).unwrap(), vec![true, false]);
        assert_eq!(bonferroni(&[0.05], 0.05).unwrap(), vec![true]);
        let p = vec![0.5; 1500];
        let thr: f64 = 0.05 / 1500.0;
        assert!((thr - 3.3333e-5).abs() < 1e-9);
        let mut q = p.clone();
        q[0] = thr;
        q[1] = thr * 1.0001;
        let r = bonferroni(&q, 0.05).unwrap();
        assert!(r[0] && !r[1]);
    }

    #[test]
    fn bh_examples() {
        assert_eq!(bh_fdr(&[0.01, 0.02, 0.03, 0.04], 0.05).unwrap(), vec![true; 4]);
        assert_eq!(bh_fdr(&[0.001, 0.2, 0.3, 0.9], 0.05).unwrap(), vec![true, false, false, false]);
        assert_eq!(bh_fdr(&[1.0; 5], 0.05).unwrap(), vec![false; 5]);
    }

    #[test]
    fn corrections_reject_bad_input() {
        assert!(bonferroni(&[], 0.05).is_err());
        assert!(bh_fdr(&[], 0.05).is_err());
        assert!(bh_fdr(&[0.1], 1.0).is_err());
        assert!(bonferroni(&[1.5], 0.05).is_err());
    }
}
