//! Task regressors, percent-signal-change scaling and nuisance removal.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::scrub::{scrub_session, ScrubOptions, ScrubReport};

/// Double-gamma hemodynamic response parameters (seconds).
///
/// Each gamma kernel has shape `peak / dispersion` and scale `dispersion`;
/// the undershoot is subtracted with weight `undershoot_ratio`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct HrfParams {
    pub peak: f64,
    pub undershoot: f64,
    pub peak_dispersion: f64,
    pub undershoot_dispersion: f64,
    pub undershoot_ratio: f64,
}

impl Default for HrfParams {
    fn default() -> Self {
        HrfParams {
            peak: 6.0,
            undershoot: 16.0,
            peak_dispersion: 1.0,
            undershoot_dispersion: 1.0,
            undershoot_ratio: 1.0 / 6.0,
        }
    }
}

/// Support used for normalization and convolution.
pub const HRF_SUPPORT: f64 = 40.0;

/// Double-gamma kernel normalized to a peak value of one.
#[derive(Debug, Clone)]
pub struct Hrf {
    params: HrfParams,
    scale: f64,
}

impl Hrf {
    pub fn new(params: HrfParams) -> Result<Self> {
        let p = params;
        for (name, v) in [
            ("peak", p.peak),
            ("undershoot", p.undershoot),
            ("peak_dispersion", p.peak_dispersion),
            ("undershoot_dispersion", p.undershoot_dispersion),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("HRF {name} must be positive, got {v}")));
            }
        }
        if !(p.undershoot_ratio >= 0.0 && p.undershoot_ratio.is_finite()) {
            return Err(Error::invalid("HRF undershoot_ratio must be nonnegative"));
        }
        let mut hrf = Hrf { params, scale: 1.0 };
        let peak =
            (0..=(HRF_SUPPORT * 1000.0) as usize).map(|i| hrf.eval(i as f64 * 1e-3)).fold(f64::NEG_INFINITY, f64::max);
        if !(peak > 0.0) {
            return Err(Error::invalid("HRF has no positive peak"));
        }
        hrf.scale = 1.0 / peak;
        Ok(hrf)
    }

    pub fn params(&self) -> &HrfParams {
        &self.params
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let p = &self.params;
        let g1 = gamma_kernel(t, p.peak / p.peak_dispersion, p.peak_dispersion);
        let g2 = gamma_kernel(t, p.undershoot / p.undershoot_dispersion, p.undershoot_dispersion);
        self.scale * (g1 - p.undershoot_ratio * g2)
    }
}

fn gamma_kernel(t: f64, shape: f64, scale: f64) -> f64 {
    ((shape - 1.0) * t.ln() - t / scale - ln_gamma(shape) - shape * scale.ln()).exp()
}

/// Peak-normalized HRF value at `t` seconds.
pub fn hrf(t: f64, params: &HrfParams) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::invalid(format!("HRF time must be nonnegative, got {t}")));
    }
    Ok(Hrf::new(*params)?.eval(t))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StimulusSchedule {
    /// Block onsets (s) relative to the first acquired volume, dropped ones included.
    pub onsets: Vec<f64>,
    pub durations: Vec<f64>,
    pub tr: f64,
    /// Volumes retained for analysis.
    pub n_volumes: usize,
    pub n_dropped_initial: usize,
}

impl StimulusSchedule {
    pub fn scan_length(&self) -> f64 {
        (self.n_dropped_initial + self.n_volumes) as f64 * self.tr
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tr > 0.0 && self.tr.is_finite()) {
            return Err(Error::invalid(format!("TR must be positive, got {}", self.tr)));
        }
        if self.n_volumes == 0 {
            return Err(Error::invalid("schedule has no volumes"));
        }
        if self.onsets.len() != self.durations.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} onsets but {} durations",
                self.onsets.len(),
                self.durations.len()
            )));
        }
        let len = self.scan_length();
        let mut prev = f64::NEG_INFINITY;
        for (i, (&on, &dur)) in self.onsets.iter().zip(&self.durations).enumerate() {
            if !(on >= 0.0) || on <= prev {
                return Err(Error::invalid(format!("onset {i} ({on} s) must be nonnegative and increasing")));
            }
            if !(dur >= 0.0) {
                return Err(Error::invalid(format!("duration {i} is negative")));
            }
            if on + dur > len + 1e-9 {
                return Err(Error::invalid(format!(
                    "block {i} ends at {} s, after the scan ends at {len} s",
                    on + dur
                )));
            }
            prev = on;
        }
        Ok(())
    }
}

/// Sub-TR resolution of the convolution grid.
const MICROTIME: usize = 16;

/// Columns `[HRF, dHRF]`, each rescaled to a maximum absolute value of one.
pub fn build_task_regressors(sched: &StimulusSchedule, params: &HrfParams) -> Result<DMatrix<f64>> {
    sched.validate()?;
    let hrf = Hrf::new(*params)?;
    let dt = sched.tr / MICROTIME as f64;
    let n_fine = (sched.n_dropped_initial + sched.n_volumes) * MICROTIME;
    let mut boxcar = vec![0.0; n_fine];
    for (&on, &dur) in sched.onsets.iter().zip(&sched.durations) {
        let start = (on / dt - 1e-9).ceil().max(0.0) as usize;
        let stop = (((on + dur) / dt - 1e-9).ceil().max(0.0) as usize).min(n_fine);
        for b in &mut boxcar[start.min(n_fine)..stop] {
            *b = 1.0;
        }
    }
    let n_kernel = (HRF_SUPPORT / dt).ceil() as usize;
    let kernel: Vec<f64> = (0..n_kernel).map(|i| hrf.eval(i as f64 * dt) * dt).collect();

    let t = sched.n_volumes;
    let mut x = DMatrix::zeros(t, 2);
    for row in 0..t {
        let m = (sched.n_dropped_initial + row) * MICROTIME;
        let mut acc = 0.0;
        for (lag, &k) in kernel.iter().enumerate().take(m + 1) {
            acc += k * boxcar[m - lag];
        }
        x[(row, 0)] = acc;
    }
    for row in 0..t {
        let d = if t == 1 {
            0.0
        } else if row == 0 {
            (x[(1, 0)] - x[(0, 0)]) / sched.tr
        } else if row == t - 1 {
            (x[(t - 1, 0)] - x[(t - 2, 0)]) / sched.tr
        } else {
            (x[(row + 1, 0)] - x[(row - 1, 0)]) / (2.0 * sched.tr)
        };
        x[(row, 1)] = d;
    }
    for mut col in x.column_iter_mut() {
        let m = col.amax();
        if m > 0.0 {
            col /= m;
        }
    }
    Ok(x)
}

/// `100 (y - m_v) / m_v` per vertex, `m_v` the temporal mean.
pub fn to_percent_signal_change(y_raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = y_raw.clone();
    for (v, mut col) in out.column_iter_mut().enumerate() {
        let mean = col.mean();
        if !(mean > 1e-8) || !mean.is_finite() {
            return Err(Error::BadVertexMean { vertex: v, mean });
        }
        col.apply(|x| *x = 100.0 * (*x - mean) / mean);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct NuisanceResult {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
    /// Columns projected out: intercept plus nuisance columns.
    pub n_removed: usize,
    pub resid_df: usize,
}

/// Residualizes `y` and `x_task` on `[1 | nuisance]`.
pub fn nuisance_regress(y: &DMatrix<f64>, x_task: &DMatrix<f64>, nuisance: &DMatrix<f64>) -> Result<NuisanceResult> {
    let t = y.nrows();
    if x_task.nrows() != t || nuisance.nrows() != t {
        return Err(Error::DimensionMismatch(format!(
            "data has {t} rows, task design {}, nuisance {}",
            x_task.nrows(),
            nuisance.nrows()
        )));
    }
    let basis = orthonormal_nuisance_basis(nuisance)?;
    let project = |m: &DMatrix<f64>| {
        let coef = basis.transpose() * m;
        m - &basis * coef
    };
    let n_removed = basis.ncols();
    Ok(NuisanceResult { y: project(y), x: project(x_task), n_removed, resid_df: t.saturating_sub(n_removed) })
}

/// Orthonormal basis of `[1 | nuisance]` by modified Gram-Schmidt with one
/// reorthogonalization pass.
fn orthonormal_nuisance_basis(nuisance: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let t = nuisance.nrows();
    let p = nuisance.ncols();
    if t < p + 1 {
        return Err(Error::invalid(format!("{t} volumes cannot support an intercept plus {p} nuisance columns")));
    }
    let mut q = DMatrix::zeros(t, p + 1);
    let mut dependent = Vec::new();
    let mut kept = 0;
    for c in 0..=p {
        let mut v: DVector<f64> =
            if c == 0 { DVector::from_element(t, 1.0) } else { nuisance.column(c - 1).into_owned() };
        let original = v.norm();
        for _ in 0..2 {
            for k in 0..kept {
                let qk = q.column(k);
                let r = qk.dot(&v);
                v.axpy(-r, &qk, 1.0);
            }
        }
        let rem = v.norm();
        if original == 0.0 || rem <= 1e-10 * original {
            dependent.push(c - 1);
            continue;
        }
        q.set_column(kept, &(v / rem));
        kept += 1;
    }
    if !dependent.is_empty() {
        return Err(Error::RankDeficient { columns: dependent });
    }
    Ok(q)
}

/// One visit after scaling, scrubbing and nuisance removal.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub subject_id: String,
    pub visit_id: String,
    /// `T_kept x V`, percent signal change, nuisance-residualized.
    pub y: DMatrix<f64>,
    /// `T_kept x K`, residualized task regressors.
    pub x_task: DMatrix<f64>,
    /// `T_kept x p` nuisance columns as used (scrub-filtered).
    pub nuisance: DMatrix<f64>,
    /// Per original volume; false rows were removed.
    pub keep_flags: Vec<bool>,
    /// Intercept plus nuisance columns removed upstream.
    pub n_removed: usize,
}

impl SessionData {
    pub fn n_kept(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_vertices(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_tasks(&self) -> usize {
        self.x_task.ncols()
    }

    /// Residual degrees of freedom for the per-vertex GLM.
    pub fn glm_df(&self) -> usize {
        self.n_kept().saturating_sub(self.n_removed + self.n_tasks())
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PrepOptions {
    pub hrf: HrfParams,
    pub scrub: ScrubOptions,
}

#[derive(Debug, Clone)]
pub struct PreparedSession {
    pub session: SessionData,
    pub scrub: ScrubReport,
}

/// Raw BOLD to analysis-ready session: percent signal change, leverage
/// scrubbing, row deletion, then nuisance residualization of data and design.
pub fn prepare_session(
    subject_id: &str,
    visit_id: &str,
    y_raw: &DMatrix<f64>,
    sched: &StimulusSchedule,
    nuisance: Option<&DMatrix<f64>>,
    opts: &PrepOptions,
) -> Result<PreparedSession> {
    let t = y_raw.nrows();
    if sched.n_volumes != t {
        return Err(Error::DimensionMismatch(format!("schedule has {} volumes, BOLD has {t}", sched.n_volumes)));
    }
    let empty = DMatrix::zeros(t, 0);
    let nuisance = nuisance.unwrap_or(&empty);
    let psc = to_percent_signal_change(y_raw)?;
    let x = build_task_regressors(sched, &opts.hrf)?;
    let report = scrub_session(&psc, &opts.scrub)?;
    let keep: Vec<bool> = report.flags.iter().map(|&f| !f).collect();
    let rows: Vec<usize> = (0..t).filter(|&i| keep[i]).collect();
    let y = psc.select_rows(&rows);
    let x = x.select_rows(&rows);
    let n = nuisance.select_rows(&rows);
    let res = nuisance_regress(&y, &x, &n)?;
    Ok(PreparedSession {
        session: SessionData {
            subject_id: subject_id.to_string(),
            visit_id: visit_id.to_string(),
            y: res.y,
            x_task: res.x,
            nuisance: n,
            keep_flags: keep,
            n_removed: res.n_removed,
        },
        scrub: report,
    })
}

/// Linear and quadratic trend columns (centered, unit max) for `t` volumes.
pub fn polynomial_trends(t: usize) -> DMatrix<f64> {
    let mut n = DMatrix::zeros(t, 2);
    let mid = (t as f64 - 1.0) / 2.0;
    for i in 0..t {
        let u = if t > 1 { (i as f64 - mid) / mid.max(1.0) } else { 0.0 };
        n[(i, 0)] = u;
        n[(i, 1)] = u * u;
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    }

    fn block_schedule(onsets: Vec<f64>, dur: f64, n: usize) -> StimulusSchedule {
        StimulusSchedule { durations: vec![dur; onsets.len()], onsets, tr: 2.0, n_volumes: n, n_dropped_initial: 0 }
    }

    #[test]
    fn hrf_vanishes_at_zero() {
        assert_eq!(hrf(0.0, &HrfParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn hrf_peak_location_and_tail() {
        let h = Hrf::new(HrfParams::default()).unwrap();
        let (mut best, mut arg) = (f64::MIN, 0.0);
        for i in 0..=400 {
            let t = i as f64 * 0.1;
            let v = h.eval(t);
            if v > best {
                best = v;
                arg = t;
            }
        }
        assert!((4.5..=6.5).contains(&arg), "peak at {arg}");
        assert!((best - 1.0).abs() < 1e-4);
        assert!(h.eval(40.0).abs() < 1e-3);
    }

    #[test]
    fn hrf_rejects_bad_parameters() {
        let p = HrfParams { peak_dispersion: 0.0, ..HrfParams::default() };
        assert!(Hrf::new(p).is_err());
        assert!(hrf(-1.0, &HrfParams::default()).is_err());
    }

    #[test]
    fn empty_schedule_gives_zero_columns() {
        let x = build_task_regressors(&block_schedule(vec![], 0.0, 50), &HrfParams::default()).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn long_block_matches_quadrature_oracle() {
        let p = HrfParams::default();
        let x = build_task_regressors(&block_schedule(vec![10.0], 30.0, 40), &p).unwrap();
        let h = Hrf::new(p).unwrap();
        // trapezoid integral of h over the part of the block preceding t
        let oracle: Vec<f64> = (0..40)
            .map(|i| {
                let t = i as f64 * 2.0;
                let (a, b) = ((t - 40.0).max(0.0), (t - 10.0).max(0.0));
                let n = 20_000;
                let step = (b - a) / n as f64;
                (0..=n)
                    .map(|k| {
                        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                        w * h.eval(a + k as f64 * step)
                    })
                    .sum::<f64>()
                    * step
            })
            .collect();
        let omax = oracle.iter().cloned().fold(0.0, f64::max);
        for i in 0..40 {
            assert!((x[(i, 0)] - oracle[i] / omax).abs() < 0.02, "row {i}");
        }
        // the peak is reached inside the block and the response stays high until it ends
        let argmax = (0..40).max_by(|&a, &b| x[(a, 0)].total_cmp(&x[(b, 0)])).unwrap();
        assert!((6..=21).contains(&argmax));
        assert!((x.column(0).amax() - 1.0).abs() < 1e-15);
        assert!((12..=21).all(|i| x[(i, 0)] > 0.8));
        assert!((x.column(1).amax() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shifting_onsets_by_one_tr_shifts_rows() {
        let p = HrfParams::default();
        let a = build_task_regressors(&block_schedule(vec![10.0, 60.0], 16.0, 60), &p).unwrap();
        let b = build_task_regressors(&block_schedule(vec![12.0, 62.0], 16.0, 60), &p).unwrap();
        for i in 1..59 {
            assert!((a[(i - 1, 0)] - b[(i, 0)]).abs() < 1e-12, "row {i}");
        }
    }

    #[test]
    fn schedule_longer_than_scan_is_rejected() {
        let s = block_schedule(vec![90.0], 20.0, 50);
        assert!(build_task_regressors(&s, &HrfParams::default()).is_err());
    }

    #[test]
    fn percent_signal_change_arithmetic() {
        let y = DMatrix::from_column_slice(2, 2, &[500.0, 500.0, 99.0, 101.0]);
        let p = to_percent_signal_change(&y).unwrap();
        assert_eq!(p.column(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert!((p[(0, 1)] + 1.0).abs() < 1e-12 && (p[(1, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn percent_signal_change_rejects_bad_mean() {
        let y = DMatrix::from_column_slice(2, 2, &[1.0, 1.0, -1.0, 1.0]);
        assert!(matches!(to_percent_signal_change(&y), Err(Error::BadVertexMean { vertex: 1, .. })));
    }

    #[test]
    fn percent_signal_change_columns_are_centered() {
        let y = randn(60, 30, 3).map(|v| 1000.0 + 20.0 * v);
        let p = to_percent_signal_change(&y).unwrap();
        for c in p.column_iter() {
            assert!(c.mean().abs() < 1e-10);
        }
    }

    #[test]
    fn trend_in_span_is_removed() {
        let n = polynomial_trends(40);
        let y = DMatrix::from_fn(40, 3, |i, _| 5.0 + 2.0 * n[(i, 0)]);
        let x = randn(40, 2, 1);
        let r = nuisance_regress(&y, &x, &n).unwrap();
        assert!(r.y.amax() < 1e-10);
        assert_eq!(r.n_removed, 3);
    }

    #[test]
    fn residualizing_twice_is_idempotent() {
        let n = randn(50, 4, 2);
        let y = randn(50, 5, 3);
        let x = randn(50, 2, 4);
        let r1 = nuisance_regress(&y, &x, &n).unwrap();
        let r2 = nuisance_regress(&r1.y, &r1.x, &n).unwrap();
        assert!((&r2.y - &r1.y).amax() < 1e-12);
        assert!((&r2.x - &r1.x).amax() < 1e-12);
    }

    #[test]
    fn dependent_nuisance_columns_are_named() {
        let mut n = randn(30, 3, 5);
        let c = n.column(0) * 2.0 - n.column(1);
        n.set_column(2, &c);
        let err = nuisance_regress(&randn(30, 2, 6), &randn(30, 2, 7), &n).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { ref columns } if columns == &vec![2]));

        let constant = DMatrix::from_element(30, 1, 3.0);
        let err = nuisance_regress(&randn(30, 2, 6), &randn(30, 2, 7), &constant).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { ref columns } if columns == &vec![0]));
    }

    #[test]
    fn prepare_session_removes_flagged_rows() {
        let sched = block_schedule(vec![10.0, 70.0], 20.0, 80);
        let mut y = randn(80, 40, 8).map(|v| 1000.0 + v);
        for v in 0..40 {
            y[(33, v)] += 300.0;
        }
        let prep = prepare_session("s", "1", &y, &sched, None, &PrepOptions::default()).unwrap();
        assert!(!prep.session.keep_flags[33]);
        assert_eq!(prep.session.n_kept(), prep.session.keep_flags.iter().filter(|&&k| k).count());
        for c in prep.session.y.column_iter() {
            assert!(c.mean().abs() < 1e-10);
        }
    }
}
