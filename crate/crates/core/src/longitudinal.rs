//! Disability predictors and random-intercept mixed models relating
//! activation area to disability.
//!
//! The mixed model is `y_ij = x_ij' beta + b_i + e_ij` with
//! `b_i ~ N(0, sigma_b^2)` and `e_ij ~ N(0, sigma^2)`. Writing
//! `lambda = sigma_b^2 / sigma^2`, the fixed effects and `sigma^2` have
//! closed forms given `lambda`, so both the ML and REML criteria reduce to a
//! one-dimensional search over `log lambda`, compared against the boundary
//! `lambda = 0`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

pub const N_ITEMS: usize = 12;
/// Handwriting, cutting food, dressing and hygiene (0-based item positions).
pub const HAND_ITEMS: [usize; 3] = [3, 4, 5];
pub const MAX_ITEM: u8 = 4;
pub const DAYS_PER_MONTH: f64 = 30.4375;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Group {
    Als,
    Hc,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Als => "ALS",
            Group::Hc => "HC",
        })
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ALS" => Ok(Group::Als),
            "HC" => Ok(Group::Hc),
            _ => Err(Error::invalid(format!("unknown group '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalVisit {
    pub subject_id: String,
    pub visit_id: String,
    pub group: Group,
    pub visit_date: NaiveDate,
    /// Symptom onset; ALS only.
    pub onset_date: Option<NaiveDate>,
    pub enrollment_date: NaiveDate,
    /// Rating-scale items, each 0..=4; `None` marks a missing item.
    pub items: [Option<u8>; N_ITEMS],
}

impl ClinicalVisit {
    pub fn total(&self) -> Result<u32> {
        let items = self.checked_items()?;
        Ok(items.iter().map(|&x| x as u32).sum())
    }

    fn checked_items(&self) -> Result<[u8; N_ITEMS]> {
        let mut out = [0u8; N_ITEMS];
        for (i, item) in self.items.iter().enumerate() {
            match item {
                Some(v) if *v <= MAX_ITEM => out[i] = *v,
                Some(v) => {
                    return Err(Error::invalid(format!(
                        "{}/{}: item {} = {v} outside 0..=4",
                        self.subject_id,
                        self.visit_id,
                        i + 1
                    )))
                }
                None => {
                    return Err(Error::invalid(format!(
                        "{}/{}: item {} missing",
                        self.subject_id,
                        self.visit_id,
                        i + 1
                    )))
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disability {
    pub total: f64,
    pub hand: f64,
    pub other: f64,
}

pub fn disability_scores(visit: &ClinicalVisit) -> Result<Disability> {
    let items = visit.checked_items()?;
    let total: u32 = items.iter().map(|&x| x as u32).sum();
    let hand: u32 = HAND_ITEMS.iter().map(|&i| items[i] as u32).sum();
    let other = total - hand;
    Ok(Disability {
        total: 1.0 - total as f64 / 48.0,
        hand: 1.0 - hand as f64 / 12.0,
        other: 1.0 - other as f64 / 36.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProgressionClass {
    Slow,
    Moderate,
    Fast,
}

impl ProgressionClass {
    /// Slow below 0.1 points per month, fast from 0.7, moderate between.
    pub fn from_rate(rate: f64) -> Self {
        if rate < 0.1 {
            ProgressionClass::Slow
        } else if rate < 0.7 {
            ProgressionClass::Moderate
        } else {
            ProgressionClass::Fast
        }
    }
}

/// `(48 - last total) / months from onset to last visit`.
pub fn progression_rate_between(
    last_total: u32,
    onset: NaiveDate,
    last_visit: NaiveDate,
) -> Result<(f64, ProgressionClass)> {
    let days = (last_visit - onset).num_days();
    if days <= 0 {
        return Err(Error::invalid(format!("onset {onset} is not before the last visit {last_visit}")));
    }
    progression_rate_months(last_total, days as f64 / DAYS_PER_MONTH)
}

/// `(48 - last total) / months`.
pub fn progression_rate_months(last_total: u32, months: f64) -> Result<(f64, ProgressionClass)> {
    if !(months > 0.0) || last_total > 48 {
        return Err(Error::invalid(format!(
            "need positive months and a total within 0..=48 (got {months}, {last_total})"
        )));
    }
    let rate = (48.0 - last_total as f64) / months;
    Ok((rate, ProgressionClass::from_rate(rate)))
}

/// Progression of one subject from its dated visits.
pub fn progression_rate(visits: &[ClinicalVisit]) -> Result<(f64, ProgressionClass)> {
    let last = visits.iter().max_by_key(|v| v.visit_date).ok_or_else(|| Error::invalid("no visits"))?;
    let onset =
        last.onset_date.ok_or_else(|| Error::invalid(format!("subject {} has no onset date", last.subject_id)))?;
    progression_rate_between(last.total()?, onset, last.visit_date)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct WindowRules {
    pub window_days: i64,
    pub excluded_subjects: Vec<String>,
}

impl Default for WindowRules {
    fn default() -> Self {
        WindowRules { window_days: 730, excluded_subjects: Vec::new() }
    }
}

/// ALS subjects keep the visits of the `window_days` window, anchored at one
/// of their visits, with the largest range of totals (earliest anchor on
/// ties). Controls keep visits at most `window_days` after enrollment.
/// Excluded subjects are removed. Input order is preserved.
pub fn windowing(visits: &[ClinicalVisit], rules: &WindowRules) -> Result<Vec<ClinicalVisit>> {
    let excluded: BTreeSet<&str> = rules.excluded_subjects.iter().map(String::as_str).collect();
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, v) in visits.iter().enumerate() {
        by_subject.entry(v.subject_id.as_str()).or_default().push(i);
    }
    let mut keep = vec![false; visits.len()];
    for (subject, idx) in by_subject {
        if excluded.contains(subject) {
            continue;
        }
        match visits[idx[0]].group {
            Group::Hc => {
                for &i in &idx {
                    let v = &visits[i];
                    keep[i] = (v.visit_date - v.enrollment_date).num_days() <= rules.window_days;
                }
            }
            Group::Als => {
                let mut sorted = idx.clone();
                sorted.sort_by_key(|&i| visits[i].visit_date);
                let totals = sorted.iter().map(|&i| visits[i].total()).collect::<Result<Vec<_>>>()?;
                let mut best: Option<(u32, NaiveDate)> = None;
                for &a in &sorted {
                    let start = visits[a].visit_date;
                    let inside = sorted
                        .iter()
                        .zip(&totals)
                        .filter(|(&i, _)| in_window(visits[i].visit_date, start, rules.window_days));
                    let (lo, hi) = inside.fold((u32::MAX, 0), |(lo, hi), (_, &t)| (lo.min(t), hi.max(t)));
                    let change = hi - lo;
                    if best.is_none_or(|(c, _)| change > c) {
                        best = Some((change, start));
                    }
                }
                if let Some((_, start)) = best {
                    for &i in &idx {
                        keep[i] = in_window(visits[i].visit_date, start, rules.window_days);
                    }
                }
            }
        }
    }
    Ok(visits.iter().zip(keep).filter(|(_, k)| *k).map(|(v, _)| v.clone()).collect())
}

fn in_window(d: NaiveDate, start: NaiveDate, days: i64) -> bool {
    let off = (d - start).num_days();
    (0..=days).contains(&off)
}

/// Linear-interpolation sample quantile (`(n - 1) p` positioning).
pub fn quantile(x: &[f64], p: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (s.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// Natural cubic spline with two interior knots: three columns, cubic
/// between the boundary knots and linear outside them. Every column
/// vanishes at the lower boundary knot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineBasis {
    pub boundary: [f64; 2],
    pub interior: [f64; 2],
}

impl SplineBasis {
    pub fn new(boundary: [f64; 2], interior: [f64; 2]) -> Result<Self> {
        let k = [boundary[0], interior[0], interior[1], boundary[1]];
        if k.iter().any(|v| !v.is_finite()) || k.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid(format!("spline knots must be strictly increasing, got {k:?}")));
        }
        Ok(SplineBasis { boundary, interior })
    }

    /// Knots at the 33rd and 67th sample quantiles, boundaries at the range.
    pub fn from_data(x: &[f64]) -> Result<Self> {
        let distinct: BTreeSet<u64> = x.iter().map(|v| v.to_bits()).collect();
        if distinct.len() < 4 {
            return Err(Error::invalid(format!(
                "spline needs at least 4 distinct predictor values, got {}",
                distinct.len()
            )));
        }
        let (lo, hi) = x.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        Self::new([lo, hi], [quantile(x, 0.33), quantile(x, 0.67)])
    }

    fn knots(&self) -> [f64; 4] {
        [self.boundary[0], self.interior[0], self.interior[1], self.boundary[1]]
    }

    pub fn eval(&self, x: f64) -> [f64; 3] {
        let k = self.knots();
        let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
        let d = |i: usize| (cube(x - k[i]) - cube(x - k[3])) / (k[3] - k[i]);
        let d3 = d(2);
        [x - k[0], d(0) - d3, d(1) - d3]
    }

    pub fn basis(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(x.len(), 3);
        for (i, &v) in x.iter().enumerate() {
            let r = self.eval(v);
            for c in 0..3 {
                m[(i, c)] = r[c];
            }
        }
        m
    }

    pub fn outside(&self, x: f64) -> bool {
        x < self.boundary[0] || x > self.boundary[1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Linear(String),
    Spline(String),
}

/// Fixed-effect structure; an intercept is always included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub terms: Vec<Term>,
}

pub const TOTAL: &str = "total";
pub const HAND: &str = "hand";
pub const OTHER: &str = "other";

impl ModelSpec {
    /// Area on a spline of total disability.
    pub fn als_total() -> Self {
        ModelSpec { terms: vec![Term::Spline(TOTAL.into())] }
    }

    /// Area on a spline of hand disability plus linear other disability.
    pub fn als_hand_other() -> Self {
        ModelSpec { terms: vec![Term::Spline(HAND.into()), Term::Linear(OTHER.into())] }
    }

    pub fn hc_intercept() -> Self {
        ModelSpec { terms: vec![] }
    }
}

/// Long-format data: one response per visit plus named predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmData {
    pub response: Vec<f64>,
    pub subjects: Vec<String>,
    pub predictors: BTreeMap<String, Vec<f64>>,
}

impl LmmData {
    pub fn n(&self) -> usize {
        self.response.len()
    }

    fn predictor(&self, name: &str) -> Result<&[f64]> {
        let p = self.predictors.get(name).ok_or_else(|| Error::invalid(format!("unknown predictor '{name}'")))?;
        if p.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "predictor '{name}' has {} values for {} observations",
                p.len(),
                self.n()
            )));
        }
        Ok(p)
    }

    /// Order-sensitive fingerprint of the response and grouping.
    fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (y, s) in self.response.iter().zip(&self.subjects) {
            y.to_bits().hash(&mut h);
            s.hash(&mut h);
        }
        h.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LmmOptions {
    /// Drop columns that are linearly dependent on earlier ones instead of
    /// failing.
    pub drop_rank_deficient: bool,
    pub log_lambda_range: (f64, f64),
}

impl Default for LmmOptions {
    fn default() -> Self {
        LmmOptions { drop_rank_deficient: true, log_lambda_range: (-12.0, 12.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmSolution {
    pub fixed_effects: Vec<f64>,
    pub fixed_cov: DMatrix<f64>,
    pub random_intercept_var: f64,
    pub residual_var: f64,
    pub lambda: f64,
    /// Maximized criterion: the log-likelihood for ML, the restricted
    /// log-likelihood for REML.
    pub criterion: f64,
    /// Predicted random intercepts, by subject in sorted order.
    pub blups: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmFit {
    pub spec: ModelSpec,
    /// Names of the retained design columns, intercept first.
    pub column_names: Vec<String>,
    pub dropped_columns: Vec<String>,
    pub splines: BTreeMap<String, SplineBasis>,
    pub ml: LmmSolution,
    pub reml: LmmSolution,
    pub n_obs: usize,
    pub n_subjects: usize,
    design: DMatrix<f64>,
    fingerprint: u64,
}

impl LmmFit {
    pub fn loglik(&self) -> f64 {
        self.ml.criterion
    }

    pub fn reml_loglik(&self) -> f64 {
        self.reml.criterion
    }

    pub fn n_fixed(&self) -> usize {
        self.column_names.len()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }
}

/// Per-subject sufficient statistics.
struct Cluster {
    n: f64,
    xtx: DMatrix<f64>,
    xt1: DVector<f64>,
    xty: DVector<f64>,
    sum_y: f64,
    yty: f64,
}

struct Profile {
    beta: DVector<f64>,
    a_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    rss: f64,
    log_det_v: f64,
}

struct Problem {
    clusters: Vec<Cluster>,
    n: usize,
    p: usize,
}

impl Problem {
    fn profile(&self, lambda: f64) -> Result<Profile> {
        let p = self.p;
        let mut a = DMatrix::zeros(p, p);
        let mut c = DVector::zeros(p);
        let mut yvy = 0.0;
        let mut log_det_v = 0.0;
        for cl in &self.clusters {
            let w = lambda / (1.0 + cl.n * lambda);
            a += &cl.xtx - &cl.xt1 * cl.xt1.transpose() * w;
            c += &cl.xty - &cl.xt1 * (w * cl.sum_y);
            yvy += cl.yty - w * cl.sum_y * cl.sum_y;
            log_det_v += (1.0 + cl.n * lambda).ln();
        }
        let a_chol = a.cholesky().ok_or_else(|| Error::invalid("fixed-effects information matrix is singular"))?;
        let beta = a_chol.solve(&c);
        let rss = (yvy - c.dot(&beta)).max(0.0);
        Ok(Profile { beta, a_chol, rss, log_det_v })
    }

    fn criterion(&self, lambda: f64, reml: bool) -> Result<f64> {
        let pr = self.profile(lambda)?;
        let dof = if reml { (self.n - self.p) as f64 } else { self.n as f64 };
        if pr.rss <= 0.0 {
            return Ok(f64::INFINITY);
        }
        let s2 = pr.rss / dof;
        let mut l = -0.5 * dof * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0) - 0.5 * pr.log_det_v;
        if reml {
            l -= pr.a_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        }
        Ok(l)
    }

    /// Maximizer over `{0} ∪ [exp(lo), exp(hi)]`.
    fn optimize(&self, reml: bool, range: (f64, f64)) -> Result<f64> {
        let f = |t: f64| self.criterion(t.exp(), reml);
        let steps = 48;
        let h = (range.1 - range.0) / steps as f64;
        let grid: Vec<f64> = (0..=steps).map(|i| range.0 + i as f64 * h).collect();
        let vals = grid.iter().map(|&t| f(t)).collect::<Result<Vec<_>>>()?;
        let ib = (0..vals.len()).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        let (mut a, mut b) = (grid[ib.saturating_sub(1)], grid[(ib + 1).min(steps)]);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let (mut x1, mut x2) = (b - g * (b - a), a + g * (b - a));
        let (mut f1, mut f2) = (f(x1)?, f(x2)?);
        while b - a > 1e-10 {
            if f1 >= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - g * (b - a);
                f1 = f(x1)?;
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + g * (b - a);
                f2 = f(x2)?;
            }
        }
        let (t, ft) =
            [(grid[ib], vals[ib]), (x1, f1), (x2, f2)].into_iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        let zero = self.criterion(0.0, reml)?;
        Ok(if zero >= ft { 0.0 } else { t.exp() })
    }

    fn solution(&self, lambda: f64, reml: bool, subjects: &[String]) -> Result<LmmSolution> {
        let pr = self.profile(lambda)?;
        let dof = if reml { (self.n - self.p) as f64 } else { self.n as f64 };
        let s2 = pr.rss / dof;
        let blups = self
            .clusters
            .iter()
            .zip(subjects)
            .map(|(cl, s)| {
                let resid_sum = cl.sum_y - cl.xt1.dot(&pr.beta);
                (s.clone(), lambda / (1.0 + cl.n * lambda) * resid_sum)
            })
            .collect();
        Ok(LmmSolution {
            fixed_effects: pr.beta.as_slice().to_vec(),
            fixed_cov: pr.a_chol.inverse() * s2,
            random_intercept_var: lambda * s2,
            residual_var: s2,
            lambda,
            criterion: self.criterion(lambda, reml)?,
            blups,
        })
    }
}

/// Columns of `x` that are numerically dependent on earlier columns.
fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut out = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col;
        for q in &basis {
            let d = q.dot(&r);
            r -= q * d;
        }
        for q in &basis {
            let d = q.dot(&r);
            r -= q * d;
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= 1e-9 * norm.max(1.0) {
            out.push(j);
        } else {
            basis.push(r / rn);
        }
    }
    out
}

/// Design matrix, column names, and the spline basis fitted for each smooth term.
type Design = (DMatrix<f64>, Vec<String>, BTreeMap<String, SplineBasis>);

/// Builds the fixed-effects design, fitting spline knots from `data`.
fn build_design(spec: &ModelSpec, data: &LmmData) -> Result<Design> {
    let n = data.n();
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut names = vec!["(intercept)".to_string()];
    let mut splines = BTreeMap::new();
    for term in &spec.terms {
        match term {
            Term::Linear(p) => {
                cols.push(data.predictor(p)?.to_vec());
                names.push(p.clone());
            }
            Term::Spline(p) => {
                let x = data.predictor(p)?;
                let sb = SplineBasis::from_data(x)?;
                let b = sb.basis(x);
                for c in 0..3 {
                    cols.push(b.column(c).iter().copied().collect());
                    names.push(format!("ns({p}){}", c + 1));
                }
                splines.insert(p.clone(), sb);
            }
        }
    }
    let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    Ok((x, names, splines))
}

pub fn fit_lmm(spec: &ModelSpec, data: &LmmData, opts: &LmmOptions) -> Result<LmmFit> {
    let n = data.n();
    if data.subjects.len() != n {
        return Err(Error::DimensionMismatch(format!("{} subject labels for {n} observations", data.subjects.len())));
    }
    if data.response.iter().any(|y| !y.is_finite()) {
        return Err(Error::invalid("response contains non-finite values"));
    }
    let (x_full, names_full, splines) = build_design(spec, data)?;
    let dep = dependent_columns(&x_full);
    if !dep.is_empty() && !opts.drop_rank_deficient {
        return Err(Error::RankDeficient { columns: dep });
    }
    let keep: Vec<usize> = (0..x_full.ncols()).filter(|j| !dep.contains(j)).collect();
    let x = x_full.select_columns(&keep);
    let column_names: Vec<String> = keep.iter().map(|&j| names_full[j].clone()).collect();
    let dropped_columns: Vec<String> = dep.iter().map(|&j| names_full[j].clone()).collect();
    let p = x.ncols();
    if n <= p {
        return Err(Error::invalid(format!("{n} observations for {p} fixed effects")));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.subjects.iter().enumerate() {
        groups.entry(s.as_str()).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::invalid("mixed model needs at least two subjects"));
    }
    let subjects: Vec<String> = groups.keys().map(|s| s.to_string()).collect();
    let clusters = groups
        .values()
        .map(|rows| {
            let xi = x.select_rows(rows);
            let yi = DVector::from_iterator(rows.len(), rows.iter().map(|&r| data.response[r]));
            Cluster {
                n: rows.len() as f64,
                xt1: xi.row_sum().transpose(),
                xty: xi.transpose() * &yi,
                xtx: xi.transpose() * &xi,
                sum_y: yi.sum(),
                yty: yi.norm_squared(),
            }
        })
        .collect();
    let problem = Problem { clusters, n, p };
    let lam_ml = problem.optimize(false, opts.log_lambda_range)?;
    let lam_reml = problem.optimize(true, opts.log_lambda_range)?;
    Ok(LmmFit {
        spec: spec.clone(),
        column_names,
        dropped_columns,
        splines,
        ml: problem.solution(lam_ml, false, &subjects)?,
        reml: problem.solution(lam_reml, true, &subjects)?,
        n_obs: n,
        n_subjects: subjects.len(),
        design: x,
        fingerprint: data.fingerprint(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrtResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Likelihood-ratio test of nested ML fits on identical data.
pub fn lrt(null: &LmmFit, alt: &LmmFit) -> Result<LrtResult> {
    if null.fingerprint != alt.fingerprint || null.n_obs != alt.n_obs {
        return Err(Error::invalid("likelihood-ratio test needs fits on identical data"));
    }
    if null.n_fixed() > alt.n_fixed() {
        return Err(Error::invalid("null model has more fixed effects than the alternative"));
    }
    // nesting: the null design must lie in the column space of the alternative
    let qr = alt.design.clone().qr();
    let q = qr.q();
    let resid = &null.design - &q * (q.transpose() * &null.design);
    if resid.amax() > 1e-8 * null.design.amax().max(1.0) {
        return Err(Error::invalid("models are not nested"));
    }
    let df = alt.n_fixed() - null.n_fixed();
    let statistic = (2.0 * (alt.loglik() - null.loglik())).max(0.0);
    let p_value = if df == 0 {
        1.0
    } else {
        ChiSquared::new(df as f64).map_err(|e| Error::invalid(e.to_string()))?.sf(statistic)
    };
    Ok(LrtResult { statistic, df, p_value })
}

/// `-2 loglik + 2 (fixed effects + 2 variance parameters)` at the ML fit.
pub fn aic(fit: &LmmFit) -> f64 {
    aic_from(fit.loglik(), fit.n_fixed())
}

pub fn aic_from(loglik: f64, n_fixed: usize) -> f64 {
    -2.0 * loglik + 2.0 * (n_fixed + 2) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub x: f64,
    pub mean: f64,
    pub se: f64,
    /// Beyond a spline boundary knot (linear extrapolation).
    pub extrapolated: bool,
}

/// Fitted mean and standard error along `grid` for predictor `vary`, other
/// predictors held at `held`, using the REML fixed effects.
pub fn coefficient_curve(
    fit: &LmmFit,
    vary: &str,
    grid: &[f64],
    held: &BTreeMap<String, f64>,
) -> Result<Vec<CurvePoint>> {
    let known = fit.spec.terms.iter().any(|t| matches!(t, Term::Linear(p) | Term::Spline(p) if p == vary));
    if !known {
        return Err(Error::invalid(format!("predictor '{vary}' is not in the model")));
    }
    let beta = DVector::from_column_slice(&fit.reml.fixed_effects);
    grid.iter()
        .map(|&gx| {
            let value = |p: &str| -> Result<f64> {
                if p == vary {
                    Ok(gx)
                } else {
                    held.get(p).copied().ok_or_else(|| Error::invalid(format!("no held value for predictor '{p}'")))
                }
            };
            let mut row: BTreeMap<String, f64> = BTreeMap::new();
            row.insert("(intercept)".into(), 1.0);
            let mut extrapolated = false;
            for term in &fit.spec.terms {
                match term {
                    Term::Linear(p) => {
                        row.insert(p.clone(), value(p)?);
                    }
                    Term::Spline(p) => {
                        let sb = &fit.splines[p];
                        let v = value(p)?;
                        extrapolated |= p == vary && sb.outside(v);
                        for (c, b) in sb.eval(v).iter().enumerate() {
                            row.insert(format!("ns({p}){}", c + 1), *b);
                        }
                    }
                }
            }
            let r = DVector::from_iterator(fit.column_names.len(), fit.column_names.iter().map(|c| row[c]));
            let var = (r.transpose() * &fit.reml.fixed_cov * &r)[(0, 0)];
            Ok(CurvePoint { x: gx, mean: r.dot(&beta), se: var.max(0.0).sqrt(), extrapolated })
        })
        .collect()
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("x,mean,se,extrapolated\n");
    for p in points {
        s.push_str(&format!("{},{},{},{}\n", p.x, p.mean, p.se, p.extrapolated as u8));
    }
    s
}

/// Joins visit-level areas with disability scores. `areas` maps
/// `(subject, visit)` to area; visits without an area are skipped.
pub fn assemble_lmm_data(visits: &[ClinicalVisit], areas: &BTreeMap<(String, String), f64>) -> Result<LmmData> {
    let mut data = LmmData {
        response: Vec::new(),
        subjects: Vec::new(),
        predictors: [TOTAL, HAND, OTHER].iter().map(|k| (k.to_string(), Vec::new())).collect(),
    };
    for v in visits {
        let Some(&a) = areas.get(&(v.subject_id.clone(), v.visit_id.clone())) else {
            continue;
        };
        let d = disability_scores(v)?;
        data.response.push(a);
        data.subjects.push(v.subject_id.clone());
        for (k, x) in [(TOTAL, d.total), (HAND, d.hand), (OTHER, d.other)] {
            data.predictors.get_mut(k).unwrap().push(x);
        }
    }
    Ok(data)
}

fn parse_date(s: &str, line: usize) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| Error::Parse {
        path: "<clinical>".into(),
        line,
        msg: format!("bad date '{s}': {e}"),
    })
}

const CLINICAL_HEADER: [&str; 6] = ["subject", "visit", "group", "visit_date", "onset_date", "enrollment_date"];

/// Clinical table: `subject,visit,group,visit_date,onset_date,enrollment_date,item1..item12`.
/// Dates are `YYYY-MM-DD`; empty cells mark a missing onset or item.
pub fn clinical_from_csv(text: &str) -> Result<Vec<ClinicalVisit>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::invalid(e.to_string()))?.clone();
    if header.len() != 6 + N_ITEMS || header.iter().take(6).ne(CLINICAL_HEADER) {
        return Err(Error::Parse {
            path: "<clinical>".into(),
            line: 1,
            msg: format!("expected header {:?} followed by 12 item columns", CLINICAL_HEADER),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { path: "<clinical>".into(), line, msg: e.to_string() })?;
        let mut items = [None; N_ITEMS];
        for (k, item) in items.iter_mut().enumerate() {
            let cell = &rec[6 + k];
            if !cell.is_empty() {
                *item = Some(cell.parse::<u8>().map_err(|e| Error::Parse {
                    path: "<clinical>".into(),
                    line,
                    msg: format!("item {}: {e}", k + 1),
                })?);
            }
        }
        out.push(ClinicalVisit {
            subject_id: rec[0].to_string(),
            visit_id: rec[1].to_string(),
            group: rec[2].parse()?,
            visit_date: parse_date(&rec[3], line)?,
            onset_date: if rec[4].is_empty() { None } else { Some(parse_date(&rec[4], line)?) },
            enrollment_date: parse_date(&rec[5], line)?,
            items,
        });
    }
    Ok(out)
}

pub fn clinical_to_csv(visits: &[ClinicalVisit]) -> String {
    let mut s = CLINICAL_HEADER.join(",");
    for k in 1..=N_ITEMS {
        s.push_str(&format!(",item{k}"));
    }
    s.push('\n');
    for v in visits {
        s.push_str(&format!(
            "{},{},{},{},{},{}",
            v.subject_id,
            v.visit_id,
            v.group,
            v.visit_date,
            v.onset_date.map_or_else(String::new, |d| d.to_string()),
            v.enrollment_date
        ));
        for it in &v.items {
            s.push(',');
            if let Some(x) = it {
                s.push_str(&x.to_string());
            }
        }
        s.push('\n');
    }
    s
}
