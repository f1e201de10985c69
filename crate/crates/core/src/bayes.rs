//! Longitudinal spatial Bayesian GLM.
//!
//! Every visit `j` carries `K` activation fields with SPDE priors whose
//! hyperparameters `(kappa_k, tau_k)` are shared across visits, together
//! with one residual variance `sigma2`:
//!
//! ```text
//! y_j = sum_k (I ⊗ x_jk) beta_jk + e_j,   e_j ~ N(0, sigma2 I)
//! beta_jk ~ N(0, Q_k^-1),                 Q_k = tau_k (kappa_k^4 C + 2 kappa_k^2 G + G C^-1 G)
//! ```
//!
//! Given the hyperparameters the model is jointly Gaussian, so the evidence
//! is evaluated exactly from the prior and posterior precisions:
//!
//! ```text
//! log p(y_j) = ½ log|Q_prior| − ½ log|Q_post,j| − (n_j/2) log(2π sigma2)
//!              − y_j'y_j / (2 sigma2) + ½ b_j' Q_post,j^-1 b_j,     b_j = X_j'y_j / sigma2
//! ```
//!
//! Hyperparameters are estimated by maximizing the evidence plus the log
//! hyperprior over `(log kappa, log tau, log sigma2)` with BFGS and an
//! analytic gradient. The traces in the gradient only need the entries of
//! `Q_post^-1` on the sparsity pattern of `Q_post`, which the Takahashi
//! recursion on the banded factor provides.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use sprs::{CsMat, TriMat};
use statrs::function::gamma::ln_gamma;

use crate::band::{bandwidth, rcm_positions, BandCholesky, BandMatrix};
use crate::error::{Error, Result};
use crate::optim::{minimize, BfgsOptions};
use crate::prep::SessionData;
use crate::surface::{FemMatrices, SpdeParts};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hyperparameters {
    pub kappa: Vec<f64>,
    pub tau: Vec<f64>,
    pub sigma2: f64,
}

impl Hyperparameters {
    pub fn n_tasks(&self) -> usize {
        self.kappa.len()
    }

    /// `[log kappa_1..K, log tau_1..K, log sigma2]`.
    pub fn to_log(&self) -> Vec<f64> {
        self.kappa.iter().chain(&self.tau).map(|x| x.ln()).chain(std::iter::once(self.sigma2.ln())).collect()
    }

    pub fn from_log(k: usize, x: &[f64]) -> Self {
        assert_eq!(x.len(), 2 * k + 1);
        Hyperparameters {
            kappa: x[..k].iter().map(|v| v.exp()).collect(),
            tau: x[k..2 * k].iter().map(|v| v.exp()).collect(),
            sigma2: x[2 * k].exp(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappa.len() != self.tau.len() || self.kappa.is_empty() {
            return Err(Error::invalid("need one kappa and one tau per task"));
        }
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !self.kappa.iter().chain(&self.tau).all(|&v| ok(v)) || !ok(self.sigma2) {
            return Err(Error::invalid(format!("hyperparameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl NormalPrior {
    fn log_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln() - 0.5 * LN_2PI
    }

    fn dlog_density(&self, x: f64) -> f64 {
        -(x - self.mean) / (self.sd * self.sd)
    }
}

/// Log-normal priors on `kappa_k` and `tau_k`, gamma prior on `1 / sigma2`.
///
/// Densities are taken with respect to the log-scale parameters that the
/// optimizer works with, so the gamma term includes the Jacobian of
/// `log sigma2 -> 1 / sigma2`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HyperPriors {
    pub log_kappa: Vec<NormalPrior>,
    pub log_tau: Vec<NormalPrior>,
    pub precision_shape: f64,
    pub precision_rate: f64,
    /// Drop the prior term entirely (pure marginal likelihood).
    pub flat: bool,
}

impl HyperPriors {
    /// `log kappa, log tau ~ N(0, 2^2)`, `1/sigma2 ~ Gamma(0.01, 0.01)`.
    pub fn weakly_informative(k: usize) -> Self {
        let n = NormalPrior { mean: 0.0, sd: 2.0 };
        HyperPriors {
            log_kappa: vec![n; k],
            log_tau: vec![n; k],
            precision_shape: 0.01,
            precision_rate: 0.01,
            flat: false,
        }
    }

    pub fn flat(k: usize) -> Self {
        HyperPriors { flat: true, ..Self::weakly_informative(k) }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.log_kappa.len() != k || self.log_tau.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "hyperpriors given for {} / {} tasks, model has {k}",
                self.log_kappa.len(),
                self.log_tau.len()
            )));
        }
        let bad_sd = self.log_kappa.iter().chain(&self.log_tau).any(|p| !(p.sd > 0.0));
        if bad_sd || !(self.precision_shape > 0.0) || !(self.precision_rate > 0.0) {
            return Err(Error::invalid("hyperprior scales must be positive"));
        }
        Ok(())
    }

    /// Log prior density at log-scale parameters `x`, with gradient.
    pub fn log_density(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let k = self.log_kappa.len();
        let mut g = vec![0.0; x.len()];
        if self.flat {
            return (0.0, g);
        }
        let mut lp = 0.0;
        for i in 0..k {
            lp += self.log_kappa[i].log_density(x[i]);
            g[i] = self.log_kappa[i].dlog_density(x[i]);
            lp += self.log_tau[i].log_density(x[k + i]);
            g[k + i] = self.log_tau[i].dlog_density(x[k + i]);
        }
        let (a, b, s) = (self.precision_shape, self.precision_rate, x[2 * k]);
        lp += a * b.ln() - ln_gamma(a) - a * s - b * (-s).exp();
        g[2 * k] = -a + b * (-s).exp();
        (lp, g)
    }
}

/// Sufficient statistics of one visit.
#[derive(Debug, Clone)]
pub struct VisitStats {
    /// `X'X`, `K x K`.
    pub gram: DMatrix<f64>,
    /// `X'y` in block order `k * V + v`.
    pub xty: Vec<f64>,
    pub yty: f64,
    /// `T_j * V`.
    pub n_obs: f64,
}

impl VisitStats {
    pub fn from_session(s: &SessionData) -> Self {
        let xty = s.x_task.transpose() * &s.y; // K x V
        let (k, v) = xty.shape();
        let mut flat = vec![0.0; k * v];
        for kk in 0..k {
            for vv in 0..v {
                flat[kk * v + vv] = xty[(kk, vv)];
            }
        }
        VisitStats {
            gram: s.x_task.transpose() * &s.x_task,
            xty: flat,
            yty: s.y.norm_squared(),
            n_obs: (s.y.nrows() * s.y.ncols()) as f64,
        }
    }
}

/// Band ordering of the `(task, vertex)` unknowns: vertices follow a reverse
/// Cuthill-McKee order of the precision pattern, tasks are interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub n_tasks: usize,
    pub n_vertices: usize,
    /// `pos[vertex]` = rank in the band ordering.
    pub pos: Vec<usize>,
    /// Bandwidth of a single-field precision.
    pub field_width: usize,
}

impl Layout {
    pub fn new(pattern: &CsMat<f64>, n_tasks: usize) -> Self {
        let pos = rcm_positions(pattern);
        let field_width = bandwidth(pattern, &pos);
        Layout { n_tasks, n_vertices: pattern.rows(), pos, field_width }
    }

    pub fn joint_width(&self) -> usize {
        self.n_tasks * (self.field_width + 1) - 1
    }

    #[inline]
    pub fn joint_index(&self, task: usize, vertex: usize) -> usize {
        self.pos[vertex] * self.n_tasks + task
    }

    /// Band position of block-order index `task * V + vertex`.
    #[inline]
    pub fn from_block(&self, i: usize) -> usize {
        self.joint_index(i / self.n_vertices, i % self.n_vertices)
    }

    pub fn to_band_vec(&self, block: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; block.len()];
        for (i, &x) in block.iter().enumerate() {
            out[self.from_block(i)] = x;
        }
        out
    }

    pub fn to_block_vec(&self, band: &[f64]) -> Vec<f64> {
        (0..band.len()).map(|i| band[self.from_block(i)]).collect()
    }

    /// Band copy of a joint precision stored in block order.
    pub fn joint_band(&self, q: &CsMat<f64>) -> BandMatrix {
        let mut b = BandMatrix::zeros(q.rows(), self.joint_width());
        for (v, (i, j)) in q.iter() {
            if i >= j {
                b.add(self.from_block(i), self.from_block(j), *v);
            }
        }
        b
    }
}

/// Mesh-level machinery shared by every evaluation: the SPDE terms and the
/// band ordering, computed once.
#[derive(Debug, Clone)]
pub struct SpatialModel {
    parts: SpdeParts,
    layout: Layout,
}

struct FieldPrior {
    values: Vec<f64>,
    dkappa: Vec<f64>,
    log_det: f64,
    /// `tr(Q^-1 dQ/dlog kappa)`.
    tr_dkappa: f64,
}

impl SpatialModel {
    pub fn new(fem: &FemMatrices, n_tasks: usize) -> Self {
        let parts = SpdeParts::new(fem);
        let layout = Layout::new(parts.pattern(), n_tasks);
        SpatialModel { parts, layout }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_vertices(&self) -> usize {
        self.layout.n_vertices
    }

    pub fn n_tasks(&self) -> usize {
        self.layout.n_tasks
    }

    pub fn parts(&self) -> &SpdeParts {
        &self.parts
    }

    /// Calls `f(i, j, slot)` for every stored pattern entry.
    fn for_each_entry(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p = self.parts.pattern();
        let indptr = p.indptr();
        let indptr = indptr.raw_storage();
        for i in 0..p.rows() {
            for slot in indptr[i]..indptr[i + 1] {
                f(i, p.indices()[slot], slot);
            }
        }
    }

    fn field_prior(&self, kappa: f64, tau: f64, grad: bool) -> Result<FieldPrior> {
        let values = self.parts.values(kappa, tau);
        let pos = &self.layout.pos;
        let mut band = BandMatrix::zeros(self.n_vertices(), self.layout.field_width);
        self.for_each_entry(|i, j, s| {
            if i >= j {
                band.add(pos[i], pos[j], values[s]);
            }
        });
        let chol = BandCholesky::factor(band).map_err(|e| with_context(e, kappa, tau))?;
        let dkappa = self.parts.dlog_kappa_values(kappa, tau);
        let mut tr_dkappa = 0.0;
        if grad {
            let sinv = chol.selected_inverse();
            self.for_each_entry(|i, j, s| tr_dkappa += sinv.get(pos[i], pos[j]) * dkappa[s]);
        }
        Ok(FieldPrior { values, dkappa, log_det: chol.log_det(), tr_dkappa })
    }

    fn joint_band(&self, priors: &[FieldPrior], gram: &DMatrix<f64>, sigma2: f64) -> BandMatrix {
        let l = &self.layout;
        let mut band = BandMatrix::zeros(l.n_tasks * l.n_vertices, l.joint_width());
        for (k, fp) in priors.iter().enumerate() {
            self.for_each_entry(|i, j, s| {
                if i >= j {
                    band.add(l.joint_index(k, i), l.joint_index(k, j), fp.values[s]);
                }
            });
        }
        for v in 0..l.n_vertices {
            for a in 0..l.n_tasks {
                for b in 0..=a {
                    band.add(l.joint_index(a, v), l.joint_index(b, v), gram[(a, b)] / sigma2);
                }
            }
        }
        band
    }

    /// Joint posterior precision of one visit in block order.
    pub fn posterior_precision(&self, theta: &Hyperparameters, gram: &DMatrix<f64>) -> Result<CsMat<f64>> {
        theta.validate()?;
        let (k, v) = (self.n_tasks(), self.n_vertices());
        let mut tri = TriMat::new((k * v, k * v));
        for t in 0..k {
            let q = self.parts.precision(theta.kappa[t], theta.tau[t])?;
            for (val, (i, j)) in q.iter() {
                tri.add_triplet(t * v + i, t * v + j, *val);
            }
        }
        for vv in 0..v {
            for a in 0..k {
                for b in 0..k {
                    let g = gram[(a, b)] / theta.sigma2;
                    if g != 0.0 || a == b {
                        tri.add_triplet(a * v + vv, b * v + vv, g);
                    }
                }
            }
        }
        Ok(tri.to_csr())
    }

    /// Log evidence summed over visits (hyperprior excluded), and optionally
    /// its gradient with respect to `[log kappa, log tau, log sigma2]`.
    pub fn log_evidence(
        &self,
        theta: &Hyperparameters,
        visits: &[VisitStats],
        grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        theta.validate()?;
        let (k, nv) = (self.n_tasks(), self.n_vertices());
        if theta.n_tasks() != k {
            return Err(Error::DimensionMismatch(format!("theta has {} tasks, model has {k}", theta.n_tasks())));
        }
        let l = &self.layout;
        let s2 = theta.sigma2;
        let priors =
            (0..k).map(|t| self.field_prior(theta.kappa[t], theta.tau[t], grad)).collect::<Result<Vec<_>>>()?;
        let log_det_prior: f64 = priors.iter().map(|p| p.log_det).sum();

        let mut total = 0.0;
        let mut g = vec![0.0; 2 * k + 1];
        for stats in visits {
            if stats.xty.len() != k * nv || stats.gram.shape() != (k, k) {
                return Err(Error::DimensionMismatch(format!(
                    "visit statistics sized for {} unknowns, model has {}",
                    stats.xty.len(),
                    k * nv
                )));
            }
            let band = self.joint_band(&priors, &stats.gram, s2);
            let chol = BandCholesky::factor(band).map_err(|e| with_context(e, theta.kappa[0], theta.tau[0]))?;
            let b: Vec<f64> = stats.xty.iter().map(|x| x / s2).collect();
            let b_band = l.to_band_vec(&b);
            let mut mu = b_band.clone();
            chol.solve(&mut mu);
            let bmu: f64 = b_band.iter().zip(&mu).map(|(x, y)| x * y).sum();
            total += 0.5 * log_det_prior
                - 0.5 * chol.log_det()
                - 0.5 * stats.n_obs * (LN_2PI + s2.ln())
                - stats.yty / (2.0 * s2)
                + 0.5 * bmu;

            if !grad {
                continue;
            }
            let sinv = chol.selected_inverse();
            for (t, fp) in priors.iter().enumerate() {
                let (mut tr_q, mut tr_dq, mut quad_q, mut quad_dq) = (0.0, 0.0, 0.0, 0.0);
                self.for_each_entry(|i, j, s| {
                    let (bi, bj) = (l.joint_index(t, i), l.joint_index(t, j));
                    let sij = sinv.get(bi, bj);
                    let mm = mu[bi] * mu[bj];
                    tr_q += sij * fp.values[s];
                    tr_dq += sij * fp.dkappa[s];
                    quad_q += mm * fp.values[s];
                    quad_dq += mm * fp.dkappa[s];
                });
                g[t] += 0.5 * fp.tr_dkappa - 0.5 * tr_dq - 0.5 * quad_dq;
                g[k + t] += 0.5 * nv as f64 - 0.5 * tr_q - 0.5 * quad_q;
            }
            let (mut tr_gram, mut quad_gram) = (0.0, 0.0);
            for v in 0..nv {
                for a in 0..k {
                    for c in 0..k {
                        let (ia, ic) = (l.joint_index(a, v), l.joint_index(c, v));
                        tr_gram += stats.gram[(a, c)] * sinv.get(ia, ic);
                        quad_gram += stats.gram[(a, c)] * mu[ia] * mu[ic];
                    }
                }
            }
            g[2 * k] += 0.5 * tr_gram / s2 - 0.5 * stats.n_obs + stats.yty / (2.0 * s2) - bmu + 0.5 * quad_gram / s2;
        }
        Ok((total, grad.then_some(g)))
    }

    /// Exact conjugate posterior of one visit at fixed hyperparameters.
    pub fn posterior(&self, theta: &Hyperparameters, stats: &VisitStats) -> Result<(Vec<f64>, CsMat<f64>)> {
        let qpost = self.posterior_precision(theta, &stats.gram)?;
        let chol = BandCholesky::factor(self.layout.joint_band(&qpost))
            .map_err(|e| with_context(e, theta.kappa[0], theta.tau[0]))?;
        let mut mu = self.layout.to_band_vec(&stats.xty.iter().map(|x| x / theta.sigma2).collect::<Vec<_>>());
        chol.solve(&mut mu);
        Ok((self.layout.to_block_vec(&mu), qpost))
    }
}

fn with_context(e: Error, kappa: f64, tau: f64) -> Error {
    match e {
        Error::NotPositiveDefinite { context, pivot } => {
            Error::NotPositiveDefinite { context: format!("{context}; kappa = {kappa:e}, tau = {tau:e}"), pivot }
        }
        other => other,
    }
}

fn check_sessions(sessions: &[SessionData], fem: &FemMatrices) -> Result<usize> {
    let first = sessions.first().ok_or_else(|| Error::invalid("need at least one session"))?;
    let k = first.n_tasks();
    for s in sessions {
        if s.n_vertices() != fem.n() {
            return Err(Error::DimensionMismatch(format!(
                "session {}/{} has {} vertices, mesh has {}",
                s.subject_id,
                s.visit_id,
                s.n_vertices(),
                fem.n()
            )));
        }
        if s.n_tasks() != k {
            return Err(Error::DimensionMismatch("all visits must share the same task regressors".into()));
        }
    }
    Ok(k)
}

/// Log evidence plus log hyperprior.
pub fn log_marginal_likelihood(
    theta: &Hyperparameters,
    sessions: &[SessionData],
    fem: &FemMatrices,
    priors: &HyperPriors,
) -> Result<f64> {
    let k = check_sessions(sessions, fem)?;
    priors.validate(k)?;
    let model = SpatialModel::new(fem, k);
    let stats: Vec<VisitStats> = sessions.iter().map(VisitStats::from_session).collect();
    let (ll, _) = model.log_evidence(theta, &stats, false)?;
    Ok(ll + priors.log_density(&theta.to_log()).0)
}

/// Posterior mean (block order) and precision of one session at fixed `theta`.
pub fn posterior_given_theta(
    theta: &Hyperparameters,
    session: &SessionData,
    fem: &FemMatrices,
) -> Result<(Vec<f64>, CsMat<f64>)> {
    check_sessions(std::slice::from_ref(session), fem)?;
    let model = SpatialModel::new(fem, session.n_tasks());
    model.posterior(theta, &VisitStats::from_session(session))
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub bfgs: BfgsOptions,
    /// Starting point; derived from per-vertex OLS when absent.
    pub init: Option<Hyperparameters>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub grad_max: f64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct VisitPosterior {
    pub subject_id: String,
    pub visit_id: String,
    /// Posterior mean in block order `task * V + vertex`.
    pub mu: Vec<f64>,
    pub qpost: CsMat<f64>,
}

#[derive(Debug, Clone)]
pub struct PosteriorFit {
    pub theta_hat: Hyperparameters,
    pub priors: HyperPriors,
    pub visits: Vec<VisitPosterior>,
    pub log_marginal: f64,
    pub convergence: Convergence,
    pub layout: Layout,
}

impl PosteriorFit {
    pub fn n_tasks(&self) -> usize {
        self.layout.n_tasks
    }

    pub fn n_vertices(&self) -> usize {
        self.layout.n_vertices
    }

    /// Mean of one task field at one visit.
    pub fn field_mean(&self, visit: usize, task: usize) -> &[f64] {
        let v = self.n_vertices();
        &self.visits[visit].mu[task * v..(task + 1) * v]
    }

    pub fn visit_index(&self, visit_id: &str) -> Option<usize> {
        self.visits.iter().position(|v| v.visit_id == visit_id)
    }

    pub fn factor(&self, visit: usize) -> Result<PosteriorFactor> {
        let vp = &self.visits[visit];
        let chol = BandCholesky::factor(self.layout.joint_band(&vp.qpost))?;
        Ok(PosteriorFactor { layout: self.layout.clone(), mu: vp.mu.clone(), chol })
    }
}

/// Factored posterior of one visit, for marginals and sampling.
#[derive(Debug, Clone)]
pub struct PosteriorFactor {
    layout: Layout,
    mu: Vec<f64>,
    chol: BandCholesky,
}

impl PosteriorFactor {
    pub fn from_parts(layout: Layout, mu: Vec<f64>, qpost: &CsMat<f64>) -> Result<Self> {
        let chol = BandCholesky::factor(layout.joint_band(qpost))?;
        Ok(PosteriorFactor { layout, mu, chol })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn mean(&self) -> &[f64] {
        &self.mu
    }

    /// Posterior marginal variances in block order.
    pub fn marginal_variances(&self) -> Vec<f64> {
        let s = self.chol.selected_inverse();
        (0..self.mu.len())
            .map(|i| {
                let b = self.layout.from_block(i);
                s.get(b, b)
            })
            .collect()
    }

    /// One draw in block order: `mu + L^-T z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut z: Vec<f64> = (0..self.mu.len()).map(|_| rng.sample(StandardNormal)).collect();
        self.chol.solve_upper(&mut z);
        let mut out = self.layout.to_block_vec(&z);
        for (o, m) in out.iter_mut().zip(&self.mu) {
            *o += m;
        }
        out
    }
}

/// Starting values: unit `kappa`, `tau` matching the prior marginal variance
/// `1 / (4 pi kappa^2 tau)` to the spread of per-vertex OLS estimates, and the
/// pooled OLS residual variance.
pub fn initial_hyperparameters(visits: &[VisitStats], k: usize, nv: usize) -> Result<Hyperparameters> {
    let mut sum_sq = vec![0.0; k];
    let mut count = 0.0;
    let (mut rss, mut dof) = (0.0, 0.0);
    for st in visits {
        let chol = st
            .gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("task design is singular; every task regressor must be nonzero"))?;
        for v in 0..nv {
            let b = nalgebra::DVector::from_fn(k, |t, _| st.xty[t * nv + v]);
            let beta = chol.solve(&b);
            for t in 0..k {
                sum_sq[t] += beta[t] * beta[t];
            }
            rss -= beta.dot(&b);
        }
        rss += st.yty;
        dof += st.n_obs - (k * nv) as f64;
        count += nv as f64;
    }
    let sigma2 = if dof > 0.0 && rss > 0.0 { rss / dof } else { 1.0 };
    let kappa = vec![1.0; k];
    let tau = sum_sq
        .iter()
        .map(|&s| {
            let var = (s / count).max(1e-8);
            1.0 / (4.0 * std::f64::consts::PI * var)
        })
        .collect();
    Ok(Hyperparameters { kappa, tau, sigma2 })
}

/// Maximum a posteriori hyperparameters pooled over visits, then the exact
/// posterior of every visit at the estimate.
pub fn fit_bayes_longitudinal(
    sessions: &[SessionData],
    fem: &FemMatrices,
    priors: &HyperPriors,
    opts: &FitOptions,
) -> Result<PosteriorFit> {
    let k = check_sessions(sessions, fem)?;
    priors.validate(k)?;
    let model = SpatialModel::new(fem, k);
    let stats: Vec<VisitStats> = sessions.iter().map(VisitStats::from_session).collect();
    let init = match &opts.init {
        Some(t) => {
            t.validate()?;
            t.clone()
        }
        None => initial_hyperparameters(&stats, k, fem.n())?,
    };

    let mut last_err = None;
    let objective = |x: &[f64], grad: bool| {
        let theta = Hyperparameters::from_log(k, x);
        match model.log_evidence(&theta, &stats, grad) {
            Ok((ll, g)) => {
                let (lp, gp) = priors.log_density(x);
                let g = g.map(|g| g.iter().zip(&gp).map(|(a, b)| -(a + b)).collect());
                Some((-(ll + lp), g))
            }
            Err(e) => {
                last_err = Some(e);
                None
            }
        }
    };
    let res = minimize(objective, &init.to_log(), &opts.bfgs);
    let Some(res) = res else {
        return Err(last_err.unwrap_or_else(|| Error::invalid("evidence undefined at the initial point")));
    };
    let theta_hat = Hyperparameters::from_log(k, &res.x);
    let visits = sessions
        .iter()
        .zip(&stats)
        .map(|(s, st)| {
            let (mu, qpost) = model.posterior(&theta_hat, st)?;
            Ok(VisitPosterior { subject_id: s.subject_id.clone(), visit_id: s.visit_id.clone(), mu, qpost })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorFit {
        theta_hat,
        priors: priors.clone(),
        visits,
        log_marginal: -res.f,
        convergence: Convergence {
            converged: res.converged,
            iterations: res.iterations,
            evaluations: res.evaluations,
            grad_max: res.grad.iter().fold(0.0, |m, g| m.max(g.abs())),
            message: res.message,
        },
        layout: model.layout().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::{assemble_fem, spde_precision};
    use crate::synth::{planar_grid, simulate_session, GmrfSampler};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense(q: &CsMat<f64>) -> DMatrix<f64> {
        let d = q.to_dense();
        DMatrix::from_fn(q.rows(), q.cols(), |i, j| d[[i, j]])
    }

    fn random_sessions(fem: &FemMatrices, j: usize, t: usize, k: usize, seed: u64) -> Vec<SessionData> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = fem.n();
        (0..j)
            .map(|jj| {
                let x = DMatrix::from_fn(t, k, |_, _| rng.sample::<f64, _>(StandardNormal));
                let fields: Vec<Vec<f64>> =
                    (0..k).map(|_| (0..v).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
                simulate_session("s", &format!("v{jj}"), &x, &fields, 0.7, &mut rng).unwrap()
            })
            .collect()
    }

    fn theta2() -> Hyperparameters {
        Hyperparameters { kappa: vec![0.7, 1.3], tau: vec![0.4, 2.0], sigma2: 0.8 }
    }

    fn prior_dense(fem: &FemMatrices, th: &Hyperparameters) -> DMatrix<f64> {
        let v = fem.n();
        let k = th.n_tasks();
        let mut q = DMatrix::zeros(k * v, k * v);
        for t in 0..k {
            let qt = dense(&spde_precision(fem, th.kappa[t], th.tau[t]).unwrap().q);
            q.view_mut((t * v, t * v), (v, v)).copy_from(&qt);
        }
        q
    }

    /// `I_V ⊗ x_k` blocks acting on `vec(Y)` (column-major).
    fn joint_design(s: &SessionData) -> DMatrix<f64> {
        let (t, k) = s.x_task.shape();
        let v = s.n_vertices();
        let mut x = DMatrix::zeros(t * v, k * v);
        for kk in 0..k {
            for vv in 0..v {
                for tt in 0..t {
                    x[(vv * t + tt, kk * v + vv)] = s.x_task[(tt, kk)];
                }
            }
        }
        x
    }

    fn dense_log_evidence(fem: &FemMatrices, th: &Hyperparameters, sessions: &[SessionData]) -> f64 {
        let qp = prior_dense(fem, th);
        let cov_beta = qp.try_inverse().unwrap();
        sessions
            .iter()
            .map(|s| {
                let x = joint_design(s);
                let n = x.nrows();
                let cov = &x * &cov_beta * x.transpose() + DMatrix::identity(n, n) * th.sigma2;
                let y = nalgebra::DVector::from_column_slice(s.y.as_slice());
                let ch = cov.cholesky().unwrap();
                let logdet: f64 = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                -0.5 * n as f64 * LN_2PI - 0.5 * logdet - 0.5 * y.dot(&ch.solve(&y))
            })
            .sum()
    }

    fn small_fem(nx: usize, ny: usize) -> FemMatrices {
        assemble_fem(&planar_grid(nx, ny, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn evidence_matches_dense_oracle() {
        let fem = small_fem(5, 4);
        let sessions = random_sessions(&fem, 2, 20, 2, 1);
        let th = theta2();
        let priors = HyperPriors::weakly_informative(2);
        let got = log_marginal_likelihood(&th, &sessions, &fem, &priors).unwrap();
        let want = dense_log_evidence(&fem, &th, &sessions) + priors.log_density(&th.to_log()).0;
        assert!((got - want).abs() <= 1e-8 * want.abs(), "{got} vs {want}");
        let flat = log_marginal_likelihood(&th, &sessions, &fem, &HyperPriors::flat(2)).unwrap();
        assert!((flat - dense_log_evidence(&fem, &th, &sessions)).abs() <= 1e-8 * want.abs());
    }

    #[test]
    fn tau_doubling_with_orthogonal_data() {
        let fem = small_fem(4, 4);
        let mut sessions = random_sessions(&fem, 1, 20, 2, 2);
        // project y off the task columns
        let x = sessions[0].x_task.clone();
        let hat = &x * (x.transpose() * &x).try_inverse().unwrap() * x.transpose();
        let y = &sessions[0].y - &hat * &sessions[0].y;
        sessions[0].y = y;
        let mut th = theta2();
        let flat = HyperPriors::flat(2);
        let a = log_marginal_likelihood(&th, &sessions, &fem, &flat).unwrap();
        th.tau[1] *= 2.0;
        let b = log_marginal_likelihood(&th, &sessions, &fem, &flat).unwrap();
        let want = dense_log_evidence(&fem, &th, &sessions);
        assert!((b - want).abs() < 1e-8 * want.abs());
        // only log-determinants move: the quadratic term is unchanged
        let model = SpatialModel::new(&fem, 2);
        let st = VisitStats::from_session(&sessions[0]);
        assert!(st.xty.iter().all(|x| x.abs() < 1e-10));
        assert!((a - b).abs() > 0.0);
        let _ = model;
    }

    #[test]
    fn posterior_matches_dense_ridge() {
        let fem = small_fem(6, 5);
        let sessions = random_sessions(&fem, 1, 25, 2, 3);
        let th = theta2();
        let (mu, qpost) = posterior_given_theta(&th, &sessions[0], &fem).unwrap();
        let x = joint_design(&sessions[0]);
        let qd = prior_dense(&fem, &th) + x.transpose() * &x / th.sigma2;
        let y = nalgebra::DVector::from_column_slice(sessions[0].y.as_slice());
        let mu_d = qd.clone().cholesky().unwrap().solve(&(x.transpose() * y / th.sigma2));
        let scale = mu_d.amax();
        for i in 0..mu.len() {
            assert!((mu[i] - mu_d[i]).abs() < 1e-8 * scale);
        }
        let qp = dense(&qpost);
        assert!((qp - &qd).amax() < 1e-10 * qd.amax());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let fem = small_fem(5, 5);
        let sessions = random_sessions(&fem, 2, 20, 2, 4);
        let stats: Vec<VisitStats> = sessions.iter().map(VisitStats::from_session).collect();
        let model = SpatialModel::new(&fem, 2);
        let x0 = theta2().to_log();
        let (_, g) = model.log_evidence(&theta2(), &stats, true).unwrap();
        let g = g.unwrap();
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp = model.log_evidence(&Hyperparameters::from_log(2, &xp), &stats, false).unwrap().0;
            let fm = model.log_evidence(&Hyperparameters::from_log(2, &xm), &stats, false).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1.0), "coord {i}: fd {fd} vs {}", g[i]);
        }
        let priors = HyperPriors::weakly_informative(2);
        let (_, gp) = priors.log_density(&x0);
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (priors.log_density(&xp).0 - priors.log_density(&xm).0) / (2.0 * h);
            assert!((fd - gp[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn posterior_mean_is_stationary() {
        let fem = small_fem(6, 6);
        let sessions = random_sessions(&fem, 1, 30, 2, 5);
        let th = theta2();
        let (mu, _) = posterior_given_theta(&th, &sessions[0], &fem).unwrap();
        let x = joint_design(&sessions[0]);
        let y = nalgebra::DVector::from_column_slice(sessions[0].y.as_slice());
        let m = nalgebra::DVector::from_column_slice(&mu);
        let lhs = x.transpose() * (y - &x * &m) / th.sigma2;
        let rhs = prior_dense(&fem, &th) * &m;
        assert!((lhs - &rhs).amax() < 1e-8 * rhs.amax().max(1.0));
    }

    #[test]
    fn vanishing_prior_gives_ols() {
        let fem = small_fem(4, 4);
        let sessions = random_sessions(&fem, 1, 30, 2, 6);
        let th = Hyperparameters { kappa: vec![1.0, 1.0], tau: vec![1e-8, 1e-8], sigma2: 1.0 };
        let (mu, _) = posterior_given_theta(&th, &sessions[0], &fem).unwrap();
        let s = &sessions[0];
        let ols = (s.x_task.transpose() * &s.x_task).try_inverse().unwrap() * s.x_task.transpose() * &s.y;
        let v = fem.n();
        for k in 0..2 {
            for vv in 0..v {
                assert!((mu[k * v + vv] - ols[(k, vv)]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn zero_column_matches_single_task() {
        let fem = small_fem(5, 4);
        let mut s2 = random_sessions(&fem, 1, 20, 2, 7).remove(0);
        s2.x_task.column_mut(1).fill(0.0);
        let mut s1 = s2.clone();
        s1.x_task = s2.x_task.columns(0, 1).into_owned();
        let th = theta2();
        let th1 = Hyperparameters { kappa: vec![th.kappa[0]], tau: vec![th.tau[0]], sigma2: th.sigma2 };
        let (mu2, _) = posterior_given_theta(&th, &s2, &fem).unwrap();
        let (mu1, _) = posterior_given_theta(&th1, &s1, &fem).unwrap();
        let v = fem.n();
        for i in 0..v {
            assert!((mu1[i] - mu2[i]).abs() < 1e-10);
            assert!(mu2[v + i].abs() < 1e-12);
        }
    }

    #[test]
    fn fit_shares_theta_and_reaches_stationarity() {
        let fem = assemble_fem(&planar_grid(8, 8, 1.0).unwrap()).unwrap();
        let th = Hyperparameters { kappa: vec![0.5, 0.8], tau: vec![2.0, 4.0], sigma2: 1.0 };
        let model = SpatialModel::new(&fem, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samplers: Vec<GmrfSampler> = (0..2)
            .map(|k| GmrfSampler::new(&model.parts().precision(th.kappa[k], th.tau[k]).unwrap()).unwrap())
            .collect();
        let x = DMatrix::from_fn(60, 2, |i, k| ((i as f64) * (0.2 + 0.3 * k as f64)).sin());
        let sessions: Vec<SessionData> = (0..2)
            .map(|j| {
                let f: Vec<Vec<f64>> = samplers.iter().map(|s| s.draw(&mut rng)).collect();
                simulate_session("a", &format!("v{j}"), &x, &f, th.sigma2, &mut rng).unwrap()
            })
            .collect();
        let priors = HyperPriors::weakly_informative(2);
        let fit = fit_bayes_longitudinal(&sessions, &fem, &priors, &FitOptions::default()).unwrap();
        assert!(fit.convergence.converged, "{:?}", fit.convergence);
        assert_eq!(fit.visits.len(), 2);
        assert_ne!(fit.visits[0].mu, fit.visits[1].mu);
        let lm = log_marginal_likelihood(&fit.theta_hat, &sessions, &fem, &priors).unwrap();
        assert!((lm - fit.log_marginal).abs() < 1e-6 * lm.abs());
        // J = 1 runs and its posterior obeys the invariants
        let one = fit_bayes_longitudinal(&sessions[..1], &fem, &priors, &FitOptions::default()).unwrap();
        let (mu, q) = posterior_given_theta(&one.theta_hat, &sessions[0], &fem).unwrap();
        assert_eq!(mu, one.visits[0].mu);
        assert_eq!(dense(&q), dense(&one.visits[0].qpost));
    }

    #[test]
    fn factor_marginals_match_dense_inverse() {
        let fem = small_fem(4, 3);
        let sessions = random_sessions(&fem, 1, 15, 2, 9);
        let th = theta2();
        let model = SpatialModel::new(&fem, 2);
        let (mu, q) = model.posterior(&th, &VisitStats::from_session(&sessions[0])).unwrap();
        let f = PosteriorFactor::from_parts(model.layout().clone(), mu, &q).unwrap();
        let cov = dense(&q).try_inverse().unwrap();
        for (i, v) in f.marginal_variances().iter().enumerate() {
            assert!((v - cov[(i, i)]).abs() < 1e-10 * cov[(i, i)]);
        }
    }

    #[test]
    fn bad_inputs() {
        let fem = small_fem(4, 4);
        let sessions = random_sessions(&fem, 1, 15, 2, 10);
        let mut th = theta2();
        th.sigma2 = -1.0;
        assert!(log_marginal_likelihood(&th, &sessions, &fem, &HyperPriors::flat(2)).is_err());
        let other = small_fem(3, 3);
        assert!(log_marginal_likelihood(&theta2(), &sessions, &other, &HyperPriors::flat(2)).is_err());
        assert!(fit_bayes_longitudinal(&[], &fem, &HyperPriors::flat(2), &FitOptions::default()).is_err());
    }
}
