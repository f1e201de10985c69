//! Synthetic meshes, prior draws and multi-visit studies with known truth.

use std::fmt::Write as _;

use chrono::{Duration, NaiveDate};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sprs::CsMat;

use crate::band::{bandwidth, rcm_positions, BandCholesky, BandMatrix};
use crate::bayes::Hyperparameters;
use crate::error::{Error, Result};
use crate::longitudinal::{ClinicalVisit, Group, HAND_ITEMS, N_ITEMS};
use crate::prep::{build_task_regressors, polynomial_trends, HrfParams, SessionData, StimulusSchedule};
use crate::surface::{assemble_fem, SpdeParts, SurfaceMesh};

/// Built-in mesh fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeshFixture {
    /// Flat `nx x ny` vertex grid with the given spacing (mm).
    Grid { nx: usize, ny: usize, spacing: f64 },
    /// Warped, bumped grid whose vertex areas vary by a factor of a few.
    Curved { nx: usize, ny: usize, spacing: f64 },
}

impl MeshFixture {
    pub fn build(&self) -> Result<SurfaceMesh> {
        match *self {
            MeshFixture::Grid { nx, ny, spacing } => planar_grid(nx, ny, spacing),
            MeshFixture::Curved { nx, ny, spacing } => curved_patch(nx, ny, spacing),
        }
    }

    /// Roughly square fixture with about `v` vertices.
    pub fn grid_with_vertices(v: usize, spacing: f64) -> Self {
        let n = ((v as f64).sqrt().round() as usize).max(2);
        MeshFixture::Grid { nx: n, ny: n, spacing }
    }
}

fn grid_triangles(nx: usize, ny: usize) -> Vec<[usize; 3]> {
    let id = |i: usize, j: usize| j * nx + i;
    let mut tris = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
            // alternate the diagonal so the mesh has no preferred direction
            if (i + j) % 2 == 0 {
                tris.push([a, b, d]);
                tris.push([a, d, c]);
            } else {
                tris.push([a, b, c]);
                tris.push([b, d, c]);
            }
        }
    }
    tris
}

pub fn planar_grid(nx: usize, ny: usize, spacing: f64) -> Result<SurfaceMesh> {
    if nx < 2 || ny < 2 || !(spacing > 0.0) {
        return Err(Error::invalid("grid needs at least 2 x 2 vertices and positive spacing"));
    }
    let vertices = (0..ny).flat_map(|j| (0..nx).map(move |i| [i as f64 * spacing, j as f64 * spacing, 0.0])).collect();
    SurfaceMesh::new(vertices, grid_triangles(nx, ny), None)
}

pub fn curved_patch(nx: usize, ny: usize, spacing: f64) -> Result<SurfaceMesh> {
    if nx < 3 || ny < 3 || !(spacing > 0.0) {
        return Err(Error::invalid("curved patch needs at least 3 x 3 vertices and positive spacing"));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let warp = |i: usize, n: usize| {
        let u = i as f64 / (n - 1) as f64;
        (i as f64 + 0.3 * (n - 1) as f64 / two_pi * (two_pi * u).sin()) * spacing
    };
    let (lx, ly) = ((nx - 1) as f64 * spacing, (ny - 1) as f64 * spacing);
    let vertices = (0..ny)
        .flat_map(|j| {
            (0..nx).map(move |i| {
                let (x, y) = (warp(i, nx), warp(j, ny));
                let (dx, dy) = (x - 0.5 * lx, y - 0.5 * ly);
                let s = 0.25 * lx.min(ly);
                let z = 0.4 * s * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp() + 0.05 * (dx * dx) / lx.max(1e-12);
                [x, y, z]
            })
        })
        .collect();
    SurfaceMesh::new(vertices, grid_triangles(nx, ny), None)
}

/// Factored GMRF precision for repeated exact draws.
#[derive(Debug, Clone)]
pub struct GmrfSampler {
    pos: Vec<usize>,
    chol: BandCholesky,
}

impl GmrfSampler {
    pub fn new(q: &CsMat<f64>) -> Result<Self> {
        if q.rows() != q.cols() {
            return Err(Error::DimensionMismatch("precision must be square".into()));
        }
        let pos = rcm_positions(q);
        let mut band = BandMatrix::zeros(q.rows(), bandwidth(q, &pos));
        for (v, (i, j)) in q.iter() {
            if i >= j {
                band.add(pos[i], pos[j], *v);
            }
        }
        Ok(GmrfSampler { pos, chol: BandCholesky::factor(band)? })
    }

    pub fn dim(&self) -> usize {
        self.pos.len()
    }

    /// `x = L^-T z` in the original vertex order.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.chol.solve_upper(&mut z);
        self.pos.iter().map(|&p| z[p]).collect()
    }
}

/// One exact draw from `N(0, Q^-1)`.
pub fn sample_gmrf(q: &CsMat<f64>, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(GmrfSampler::new(q)?.draw(&mut rng))
}

/// `y = sum_k x_k beta_k' + e` with iid `N(0, sigma2)` noise, already in
/// analysis units (no intercept or nuisance columns).
pub fn simulate_session<R: Rng + ?Sized>(
    subject_id: &str,
    visit_id: &str,
    x_task: &DMatrix<f64>,
    fields: &[Vec<f64>],
    sigma2: f64,
    rng: &mut R,
) -> Result<SessionData> {
    let (t, k) = x_task.shape();
    if fields.len() != k {
        return Err(Error::DimensionMismatch(format!("{} fields for {k} task regressors", fields.len())));
    }
    let v = fields.first().map_or(0, |f| f.len());
    let beta = DMatrix::from_fn(k, v, |a, b| fields[a][b]);
    let sd = sigma2.sqrt();
    let mut y = x_task * beta;
    for e in y.iter_mut() {
        *e += sd * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(SessionData {
        subject_id: subject_id.into(),
        visit_id: visit_id.into(),
        y,
        x_task: x_task.clone(),
        nuisance: DMatrix::zeros(t, 0),
        keep_flags: vec![true; t],
        n_removed: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Constant amplitude inside the radius.
    Disk,
    /// Raised cosine falling from the centre to zero at the radius.
    Smooth,
}

/// Activation added to the first task field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    /// In-plane centre (mesh x, y).
    pub center: [f64; 2],
    pub radius: f64,
    /// Percent signal change at the centre.
    pub amplitude: f64,
    pub profile: Profile,
}

impl Activation {
    pub fn field(&self, mesh: &SurfaceMesh) -> Result<Vec<f64>> {
        if !(self.radius > 0.0) {
            return Err(Error::invalid("activation radius must be positive"));
        }
        let mut inside_mask = false;
        let f = mesh
            .vertices
            .iter()
            .zip(&mesh.mask)
            .map(|(p, &m)| {
                let d = ((p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2)).sqrt();
                if d > self.radius {
                    return 0.0;
                }
                inside_mask |= m;
                match self.profile {
                    Profile::Disk => self.amplitude,
                    Profile::Smooth => self.amplitude * 0.5 * (1.0 + (std::f64::consts::PI * d / self.radius).cos()),
                }
            })
            .collect();
        if !inside_mask {
            return Err(Error::invalid("activation region contains no in-mask vertex"));
        }
        Ok(f)
    }
}

/// Visit-to-visit scaling of the activation amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Constant,
    /// One multiplier per visit.
    PerVisit {
        multipliers: Vec<f64>,
    },
    /// `1 + gain * 4 d (1 - d)` in hand disability `d`: rises to a peak at
    /// `d = 0.5`, then falls back.
    InvertedU {
        gain: f64,
    },
}

/// Where the non-injected part of the task fields comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    None,
    /// Fresh prior draw at every visit.
    PerVisit,
    /// One prior draw per subject, repeated at each visit.
    PerSubject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthStudyConfig {
    pub mesh: MeshFixture,
    pub n_subjects: usize,
    pub visits_per_subject: usize,
    pub visit_interval_days: i64,
    pub group: Group,
    /// Prior parameters for the background fields and residual variance.
    pub theta: Hyperparameters,
    pub background: Background,
    pub activation: Option<Activation>,
    pub trajectory: Trajectory,
    pub schedule: StimulusSchedule,
    pub hrf: HrfParams,
    /// Mean raw signal.
    pub baseline: f64,
    /// Linear and quadratic drift amplitude (percent signal change).
    pub trend_amplitude: f64,
    pub spikes_per_visit: usize,
    pub seed: u64,
}

impl Default for SynthStudyConfig {
    fn default() -> Self {
        SynthStudyConfig::small(1)
    }
}

impl SynthStudyConfig {
    /// A small two-task block design on a flat patch.
    pub fn small(seed: u64) -> Self {
        SynthStudyConfig {
            mesh: MeshFixture::Grid { nx: 12, ny: 12, spacing: 2.0 },
            n_subjects: 2,
            visits_per_subject: 2,
            visit_interval_days: 90,
            group: Group::Als,
            theta: Hyperparameters { kappa: vec![0.4, 0.4], tau: vec![4.0, 16.0], sigma2: 1.0 },
            background: Background::PerVisit,
            activation: Some(Activation {
                center: [11.0, 11.0],
                radius: 8.0,
                amplitude: 2.0,
                profile: Profile::Smooth,
            }),
            trajectory: Trajectory::Constant,
            schedule: block_design(100, 2.0, 15.0),
            hrf: HrfParams::default(),
            baseline: 1000.0,
            trend_amplitude: 0.5,
            spikes_per_visit: 0,
            seed,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.theta.n_tasks()
    }

    pub fn validate(&self) -> Result<()> {
        self.theta.validate()?;
        self.schedule.validate()?;
        if self.n_tasks() != 2 {
            return Err(Error::invalid("the task design has two columns (HRF and derivative)"));
        }
        if self.n_subjects == 0 || self.visits_per_subject == 0 {
            return Err(Error::invalid("need at least one subject and one visit"));
        }
        if let Trajectory::PerVisit { multipliers } = &self.trajectory {
            if multipliers.len() != self.visits_per_subject {
                return Err(Error::DimensionMismatch(format!(
                    "{} trajectory multipliers for {} visits",
                    multipliers.len(),
                    self.visits_per_subject
                )));
            }
        }
        if !(self.baseline > 0.0) {
            return Err(Error::invalid("baseline must be positive"));
        }
        if self.spikes_per_visit * 2 > self.schedule.n_volumes {
            return Err(Error::invalid("too many spikes for the scan length"));
        }
        Ok(())
    }
}

/// Alternating on/off blocks of `block` seconds, starting with rest.
pub fn block_design(n_volumes: usize, tr: f64, block: f64) -> StimulusSchedule {
    let len = n_volumes as f64 * tr;
    let mut onsets = Vec::new();
    let mut t = block;
    while t + block <= len {
        onsets.push(t);
        t += 2.0 * block;
    }
    StimulusSchedule { durations: vec![block; onsets.len()], onsets, tr, n_volumes, n_dropped_initial: 0 }
}

#[derive(Debug, Clone)]
pub struct SynthVisit {
    pub subject_id: String,
    pub visit_id: String,
    pub day: i64,
    /// `T x V` raw signal.
    pub bold: DMatrix<f64>,
    /// True task fields (percent signal change), one per task.
    pub fields: Vec<Vec<f64>>,
    pub amplitude_multiplier: f64,
    pub spikes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SynthStudy {
    pub config: SynthStudyConfig,
    pub mesh: SurfaceMesh,
    pub visits: Vec<SynthVisit>,
    pub clinical: Vec<ClinicalVisit>,
}

fn study_epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 6).expect("valid date")
}

/// Spreads `loss` rating points over `items`, worst item first.
fn distribute(items: &mut [Option<u8>; N_ITEMS], which: &[usize], loss: u32) {
    let mut left = loss;
    for &i in which {
        let d = left.min(4);
        items[i] = Some(4 - d as u8);
        left -= d;
    }
}

/// Subject-level clinical course: hand and other losses grow linearly in
/// time from subject-specific starting points.
fn clinical_course(cfg: &SynthStudyConfig, subject: &str, rng: &mut ChaCha8Rng) -> Vec<ClinicalVisit> {
    let enrol = study_epoch();
    let other: Vec<usize> = (0..N_ITEMS).filter(|i| !HAND_ITEMS.contains(i)).collect();
    let (h0, rh, o0, ro, onset) = match cfg.group {
        Group::Als => (
            rng.random_range(0.0..7.0),
            rng.random_range(0.15..0.5),
            rng.random_range(0.0..6.0),
            rng.random_range(0.05..0.4),
            Some(enrol - Duration::days(rng.random_range(180..900))),
        ),
        Group::Hc => (0.0, 0.0, 0.0, 0.0, None),
    };
    (0..cfg.visits_per_subject)
        .map(|j| {
            let day = j as i64 * cfg.visit_interval_days;
            let months = day as f64 / 30.4375;
            let mut items = [Some(4u8); N_ITEMS];
            let hand = (h0 + rh * months).round().clamp(0.0, 12.0) as u32;
            let oth = (o0 + ro * months).round().clamp(0.0, 36.0) as u32;
            distribute(&mut items, &HAND_ITEMS, hand);
            distribute(&mut items, &other, oth);
            ClinicalVisit {
                subject_id: subject.to_string(),
                visit_id: format!("v{}", j + 1),
                group: cfg.group,
                visit_date: enrol + Duration::days(day),
                onset_date: onset,
                enrollment_date: enrol,
                items,
            }
        })
        .collect()
}

/// Simulates every subject and visit; subject `i` draws from its own stream
/// of a generator keyed by the master seed.
pub fn generate_study(cfg: &SynthStudyConfig) -> Result<SynthStudy> {
    cfg.validate()?;
    let mesh = cfg.mesh.build()?;
    let fem = assemble_fem(&mesh)?;
    if fem.n() != mesh.n_vertices() {
        return Err(Error::invalid("synthetic meshes must be fully in-mask"));
    }
    let parts = SpdeParts::new(&fem);
    let samplers = (0..cfg.n_tasks())
        .map(|k| GmrfSampler::new(&parts.precision(cfg.theta.kappa[k], cfg.theta.tau[k])?))
        .collect::<Result<Vec<_>>>()?;
    let injected = match &cfg.activation {
        Some(a) => a.field(&mesh)?,
        None => vec![0.0; mesh.n_vertices()],
    };
    let x = build_task_regressors(&cfg.schedule, &cfg.hrf)?;
    let t = cfg.schedule.n_volumes;
    let v = mesh.n_vertices();
    let trends = polynomial_trends(t);
    let sd = cfg.theta.sigma2.sqrt();

    let mut visits = Vec::new();
    let mut clinical = Vec::new();
    for i in 0..cfg.n_subjects {
        let subject = format!("{}{:02}", if cfg.group == Group::Als { "A" } else { "H" }, i + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let course = clinical_course(cfg, &subject, &mut rng);
        let per_subject: Vec<Vec<f64>> = samplers.iter().map(|s| s.draw(&mut rng)).collect();
        let baseline: Vec<f64> = (0..v).map(|_| cfg.baseline * rng.random_range(0.8..1.2)).collect();
        for (j, cv) in course.iter().enumerate() {
            let mult = match &cfg.trajectory {
                Trajectory::Constant => 1.0,
                Trajectory::PerVisit { multipliers } => multipliers[j],
                Trajectory::InvertedU { gain } => {
                    let d = crate::longitudinal::disability_scores(cv)?.hand;
                    1.0 + gain * 4.0 * d * (1.0 - d)
                }
            };
            let mut fields: Vec<Vec<f64>> = match cfg.background {
                Background::None => vec![vec![0.0; v]; cfg.n_tasks()],
                Background::PerSubject => per_subject.clone(),
                Background::PerVisit => samplers.iter().map(|s| s.draw(&mut rng)).collect(),
            };
            for (f, a) in fields[0].iter_mut().zip(&injected) {
                *f += mult * a;
            }
            let beta = DMatrix::from_fn(cfg.n_tasks(), v, |k, u| fields[k][u]);
            let mut psc = &x * beta;
            let (c1, c2): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            for u in 0..v {
                for r in 0..t {
                    psc[(r, u)] += cfg.trend_amplitude * (c1 * trends[(r, 0)] + c2 * trends[(r, 1)])
                        + sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let mut spikes = Vec::new();
            while spikes.len() < cfg.spikes_per_visit {
                let s = rng.random_range(0..t);
                if !spikes.contains(&s) {
                    spikes.push(s);
                }
            }
            spikes.sort_unstable();
            for u in 0..v {
                let col = psc.column(u);
                let m = col.mean();
                let col_sd = (col.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (t - 1) as f64).sqrt();
                for &s in &spikes {
                    psc[(s, u)] += 10.0 * col_sd;
                }
            }
            let bold = DMatrix::from_fn(t, v, |r, u| baseline[u] * (1.0 + psc[(r, u)] / 100.0));
            visits.push(SynthVisit {
                subject_id: subject.clone(),
                visit_id: cv.visit_id.clone(),
                day: (cv.visit_date - cv.enrollment_date).num_days(),
                bold,
                fields,
                amplitude_multiplier: mult,
                spikes,
            });
        }
        clinical.extend(course);
    }
    Ok(SynthStudy { config: cfg.clone(), mesh, visits, clinical })
}

impl SynthStudy {
    /// Plain-text record of the generating truth.
    pub fn truth_sidecar(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", c.seed);
        let _ = writeln!(s, "kappa = {:?}", c.theta.kappa);
        let _ = writeln!(s, "tau = {:?}", c.theta.tau);
        let _ = writeln!(s, "sigma2 = {}", c.theta.sigma2);
        let _ = writeln!(s, "n_vertices = {}", self.mesh.n_vertices());
        let _ = writeln!(s, "subject,visit,day,amplitude_multiplier,spikes");
        for v in &self.visits {
            let spikes: Vec<String> = v.spikes.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                v.subject_id,
                v.visit_id,
                v.day,
                v.amplitude_multiplier,
                spikes.join(" ")
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::{assemble_fem, spde_precision};

    #[test]
    fn grid_fixture_area() {
        let m = planar_grid(5, 4, 2.0).unwrap();
        assert_eq!(m.n_vertices(), 20);
        assert_eq!(m.triangles.len(), 24);
        assert!((m.total_area() - 8.0 * 6.0).abs() < 1e-12);
        m.check_manifold().unwrap();
    }

    #[test]
    fn curved_fixture_has_varied_areas() {
        let m = curved_patch(15, 15, 2.0).unwrap();
        let fem = assemble_fem(&m).unwrap();
        let interior: Vec<f64> = (0..15 * 15)
            .filter(|v| {
                let (i, j) = (v % 15, v / 15);
                i > 0 && j > 0 && i < 14 && j < 14
            })
            .map(|v| fem.vertex_areas[v])
            .collect();
        let (lo, hi) = interior.iter().fold((f64::MAX, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(hi / lo > 2.0, "area ratio {}", hi / lo);
    }

    #[test]
    fn gmrf_variance_matches_inverse() {
        let m = planar_grid(5, 4, 1.0).unwrap();
        let fem = assemble_fem(&m).unwrap();
        let q = spde_precision(&fem, 0.8, 0.5).unwrap().q;
        let dense_inv = q.to_dense();
        let qd = DMatrix::from_fn(20, 20, |i, j| dense_inv[[i, j]]);
        let cov = qd.try_inverse().unwrap();
        let s = GmrfSampler::new(&q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| s.draw(&mut rng)).collect();
        for v in [0, 7, 19] {
            let var = draws.iter().map(|d| d[v] * d[v]).sum::<f64>() / n as f64;
            assert!((var / cov[(v, v)] - 1.0).abs() < 0.05, "vertex {v}: {var} vs {}", cov[(v, v)]);
        }
        // quadrupling tau halves the sd
        let q4 = spde_precision(&fem, 0.8, 2.0).unwrap().q;
        let s4 = GmrfSampler::new(&q4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let var4 = (0..n).map(|_| s4.draw(&mut rng)[7].powi(2)).sum::<f64>() / n as f64;
        assert!(((var4 / cov[(7, 7)]).sqrt() - 0.5).abs() < 0.5 * 0.05);
    }

    #[test]
    fn gmrf_seed_is_reproducible() {
        let fem = assemble_fem(&planar_grid(6, 6, 1.0).unwrap()).unwrap();
        let q = spde_precision(&fem, 1.0, 1.0).unwrap().q;
        assert_eq!(sample_gmrf(&q, 9).unwrap(), sample_gmrf(&q, 9).unwrap());
        assert_ne!(sample_gmrf(&q, 9).unwrap(), sample_gmrf(&q, 10).unwrap());
    }

    #[test]
    fn pure_noise_has_unit_variance() {
        let mut cfg = SynthStudyConfig::small(1);
        cfg.activation = None;
        cfg.background = Background::None;
        cfg.trend_amplitude = 0.0;
        cfg.schedule = block_design(150, 2.0, 15.0);
        cfg.n_subjects = 1;
        cfg.visits_per_subject = 1;
        let st = generate_study(&cfg).unwrap();
        let psc = crate::prep::to_percent_signal_change(&st.visits[0].bold).unwrap();
        let mut vars: Vec<f64> = (0..psc.ncols())
            .map(|u| {
                let c = psc.column(u);
                let m = c.mean();
                c.iter().map(|y| (y - m).powi(2)).sum::<f64>() / 149.0
            })
            .collect();
        let mean_var = vars.iter().sum::<f64>() / vars.len() as f64;
        assert!((mean_var - 1.0).abs() < 0.1, "{mean_var}");
        vars.sort_by(f64::total_cmp);
        assert!((vars[vars.len() / 2] - 1.0).abs() < 0.1);
    }

    #[test]
    fn injected_disk_is_recovered_by_ols() {
        let mut cfg = SynthStudyConfig::small(2);
        cfg.background = Background::None;
        cfg.n_subjects = 1;
        cfg.visits_per_subject = 1;
        cfg.schedule = block_design(150, 2.0, 15.0);
        cfg.activation = Some(Activation { center: [11.0, 11.0], radius: 6.0, amplitude: 2.0, profile: Profile::Disk });
        let st = generate_study(&cfg).unwrap();
        let prep = crate::prep::prepare_session(
            "a",
            "v",
            &st.visits[0].bold,
            &cfg.schedule,
            Some(&polynomial_trends(150)),
            &Default::default(),
        )
        .unwrap();
        let fit = crate::classical::fit_classical(&prep.session, Default::default()).unwrap();
        let inside: Vec<usize> = (0..st.mesh.n_vertices()).filter(|&u| st.visits[0].fields[0][u] > 0.0).collect();
        let mean_beta = inside.iter().map(|&u| fit.beta_hat[(u, 0)]).sum::<f64>() / inside.len() as f64;
        let se =
            inside.iter().map(|&u| fit.se[(u, 0)]).sum::<f64>() / inside.len() as f64 / (inside.len() as f64).sqrt();
        assert!((mean_beta - 2.0).abs() < 3.0 * se + 0.03, "{mean_beta} (se {se})");
    }

    #[test]
    fn trajectory_and_determinism() {
        let mut cfg = SynthStudyConfig::small(3);
        cfg.visits_per_subject = 6;
        cfg.n_subjects = 1;
        cfg.trajectory = Trajectory::PerVisit { multipliers: vec![0.5, 1.0, 1.5, 1.5, 1.0, 0.5] };
        cfg.spikes_per_visit = 3;
        let a = generate_study(&cfg).unwrap();
        let peaks: Vec<f64> = a.visits.iter().map(|v| v.amplitude_multiplier).collect();
        assert_eq!(peaks, vec![0.5, 1.0, 1.5, 1.5, 1.0, 0.5]);
        let b = generate_study(&cfg).unwrap();
        assert_eq!(a.visits[3].bold, b.visits[3].bold);
        assert_eq!(a.truth_sidecar(), b.truth_sidecar());
        assert_eq!(a.clinical, b.clinical);
        assert!(a.visits.iter().all(|v| v.spikes.len() == 3));
        let mut bad = cfg.clone();
        bad.activation.as_mut().unwrap().center = [500.0, 500.0];
        assert!(generate_study(&bad).is_err());
    }
}
