//! In-memory analysis of one subject: preprocessing, the pooled spatial
//! fit, excursion sets and the classical maps, reduced to area records.

use nalgebra::DMatrix;

use crate::bayes::{fit_bayes_longitudinal, FitOptions, HyperPriors, PosteriorFit};
use crate::classical::{bh_fdr, bonferroni, fit_classical, Sidedness};
use crate::error::{Error, Result};
use crate::excursions::{excursion_sets, ExcursionOptions, ExcursionResult};
use crate::prep::{polynomial_trends, prepare_session, PrepOptions, PreparedSession, SessionData, StimulusSchedule};
use crate::summary::{activation_area, ActivationRecord, Method};
use crate::surface::FemMatrices;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AnalysisOptions {
    pub prep: PrepOptions,
    /// Add linear and quadratic drift to the nuisance regressors.
    pub detrend: bool,
    pub fit: FitOptions,
    /// Hyperpriors; weakly informative when absent.
    pub priors: Option<HyperPriors>,
    pub excursion: ExcursionOptions,
    /// Effect sizes in percent signal change.
    pub gammas: Vec<f64>,
    pub alpha: f64,
    /// Design column whose field is thresholded.
    pub task: usize,
    pub hemisphere: String,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            prep: PrepOptions::default(),
            detrend: true,
            fit: FitOptions::default(),
            priors: None,
            excursion: ExcursionOptions::default(),
            gammas: vec![0.0, 1.0, 2.0],
            alpha: 0.05,
            task: 0,
            hemisphere: "lh".into(),
        }
    }
}

impl AnalysisOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.gammas.is_empty() || self.gammas.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::invalid("gammas must be a non-empty list of non-negative values"));
        }
        Ok(())
    }
}

/// Restricts a `T x V_mesh` matrix to the analysis vertices; matrices that
/// already have one column per analysis vertex pass through.
pub fn restrict_to_mask(y: &DMatrix<f64>, fem: &FemMatrices) -> Result<DMatrix<f64>> {
    if y.ncols() == fem.n() {
        return Ok(y.clone());
    }
    match fem.vertex_index.iter().max() {
        Some(&m) if m < y.ncols() => Ok(y.select_columns(&fem.vertex_index)),
        _ => Err(Error::DimensionMismatch(format!(
            "BOLD has {} columns, mesh analysis set has {} vertices",
            y.ncols(),
            fem.n()
        ))),
    }
}

/// Preprocesses one visit. With `detrend` the drift columns are appended to
/// any supplied nuisance regressors.
pub fn prepare_visit(
    subject_id: &str,
    visit_id: &str,
    bold: &DMatrix<f64>,
    schedule: &StimulusSchedule,
    nuisance: Option<&DMatrix<f64>>,
    fem: &FemMatrices,
    opts: &AnalysisOptions,
) -> Result<PreparedSession> {
    let y = restrict_to_mask(bold, fem)?;
    let t = y.nrows();
    let mut n = nuisance.cloned().unwrap_or_else(|| DMatrix::zeros(t, 0));
    if n.nrows() != t {
        return Err(Error::DimensionMismatch(format!("nuisance has {} rows, BOLD has {t} volumes", n.nrows())));
    }
    if opts.detrend {
        let tr = polynomial_trends(t);
        let c = n.ncols();
        n = n.resize_horizontally(c + tr.ncols(), 0.0);
        n.columns_mut(c, tr.ncols()).copy_from(&tr);
    }
    prepare_session(subject_id, visit_id, &y, schedule, Some(&n), &opts.prep)
}

#[derive(Debug, Clone)]
pub struct SubjectAnalysis {
    pub fit: PosteriorFit,
    /// Per visit, one result per gamma in the order given.
    pub excursions: Vec<Vec<ExcursionResult>>,
    pub records: Vec<ActivationRecord>,
}

/// Fits all visits of one subject jointly.
pub fn fit_subject(sessions: &[SessionData], fem: &FemMatrices, opts: &AnalysisOptions) -> Result<PosteriorFit> {
    opts.validate()?;
    let k = sessions.first().map_or(0, |s| s.n_tasks());
    let priors = opts.priors.clone().unwrap_or_else(|| HyperPriors::weakly_informative(k));
    fit_bayes_longitudinal(sessions, fem, &priors, &opts.fit)
}

/// Excursion sets at every gamma plus one-sided Bonferroni and FDR maps,
/// reduced to area records.
pub fn activation_maps(
    fit: &PosteriorFit,
    sessions: &[SessionData],
    fem: &FemMatrices,
    opts: &AnalysisOptions,
) -> Result<(Vec<Vec<ExcursionResult>>, Vec<ActivationRecord>)> {
    opts.validate()?;
    if sessions.len() != fit.visits.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} sessions for {} fitted visits",
            sessions.len(),
            fit.visits.len()
        )));
    }
    let mut excursions = Vec::with_capacity(sessions.len());
    let mut records = Vec::new();
    let record = |s: &SessionData, method, gamma, area| ActivationRecord {
        subject_id: s.subject_id.clone(),
        visit_id: s.visit_id.clone(),
        method,
        gamma,
        hemisphere: opts.hemisphere.clone(),
        area,
    };
    for (j, s) in sessions.iter().enumerate() {
        let ex = excursion_sets(fit, j, opts.task, &opts.gammas, opts.alpha, &opts.excursion)?;
        for e in &ex {
            records.push(record(s, Method::Bayes, e.gamma, activation_area(&e.active, &fem.vertex_areas)?));
        }
        let cl = fit_classical(s, Sidedness::Positive)?;
        for (method, map) in [
            (Method::ClassicalBonferroni, bonferroni(&cl.pvals, opts.alpha)?),
            (Method::ClassicalFdr, bh_fdr(&cl.pvals, opts.alpha)?),
        ] {
            records.push(record(s, method, 0.0, activation_area(&map, &fem.vertex_areas)?));
        }
        excursions.push(ex);
    }
    Ok((excursions, records))
}

pub fn analyze_subject(sessions: &[SessionData], fem: &FemMatrices, opts: &AnalysisOptions) -> Result<SubjectAnalysis> {
    let fit = fit_subject(sessions, fem, opts)?;
    let (excursions, records) = activation_maps(&fit, sessions, fem, opts)?;
    Ok(SubjectAnalysis { fit, excursions, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::assemble_fem;
    use crate::synth::{generate_study, SynthStudyConfig};

    #[test]
    fn small_study_end_to_end() {
        let mut cfg = SynthStudyConfig::small(4);
        cfg.n_subjects = 1;
        let study = generate_study(&cfg).unwrap();
        let fem = assemble_fem(&study.mesh).unwrap();
        let opts = AnalysisOptions { excursion: ExcursionOptions { n_samples: 1000, seed: 2 }, ..Default::default() };
        let sessions: Vec<_> = study
            .visits
            .iter()
            .map(|v| {
                prepare_visit(&v.subject_id, &v.visit_id, &v.bold, &cfg.schedule, None, &fem, &opts).unwrap().session
            })
            .collect();
        let a = analyze_subject(&sessions, &fem, &opts).unwrap();
        assert_eq!(a.records.len(), 2 * (3 + 2));
        for ex in &a.excursions {
            for w in ex.windows(2) {
                assert!(w[1].active.iter().zip(&w[0].active).all(|(hi, lo)| !hi || *lo));
            }
        }
        let total = fem.total_area();
        assert!(a.records.iter().all(|r| r.area >= 0.0 && r.area <= total + 1e-9));
        assert!(a.records.iter().any(|r| r.method == Method::Bayes && r.gamma == 0.0 && r.area > 0.0));
    }

    #[test]
    fn rejects_bad_options_and_widths() {
        let opts = AnalysisOptions { alpha: 1.5, ..AnalysisOptions::default() };
        assert!(opts.validate().is_err());
        let fem = assemble_fem(&crate::synth::planar_grid(3, 3, 1.0).unwrap()).unwrap();
        assert!(restrict_to_mask(&DMatrix::zeros(5, 4), &fem).is_err());
    }
}
