//! Pipeline stages. Each stage owns one directory under the output
//! directory and finishes by writing its manifest there.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use sbglm::excursions::{comparison_csv, ComparisonRow};
use sbglm::io::{read_fit, read_fit_header, read_matrix_csv, read_session, write_excursion, write_fit};
use sbglm::longitudinal::{
    aic, assemble_lmm_data, clinical_from_csv, coefficient_curve, curve_csv, fit_lmm, lrt, progression_rate, quantile,
    windowing, ClinicalVisit, Group, LmmFit, ModelSpec, HAND, OTHER, TOTAL,
};
use sbglm::pipeline::{activation_maps, fit_subject, prepare_visit};
use sbglm::summary::{records_from_csv, records_to_csv, reliability_stats, ActivationRecord, Method};
use sbglm::surface::{assemble_fem, load_mesh, FemMatrices};
use sbglm::synth::generate_study;

use crate::config::PipelineConfig;
use crate::dataset::{read_schedule, read_sessions, write_study, SessionEntry};
use crate::error::{CliError, CliResult, Context};
use crate::manifest::{checksum_all, config_hash, sha256_file, verify_recorded, Manifest, MANIFEST_FILE};

pub const STAGES: [&str; 5] = ["prep", "fit", "excur", "summarize", "lmm"];
const SIMULATE_MANIFEST: &str = "simulate.manifest.json";
const PREP_INDEX: &str = "sessions.csv";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Status {
    Ran,
    UpToDate,
}

/// Row of the prep stage's session index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepRow {
    pub subject: String,
    pub visit: String,
    pub stem: String,
    pub n_volumes: usize,
    pub n_kept: usize,
    pub fraction_flagged: f64,
    pub n_components: usize,
    pub excluded: bool,
}

pub struct Runner {
    pub cfg: PipelineConfig,
    pub force: bool,
    pool: ThreadPool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

fn write_text(path: &Path, text: &str) -> CliResult<PathBuf> {
    std::fs::write(path, text).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<PathBuf> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Files directly inside `dir`, sorted.
fn list_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Runs `f` over `items` on the pool; results keep input order and the
/// first failure in input order is reported.
fn par_map<T: Sync, R: Send>(
    pool: &ThreadPool,
    items: &[T],
    f: impl Fn(&T) -> CliResult<R> + Sync + Send,
) -> CliResult<Vec<R>> {
    pool.install(|| items.par_iter().map(f).collect::<Vec<_>>()).into_iter().collect()
}

/// Subjects in order of first appearance with their non-excluded stems.
fn subjects_of(rows: &[PrepRow]) -> Vec<(String, Vec<PrepRow>)> {
    let mut out: Vec<(String, Vec<PrepRow>)> = Vec::new();
    for r in rows.iter().filter(|r| !r.excluded) {
        match out.iter_mut().find(|(s, _)| *s == r.subject) {
            Some((_, v)) => v.push(r.clone()),
            None => out.push((r.subject.clone(), vec![r.clone()])),
        }
    }
    out
}

fn gamma_tag(gamma: f64) -> String {
    format!("g{gamma}")
}

impl Runner {
    pub fn new(cfg: PipelineConfig, force: bool) -> CliResult<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| CliError::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
        Ok(Runner { cfg, force, pool })
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.cfg.output_dir.join(stage)
    }

    fn seed(&self) -> u64 {
        self.cfg.analysis.excursion.seed
    }

    /// Writes the resolved configuration unless an identical copy exists.
    pub fn echo_config(&self) -> CliResult<()> {
        let dir = &self.cfg.output_dir;
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("config.resolved.json");
        let text = self.cfg.to_json();
        if std::fs::read_to_string(&path).ok().as_deref() != Some(text.as_str()) {
            write_text(&path, &text)?;
        }
        Ok(())
    }

    /// Loads a finished stage's manifest and checks that neither what it
    /// read nor what it wrote has changed since.
    fn require_current(&self, stage: &str) -> CliResult<Manifest> {
        let path = self.stage_dir(stage).join(MANIFEST_FILE);
        let m = Manifest::read(&path).ok_or_else(|| {
            CliError::Data(format!("stage {stage} has not completed (no manifest at {})", path.display()))
        })?;
        verify_recorded(&m.inputs, stage)?;
        verify_recorded(&m.outputs, stage)?;
        Ok(m)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_stage(
        &self,
        name: &str,
        manifest_path: &Path,
        clean_dir: Option<&Path>,
        seed: u64,
        hash: String,
        inputs: &[PathBuf],
        body: impl FnOnce(&mut Manifest) -> CliResult<Vec<PathBuf>>,
    ) -> CliResult<Status> {
        let inner = || -> CliResult<Status> {
            let now = checksum_all(inputs)?;
            let previous = Manifest::read(manifest_path);
            if !self.force {
                if let Some(m) = &previous {
                    if m.stage == name && m.is_current(&hash, &now) {
                        info!("{name}: up to date");
                        return Ok(Status::UpToDate);
                    }
                }
            }
            match clean_dir {
                Some(d) if d.exists() => std::fs::remove_dir_all(d).map_err(io_err(d))?,
                Some(_) => {}
                None => {
                    for p in previous.iter().flat_map(|m| m.outputs.keys()) {
                        let _ = std::fs::remove_file(p);
                    }
                    let _ = std::fs::remove_file(manifest_path);
                }
            }
            if let Some(d) = manifest_path.parent() {
                std::fs::create_dir_all(d).map_err(io_err(d))?;
            }
            info!("{name}: running");
            let t0 = Instant::now();
            let mut m = Manifest::new(name, seed, self.cfg.workers, hash);
            m.inputs = now;
            let outputs = body(&mut m)?;
            m.hash_outputs(&outputs)?;
            m.timings.insert("total".into(), t0.elapsed().as_secs_f64());
            m.write(manifest_path)?;
            info!("{name}: done in {:.2} s", t0.elapsed().as_secs_f64());
            Ok(Status::Ran)
        };
        inner().map_err(|e| e.context(name))
    }

    fn fem(&self) -> CliResult<FemMatrices> {
        let mesh = load_mesh(&self.cfg.mesh)?;
        assemble_fem(&mesh).ctx(self.cfg.mesh.display())
    }

    pub fn simulate(&self) -> CliResult<Status> {
        let sim = &self.cfg.simulate;
        if let Err(e) = sim.validate() {
            return Err(CliError::Config(format!("simulate: {e}")));
        }
        let dir = self.cfg.data_dir.clone();
        let mpath = dir.join(SIMULATE_MANIFEST);
        self.run_stage("simulate", &mpath, None, sim.seed, config_hash(sim), &[], |_| {
            let study = generate_study(sim)?;
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            write_study(&study, &dir)
        })
    }

    pub fn prep(&self) -> CliResult<Status> {
        let entries = read_sessions(&self.cfg.sessions).ctx("prep")?;
        let mut inputs: BTreeSet<PathBuf> = [self.cfg.mesh.clone(), self.cfg.sessions.clone()].into();
        inputs.extend(entries.iter().flat_map(SessionEntry::files));
        let inputs: Vec<PathBuf> = inputs.into_iter().collect();
        let a = &self.cfg.analysis;
        let hash = config_hash(&(&a.prep, a.detrend));
        let dir = self.stage_dir("prep");
        self.run_stage("prep", &dir.join(MANIFEST_FILE), Some(&dir), self.seed(), hash, &inputs, |m| {
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let fem = self.fem()?;
            let done = par_map(&self.pool, &entries, |e| self.prep_one(e, &fem, &dir))?;
            let mut outputs = Vec::new();
            let mut rows = Vec::new();
            for (row, files) in done {
                if row.excluded {
                    warn!("prep: session {}/{} excluded by scrubbing", row.subject, row.visit);
                }
                outputs.extend(files);
                rows.push(row);
            }
            let n_excluded = rows.iter().filter(|r| r.excluded).count();
            m.notes.insert("sessions".into(), rows.len().to_string());
            m.notes.insert("excluded".into(), n_excluded.to_string());
            outputs.push(write_csv_rows(&dir.join(PREP_INDEX), &rows)?);
            Ok(outputs)
        })
    }

    fn prep_one(&self, e: &SessionEntry, fem: &FemMatrices, dir: &Path) -> CliResult<(PrepRow, Vec<PathBuf>)> {
        let label = format!("session {}/{}", e.subject, e.visit);
        let bold = sbglm::io::read_bold(&e.bold).map_err(|err| {
            let sum = sha256_file(&e.bold).unwrap_or_else(|_| "unavailable".into());
            CliError::from(err).context(format!("{label}: BOLD {} (sha256 {sum})", e.bold.display()))
        })?;
        let schedule = read_schedule(&e.schedule)?;
        let nuisance = match &e.nuisance {
            Some(p) => Some(read_matrix_csv(p)?),
            None => None,
        };
        let prepared =
            prepare_visit(&e.subject, &e.visit, &bold, &schedule, nuisance.as_ref(), fem, &self.cfg.analysis)
                .ctx(&label)?;
        let stem = e.stem();
        let mut files = vec![write_text(&dir.join(format!("{stem}.scrub.csv")), &prepared.scrub.to_csv())?];
        let excluded = prepared.scrub.session_excluded;
        if !excluded {
            files.extend(sbglm::io::write_session(dir, &stem, &prepared.session)?);
        }
        let row = PrepRow {
            subject: e.subject.clone(),
            visit: e.visit.clone(),
            stem,
            n_volumes: bold.nrows(),
            n_kept: prepared.session.n_kept(),
            fraction_flagged: prepared.scrub.fraction_flagged,
            n_components: prepared.scrub.n_components,
            excluded,
        };
        Ok((row, files))
    }

    fn prep_rows(&self) -> CliResult<Vec<PrepRow>> {
        read_csv_rows(&self.stage_dir("prep").join(PREP_INDEX))
    }

    pub fn fit(&self) -> CliResult<Status> {
        let prep = self.require_current("prep").ctx("fit")?;
        let mut inputs: Vec<PathBuf> = prep.outputs.keys().cloned().collect();
        inputs.push(self.cfg.mesh.clone());
        let a = &self.cfg.analysis;
        let hash = config_hash(&(&a.fit, &a.priors));
        let dir = self.stage_dir("fit");
        self.run_stage("fit", &dir.join(MANIFEST_FILE), Some(&dir), self.seed(), hash, &inputs, |m| {
            let fem = self.fem()?;
            let mesh_sum = sha256_file(&self.cfg.mesh)?;
            let subjects = subjects_of(&self.prep_rows()?);
            let prep_dir = self.stage_dir("prep");
            let done = par_map(&self.pool, &subjects, |(subject, rows)| {
                let t0 = Instant::now();
                let sessions = rows.iter().map(|r| read_session(&prep_dir, &r.stem)).collect::<Result<Vec<_>, _>>()?;
                let fit = fit_subject(&sessions, &fem, &self.cfg.analysis).ctx(format!("subject {subject}"))?;
                let out = dir.join(subject);
                write_fit(&out, &fit, &mesh_sum)?;
                Ok((subject.clone(), t0.elapsed().as_secs_f64(), fit.convergence, list_files(&out)?))
            })?;
            let mut outputs = Vec::new();
            for (subject, secs, conv, files) in done {
                if !conv.converged {
                    warn!("fit: subject {subject} did not converge: {}", conv.message);
                }
                m.timings.insert(subject.clone(), secs);
                m.notes.insert(format!("{subject}.converged"), conv.converged.to_string());
                outputs.extend(files);
            }
            Ok(outputs)
        })
    }

    pub fn excur(&self) -> CliResult<Status> {
        let prep = self.require_current("prep").ctx("excur")?;
        let fit = self.require_current("fit").ctx("excur")?;
        let inputs: BTreeSet<PathBuf> = prep.outputs.keys().chain(fit.outputs.keys()).cloned().collect();
        let inputs: Vec<PathBuf> = inputs.into_iter().chain([self.cfg.mesh.clone()]).collect();
        let a = &self.cfg.analysis;
        let hash = config_hash(&(&a.excursion, &a.gammas, a.alpha, a.task, &a.hemisphere));
        let dir = self.stage_dir("excur");
        self.run_stage("excur", &dir.join(MANIFEST_FILE), Some(&dir), self.seed(), hash, &inputs, |m| {
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let fem = self.fem()?;
            let mesh_sum = sha256_file(&self.cfg.mesh)?;
            let subjects = subjects_of(&self.prep_rows()?);
            let prep_dir = self.stage_dir("prep");
            let done = par_map(&self.pool, &subjects, |(subject, rows)| {
                let t0 = Instant::now();
                let fit_dir = self.stage_dir("fit").join(subject);
                let (fit, sum) = read_fit(&fit_dir)?;
                if sum != mesh_sum {
                    return Err(CliError::Data(format!(
                        "{} was fitted on a mesh with sha256 {sum}, current mesh {} has {mesh_sum}",
                        fit_dir.display(),
                        self.cfg.mesh.display()
                    )));
                }
                let sessions = rows.iter().map(|r| read_session(&prep_dir, &r.stem)).collect::<Result<Vec<_>, _>>()?;
                let (maps, records) =
                    activation_maps(&fit, &sessions, &fem, &self.cfg.analysis).ctx(format!("subject {subject}"))?;
                let mut files = Vec::new();
                let mut warnings = Vec::new();
                for (row, per_gamma) in rows.iter().zip(&maps) {
                    for r in per_gamma {
                        let p = dir.join(format!("{}_{}.exc", row.stem, gamma_tag(r.gamma)));
                        write_excursion(&p, r)?;
                        files.push(p.clone());
                        files.push(p.with_extension("txt"));
                        if let Some(w) = &r.warning {
                            warnings.push(format!("{} {}: {w}", row.stem, gamma_tag(r.gamma)));
                        }
                    }
                }
                let rec = dir.join(format!("{subject}.records.csv"));
                files.push(write_text(&rec, &records_to_csv(&records)?)?);
                Ok((subject.clone(), t0.elapsed().as_secs_f64(), files, warnings))
            })?;
            let mut outputs = Vec::new();
            for (subject, secs, files, warnings) in done {
                for w in warnings {
                    warn!("excur: {w}");
                }
                m.timings.insert(subject, secs);
                outputs.extend(files);
            }
            Ok(outputs)
        })
    }

    fn records_files(excur: &Manifest) -> Vec<PathBuf> {
        excur.outputs.keys().filter(|p| p.to_string_lossy().ends_with(".records.csv")).cloned().collect()
    }

    pub fn summarize(&self) -> CliResult<Status> {
        let excur = self.require_current("excur").ctx("summarize")?;
        let prep_index = self.stage_dir("prep").join(PREP_INDEX);
        let mut inputs = Self::records_files(&excur);
        inputs.push(prep_index);
        let dir = self.stage_dir("summarize");
        let hash = config_hash(&"summarize");
        self.run_stage("summarize", &dir.join(MANIFEST_FILE), Some(&dir), self.seed(), hash, &inputs, |_| {
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let subjects = subjects_of(&self.prep_rows()?);
            let mut records: Vec<ActivationRecord> = Vec::new();
            for (subject, _) in &subjects {
                let p = self.stage_dir("excur").join(format!("{subject}.records.csv"));
                records.extend(records_from_csv(&read_text(&p)?).ctx(p.display())?);
            }
            let report = reliability_stats(&records);
            let comparison = comparison_rows(&records);
            Ok(vec![
                write_text(&dir.join("activation.csv"), &records_to_csv(&records)?)?,
                write_text(&dir.join("reliability_subjects.csv"), &report.subjects_csv())?,
                write_text(&dir.join("reliability_conditions.csv"), &report.conditions_csv())?,
                write_text(&dir.join("comparison.csv"), &comparison_csv(&comparison))?,
            ])
        })
    }

    pub fn lmm(&self) -> CliResult<Status> {
        self.require_current("summarize").ctx("lmm")?;
        let activation = self.stage_dir("summarize").join("activation.csv");
        let mut inputs = vec![activation.clone()];
        if self.cfg.lmm.enabled {
            inputs.push(self.cfg.clinical.clone());
        }
        let dir = self.stage_dir("lmm");
        let hash = config_hash(&self.cfg.lmm);
        self.run_stage("lmm", &dir.join(MANIFEST_FILE), Some(&dir), self.seed(), hash, &inputs, |m| {
            std::fs::create_dir_all(dir.join("curves")).map_err(io_err(&dir))?;
            if !self.cfg.lmm.enabled {
                m.notes.insert("disabled".into(), "true".into());
                return Ok(Vec::new());
            }
            let records = records_from_csv(&read_text(&activation)?).ctx(activation.display())?;
            let clinical = clinical_from_csv(&read_text(&self.cfg.clinical)?).ctx(self.cfg.clinical.display())?;
            let out = lmm_tables(&self.cfg, &records, &clinical, &dir)?;
            m.notes.insert("models_fitted".into(), out.fitted.to_string());
            m.notes.insert("models_skipped".into(), out.skipped.to_string());
            Ok(out.files)
        })
    }

    /// Plain acceptance report over the finished stages.
    pub fn report(&self) -> CliResult<(PathBuf, Vec<ReportRow>)> {
        let rows = build_report(self).ctx("report")?;
        let path = self.cfg.output_dir.join("report.csv");
        write_csv_rows(&path, &rows)?;
        Ok((path, rows))
    }
}

/// Bayesian area at gamma 0 beside the classical maps, per visit.
fn comparison_rows(records: &[ActivationRecord]) -> Vec<ComparisonRow> {
    type VisitAreas = ((String, String), [Option<f64>; 3]);
    let mut by_visit: Vec<VisitAreas> = Vec::new();
    for r in records {
        let key = (r.subject_id.clone(), r.visit_id.clone());
        let slot = match (r.method, r.gamma == 0.0) {
            (Method::Bayes, true) => 0,
            (Method::ClassicalBonferroni, _) => 1,
            (Method::ClassicalFdr, _) => 2,
            _ => continue,
        };
        match by_visit.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v[slot] = Some(r.area),
            None => {
                let mut v = [None; 3];
                v[slot] = Some(r.area);
                by_visit.push((key, v));
            }
        }
    }
    by_visit
        .into_iter()
        .filter_map(|((s, v), a)| {
            Some(ComparisonRow {
                subject_id: s,
                visit_id: v,
                bayes_area: a[0]?,
                bonferroni_area: a[1]?,
                fdr_area: a[2]?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct ModelRow {
    condition: String,
    group: String,
    model: String,
    status: String,
    n_obs: usize,
    n_subjects: usize,
    n_fixed: Option<usize>,
    dropped: String,
    loglik: Option<f64>,
    reml_loglik: Option<f64>,
    aic: Option<f64>,
    random_intercept_var: Option<f64>,
    residual_var: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct LrtRow {
    condition: String,
    null: String,
    alternative: String,
    statistic: f64,
    df: usize,
    p_value: f64,
}

#[derive(Debug, Clone, Serialize)]
struct ProgressionRow {
    subject: String,
    rate_per_month: f64,
    class: String,
}

struct LmmOutput {
    files: Vec<PathBuf>,
    fitted: usize,
    skipped: usize,
}

/// Fits one model; input-driven failures such as too few observations or
/// distinct predictor values become a skipped row.
fn try_fit(
    spec: &ModelSpec,
    data: &sbglm::longitudinal::LmmData,
    cfg: &PipelineConfig,
    row: &mut ModelRow,
) -> CliResult<Option<LmmFit>> {
    match fit_lmm(spec, data, &cfg.lmm.options) {
        Ok(f) => {
            row.status = "fitted".into();
            row.n_fixed = Some(f.n_fixed());
            row.dropped = f.dropped_columns.join(" ");
            row.loglik = Some(f.loglik());
            row.reml_loglik = Some(f.reml_loglik());
            row.aic = Some(aic(&f));
            row.random_intercept_var = Some(f.reml.random_intercept_var);
            row.residual_var = Some(f.reml.residual_var);
            Ok(Some(f))
        }
        Err(e) if e.is_numerical() => Err(e.into()),
        Err(e) => {
            warn!("lmm: {} {} skipped: {e}", row.condition, row.model);
            row.status = format!("skipped: {e}");
            Ok(None)
        }
    }
}

fn lmm_tables(
    cfg: &PipelineConfig,
    records: &[ActivationRecord],
    clinical: &[ClinicalVisit],
    dir: &Path,
) -> CliResult<LmmOutput> {
    let mut files = Vec::new();
    let (mut fitted, mut skipped) = (0, 0);

    // progression uses every dated visit, before windowing
    let mut by_subject: BTreeMap<&str, Vec<ClinicalVisit>> = BTreeMap::new();
    for v in clinical.iter().filter(|v| v.group == Group::Als) {
        by_subject.entry(&v.subject_id).or_default().push(v.clone());
    }
    let mut progression = Vec::new();
    for (subject, visits) in &by_subject {
        if visits.iter().all(|v| v.onset_date.is_none()) {
            continue;
        }
        let (rate, class) = progression_rate(visits).ctx(format!("subject {subject}"))?;
        progression.push(ProgressionRow {
            subject: subject.to_string(),
            rate_per_month: rate,
            class: format!("{class:?}").to_lowercase(),
        });
    }
    files.push(write_csv_rows(&dir.join("progression.csv"), &progression)?);

    let windowed = windowing(clinical, &cfg.lmm.window)?;
    // (method, gamma bits, hemisphere) -> (subject, visit) -> area
    type Areas = BTreeMap<(String, String), f64>;
    let mut conditions: BTreeMap<(Method, u64, String), Areas> = BTreeMap::new();
    for r in records.iter().filter(|r| cfg.lmm.methods.contains(&r.method)) {
        conditions
            .entry((r.method, r.gamma.to_bits(), r.hemisphere.clone()))
            .or_default()
            .insert((r.subject_id.clone(), r.visit_id.clone()), r.area);
    }
    let mut models = Vec::new();
    let mut tests = Vec::new();
    for ((method, gbits, hemi), areas) in &conditions {
        let cond = format!("{method}_{}_{hemi}", gamma_tag(f64::from_bits(*gbits)));
        for group in [Group::Als, Group::Hc] {
            let visits: Vec<ClinicalVisit> = windowed.iter().filter(|v| v.group == group).cloned().collect();
            let data = assemble_lmm_data(&visits, areas)?;
            if data.n() == 0 {
                continue;
            }
            let specs: Vec<(&str, ModelSpec)> = match group {
                Group::Als => vec![
                    ("intercept", ModelSpec::hc_intercept()),
                    ("total", ModelSpec::als_total()),
                    ("hand_other", ModelSpec::als_hand_other()),
                ],
                Group::Hc => vec![("intercept", ModelSpec::hc_intercept())],
            };
            let mut fits: BTreeMap<&str, LmmFit> = BTreeMap::new();
            for (name, spec) in specs {
                let mut row = ModelRow {
                    condition: cond.clone(),
                    group: group.to_string(),
                    model: name.into(),
                    status: String::new(),
                    n_obs: data.n(),
                    n_subjects: data.subjects.iter().collect::<BTreeSet<_>>().len(),
                    n_fixed: None,
                    dropped: String::new(),
                    loglik: None,
                    reml_loglik: None,
                    aic: None,
                    random_intercept_var: None,
                    residual_var: None,
                };
                match try_fit(&spec, &data, cfg, &mut row)? {
                    Some(f) => {
                        fitted += 1;
                        fits.insert(name, f);
                    }
                    None => skipped += 1,
                }
                models.push(row);
            }
            if group == Group::Hc {
                continue;
            }
            if let Some(null) = fits.get("intercept") {
                for alt in ["total", "hand_other"] {
                    if let Some(f) = fits.get(alt) {
                        let t = lrt(null, f)?;
                        tests.push(LrtRow {
                            condition: cond.clone(),
                            null: "intercept".into(),
                            alternative: alt.into(),
                            statistic: t.statistic,
                            df: t.df,
                            p_value: t.p_value,
                        });
                    }
                }
            }
            let median = |p: &str| quantile(&data.predictors[p], 0.5);
            let curves: [(&str, &str, &str); 3] =
                [("total", TOTAL, ""), ("hand_other", HAND, OTHER), ("hand_other", OTHER, HAND)];
            for (model, vary, other) in curves {
                let Some(f) = fits.get(model) else { continue };
                let x = &data.predictors[vary];
                let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = quantile(x, cfg.lmm.curve_quantile);
                let n = cfg.lmm.curve_points;
                let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
                let mut held = BTreeMap::new();
                if !other.is_empty() {
                    held.insert(other.to_string(), median(other));
                }
                let pts = coefficient_curve(f, vary, &grid, &held)?;
                let p = dir.join("curves").join(format!("{cond}_{model}_{vary}.csv"));
                files.push(write_text(&p, &curve_csv(&pts))?);
            }
        }
    }
    files.push(write_csv_rows(&dir.join("models.csv"), &models)?);
    files.push(write_csv_rows(&dir.join("lrt.csv"), &tests)?);
    Ok(LmmOutput { files, fitted, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub check: String,
    pub value: String,
    /// `pass`, `fail` or `info`.
    pub status: String,
}

fn row(check: &str, value: String, status: &str) -> ReportRow {
    ReportRow { check: check.into(), value, status: status.into() }
}

fn pass_fail(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

fn sidecar_value(text: &str, key: &str) -> Option<f64> {
    text.lines().filter_map(|l| l.split_once(" = ")).find(|(k, _)| *k == key).and_then(|(_, v)| v.parse().ok())
}

fn build_report(r: &Runner) -> CliResult<Vec<ReportRow>> {
    for s in STAGES {
        r.require_current(s)?;
    }
    let prep = r.prep_rows()?;
    let mut out = Vec::new();
    let kept = prep.iter().filter(|p| !p.excluded).count();
    out.push(row("sessions_kept", format!("{kept}/{}", prep.len()), pass_fail(kept > 0)));

    let subjects = subjects_of(&prep);
    let mut converged = 0;
    for (s, _) in &subjects {
        let h = read_fit_header(r.stage_dir("fit").join(s))?;
        converged += usize::from(h.get("converged").map(String::as_str) == Some("true"));
    }
    out.push(row("fits_converged", format!("{converged}/{}", subjects.len()), pass_fail(converged == subjects.len())));

    let a = &r.cfg.analysis;
    let mut gammas = a.gammas.clone();
    gammas.sort_by(f64::total_cmp);
    let (mut nested, mut visits) = (0, 0);
    let mut min_prob = f64::INFINITY;
    let mut prob_ok = true;
    let excur = r.stage_dir("excur");
    for p in subjects.iter().flat_map(|(_, rows)| rows) {
        let mut prev: Option<Vec<bool>> = None;
        let mut ok = true;
        for g in &gammas {
            let path = excur.join(format!("{}_{}.exc", p.stem, gamma_tag(*g)));
            let map = sbglm::io::read_excursion_map(&path)?;
            let side = read_text(&path.with_extension("txt"))?;
            if map.iter().any(|&x| x) {
                let jp = sidecar_value(&side, "joint_prob").unwrap_or(f64::NAN);
                let se = sidecar_value(&side, "mc_se").unwrap_or(f64::NAN);
                min_prob = min_prob.min(jp);
                prob_ok &= jp + 3.0 * se >= 1.0 - a.alpha;
            }
            if let Some(prev) = &prev {
                ok &= map.iter().zip(prev).all(|(&hi, &lo)| !hi || lo);
            }
            prev = Some(map);
        }
        visits += 1;
        nested += usize::from(ok);
    }
    out.push(row("excursion_nesting", format!("{nested}/{visits}"), pass_fail(nested == visits)));
    let shown = if min_prob.is_finite() { format!("{min_prob}") } else { "no active vertices".into() };
    out.push(row("joint_probability_min", shown, pass_fail(prob_ok)));

    let comparison: Vec<ComparisonRow> = {
        let text = read_text(&r.stage_dir("summarize").join("activation.csv"))?;
        comparison_rows(&records_from_csv(&text)?)
    };
    let mean = |f: fn(&ComparisonRow) -> f64| comparison.iter().map(f).sum::<f64>() / comparison.len().max(1) as f64;
    out.push(row("mean_area_bayes_g0", format!("{}", mean(|c| c.bayes_area)), "info"));
    out.push(row("mean_area_bonferroni", format!("{}", mean(|c| c.bonferroni_area)), "info"));
    out.push(row("mean_area_fdr", format!("{}", mean(|c| c.fdr_area)), "info"));

    let lmm = Manifest::read(&r.stage_dir("lmm").join(MANIFEST_FILE)).expect("checked above");
    let note = |k: &str| lmm.notes.get(k).cloned().unwrap_or_else(|| "0".into());
    let status = if r.cfg.lmm.enabled { pass_fail(note("models_fitted") != "0") } else { "info" };
    out.push(row(
        "lmm_models_fitted",
        format!("{} fitted, {} skipped", note("models_fitted"), note("models_skipped")),
        status,
    ));
    Ok(out)
}
