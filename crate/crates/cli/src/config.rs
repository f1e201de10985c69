//! JSON pipeline configuration.
//!
//! Relative `data_dir` and `output_dir` resolve against the directory that
//! holds the config file; `mesh`, `sessions` and `clinical` resolve against
//! `data_dir`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sbglm::longitudinal::{LmmOptions, WindowRules};
use sbglm::pipeline::AnalysisOptions;
use sbglm::summary::Method;
use sbglm::synth::SynthStudyConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data_dir: PathBuf,
    pub mesh: PathBuf,
    /// Table with columns `subject,visit,bold,schedule,nuisance`.
    pub sessions: PathBuf,
    pub clinical: PathBuf,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub analysis: AnalysisOptions,
    pub lmm: LmmConfig,
    /// Generator settings for `simulate`, which writes into `data_dir`.
    pub simulate: SynthStudyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data_dir: "data".into(),
            mesh: "mesh.txt".into(),
            sessions: "sessions.csv".into(),
            clinical: "clinical.csv".into(),
            output_dir: "out".into(),
            workers: 1,
            analysis: AnalysisOptions::default(),
            lmm: LmmConfig::default(),
            simulate: SynthStudyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmmConfig {
    pub enabled: bool,
    pub options: LmmOptions,
    pub window: WindowRules,
    /// Area methods whose records are modelled.
    pub methods: Vec<Method>,
    /// Curves span the predictor from its minimum to this quantile.
    pub curve_quantile: f64,
    pub curve_points: usize,
}

impl Default for LmmConfig {
    fn default() -> Self {
        LmmConfig {
            enabled: true,
            options: LmmOptions::default(),
            window: WindowRules::default(),
            methods: vec![Method::Bayes],
            curve_quantile: 0.9,
            curve_points: 50,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path, overrides: &Overrides) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| e.context(path.display()))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(base).map_err(|e| CliError::Config(format!("{}: {e}", base.display())))?;
        cfg.data_dir = resolve(&base, &cfg.data_dir);
        cfg.output_dir = resolve(&base, &cfg.output_dir);
        cfg.mesh = resolve(&cfg.data_dir, &cfg.mesh);
        cfg.sessions = resolve(&cfg.data_dir, &cfg.sessions);
        cfg.clinical = resolve(&cfg.data_dir, &cfg.clinical);
        if let Some(w) = overrides.workers {
            cfg.workers = w;
        }
        if let Some(s) = overrides.seed {
            cfg.analysis.excursion.seed = s;
            cfg.simulate.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if let Err(e) = self.analysis.validate() {
            return bad(format!("analysis: {e}"));
        }
        if self.analysis.excursion.n_samples < sbglm::excursions::MIN_SAMPLES {
            return bad(format!("analysis.excursion.n_samples must be at least {}", sbglm::excursions::MIN_SAMPLES));
        }
        if let Some(p) = &self.analysis.priors {
            if p.log_kappa.len() != p.log_tau.len() {
                return bad("analysis.priors: log_kappa and log_tau differ in length".into());
            }
        }
        let l = &self.lmm;
        if !(l.curve_quantile > 0.0 && l.curve_quantile <= 1.0) {
            return bad(format!("lmm.curve_quantile must lie in (0, 1], got {}", l.curve_quantile));
        }
        if l.curve_points < 2 {
            return bad("lmm.curve_points must be at least 2".into());
        }
        if l.window.window_days <= 0 {
            return bad("lmm.window.window_days must be positive".into());
        }
        if l.options.log_lambda_range.0 >= l.options.log_lambda_range.1 {
            return bad("lmm.options.log_lambda_range must be increasing".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
