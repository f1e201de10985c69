//! Browser demos: task regressors, prior field draws, and an excursion set
//! fitted to a simulated scan.
//!
//! Every export takes and returns plain numbers, arrays or JSON text, so the
//! same functions run natively under `cargo test`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde_json::json;
use wasm_bindgen::prelude::*;

use sbglm::classical::{bonferroni, fit_classical, Sidedness};
use sbglm::excursions::{excursion_sets, ExcursionOptions};
use sbglm::pipeline::{fit_subject, prepare_visit, AnalysisOptions};
use sbglm::prep::{build_task_regressors, HrfParams, StimulusSchedule};
use sbglm::surface::{assemble_fem, SpdeParts};
use sbglm::synth::{
    block_design, generate_study, planar_grid, sample_gmrf, Activation, Background, MeshFixture, Profile,
    SynthStudyConfig,
};

/// Largest grid side accepted by the demos.
pub const MAX_SIDE: usize = 40;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn check_side(n: usize) -> Result<(), String> {
    if (3..=MAX_SIDE).contains(&n) {
        Ok(())
    } else {
        Err(format!("grid side must lie in 3..={MAX_SIDE}, got {n}"))
    }
}

/// Amplitude regressor for blocks at `onsets` (s) lasting `durations` (s),
/// sampled every `tr` seconds with the default double-gamma response.
#[wasm_bindgen]
pub fn hrf_regressor(onsets: &[f64], durations: &[f64], tr: f64, n_volumes: usize) -> Result<Vec<f64>, String> {
    let sched = StimulusSchedule {
        onsets: onsets.to_vec(),
        durations: durations.to_vec(),
        tr,
        n_volumes,
        n_dropped_initial: 0,
    };
    let x = build_task_regressors(&sched, &HrfParams::default()).map_err(err)?;
    Ok(x.column(0).iter().copied().collect())
}

/// One draw from the SPDE prior on an `n x n` unit-spaced grid, row-major
/// with `x` fastest.
#[wasm_bindgen]
pub fn sample_field(n: usize, kappa: f64, tau: f64, seed: u64) -> Result<Vec<f64>, String> {
    check_side(n)?;
    let mesh = planar_grid(n, n, 1.0).map_err(err)?;
    let fem = assemble_fem(&mesh).map_err(err)?;
    let q = SpdeParts::new(&fem).precision(kappa, tau).map_err(err)?;
    sample_gmrf(&q, seed).map_err(err)
}

/// Simulates one scan with a smooth bump in the middle of an `n x n` grid,
/// fits the spatial model and returns a JSON object with the true field,
/// posterior mean, the excursion set at `gamma` and the one-sided
/// Bonferroni map, each row-major with `x` fastest.
#[wasm_bindgen]
pub fn excursion_demo(
    n: usize,
    amplitude: f64,
    sigma2: f64,
    gamma: f64,
    alpha: f64,
    seed: u64,
) -> Result<String, String> {
    check_side(n)?;
    if !(sigma2 > 0.0) || !amplitude.is_finite() {
        return Err("noise variance must be positive and the amplitude finite".into());
    }
    let spacing = 2.0;
    let mid = (n - 1) as f64 * spacing / 2.0;
    let mut cfg = SynthStudyConfig::small(seed);
    cfg.mesh = MeshFixture::Grid { nx: n, ny: n, spacing };
    cfg.n_subjects = 1;
    cfg.visits_per_subject = 1;
    cfg.background = Background::None;
    cfg.theta.sigma2 = sigma2;
    cfg.activation =
        Some(Activation { center: [mid, mid], radius: n as f64 * spacing / 3.0, amplitude, profile: Profile::Smooth });
    cfg.schedule = block_design(120, 2.0, 15.0);
    let study = generate_study(&cfg).map_err(err)?;
    let visit = &study.visits[0];
    let fem = assemble_fem(&study.mesh).map_err(err)?;

    let opts = AnalysisOptions {
        gammas: vec![gamma],
        alpha,
        excursion: ExcursionOptions { n_samples: 2000, seed },
        ..AnalysisOptions::default()
    };
    opts.validate().map_err(err)?;
    let session = prepare_visit(&visit.subject_id, &visit.visit_id, &visit.bold, &cfg.schedule, None, &fem, &opts)
        .map_err(err)?
        .session;
    let fit = fit_subject(std::slice::from_ref(&session), &fem, &opts).map_err(err)?;
    let ex = excursion_sets(&fit, 0, 0, &[gamma], alpha, &opts.excursion).map_err(err)?;
    let ex = &ex[0];
    let cl = fit_classical(&session, Sidedness::Positive).map_err(err)?;
    let bonf = bonferroni(&cl.pvals, alpha).map_err(err)?;
    let out = json!({
        "n": n,
        "truth": visit.fields[0],
        "mean": fit.field_mean(0, 0),
        "active": ex.active,
        "bonferroni": bonf,
        "joint_prob": ex.joint_prob,
        "mc_se": ex.mc_se,
        "kappa": fit.theta_hat.kappa[0],
        "tau": fit.theta_hat.tau[0],
        "sigma2": fit.theta_hat.sigma2,
        "converged": fit.convergence.converged,
    });
    Ok(out.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regressor_peaks_at_one_after_onset() {
        let x = hrf_regressor(&[10.0], &[20.0], 2.0, 40).unwrap();
        assert_eq!(x.len(), 40);
        let peak = x.iter().cloned().fold(f64::MIN, f64::max);
        assert!((peak - 1.0).abs() < 1e-12);
        assert!(x[..5].iter().all(|v| v.abs() < 1e-9), "no response before onset");
        assert!(hrf_regressor(&[70.0], &[20.0], 2.0, 40).is_err());
    }

    #[test]
    fn field_draw_is_seeded() {
        let a = sample_field(6, 0.5, 2.0, 3).unwrap();
        assert_eq!(a.len(), 36);
        assert_eq!(a, sample_field(6, 0.5, 2.0, 3).unwrap());
        assert_ne!(a, sample_field(6, 0.5, 2.0, 4).unwrap());
        assert!(sample_field(2, 0.5, 2.0, 3).is_err());
        assert!(sample_field(6, -1.0, 2.0, 3).is_err());
    }

    #[test]
    fn demo_finds_the_bump_and_covers_at_least_the_bonferroni_map() {
        let text = excursion_demo(10, 3.0, 1.0, 0.0, 0.05, 1).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let active: Vec<bool> = serde_json::from_value(v["active"].clone()).unwrap();
        let truth: Vec<f64> = serde_json::from_value(v["truth"].clone()).unwrap();
        assert_eq!(active.len(), 100);
        let centre = 4 * 10 + 4;
        assert!(active[centre], "centre vertex should be active");
        // smoothing may reach one step past the bump, never further
        let near = |k: usize| {
            let (i, j) = (k % 10, k / 10);
            [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(di, dj)| {
                let (a, b) = (i as i64 + di, j as i64 + dj);
                (0..10).contains(&a) && (0..10).contains(&b) && truth[(b * 10 + a) as usize] > 0.0
            })
        };
        assert!((0..100).all(|k| !active[k] || near(k)));
        let bonf: Vec<bool> = serde_json::from_value(v["bonferroni"].clone()).unwrap();
        let count = |m: &[bool]| m.iter().filter(|&&x| x).count();
        assert!(count(&active) >= count(&bonf));
        let p = v["joint_prob"].as_f64().unwrap();
        assert!(p + 3.0 * v["mc_se"].as_f64().unwrap() >= 0.95);
        assert!(excursion_demo(10, 3.0, 0.0, 0.0, 0.05, 1).is_err());
    }
}
