//! Activation areas and longitudinal reliability statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "bayes")]
    Bayes,
    #[serde(rename = "classical-bonferroni")]
    ClassicalBonferroni,
    #[serde(rename = "classical-fdr")]
    ClassicalFdr,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Bayes => "bayes",
            Method::ClassicalBonferroni => "classical-bonferroni",
            Method::ClassicalFdr => "classical-fdr",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayes" => Ok(Method::Bayes),
            "classical-bonferroni" => Ok(Method::ClassicalBonferroni),
            "classical-fdr" => Ok(Method::ClassicalFdr),
            other => Err(Error::invalid(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    #[serde(rename = "subject")]
    pub subject_id: String,
    #[serde(rename = "visit")]
    pub visit_id: String,
    pub method: Method,
    pub gamma: f64,
    pub hemisphere: String,
    /// mm^2.
    pub area: f64,
}

pub fn activation_area(active: &[bool], vertex_areas: &[f64]) -> Result<f64> {
    if active.len() != vertex_areas.len() {
        return Err(Error::DimensionMismatch(format!(
            "activation map has {} entries, mesh has {} vertices",
            active.len(),
            vertex_areas.len()
        )));
    }
    Ok(active.iter().zip(vertex_areas).filter(|(a, _)| **a).map(|(_, x)| x).sum())
}

pub fn records_to_csv(records: &[ActivationRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

pub fn records_from_csv(text: &str) -> Result<Vec<ActivationRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| {
            let rec: ActivationRecord =
                r.map_err(|e| Error::Parse { path: "<records>".into(), line: i + 2, msg: e.to_string() })?;
            if !(rec.area >= 0.0) {
                return Err(Error::invalid(format!("negative area on record line {}", i + 2)));
            }
            Ok(rec)
        })
        .collect()
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample (n - 1) standard deviation; `None` below two values.
pub fn sample_sd(x: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    let m = mean(x);
    Some((x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt())
}

/// `sd / mean`; undefined for a zero mean or fewer than two values.
pub fn coefficient_of_variation(x: &[f64]) -> Option<f64> {
    let m = mean(x);
    let sd = sample_sd(x)?;
    (m != 0.0).then(|| sd / m)
}

/// Grouping key: method, threshold, hemisphere.
#[derive(Debug, Clone, PartialEq, PartialOrd)]
pub struct Condition {
    pub method: Method,
    pub gamma: f64,
    pub hemisphere: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectReliability {
    pub condition: Condition,
    pub subject_id: String,
    pub n_visits: usize,
    pub mean: f64,
    pub sd: Option<f64>,
    pub within_cv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReliability {
    pub condition: Condition,
    pub n_subjects: usize,
    pub between_cv: Option<f64>,
    /// Least-squares line of subject SD on subject mean.
    pub sd_vs_mean_intercept: Option<f64>,
    pub sd_vs_mean_slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityReport {
    pub subjects: Vec<SubjectReliability>,
    pub conditions: Vec<ConditionReliability>,
}

/// Ordinary least squares `y = a + b x`; `None` without spread in `x`.
pub fn line_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

pub fn reliability_stats(records: &[ActivationRecord]) -> ReliabilityReport {
    // (method, gamma bits, hemisphere) -> subject -> areas
    type Key = (Method, u64, String);
    let mut groups: BTreeMap<Key, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method, r.gamma.to_bits(), r.hemisphere.clone()))
            .or_default()
            .entry(r.subject_id.clone())
            .or_default()
            .push(r.area);
    }
    let mut subjects = Vec::new();
    let mut conditions = Vec::new();
    for ((method, gbits, hemisphere), by_subject) in groups {
        let condition = Condition { method, gamma: f64::from_bits(gbits), hemisphere };
        let mut means = Vec::new();
        let mut sds = Vec::new();
        let mut sd_means = Vec::new();
        for (subject_id, areas) in by_subject {
            let m = mean(&areas);
            let sd = sample_sd(&areas);
            means.push(m);
            if let Some(s) = sd {
                sds.push(s);
                sd_means.push(m);
            }
            subjects.push(SubjectReliability {
                condition: condition.clone(),
                subject_id,
                n_visits: areas.len(),
                mean: m,
                sd,
                within_cv: coefficient_of_variation(&areas),
            });
        }
        let fit = line_fit(&sd_means, &sds);
        conditions.push(ConditionReliability {
            condition,
            n_subjects: means.len(),
            between_cv: coefficient_of_variation(&means),
            sd_vs_mean_intercept: fit.map(|f| f.0),
            sd_vs_mean_slope: fit.map(|f| f.1),
        });
    }
    ReliabilityReport { subjects, conditions }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

impl ReliabilityReport {
    /// Per-subject table behind the SD-versus-mean and CV plots.
    pub fn subjects_csv(&self) -> String {
        let mut s = String::from("method,gamma,hemisphere,subject,n_visits,mean,sd,within_cv\n");
        for r in &self.subjects {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.condition.method,
                r.condition.gamma,
                r.condition.hemisphere,
                r.subject_id,
                r.n_visits,
                r.mean,
                opt(r.sd),
                opt(r.within_cv)
            ));
        }
        s
    }

    pub fn conditions_csv(&self) -> String {
        let mut s = String::from("method,gamma,hemisphere,n_subjects,between_cv,sd_mean_intercept,sd_mean_slope\n");
        for r in &self.conditions {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.condition.method,
                r.condition.gamma,
                r.condition.hemisphere,
                r.n_subjects,
                opt(r.between_cv),
                opt(r.sd_vs_mean_intercept),
                opt(r.sd_vs_mean_slope)
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(subject: &str, visit: usize, method: Method, area: f64) -> ActivationRecord {
        ActivationRecord {
            subject_id: subject.into(),
            visit_id: format!("v{visit}"),
            method,
            gamma: 0.0,
            hemisphere: "left".into(),
            area,
        }
    }

    #[test]
    fn area_examples() {
        assert_eq!(activation_area(&[true, true], &[2.0, 3.0]).unwrap(), 5.0);
        assert_eq!(activation_area(&[false, false], &[2.0, 3.0]).unwrap(), 0.0);
        assert!(activation_area(&[true], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn cv_examples() {
        assert_eq!(sample_sd(&[10.0, 10.0, 10.0]), Some(0.0));
        assert_eq!(coefficient_of_variation(&[10.0, 10.0, 10.0]), Some(0.0));
        assert_eq!(sample_sd(&[1.0, 2.0, 3.0]), Some(1.0));
        assert_eq!(coefficient_of_variation(&[1.0, 2.0, 3.0]), Some(0.5));
        assert_eq!(coefficient_of_variation(&[0.0, 0.0]), None);
        assert_eq!(coefficient_of_variation(&[4.0]), None);
    }

    #[test]
    fn cv_is_scale_invariant() {
        let a = [3.0, 7.5, 4.2, 9.9];
        let b: Vec<f64> = a.iter().map(|x| x * 17.3).collect();
        let (ca, cb) = (coefficient_of_variation(&a).unwrap(), coefficient_of_variation(&b).unwrap());
        assert!((ca - cb).abs() < 1e-12);
    }

    #[test]
    fn report_matches_definitions() {
        let mut recs = Vec::new();
        let data = [("a", [1.0, 2.0, 3.0]), ("b", [10.0, 10.0, 10.0]), ("c", [4.0, 6.0, 8.0])];
        for (s, areas) in data {
            for (j, &x) in areas.iter().enumerate() {
                recs.push(rec(s, j, Method::Bayes, x));
                recs.push(rec(s, j, Method::ClassicalFdr, 2.0 * x));
            }
        }
        let rep = reliability_stats(&recs);
        assert_eq!(rep.conditions.len(), 2);
        let bayes = &rep.conditions[0];
        assert_eq!(bayes.condition.method, Method::Bayes);
        let means = [2.0, 10.0, 6.0];
        let m = means.iter().sum::<f64>() / 3.0;
        let sd = (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!((bayes.between_cv.unwrap() - sd / m).abs() < 1e-12);
        let a = rep.subjects.iter().find(|r| r.subject_id == "a").unwrap();
        assert_eq!(a.within_cv, Some(0.5));
        // sds (1, 0, 2) on means (2, 10, 6)
        let (_, slope) = line_fit(&[2.0, 10.0, 6.0], &[1.0, 0.0, 2.0]).unwrap();
        assert!((bayes.sd_vs_mean_slope.unwrap() - slope).abs() < 1e-12);
        assert!(rep.subjects_csv().lines().count() == 7);
    }

    #[test]
    fn records_round_trip() {
        let recs = vec![rec("s1", 0, Method::ClassicalBonferroni, 12.5), rec("s2", 1, Method::Bayes, 0.0)];
        let text = records_to_csv(&recs).unwrap();
        assert!(text.starts_with("subject,visit,method,gamma,hemisphere,area\n"));
        assert_eq!(records_from_csv(&text).unwrap(), recs);
        assert!(records_from_csv("subject,visit,method,gamma,hemisphere,area\na,b,nope,0,l,1\n").is_err());
    }
}
