//! Input dataset layout.
//!
//! A dataset directory holds the mesh, a session table, one BOLD file and
//! one JSON stimulus schedule per session (schedules may be shared), an
//! optional nuisance CSV per session and the clinical table. Paths in the
//! session table are relative to the table's own directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sbglm::io::{matrix_to_csv, write_bold};
use sbglm::longitudinal::clinical_to_csv;
use sbglm::prep::StimulusSchedule;
use sbglm::surface::write_mesh;
use sbglm::synth::SynthStudy;

use crate::error::{CliError, CliResult, Context};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub subject: String,
    pub visit: String,
    pub bold: PathBuf,
    pub schedule: PathBuf,
    #[serde(default)]
    pub nuisance: Option<PathBuf>,
}

impl SessionEntry {
    pub fn stem(&self) -> String {
        format!("{}_{}", self.subject, self.visit)
    }

    /// Files this session reads.
    pub fn files(&self) -> Vec<PathBuf> {
        let mut v = vec![self.bold.clone(), self.schedule.clone()];
        v.extend(self.nuisance.clone());
        v
    }
}

fn valid_id(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.')
}

/// Reads the session table and resolves its paths.
pub fn read_sessions(path: &Path) -> CliResult<Vec<SessionEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out: Vec<SessionEntry> = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        let mut e: SessionEntry = row.map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 2)))?;
        if !valid_id(&e.subject) || !valid_id(&e.visit) {
            return Err(CliError::Data(format!(
                "{}:{}: subject and visit ids must be non-empty and use only letters, digits, '-' or '.'",
                path.display(),
                i + 2
            )));
        }
        if out.iter().any(|o| o.subject == e.subject && o.visit == e.visit) {
            return Err(CliError::Data(format!(
                "{}:{}: duplicate session {}/{}",
                path.display(),
                i + 2,
                e.subject,
                e.visit
            )));
        }
        e.bold = base.join(&e.bold);
        e.schedule = base.join(&e.schedule);
        e.nuisance = e.nuisance.filter(|p| !p.as_os_str().is_empty()).map(|p| base.join(p));
        out.push(e);
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("{}: no sessions listed", path.display())));
    }
    Ok(out)
}

pub fn read_schedule(path: &Path) -> CliResult<StimulusSchedule> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let s: StimulusSchedule =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    s.validate().ctx(path.display())?;
    Ok(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes a simulated study in the layout above; returns every file written.
pub fn write_study(study: &SynthStudy, dir: &Path) -> CliResult<Vec<PathBuf>> {
    create_dir(&dir.join("bold"))?;
    create_dir(&dir.join("truth"))?;
    let mut files = Vec::new();
    let mesh = dir.join("mesh.txt");
    write_mesh(&study.mesh, &mesh)?;
    files.push(mesh);
    let schedule = dir.join("schedule.json");
    let text = serde_json::to_string_pretty(&study.config.schedule).expect("schedule serializes") + "\n";
    write_file(&schedule, text.as_bytes())?;
    files.push(schedule);

    let mut table = csv::Writer::from_writer(Vec::new());
    for v in &study.visits {
        let stem = format!("{}_{}", v.subject_id, v.visit_id);
        let bold_rel = PathBuf::from("bold").join(format!("{stem}.bold"));
        write_bold(dir.join(&bold_rel), &v.bold)?;
        files.push(dir.join(&bold_rel));
        let fields = nalgebra::DMatrix::from_fn(v.fields[0].len(), v.fields.len(), |u, k| v.fields[k][u]);
        let truth = dir.join("truth").join(format!("{stem}.csv"));
        write_file(&truth, matrix_to_csv(&fields).as_bytes())?;
        files.push(truth);
        table
            .serialize(SessionEntry {
                subject: v.subject_id.clone(),
                visit: v.visit_id.clone(),
                bold: bold_rel,
                schedule: "schedule.json".into(),
                nuisance: None,
            })
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    let sessions = dir.join("sessions.csv");
    write_file(&sessions, &table.into_inner().map_err(|e| CliError::Data(e.to_string()))?)?;
    files.push(sessions);
    let clinical = dir.join("clinical.csv");
    write_file(&clinical, clinical_to_csv(&study.clinical).as_bytes())?;
    files.push(clinical);
    let truth = dir.join("truth.txt");
    write_file(&truth, study.truth_sidecar().as_bytes())?;
    files.push(truth);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sbglm::synth::{generate_study, SynthStudyConfig};

    #[test]
    fn simulated_study_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SynthStudyConfig::small(3);
        cfg.mesh = sbglm::synth::MeshFixture::Grid { nx: 4, ny: 4, spacing: 2.0 };
        let study = generate_study(&cfg).unwrap();
        let files = write_study(&study, dir.path()).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        let sessions = read_sessions(&dir.path().join("sessions.csv")).unwrap();
        assert_eq!(sessions.len(), study.visits.len());
        assert_eq!(sessions[0].bold, dir.path().join("bold").join("A01_v1.bold"));
        assert_eq!(sessions[0].nuisance, None);
        let y = sbglm::io::read_bold(&sessions[0].bold).unwrap();
        assert_eq!(y, study.visits[0].bold);
        assert_eq!(read_schedule(&sessions[0].schedule).unwrap(), cfg.schedule);
    }

    #[test]
    fn bad_tables_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        for text in [
            "subject,visit,bold,schedule\n",
            "subject,visit,bold,schedule\nA/1,v1,b,s\n",
            "subject,visit,bold,schedule\nA1,v1,b,s\nA1,v1,c,s\n",
            "subject,visit\nA1,v1\n",
        ] {
            std::fs::write(&p, text).unwrap();
            assert_eq!(read_sessions(&p).unwrap_err().exit_code(), 3, "{text}");
        }
        std::fs::write(&p, "subject,visit,bold,schedule,nuisance\nA1,v1,b.bold,s.json,\nA1,v2,c.bold,s.json,n.csv\n")
            .unwrap();
        let s = read_sessions(&p).unwrap();
        assert_eq!(s[0].nuisance, None);
        assert_eq!(s[1].nuisance, Some(dir.path().join("n.csv")));
    }
}
