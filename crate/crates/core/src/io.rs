//! On-disk formats.
//!
//! * BOLD: 8-byte magic `SBGBOLD1`, `T` and `V` as little-endian `u64`, then
//!   `T * V` little-endian `f64` values, one volume after another.
//! * Nuisance regressors: comma-separated numbers, one volume per line.
//! * Posterior fit: a directory holding `header.txt` (`key = value` lines),
//!   `ordering.bin`, and per visit a mean vector and a coordinate-format
//!   precision matrix.
//! * Excursion map: magic `SBGEXC01`, `V` as `u64`, one byte per vertex,
//!   with a text sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use sprs::{CsMat, TriMat};

use crate::bayes::{Convergence, HyperPriors, Hyperparameters, Layout, NormalPrior, PosteriorFit, VisitPosterior};
use crate::error::{Error, Result};
use crate::excursions::ExcursionResult;
use crate::prep::SessionData;

const BOLD_MAGIC: &[u8; 8] = b"SBGBOLD1";
const VEC_MAGIC: &[u8; 8] = b"SBGVEC01";
const COO_MAGIC: &[u8; 8] = b"SBGCOO01";
const EXC_MAGIC: &[u8; 8] = b"SBGEXC01";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line: 0, msg: msg.into() }
}

/// Little-endian reader over a byte buffer with path-aware errors.
struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], path: &'a Path, magic: &[u8; 8]) -> Result<Self> {
        if buf.len() < 8 || &buf[..8] != magic {
            return Err(parse_err(path, format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        Ok(Cursor { buf, at: 8, path })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(parse_err(self.path, format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(parse_err(self.path, format!("{} trailing bytes", self.buf.len() - self.at)));
        }
        Ok(())
    }
}

pub fn bold_to_bytes(y: &DMatrix<f64>) -> Vec<u8> {
    let (t, v) = y.shape();
    let mut out = Vec::with_capacity(24 + 8 * t * v);
    out.extend_from_slice(BOLD_MAGIC);
    out.extend_from_slice(&(t as u64).to_le_bytes());
    out.extend_from_slice(&(v as u64).to_le_bytes());
    for r in 0..t {
        for c in 0..v {
            out.extend_from_slice(&y[(r, c)].to_le_bytes());
        }
    }
    out
}

pub fn write_bold(path: impl AsRef<Path>, y: &DMatrix<f64>) -> Result<()> {
    write(path.as_ref(), &bold_to_bytes(y))
}

pub fn read_bold(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let buf = read(path)?;
    let mut c = Cursor::new(&buf, path, BOLD_MAGIC)?;
    let t = c.u64()? as usize;
    let v = c.u64()? as usize;
    let expected = t.checked_mul(v).and_then(|n| n.checked_mul(8)).unwrap_or(usize::MAX);
    if buf.len() - 24 != expected {
        return Err(parse_err(
            path,
            format!("header says {t} x {v} values but the file holds {} bytes of data", buf.len() - 24),
        ));
    }
    let mut y = DMatrix::zeros(t, v);
    for r in 0..t {
        for col in 0..v {
            let x = c.f64()?;
            if !x.is_finite() {
                return Err(parse_err(path, format!("non-finite value at volume {r}, vertex {col}")));
            }
            y[(r, col)] = x;
        }
    }
    c.finish()?;
    Ok(y)
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| m[(r, c)].to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Comma-separated numeric matrix, no header. Blank lines are skipped.
pub fn matrix_from_csv(text: &str, path: &Path) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("{} columns, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    let c = rows.first().map_or(0, |r| r.len());
    Ok(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let text = String::from_utf8(read(path)?).map_err(|e| parse_err(path, e.to_string()))?;
    matrix_from_csv(&text, path)
}

fn vec_to_bytes(x: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * x.len());
    out.extend_from_slice(VEC_MAGIC);
    out.extend_from_slice(&(x.len() as u64).to_le_bytes());
    for v in x {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn vec_from_bytes(buf: &[u8], path: &Path) -> Result<Vec<f64>> {
    let mut c = Cursor::new(buf, path, VEC_MAGIC)?;
    let n = c.u64()? as usize;
    let x = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    c.finish()?;
    Ok(x)
}

fn coo_to_bytes(q: &CsMat<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 24 * q.nnz());
    out.extend_from_slice(COO_MAGIC);
    out.extend_from_slice(&(q.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(q.cols() as u64).to_le_bytes());
    out.extend_from_slice(&(q.nnz() as u64).to_le_bytes());
    for (v, (i, j)) in q.iter() {
        out.extend_from_slice(&(i as u64).to_le_bytes());
        out.extend_from_slice(&(j as u64).to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn coo_from_bytes(buf: &[u8], path: &Path) -> Result<CsMat<f64>> {
    let mut c = Cursor::new(buf, path, COO_MAGIC)?;
    let (r, k, nnz) = (c.u64()? as usize, c.u64()? as usize, c.u64()? as usize);
    let mut tri = TriMat::new((r, k));
    for _ in 0..nnz {
        let (i, j, v) = (c.u64()? as usize, c.u64()? as usize, c.f64()?);
        if i >= r || j >= k {
            return Err(parse_err(path, format!("entry ({i}, {j}) outside a {r} x {k} matrix")));
        }
        tri.add_triplet(i, j, v);
    }
    c.finish()?;
    Ok(tri.to_csr())
}

fn list(x: &[f64]) -> String {
    x.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")
}

/// Writes a fit into `dir`; `mesh_checksum` identifies the mesh it belongs to.
pub fn write_fit(dir: impl AsRef<Path>, fit: &PosteriorFit, mesh_checksum: &str) -> Result<()> {
    let dir = dir.as_ref();
    let th = &fit.theta_hat;
    let pr = &fit.priors;
    let c = &fit.convergence;
    let mut h = String::new();
    let mut kv = |k: &str, v: String| h.push_str(&format!("{k} = {v}\n"));
    kv("format", "sbglm-fit 1".into());
    kv("mesh_checksum", mesh_checksum.into());
    kv("n_tasks", fit.n_tasks().to_string());
    kv("n_vertices", fit.n_vertices().to_string());
    kv("field_width", fit.layout.field_width.to_string());
    kv("kappa", list(&th.kappa));
    kv("tau", list(&th.tau));
    kv("sigma2", format!("{:e}", th.sigma2));
    kv("prior_log_kappa_mean", list(&pr.log_kappa.iter().map(|p| p.mean).collect::<Vec<_>>()));
    kv("prior_log_kappa_sd", list(&pr.log_kappa.iter().map(|p| p.sd).collect::<Vec<_>>()));
    kv("prior_log_tau_mean", list(&pr.log_tau.iter().map(|p| p.mean).collect::<Vec<_>>()));
    kv("prior_log_tau_sd", list(&pr.log_tau.iter().map(|p| p.sd).collect::<Vec<_>>()));
    kv("prior_precision_shape", format!("{:e}", pr.precision_shape));
    kv("prior_precision_rate", format!("{:e}", pr.precision_rate));
    kv("prior_flat", pr.flat.to_string());
    kv("log_marginal", format!("{:e}", fit.log_marginal));
    kv("converged", c.converged.to_string());
    kv("iterations", c.iterations.to_string());
    kv("evaluations", c.evaluations.to_string());
    kv("grad_max", format!("{:e}", c.grad_max));
    kv("message", c.message.clone());
    kv("n_visits", fit.visits.len().to_string());
    for (j, v) in fit.visits.iter().enumerate() {
        kv(&format!("visit{j}"), format!("{} {}", v.subject_id, v.visit_id));
    }
    write(&dir.join("header.txt"), h.as_bytes())?;
    let pos: Vec<f64> = fit.layout.pos.iter().map(|&p| p as f64).collect();
    write(&dir.join("ordering.bin"), &vec_to_bytes(&pos))?;
    for (j, v) in fit.visits.iter().enumerate() {
        write(&dir.join(format!("visit{j}.mean.bin")), &vec_to_bytes(&v.mu))?;
        write(&dir.join(format!("visit{j}.qpost.coo")), &coo_to_bytes(&v.qpost))?;
    }
    Ok(())
}

/// Header fields of a stored fit.
pub fn read_fit_header(dir: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = dir.as_ref().join("header.txt");
    let text = String::from_utf8(read(&path)?).map_err(|e| parse_err(&path, e.to_string()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let (k, v) = line.split_once(" = ").ok_or_else(|| Error::Parse {
            path: path.clone(),
            line: i + 1,
            msg: "expected 'key = value'".into(),
        })?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub fn read_fit(dir: impl AsRef<Path>) -> Result<(PosteriorFit, String)> {
    let dir = dir.as_ref();
    let h = read_fit_header(dir)?;
    let hp = dir.join("header.txt");
    let get = |k: &str| h.get(k).cloned().ok_or_else(|| parse_err(&hp, format!("missing key '{k}'")));
    let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| parse_err(&hp, format!("bad number for '{k}'"))) };
    let nums = |k: &str| -> Result<Vec<f64>> {
        get(k)?
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| parse_err(&hp, format!("bad number in '{k}'"))))
            .collect()
    };
    let int =
        |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| parse_err(&hp, format!("bad integer for '{k}'"))) };
    let boolean =
        |k: &str| -> Result<bool> { get(k)?.parse().map_err(|_| parse_err(&hp, format!("bad flag for '{k}'"))) };
    let k = int("n_tasks")?;
    let nv = int("n_vertices")?;
    let priors_of =
        |m: Vec<f64>, s: Vec<f64>| m.into_iter().zip(s).map(|(mean, sd)| NormalPrior { mean, sd }).collect();
    let priors = HyperPriors {
        log_kappa: priors_of(nums("prior_log_kappa_mean")?, nums("prior_log_kappa_sd")?),
        log_tau: priors_of(nums("prior_log_tau_mean")?, nums("prior_log_tau_sd")?),
        precision_shape: num("prior_precision_shape")?,
        precision_rate: num("prior_precision_rate")?,
        flat: boolean("prior_flat")?,
    };
    let theta_hat = Hyperparameters { kappa: nums("kappa")?, tau: nums("tau")?, sigma2: num("sigma2")? };
    let op = dir.join("ordering.bin");
    let pos: Vec<usize> = vec_from_bytes(&read(&op)?, &op)?.iter().map(|&p| p as usize).collect();
    if pos.len() != nv {
        return Err(parse_err(&op, format!("ordering has {} entries for {nv} vertices", pos.len())));
    }
    let layout = Layout { n_tasks: k, n_vertices: nv, pos, field_width: int("field_width")? };
    let n_visits = int("n_visits")?;
    let mut visits = Vec::with_capacity(n_visits);
    for j in 0..n_visits {
        let ids = get(&format!("visit{j}"))?;
        let (subject_id, visit_id) =
            ids.split_once(' ').ok_or_else(|| parse_err(&hp, format!("bad ids for visit {j}")))?;
        let mp: PathBuf = dir.join(format!("visit{j}.mean.bin"));
        let qp: PathBuf = dir.join(format!("visit{j}.qpost.coo"));
        let mu = vec_from_bytes(&read(&mp)?, &mp)?;
        let qpost = coo_from_bytes(&read(&qp)?, &qp)?;
        if mu.len() != k * nv || qpost.rows() != k * nv {
            return Err(parse_err(&mp, "posterior size does not match the header"));
        }
        visits.push(VisitPosterior { subject_id: subject_id.into(), visit_id: visit_id.into(), mu, qpost });
    }
    let fit = PosteriorFit {
        theta_hat,
        priors,
        visits,
        log_marginal: num("log_marginal")?,
        convergence: Convergence {
            converged: boolean("converged")?,
            iterations: int("iterations")?,
            evaluations: int("evaluations")?,
            grad_max: num("grad_max")?,
            message: get("message")?,
        },
        layout,
    };
    Ok((fit, get("mesh_checksum")?))
}

pub fn write_excursion(path: impl AsRef<Path>, r: &ExcursionResult) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(16 + r.active.len());
    out.extend_from_slice(EXC_MAGIC);
    out.extend_from_slice(&(r.active.len() as u64).to_le_bytes());
    out.extend(r.active.iter().map(|&a| a as u8));
    write(path, &out)?;
    write(&path.with_extension("txt"), r.sidecar().as_bytes())
}

pub fn read_excursion_map(path: impl AsRef<Path>) -> Result<Vec<bool>> {
    let path = path.as_ref();
    let buf = read(path)?;
    let mut c = Cursor::new(&buf, path, EXC_MAGIC)?;
    let n = c.u64()? as usize;
    let bytes = c.take(n)?;
    c.finish()?;
    bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(parse_err(path, format!("map byte {b} is not 0 or 1"))),
        })
        .collect()
}

/// Stores a preprocessed session as `<stem>.y.bold`, `<stem>.x.csv`,
/// `<stem>.nuisance.csv` and `<stem>.meta.txt`.
pub fn write_session(dir: impl AsRef<Path>, stem: &str, s: &SessionData) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let paths: Vec<PathBuf> =
        ["y.bold", "x.csv", "nuisance.csv", "meta.txt"].iter().map(|ext| dir.join(format!("{stem}.{ext}"))).collect();
    write_bold(&paths[0], &s.y)?;
    write(&paths[1], matrix_to_csv(&s.x_task).as_bytes())?;
    write(&paths[2], matrix_to_csv(&s.nuisance).as_bytes())?;
    let keep: String = s.keep_flags.iter().map(|&k| if k { '1' } else { '0' }).collect();
    let meta = format!(
        "subject = {}\nvisit = {}\nn_removed = {}\nnuisance_columns = {}\nkeep = {keep}\n",
        s.subject_id,
        s.visit_id,
        s.n_removed,
        s.nuisance.ncols()
    );
    write(&paths[3], meta.as_bytes())?;
    Ok(paths)
}

pub fn read_session(dir: impl AsRef<Path>, stem: &str) -> Result<SessionData> {
    let dir = dir.as_ref();
    let mp = dir.join(format!("{stem}.meta.txt"));
    let text = String::from_utf8(read(&mp)?).map_err(|e| parse_err(&mp, e.to_string()))?;
    let meta: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once(" = ")).collect();
    let get = |k: &str| meta.get(k).copied().ok_or_else(|| parse_err(&mp, format!("missing key '{k}'")));
    let y = read_bold(dir.join(format!("{stem}.y.bold")))?;
    let x_task = read_matrix_csv(dir.join(format!("{stem}.x.csv")))?;
    let mut nuisance = read_matrix_csv(dir.join(format!("{stem}.nuisance.csv")))?;
    let n_cols: usize = get("nuisance_columns")?.parse().map_err(|_| parse_err(&mp, "bad nuisance_columns"))?;
    if nuisance.nrows() == 0 {
        nuisance = DMatrix::zeros(y.nrows(), n_cols);
    }
    let keep_flags = get("keep")?
        .chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(parse_err(&mp, "keep flags must be 0 or 1")),
        })
        .collect::<Result<Vec<_>>>()?;
    if x_task.nrows() != y.nrows() || nuisance.nrows() != y.nrows() || nuisance.ncols() != n_cols {
        return Err(parse_err(&mp, "stored session parts disagree in size"));
    }
    Ok(SessionData {
        subject_id: get("subject")?.to_string(),
        visit_id: get("visit")?.to_string(),
        y,
        x_task,
        nuisance,
        keep_flags,
        n_removed: get("n_removed")?.parse().map_err(|_| parse_err(&mp, "bad n_removed"))?,
    })
}
