//! Triangulated cortical patches, linear finite elements and SPDE precisions.
//!
//! Mesh text format (whitespace-delimited, `#` starts a comment):
//!
//! ```text
//! V F
//! x y z [mask01]      # V vertex lines, coordinates in mm
//! i j k               # F triangle lines, zero-based vertex indices
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};

/// Triangles with area below this (mm²) are rejected.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    /// In-analysis vertices.
    pub mask: Vec<bool>,
}

impl SurfaceMesh {
    /// Validated mesh; `mask = None` selects every vertex.
    pub fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>, mask: Option<Vec<bool>>) -> Result<Self> {
        let n = vertices.len();
        let mask = mask.unwrap_or_else(|| vec![true; n]);
        if mask.len() != n {
            return Err(Error::DimensionMismatch(format!("mask has {} entries for {n} vertices", mask.len())));
        }
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= n) {
                return Err(Error::IndexOutOfRange { triangle: t, index: bad, n_vertices: n });
            }
        }
        let mesh = SurfaceMesh { vertices, triangles, mask };
        for t in 0..mesh.triangles.len() {
            let area = mesh.triangle_area(t);
            if !(area >= DEGENERATE_AREA) {
                return Err(Error::DegenerateTriangle { triangle: t, area });
            }
        }
        Ok(mesh)
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Induced mesh on the masked vertices, plus the original index of each
    /// retained vertex.
    pub fn masked_submesh(&self) -> (SurfaceMesh, Vec<usize>) {
        let mut new_index = vec![usize::MAX; self.n_vertices()];
        let mut keep = Vec::new();
        for (v, &m) in self.mask.iter().enumerate() {
            if m {
                new_index[v] = keep.len();
                keep.push(v);
            }
        }
        let triangles = self
            .triangles
            .iter()
            .filter(|tri| tri.iter().all(|&i| self.mask[i]))
            .map(|tri| tri.map(|i| new_index[i]))
            .collect();
        let sub = SurfaceMesh {
            vertices: keep.iter().map(|&v| self.vertices[v]).collect(),
            triangles,
            mask: vec![true; keep.len()],
        };
        (sub, keep)
    }

    /// Each undirected edge must border at most two triangles.
    pub fn check_manifold(&self) -> Result<()> {
        let mut count: HashMap<(usize, usize), u32> = HashMap::new();
        for tri in &self.triangles {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let c = count.entry(key).or_insert(0);
                *c += 1;
                if *c > 2 {
                    return Err(Error::NonManifold(key.0, key.1));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse { path: source.to_path_buf(), line, msg };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());

        let (hl, header) = lines.next().ok_or_else(|| perr(1, "empty mesh file".into()))?;
        let counts: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| perr(hl, format!("bad header: {e}")))?;
        let [nv, nf] = counts[..] else {
            return Err(perr(hl, "header must be `V F`".into()));
        };

        let mut vertices = Vec::with_capacity(nv);
        let mut mask = Vec::with_capacity(nv);
        let mut any_mask = false;
        for _ in 0..nv {
            let (ln, l) = lines.next().ok_or_else(|| perr(0, format!("expected {nv} vertex lines")))?;
            let tok: Vec<&str> = l.split_whitespace().collect();
            if tok.len() != 3 && tok.len() != 4 {
                return Err(perr(ln, format!("vertex line needs 3 or 4 fields, got {}", tok.len())));
            }
            let mut p = [0.0; 3];
            for (slot, s) in p.iter_mut().zip(&tok) {
                *slot = s.parse::<f64>().map_err(|e| perr(ln, format!("bad coordinate {s:?}: {e}")))?;
                if !slot.is_finite() {
                    return Err(perr(ln, format!("non-finite coordinate {s:?}")));
                }
            }
            vertices.push(p);
            match tok.get(3) {
                None => mask.push(true),
                Some(&"1") => {
                    any_mask = true;
                    mask.push(true)
                }
                Some(&"0") => {
                    any_mask = true;
                    mask.push(false)
                }
                Some(s) => return Err(perr(ln, format!("mask must be 0 or 1, got {s:?}"))),
            }
        }

        let mut triangles = Vec::with_capacity(nf);
        let mut tri_lines = Vec::with_capacity(nf);
        for _ in 0..nf {
            let (ln, l) = lines.next().ok_or_else(|| perr(0, format!("expected {nf} triangle lines")))?;
            let idx: Vec<usize> = l
                .split_whitespace()
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| perr(ln, format!("bad triangle index: {e}")))?;
            let [i, j, k] = idx[..] else {
                return Err(perr(ln, format!("triangle line needs 3 indices, got {}", idx.len())));
            };
            triangles.push([i, j, k]);
            tri_lines.push(ln);
        }
        if let Some((ln, _)) = lines.next() {
            return Err(perr(ln, "trailing data after the last triangle".into()));
        }

        let mask = any_mask.then_some(mask);
        SurfaceMesh::new(vertices, triangles, mask).map_err(|e| match e {
            Error::IndexOutOfRange { triangle, .. } | Error::DegenerateTriangle { triangle, .. } => {
                perr(tri_lines[triangle], e.to_string())
            }
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let write_mask = self.mask.iter().any(|&m| !m);
        let _ = writeln!(s, "{} {}", self.vertices.len(), self.triangles.len());
        for (p, &m) in self.vertices.iter().zip(&self.mask) {
            if write_mask {
                let _ = writeln!(s, "{} {} {} {}", p[0], p[1], p[2], m as u8);
            } else {
                let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
            }
        }
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        s
    }
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<SurfaceMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SurfaceMesh::parse(&text, path)
}

pub fn write_mesh(mesh: &SurfaceMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, mesh.to_text()).map_err(|e| Error::io(path, e))
}

/// Lumped mass and stiffness matrices of the masked patch.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    /// Diagonal of the lumped mass matrix (mm²).
    pub c: Vec<f64>,
    /// Stiffness matrix, CSR.
    pub g: CsMat<f64>,
    pub vertex_areas: Vec<f64>,
    /// Original mesh index of each analysis vertex.
    pub vertex_index: Vec<usize>,
}

impl FemMatrices {
    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn total_area(&self) -> f64 {
        self.vertex_areas.iter().sum()
    }
}

/// Linear-element assembly on the masked submesh.
pub fn assemble_fem(mesh: &SurfaceMesh) -> Result<FemMatrices> {
    let (sub, vertex_index) = mesh.masked_submesh();
    if sub.triangles.is_empty() {
        return Err(Error::EmptyMask);
    }
    sub.check_manifold()?;
    let n = sub.n_vertices();
    let mut c = vec![0.0; n];
    let mut g = TriMat::new((n, n));
    for tri in &sub.triangles {
        let p = tri.map(|i| sub.vertices[i]);
        // edge opposite each corner
        let e = [sub3(p[2], p[1]), sub3(p[0], p[2]), sub3(p[1], p[0])];
        let area = 0.5 * norm(cross(e[2], sub3(p[2], p[0])));
        for a in 0..3 {
            c[tri[a]] += area / 3.0;
            for b in 0..3 {
                g.add_triplet(tri[a], tri[b], dot3(e[a], e[b]) / (4.0 * area));
            }
        }
    }
    if let Some(v) = c.iter().position(|&x| x <= 0.0) {
        return Err(Error::invalid(format!("masked vertex {} has no masked triangle", vertex_index[v])));
    }
    Ok(FemMatrices { vertex_areas: c.clone(), c, g: g.to_csr(), vertex_index })
}

#[derive(Debug, Clone)]
pub struct SpdePrecision {
    pub q: CsMat<f64>,
    pub kappa: f64,
    pub tau: f64,
}

/// `Q = tau (kappa^4 C + 2 kappa^2 G + G C^-1 G)`.
pub fn spde_precision(fem: &FemMatrices, kappa: f64, tau: f64) -> Result<SpdePrecision> {
    let parts = SpdeParts::new(fem);
    Ok(SpdePrecision { q: parts.precision(kappa, tau)?, kappa, tau })
}

/// The three SPDE terms laid out on one shared sparsity pattern, so that
/// `Q(kappa, tau)` is a cheap linear combination.
#[derive(Debug, Clone)]
pub struct SpdeParts {
    pattern: CsMat<f64>,
    c: Vec<f64>,
    g: Vec<f64>,
    gcg: Vec<f64>,
}

impl SpdeParts {
    pub fn new(fem: &FemMatrices) -> Self {
        let n = fem.n();
        let inv_c: Vec<f64> = fem.c.iter().map(|x| 1.0 / x).collect();
        let mut cinv_g = fem.g.clone();
        for (i, mut row) in cinv_g.outer_iterator_mut().enumerate() {
            for (_, v) in row.iter_mut() {
                *v *= inv_c[i];
            }
        }
        let gcg: CsMat<f64> = &fem.g * &cinv_g;
        let eye: CsMat<f64> = CsMat::eye(n);
        // union pattern from structure alone: exact zeros in G (right angles) must stay stored
        let ones: CsMat<f64> = fem.g.map(|_| 1.0);
        let sq: CsMat<f64> = &ones * &ones;
        let with_g: CsMat<f64> = &sq + &ones;
        let mut pattern: CsMat<f64> = &with_g + &eye;
        pattern.data_mut().iter_mut().for_each(|v| *v = 1.0);

        let scatter = |m: &CsMat<f64>| {
            let mut out = vec![0.0; pattern.nnz()];
            for (v, (i, j)) in m.iter() {
                if *v != 0.0 {
                    out[locate(&pattern, i, j)] += *v;
                }
            }
            out
        };
        let mut cvals = vec![0.0; pattern.nnz()];
        for (i, &ci) in fem.c.iter().enumerate() {
            cvals[locate(&pattern, i, i)] = ci;
        }
        let g = scatter(&fem.g);
        let gcg = scatter(&gcg);
        SpdeParts { pattern, c: cvals, g, gcg }
    }

    pub fn n(&self) -> usize {
        self.pattern.rows()
    }

    /// Shared CSR pattern of C, G and G C^-1 G.
    pub fn pattern(&self) -> &CsMat<f64> {
        &self.pattern
    }

    /// Entry values of `Q` aligned with [`Self::pattern`].
    pub fn values(&self, kappa: f64, tau: f64) -> Vec<f64> {
        let k2 = kappa * kappa;
        let k4 = k2 * k2;
        (0..self.c.len()).map(|i| tau * (k4 * self.c[i] + 2.0 * k2 * self.g[i] + self.gcg[i])).collect()
    }

    /// Entry values of `dQ / d log(kappa)`.
    pub fn dlog_kappa_values(&self, kappa: f64, tau: f64) -> Vec<f64> {
        let k2 = kappa * kappa;
        let k4 = k2 * k2;
        (0..self.c.len()).map(|i| tau * (4.0 * k4 * self.c[i] + 4.0 * k2 * self.g[i])).collect()
    }

    pub fn precision(&self, kappa: f64, tau: f64) -> Result<CsMat<f64>> {
        if !(kappa > 0.0 && kappa.is_finite()) || !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!(
                "SPDE parameters must be positive and finite (kappa = {kappa}, tau = {tau})"
            )));
        }
        Ok(self.with_values(self.values(kappa, tau)))
    }

    pub fn with_values(&self, values: Vec<f64>) -> CsMat<f64> {
        let (indptr, indices, _) = self.pattern.clone().into_raw_storage();
        CsMat::new(self.pattern.shape(), indptr, indices, values)
    }
}

fn locate(m: &CsMat<f64>, i: usize, j: usize) -> usize {
    let start = m.indptr().index(i);
    let row = m.outer_view(i).expect("row in range");
    start + row.indices().binary_search(&j).expect("entry in pattern")
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    sub(a, b)
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}
