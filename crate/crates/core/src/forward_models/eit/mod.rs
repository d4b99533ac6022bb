//! Complete electrode model on a 2D laminate cross-section.
//!
//! Bilinear quadrilaterals on a structured `(Nx0·β^ℓ) × (Ny0·β^ℓ)` mesh.
//! Ply `k` has in-plane conductivity `diag(σ₁cos²θ_k + σ₃sin²θ_k, σ₂)`.
//! Electrodes are unions of whole boundary edges whose midpoints fall in the
//! electrode interval. The ground condition `Σ U_l = 0` enters through one
//! Lagrange multiplier; the field unknowns are eliminated with a banded
//! Cholesky factorization, leaving a small dense bordered system.

mod banded;

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use self::banded::{BandedCholesky, BandedSpd};
use super::{ForwardModel, MeshHierarchy, PriorSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Top,
    Bottom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Electrode {
    pub side: Side,
    pub center: f64,
    pub width: f64,
    pub impedance: f64,
}

impl Electrode {
    fn interval(&self) -> (f64, f64) {
        (self.center - 0.5 * self.width, self.center + 0.5 * self.width)
    }
}

/// A ply, listed from the bottom face upward. `angle` indexes `θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ply {
    pub thickness: f64,
    pub angle: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EitModelSpec {
    pub lx: f64,
    pub ly: f64,
    pub nx0: usize,
    pub ny0: usize,
    pub plies: Vec<Ply>,
    /// Orthotropic conductivities `(σ₁, σ₂, σ₃)`.
    pub sigma: [f64; 3],
    pub electrodes: Vec<Electrode>,
    pub currents: Vec<f64>,
    pub prior: PriorSpec,
    #[serde(default = "default_beta")]
    pub beta: u32,
    #[serde(default = "default_max_level")]
    pub max_level: usize,
}

fn default_beta() -> u32 {
    2
}

fn default_max_level() -> usize {
    4
}

impl EitModelSpec {
    /// Four equal plies, five electrodes per face, `|I| = 0.1`, `z = 0.1`,
    /// `σ = (0.05, 1e-3, 1e-3)`, angles `π/3, π/4, π/5, π/6 ± 0.05`.
    pub fn laminate() -> Self {
        use std::f64::consts::PI;
        let starts = [2.0, 6.0, 10.0, 14.0, 18.0];
        let mut electrodes = Vec::new();
        let mut currents = Vec::new();
        for (side, sign) in [(Side::Top, 1.0), (Side::Bottom, -1.0)] {
            for (k, &s) in starts.iter().enumerate() {
                electrodes.push(Electrode {
                    side,
                    center: s + 1.0,
                    width: 2.0,
                    impedance: 0.1,
                });
                let alternating = if k % 2 == 0 { 1.0 } else { -1.0 };
                currents.push(0.1 * sign * alternating);
            }
        }
        let centers = [PI / 3.0, PI / 4.0, PI / 5.0, PI / 6.0];
        let prior = PriorSpec::uniform(&centers.map(|c| (c - 0.05, c + 0.05))).expect("valid prior");
        Self {
            lx: 20.0,
            ly: 4.0,
            nx0: 10,
            ny0: 4,
            plies: (0..4)
                .map(|k| Ply {
                    thickness: 0.25,
                    angle: k,
                })
                .collect(),
            sigma: [0.05, 1e-3, 1e-3],
            electrodes,
            currents,
            prior,
            beta: 2,
            max_level: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lx > 0.0 && self.ly > 0.0) || self.nx0 == 0 || self.ny0 == 0 {
            return bad("domain extents and mesh resolution must be positive".into());
        }
        if self.beta < 2 {
            return bad("beta must be >= 2".into());
        }
        if self.sigma.iter().any(|&s| !(s > 0.0)) {
            return bad("all conductivities must be positive".into());
        }
        if self.electrodes.len() < 2 {
            return bad("at least two electrodes are required".into());
        }
        if self.currents.len() != self.electrodes.len() {
            return bad(format!(
                "{} currents given for {} electrodes",
                self.currents.len(),
                self.electrodes.len()
            ));
        }
        let scale = self.currents.iter().fold(0.0f64, |m, c| m.max(c.abs())).max(1.0);
        let total: f64 = self.currents.iter().sum();
        if total.abs() > 1e-12 * scale {
            return bad(format!("injected currents must sum to zero (sum = {total:e})"));
        }
        for e in &self.electrodes {
            let (a, b) = e.interval();
            if !(e.impedance > 0.0) || !(e.width > 0.0) || a < -1e-12 || b > self.lx + 1e-12 {
                return bad(format!("electrode {e:?} is invalid or leaves [0, lx]"));
            }
        }
        for side in [Side::Top, Side::Bottom] {
            let mut iv: Vec<(f64, f64)> = self
                .electrodes
                .iter()
                .filter(|e| e.side == side)
                .map(Electrode::interval)
                .collect();
            iv.sort_by(|x, y| x.0.total_cmp(&y.0));
            if iv.windows(2).any(|w| w[1].0 < w[0].1) {
                return bad(format!("electrodes on the {side:?} face overlap"));
            }
        }
        let frac: f64 = self.plies.iter().map(|p| p.thickness).sum();
        if self.plies.is_empty() || (frac - 1.0).abs() > 1e-9 {
            return bad("ply thickness fractions must sum to one".into());
        }
        for p in &self.plies {
            let rows = p.thickness * self.ny0 as f64;
            if (rows - rows.round()).abs() > 1e-9 || rows.round() < 1.0 {
                return bad(format!(
                    "ply thickness {} does not align with the coarse mesh (ny0 = {})",
                    p.thickness, self.ny0
                ));
            }
            if p.angle >= self.prior.dim() {
                return bad(format!("ply angle index {} has no prior dimension", p.angle));
            }
        }
        Ok(())
    }

    fn ply_rows(&self, ny: usize) -> Vec<usize> {
        // element row -> angle index
        let refine = ny / self.ny0;
        let mut rows = Vec::with_capacity(ny);
        for p in &self.plies {
            let count = (p.thickness * self.ny0 as f64).round() as usize * refine;
            rows.extend(std::iter::repeat_n(p.angle, count));
        }
        rows
    }
}

/// Mesh geometry at one level; built once per level and then read-only.
#[derive(Debug, Clone)]
struct LevelMesh {
    nx: usize,
    ny: usize,
    dx: f64,
    dy: f64,
    /// Per electrode: boundary edges as `(left node, right node)`.
    edges: Vec<Vec<(usize, usize)>>,
}

impl LevelMesh {
    fn new(spec: &EitModelSpec, level: usize) -> Self {
        let refine = (spec.beta as usize).pow(level as u32);
        let nx = spec.nx0 * refine;
        let ny = spec.ny0 * refine;
        let dx = spec.lx / nx as f64;
        let dy = spec.ly / ny as f64;
        let node = |i: usize, j: usize| i * (ny + 1) + j;
        let mut edges = Vec::with_capacity(spec.electrodes.len());
        for e in &spec.electrodes {
            let j = match e.side {
                Side::Top => ny,
                Side::Bottom => 0,
            };
            let (a, b) = e.interval();
            let mut list: Vec<(usize, usize)> = (0..nx)
                .filter(|&i| {
                    let mid = (i as f64 + 0.5) * dx;
                    mid >= a && mid <= b
                })
                .map(|i| (node(i, j), node(i + 1, j)))
                .collect();
            if list.is_empty() {
                let i = ((e.center / dx).floor() as usize).min(nx - 1);
                list.push((node(i, j), node(i + 1, j)));
            }
            edges.push(list);
        }
        Self { nx, ny, dx, dy, edges }
    }

    fn nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    fn bandwidth(&self) -> usize {
        self.ny + 2
    }
}

/// Field block, coupling block, electrode diagonal and right-hand side of
/// the bordered CEM system
///
/// ```text
/// [ K   B   0 ] [u]   [0]
/// [ Bᵀ  D   1 ] [U] = [I]
/// [ 0   1ᵀ  0 ] [λ]   [0]
/// ```
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    field: BandedSpd,
    coupling: DMatrix<f64>,
    electrode_diag: DVector<f64>,
    currents: DVector<f64>,
}

impl AssembledSystem {
    pub fn field_unknowns(&self) -> usize {
        self.field.dim()
    }

    pub fn electrodes(&self) -> usize {
        self.electrode_diag.len()
    }

    /// Dense copy of the full bordered matrix (for inspection at small levels).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.field_unknowns();
        let ne = self.electrodes();
        let size = n + ne + 1;
        let mut a = DMatrix::zeros(size, size);
        let bw = self.field.bandwidth();
        for i in 0..n {
            for j in i.saturating_sub(bw)..=i {
                let v = self.field.get(i, j);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        for l in 0..ne {
            for i in 0..n {
                let v = self.coupling[(i, l)];
                a[(i, n + l)] = v;
                a[(n + l, i)] = v;
            }
            a[(n + l, n + l)] = self.electrode_diag[l];
            a[(n + l, n + ne)] = 1.0;
            a[(n + ne, n + l)] = 1.0;
        }
        a
    }

    pub fn rhs(&self) -> DVector<f64> {
        let n = self.field_unknowns();
        let ne = self.electrodes();
        let mut b = DVector::zeros(n + ne + 1);
        b.rows_mut(n, ne).copy_from(&self.currents);
        b
    }
}

fn ply_conductivity(sigma: &[f64; 3], angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (sigma[0] * c * c + sigma[2] * s * s, sigma[1])
}

fn assemble(spec: &EitModelSpec, mesh: &LevelMesh, theta: &[f64]) -> AssembledSystem {
    let (nx, ny, dx, dy) = (mesh.nx, mesh.ny, mesh.dx, mesh.dy);
    let mut k = BandedSpd::zeros(mesh.nodes(), mesh.bandwidth());
    const KX: [[f64; 4]; 4] = [
        [2.0, -2.0, -1.0, 1.0],
        [-2.0, 2.0, 1.0, -1.0],
        [-1.0, 1.0, 2.0, -2.0],
        [1.0, -1.0, -2.0, 2.0],
    ];
    const KY: [[f64; 4]; 4] = [
        [2.0, 1.0, -1.0, -2.0],
        [1.0, 2.0, -2.0, -1.0],
        [-1.0, -2.0, 2.0, 1.0],
        [-2.0, -1.0, 1.0, 2.0],
    ];
    let rows = spec.ply_rows(ny);
    let cond: Vec<(f64, f64)> = rows.iter().map(|&a| ply_conductivity(&spec.sigma, theta[a])).collect();
    for i in 0..nx {
        for (j, &(kx, ky)) in cond.iter().enumerate() {
            let n0 = i * (ny + 1) + j;
            let local = [n0, n0 + ny + 1, n0 + ny + 2, n0 + 1];
            let ax = kx * dy / (6.0 * dx);
            let ay = ky * dx / (6.0 * dy);
            for a in 0..4 {
                for b in 0..=a {
                    k.add(local[a], local[b], ax * KX[a][b] + ay * KY[a][b]);
                }
            }
        }
    }
    let ne = spec.electrodes.len();
    let mut coupling = DMatrix::zeros(mesh.nodes(), ne);
    let mut diag = DVector::zeros(ne);
    for (l, (e, edges)) in spec.electrodes.iter().zip(&mesh.edges).enumerate() {
        let inv_z = 1.0 / e.impedance;
        for &(p, q) in edges {
            k.add(p, p, inv_z * dx / 3.0);
            k.add(q, q, inv_z * dx / 3.0);
            k.add(q, p, inv_z * dx / 6.0);
            coupling[(p, l)] -= inv_z * dx / 2.0;
            coupling[(q, l)] -= inv_z * dx / 2.0;
            diag[l] += inv_z * dx;
        }
    }
    AssembledSystem {
        field: k,
        coupling,
        electrode_diag: diag,
        currents: DVector::from_column_slice(&spec.currents),
    }
}

/// Assembled bordered system for `θ` at `level`.
pub fn assemble_system(spec: &EitModelSpec, theta: &[f64], level: usize) -> Result<AssembledSystem> {
    spec.validate()?;
    let mesh = LevelMesh::new(spec, level);
    Ok(assemble(spec, &mesh, theta))
}

#[derive(Debug, Clone)]
pub struct CemSolution {
    pub level: usize,
    pub nx: usize,
    pub ny: usize,
    /// Nodal potentials, node `(i, j)` at index `i·(ny+1) + j`.
    pub field: Vec<f64>,
    pub electrode_potentials: Vec<f64>,
    pub multiplier: f64,
}

impl CemSolution {
    /// Full solution vector `[u; U; λ]`, matching [`AssembledSystem::to_dense`].
    pub fn stacked(&self) -> DVector<f64> {
        let mut v = self.field.clone();
        v.extend_from_slice(&self.electrode_potentials);
        v.push(self.multiplier);
        DVector::from_vec(v)
    }
}

fn solve_assembled(sys: AssembledSystem, mesh: &LevelMesh, level: usize) -> Result<CemSolution> {
    let n = sys.field.dim();
    let ne = sys.electrodes();
    let chol: BandedCholesky = sys
        .field
        .clone()
        .cholesky()
        .map_err(|row| Error::Solver(format!("field block not positive definite at row {row}")))?;
    // X = K⁻¹ B, column by column
    let mut x = sys.coupling.clone();
    for mut col in x.column_iter_mut() {
        chol.solve_in_place(col.as_mut_slice());
    }
    let mut bordered = DMatrix::zeros(ne + 1, ne + 1);
    let schur = DMatrix::from_diagonal(&sys.electrode_diag) - sys.coupling.transpose() * &x;
    bordered.view_mut((0, 0), (ne, ne)).copy_from(&schur);
    for l in 0..ne {
        bordered[(l, ne)] = 1.0;
        bordered[(ne, l)] = 1.0;
    }
    let mut rhs = DVector::zeros(ne + 1);
    rhs.rows_mut(0, ne).copy_from(&sys.currents);
    let sol = bordered
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Solver("electrode system is singular".into()))?;
    let residual = (&bordered * &sol - &rhs).amax();
    let scale = rhs.amax().max(1e-300);
    if !(residual <= 1e-8 * scale * bordered.amax().max(1.0)) {
        return Err(Error::Solver(format!("electrode system residual {residual:e}")));
    }
    let potentials = sol.rows(0, ne).into_owned();
    let field = -(&x * &potentials);
    debug_assert_eq!(field.len(), n);
    Ok(CemSolution {
        level,
        nx: mesh.nx,
        ny: mesh.ny,
        field: field.as_slice().to_vec(),
        electrode_potentials: potentials.as_slice().to_vec(),
        multiplier: sol[ne],
    })
}

/// Solves the CEM system and returns the full solution.
pub fn solve_cem(spec: &EitModelSpec, theta: &[f64], level: usize) -> Result<CemSolution> {
    spec.validate()?;
    if level > spec.max_level {
        return Err(Error::LevelOutOfRange {
            level,
            max: spec.max_level,
        });
    }
    let mesh = LevelMesh::new(spec, level);
    let sys = assemble(spec, &mesh, theta);
    solve_assembled(sys, &mesh, level)
}

/// Electrode currents recovered from the Robin relation
/// `∫_{E_l} (U_l − u)/z_l ds`.
pub fn recovered_currents(spec: &EitModelSpec, solution: &CemSolution) -> Result<Vec<f64>> {
    let mesh = LevelMesh::new(spec, solution.level);
    Ok(spec
        .electrodes
        .iter()
        .zip(&mesh.edges)
        .zip(&solution.electrode_potentials)
        .map(|((e, edges), &ul)| {
            edges
                .iter()
                .map(|&(p, q)| {
                    let mean_u = 0.5 * (solution.field[p] + solution.field[q]);
                    (ul - mean_u) * mesh.dx / e.impedance
                })
                .sum()
        })
        .collect())
}

/// The EIT forward model: `θ` are ply angles, outputs are the first
/// `N_el − 1` electrode potentials.
#[derive(Debug, Clone)]
pub struct EitModel {
    spec: EitModelSpec,
    hierarchy: MeshHierarchy,
    meshes: Vec<OnceLock<LevelMesh>>,
}

impl EitModel {
    pub fn new(spec: EitModelSpec) -> Result<Self> {
        spec.validate()?;
        let h0 = spec.lx / spec.nx0 as f64;
        let hierarchy = MeshHierarchy::new(h0, spec.beta, 2.0, 1.5, 1.5)?;
        let meshes = (0..=spec.max_level).map(|_| OnceLock::new()).collect();
        Ok(Self {
            spec,
            hierarchy,
            meshes,
        })
    }

    pub fn with_hierarchy(mut self, hierarchy: MeshHierarchy) -> Self {
        self.hierarchy = hierarchy;
        self
    }

    pub fn spec(&self) -> &EitModelSpec {
        &self.spec
    }
}

impl ForwardModel for EitModel {
    fn name(&self) -> &str {
        "eit"
    }
    fn dim_theta(&self) -> usize {
        self.spec.prior.dim()
    }
    fn dim_output(&self) -> usize {
        self.spec.electrodes.len() - 1
    }
    fn hierarchy(&self) -> &MeshHierarchy {
        &self.hierarchy
    }
    fn max_level(&self) -> usize {
        self.spec.max_level
    }

    fn evaluate(&self, theta: &[f64], level: usize) -> Result<DVector<f64>> {
        let mesh = self.meshes[level].get_or_init(|| LevelMesh::new(&self.spec, level));
        let sys = assemble(&self.spec, mesh, theta);
        let sol = solve_assembled(sys, mesh, level)?;
        let q = self.dim_output();
        Ok(DVector::from_column_slice(&sol.electrode_potentials[..q]))
    }

    fn bounds(&self) -> Option<Vec<(f64, f64)>> {
        Some(self.spec.prior.bounds())
    }
}
