//! Discrete Signorini problem on the half-box: minimize the Dirichlet energy
//! subject to `u >= 0` on the thin plane with Dirichlet data on the outer
//! boundary.
//!
//! Rows of the operator are the negative Laplacian scaled by `h_min^2`. Thin
//! plane rows use the zero-Neumann reflection stencil multiplied by `1/2`,
//! which keeps the operator symmetric (half-cell control volumes).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, NodeKind, ScalarField, SpatialField};
use crate::real::{pairwise_sum, Real};

const FIXED: u8 = 0;
const INTERIOR: u8 = 1;
const PLANE: u8 = 2;
const CHUNK: usize = 4096;

/// Solution algorithm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Psor,
    ProjectedCgActiveset,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: Method,
    /// Over-relaxation factor for PSOR sweeps.
    pub omega: f64,
    /// Target for the KKT residual.
    pub tol: f64,
    /// Sweep budget (PSOR) or active-set iteration budget.
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { method: Method::Psor, omega: 1.7, tol: 1e-10, max_iter: 200_000 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega < 2.0) {
            return Err(Error::InvalidParameter(format!("omega must lie in (0,2), got {}", self.omega)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Grid plus Dirichlet data; only the values at outer-boundary nodes matter.
#[derive(Clone, Debug)]
pub struct VIProblem<T> {
    grid: Grid<T>,
    data: Vec<T>,
}

impl<T: Real> VIProblem<T> {
    pub fn from_fn(grid: Grid<T>, dirichlet: impl Fn(&[T]) -> T) -> Result<Self> {
        let data = (0..grid.len())
            .map(|i| if grid.kind(i) == NodeKind::OuterBoundary { dirichlet(&grid.point_of(i)) } else { T::zero() })
            .collect::<Vec<_>>();
        Self::from_values(grid, data)
    }

    pub fn from_field<F: SpatialField<T> + ?Sized>(grid: Grid<T>, f: &F) -> Result<Self> {
        let mut data = vec![T::zero(); grid.len()];
        for (i, d) in data.iter_mut().enumerate() {
            if grid.kind(i) == NodeKind::OuterBoundary {
                *d = f.value(&grid.point_of(i))?;
            }
        }
        Self::from_values(grid, data)
    }

    /// Uses the outer-boundary values of a full nodal vector.
    pub fn from_values(grid: Grid<T>, mut data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidGrid(format!("{} values for {} nodes", data.len(), grid.len())));
        }
        for (i, d) in data.iter_mut().enumerate() {
            if grid.kind(i) != NodeKind::OuterBoundary {
                *d = T::zero();
            } else if !d.is_finite() {
                return Err(Error::Validation(format!("non-finite Dirichlet value at node {i}")));
            }
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn dirichlet(&self) -> &[T] {
        &self.data
    }
}

/// Matrix-free stencil operator over all nodes; fixed nodes act as data.
#[derive(Clone, Debug)]
pub struct StencilOperator<T> {
    kinds: Vec<u8>,
    strides: Vec<usize>,
    coeff: Vec<T>,
    diag_interior: T,
    diag_plane: T,
    dim: usize,
    cell_volume: T,
    h_min: T,
}

pub fn assemble<T: Real>(problem: &VIProblem<T>) -> StencilOperator<T> {
    StencilOperator::new(&problem.grid)
}

impl<T: Real> StencilOperator<T> {
    pub fn new(grid: &Grid<T>) -> Self {
        let dim = grid.dim();
        let h_min = grid.min_spacing();
        let coeff: Vec<T> = grid.spacing().iter().map(|&h| (h_min / h) * (h_min / h)).collect();
        let kinds = (0..grid.len())
            .map(|i| match grid.kind(i) {
                NodeKind::Interior => INTERIOR,
                NodeKind::ThinPlane => PLANE,
                NodeKind::OuterBoundary => FIXED,
            })
            .collect();
        let tangential: T = coeff[..dim - 1].iter().copied().sum();
        Self {
            kinds,
            strides: grid.strides().to_vec(),
            diag_interior: T::lit(2.0) * (tangential + coeff[dim - 1]),
            diag_plane: tangential + coeff[dim - 1],
            coeff,
            dim,
            cell_volume: grid.spacing().iter().fold(T::one(), |a, &h| a * h),
            h_min,
        }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn is_free(&self, i: usize) -> bool {
        self.kinds[i] != FIXED
    }

    pub fn is_plane(&self, i: usize) -> bool {
        self.kinds[i] == PLANE
    }

    pub fn diag(&self, i: usize) -> T {
        if self.kinds[i] == PLANE {
            self.diag_plane
        } else {
            self.diag_interior
        }
    }

    /// Visits `(j, a_ij)` for the off-diagonal entries of free row `i`.
    #[inline]
    pub fn for_each_neighbor(&self, i: usize, mut f: impl FnMut(usize, T)) {
        let plane = self.kinds[i] == PLANE;
        let half = T::lit(0.5);
        for k in 0..self.dim - 1 {
            let w = if plane { half * self.coeff[k] } else { self.coeff[k] };
            f(i + self.strides[k], -w);
            f(i - self.strides[k], -w);
        }
        let cn = self.coeff[self.dim - 1];
        f(i + 1, -cn);
        if !plane {
            f(i - 1, -cn);
        }
    }

    #[inline]
    fn off_sum(&self, u: &[T], i: usize) -> T {
        let mut s = T::zero();
        self.for_each_neighbor(i, |j, a| s = s + a * u[j]);
        s
    }

    /// Residual `(A u)_i` of free row `i`, with fixed nodes contributing their data.
    #[inline]
    pub fn row_residual(&self, u: &[T], i: usize) -> T {
        self.diag(i) * u[i] + self.off_sum(u, i)
    }

    /// Residual at every node (zero at fixed nodes).
    pub fn residual(&self, u: &[T]) -> Vec<T> {
        let mut r = vec![T::zero(); u.len()];
        r.par_chunks_mut(CHUNK).enumerate().for_each(|(c, out)| {
            for (o, slot) in out.iter_mut().enumerate() {
                let i = c * CHUNK + o;
                if self.kinds[i] != FIXED {
                    *slot = self.row_residual(u, i);
                }
            }
        });
        r
    }

    /// Discrete `1/2 ∫ |∇u|^2` with half weights on thin-plane edges.
    pub fn energy(&self, u: &[T]) -> T {
        let per_chunk: Vec<T> = (0..u.len().div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = Vec::with_capacity(CHUNK);
                for i in c * CHUNK..((c + 1) * CHUNK).min(u.len()) {
                    // Each edge is counted from its free endpoint with the larger index,
                    // or from either endpoint when only one is free.
                    if self.kinds[i] == FIXED {
                        continue;
                    }
                    let mut e = T::zero();
                    self.for_each_neighbor(i, |j, a| {
                        if j < i || self.kinds[j] == FIXED {
                            let d = u[i] - u[j];
                            e = e - a * d * d;
                        }
                    });
                    acc.push(e);
                }
                pairwise_sum(&acc)
            })
            .collect();
        T::lit(0.5) * pairwise_sum(&per_chunk) * self.cell_volume / (self.h_min * self.h_min)
    }

    /// Dense matrix over the free nodes (tests and tiny problems only).
    pub fn to_dense(&self) -> (Vec<usize>, Vec<Vec<T>>) {
        let free: Vec<usize> = (0..self.len()).filter(|&i| self.is_free(i)).collect();
        let pos: std::collections::HashMap<usize, usize> = free.iter().enumerate().map(|(p, &i)| (i, p)).collect();
        let mut m = vec![vec![T::zero(); free.len()]; free.len()];
        for (p, &i) in free.iter().enumerate() {
            m[p][p] = self.diag(i);
            self.for_each_neighbor(i, |j, a| {
                if let Some(&q) = pos.get(&j) {
                    m[p][q] = m[p][q] + a;
                }
            });
        }
        (free, m)
    }
}

/// Max-norm breakdown of the discrete KKT conditions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct KktReport {
    /// `max |(Au)_i|` over interior rows.
    pub harmonic: f64,
    /// `max(0, -u)` over the thin plane.
    pub negativity: f64,
    /// `max |min(u, (Au)_i)|` over the thin plane.
    pub complementarity: f64,
    /// `max |min(u, -∂_n u)|` with the one-sided normal derivative stencil.
    pub stencil_complementarity: f64,
    /// Largest of the first three.
    pub max: f64,
}

pub fn kkt_of<T: Real>(op: &StencilOperator<T>, field: &ScalarField<T>) -> KktReport {
    let u = field.values();
    let grid = field.grid();
    let r = op.residual(u);
    let mut rep = KktReport::default();
    for i in 0..u.len() {
        match op.kinds[i] {
            INTERIOR => rep.harmonic = rep.harmonic.max(r[i].abs().to_f64_lossy()),
            PLANE => {
                let ui = u[i].to_f64_lossy();
                rep.negativity = rep.negativity.max((-ui).max(0.0));
                rep.complementarity = rep.complementarity.max(ui.min(r[i].to_f64_lossy()).abs());
                let flux = field.normal_derivative_at_node(&grid.multi_index(i)).to_f64_lossy();
                rep.stencil_complementarity = rep.stencil_complementarity.max(ui.min(-flux).abs());
            }
            _ => {}
        }
    }
    rep.max = rep.harmonic.max(rep.negativity).max(rep.complementarity);
    rep
}

/// Output of a solve.
#[derive(Clone, Debug)]
pub struct Solution<T> {
    pub u: ScalarField<T>,
    pub kkt_residual: f64,
    pub kkt: KktReport,
    pub iterations: usize,
    /// Flat indices of thin-plane nodes with `u = 0`.
    pub active_set: Vec<usize>,
    pub converged: bool,
    pub energy: f64,
    pub method: Method,
}

/// JSON-ready summary of a solve.
#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub kkt_residual: f64,
    pub energy: f64,
    pub converged: bool,
    pub method: Method,
    pub kkt: KktReport,
    pub active_nodes: usize,
    pub nodes: Vec<usize>,
}

impl<T: Real> Solution<T> {
    pub fn report(&self) -> SolveReport {
        SolveReport {
            iterations: self.iterations,
            kkt_residual: self.kkt_residual,
            energy: self.energy,
            converged: self.converged,
            method: self.method,
            kkt: self.kkt,
            active_nodes: self.active_set.len(),
            nodes: self.u.grid().nodes().to_vec(),
        }
    }
}

pub fn kkt_report<T: Real>(sol: &Solution<T>) -> KktReport {
    kkt_of(&StencilOperator::new(sol.u.grid()), &sol.u)
}

fn initial_state<T: Real>(problem: &VIProblem<T>, op: &StencilOperator<T>, guess: Option<&ScalarField<T>>) -> Result<Vec<T>> {
    let mut u = problem.data.clone();
    if let Some(g) = guess {
        let grid = &problem.grid;
        for i in 0..u.len() {
            if op.is_free(i) {
                let v = g.interpolate(&grid.point_of(i))?;
                u[i] = if op.is_plane(i) { v.max(T::zero()) } else { v };
            }
        }
    }
    Ok(u)
}

/// One lexicographic projected SOR sweep; returns the largest update.
pub fn psor_sweep<T: Real>(op: &StencilOperator<T>, u: &mut [T], omega: T) -> T {
    let mut change = T::zero();
    for i in 0..u.len() {
        let kind = op.kinds[i];
        if kind == FIXED {
            continue;
        }
        let gs = -op.off_sum(u, i) / op.diag(i);
        let mut v = u[i] + omega * (gs - u[i]);
        if kind == PLANE && v < T::zero() {
            v = T::zero();
        }
        change = change.max((v - u[i]).abs());
        u[i] = v;
    }
    change
}

fn finish<T: Real>(
    problem: &VIProblem<T>,
    op: &StencilOperator<T>,
    u: Vec<T>,
    iterations: usize,
    tol: f64,
    method: Method,
) -> Result<Solution<T>> {
    let energy = op.energy(&u).to_f64_lossy();
    let field = ScalarField::new(problem.grid.clone(), u)?;
    let kkt = kkt_of(op, &field);
    let active_set = (0..field.values().len()).filter(|&i| op.is_plane(i) && field.values()[i] == T::zero()).collect();
    Ok(Solution { kkt_residual: kkt.max, converged: kkt.max <= tol, kkt, iterations, active_set, energy, method, u: field })
}

fn kkt_of_vec<T: Real>(op: &StencilOperator<T>, u: &[T]) -> f64 {
    let r = op.residual(u);
    let mut m = 0.0f64;
    for i in 0..u.len() {
        let v = match op.kinds[i] {
            INTERIOR => r[i].abs(),
            PLANE => u[i].min(r[i]).abs().max(-u[i]),
            _ => continue,
        };
        m = m.max(v.to_f64_lossy());
    }
    m
}

fn run_psor<T: Real>(op: &StencilOperator<T>, u: &mut [T], cfg: &SolverConfig, budget: usize) -> (usize, bool) {
    const CHECK_EVERY: usize = 10;
    let omega = T::lit(cfg.omega);
    if kkt_of_vec(op, u) <= cfg.tol {
        return (0, true);
    }
    let mut sweeps = 0;
    while sweeps < budget {
        for _ in 0..CHECK_EVERY {
            psor_sweep(op, u, omega);
        }
        sweeps += CHECK_EVERY;
        if kkt_of_vec(op, u) <= cfg.tol {
            return (sweeps, true);
        }
    }
    (sweeps, false)
}

fn par_dot<T: Real>(a: &[T], b: &[T]) -> T {
    let parts: Vec<T> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).fold(T::zero(), |s, (&p, &q)| s + p * q))
        .collect();
    pairwise_sum(&parts)
}

/// Symmetric Gauss-Seidel preconditioner restricted to the `unknown` nodes.
fn sgs_apply<T: Real>(op: &StencilOperator<T>, unknown: &[bool], r: &[T], z: &mut [T]) {
    for (i, zi) in z.iter_mut().enumerate() {
        *zi = if unknown[i] { r[i] } else { T::zero() };
    }
    for i in 0..z.len() {
        if unknown[i] {
            let mut s = T::zero();
            op.for_each_neighbor(i, |j, a| {
                if j < i && unknown[j] {
                    s = s + a * z[j];
                }
            });
            z[i] = (z[i] - s) / op.diag(i);
        }
    }
    for i in (0..z.len()).rev() {
        if unknown[i] {
            let mut s = T::zero();
            op.for_each_neighbor(i, |j, a| {
                if j > i && unknown[j] {
                    s = s + a * z[j];
                }
            });
            z[i] = z[i] - s / op.diag(i);
        }
    }
}

fn restricted_apply<T: Real>(op: &StencilOperator<T>, unknown: &[bool], x: &[T], out: &mut [T]) {
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, o)| {
        for (k, slot) in o.iter_mut().enumerate() {
            let i = c * CHUNK + k;
            *slot = if unknown[i] {
                let mut s = op.diag(i) * x[i];
                op.for_each_neighbor(i, |j, a| {
                    if unknown[j] {
                        s = s + a * x[j];
                    }
                });
                s
            } else {
                T::zero()
            };
        }
    });
}

/// Preconditioned CG on the `unknown` rows, updating `u` in place until the
/// max-norm residual on those rows is below `tol`.
fn pcg_solve<T: Real>(op: &StencilOperator<T>, unknown: &[bool], u: &mut [T], tol: T, max_iter: usize) -> usize {
    let n = u.len();
    let mut r: Vec<T> = op.residual(u).into_iter().zip(unknown).map(|(v, &k)| if k { -v } else { T::zero() }).collect();
    let max_abs = |v: &[T]| v.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    if max_abs(&r) <= tol {
        return 0;
    }
    let mut z = vec![T::zero(); n];
    sgs_apply(op, unknown, &r, &mut z);
    let mut p = z.clone();
    let mut rz = par_dot(&r, &z);
    let mut ap = vec![T::zero(); n];
    for it in 1..=max_iter {
        restricted_apply(op, unknown, &p, &mut ap);
        let alpha = rz / par_dot(&p, &ap);
        u.par_iter_mut().zip(p.par_iter()).for_each(|(x, &d)| *x = *x + alpha * d);
        r.par_iter_mut().zip(ap.par_iter()).for_each(|(x, &d)| *x = *x - alpha * d);
        if it % 25 == 0 {
            // Refresh the recursive residual to avoid drift.
            for (i, v) in op.residual(u).into_iter().enumerate() {
                r[i] = if unknown[i] { -v } else { T::zero() };
            }
        }
        if max_abs(&r) <= tol {
            return it;
        }
        sgs_apply(op, unknown, &r, &mut z);
        let rz_new = par_dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(z.par_iter()).for_each(|(x, &d)| *x = d + beta * *x);
    }
    max_iter
}

fn run_active_set<T: Real>(op: &StencilOperator<T>, u: &mut [T], cfg: &SolverConfig) -> (usize, bool) {
    let n = u.len();
    let cg_tol = T::lit(0.1 * cfg.tol);
    let cg_budget = 20 * n.max(1000);
    let mut active: Vec<bool> = {
        let r = op.residual(u);
        (0..n).map(|i| op.is_plane(i) && u[i] - r[i] / op.diag(i) < T::zero()).collect()
    };
    let mut iterations = 0;
    for _ in 0..cfg.max_iter.max(1) {
        iterations += 1;
        for i in 0..n {
            if active[i] {
                u[i] = T::zero();
            }
        }
        let unknown: Vec<bool> = (0..n).map(|i| op.is_free(i) && !active[i]).collect();
        pcg_solve(op, &unknown, u, cg_tol, cg_budget);
        let r = op.residual(u);
        let next: Vec<bool> = (0..n).map(|i| op.is_plane(i) && u[i] - r[i] / op.diag(i) < T::zero()).collect();
        if next == active {
            break;
        }
        active = next;
    }
    for i in 0..n {
        if op.is_plane(i) && u[i] < T::zero() {
            u[i] = T::zero();
        }
    }
    // Projected sweeps remove the residual left by clamping and the CG tolerance.
    let (sweeps, ok) = run_psor(op, u, cfg, 2000);
    (iterations + sweeps, ok)
}

pub fn solve<T: Real>(problem: &VIProblem<T>, cfg: &SolverConfig) -> Result<Solution<T>> {
    solve_from(problem, cfg, None)
}

/// Solves starting from an interpolated initial guess for the free nodes.
pub fn solve_from<T: Real>(problem: &VIProblem<T>, cfg: &SolverConfig, guess: Option<&ScalarField<T>>) -> Result<Solution<T>> {
    cfg.validate()?;
    let op = assemble(problem);
    let mut u = initial_state(problem, &op, guess)?;
    let (iterations, _) = match cfg.method {
        Method::Psor => run_psor(&op, &mut u, cfg, cfg.max_iter),
        Method::ProjectedCgActiveset => run_active_set(&op, &mut u, cfg),
    };
    finish(problem, &op, u, iterations, cfg.tol, cfg.method)
}

/// Solves on successively refined grids ending at `fine`, each level seeded by
/// the previous one. The coarsest level has at least 17 tangential nodes.
pub fn solve_nested<T: Real>(
    fine: &Grid<T>,
    dirichlet: &(dyn Fn(&[T]) -> T + Sync),
    cfg: &SolverConfig,
) -> Result<Vec<Solution<T>>> {
    let mut grids = vec![fine.clone()];
    loop {
        let g = grids.last().unwrap();
        let coarse_nodes: Vec<usize> = g.nodes().iter().map(|&n| n.div_ceil(2)).collect();
        let (tmin, nmin) = (coarse_nodes[..g.dim() - 1].iter().min().copied().unwrap(), *coarse_nodes.last().unwrap());
        if g.nodes().iter().any(|n| n % 2 == 0) || tmin < 17 || nmin < 9 {
            break;
        }
        let spec = crate::field::GridSpec { lo: g.lo().to_vec(), hi: g.hi().to_vec(), nodes: coarse_nodes };
        grids.push(crate::field::build_grid(spec)?);
    }
    grids.reverse();
    let mut out: Vec<Solution<T>> = Vec::new();
    for g in grids {
        let problem = VIProblem::from_fn(g, dirichlet)?;
        let sol = solve_from(&problem, cfg, out.last().map(|s| &s.u))?;
        out.push(sol);
    }
    Ok(out)
}

/// Per-line free-boundary thresholds on the thin plane.
///
/// Along each grid line parallel to `x_{n-1}`, returns the position where the
/// one-sided indicator `s = u + h ∂_n u` changes sign, linearly interpolated
/// between nodes (`None` when the line has no sign change).
pub fn interface_thresholds<T: Real>(u: &ScalarField<T>) -> Vec<(Vec<T>, Option<T>)> {
    let g = u.grid();
    let d = g.dim();
    let nn1 = g.nodes()[d - 2];
    let lines: Vec<Vec<usize>> = if d == 2 {
        vec![vec![]]
    } else {
        (1..g.nodes()[0] - 1).map(|i| vec![i]).collect()
    };
    let hn = g.spacing()[d - 1];
    lines
        .into_iter()
        .map(|prefix| {
            let indicator = |j: usize| {
                let mut idx = prefix.clone();
                idx.push(j);
                idx.push(0);
                u.at(&idx) + hn * u.normal_derivative_at_node(&idx)
            };
            let tangential: Vec<T> = prefix.iter().enumerate().map(|(k, &i)| g.coord(k, i)).collect();
            let mut found = None;
            for j in 1..nn1 - 2 {
                let (a, b) = (indicator(j), indicator(j + 1));
                if a <= T::zero() && b > T::zero() {
                    let t = a / (a - b);
                    let x0 = g.coord(d - 2, j);
                    found = Some(x0 + t * g.spacing()[d - 2]);
                }
            }
            (tangential, found)
        })
        .collect()
}
