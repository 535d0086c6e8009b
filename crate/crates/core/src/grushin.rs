//! Baouendi-Grushin operators, weighted Sobolev norms and empirical estimates.
//!
//! Coordinates are `(x, t)` with `x` in the first `m` axes and `t` in the
//! remaining `n_t` axes. The grid is cell-centred on a box; derivatives use
//! central differences inside and second-order one-sided stencils on the
//! outermost cells, so every stencil is exact on quadratics and the second
//! differences are exact on cubics.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::legendre::LegendreSource;
use crate::real::pairwise_sum;
use crate::{Error, Result};

/// Cell-centred grid over a box in `R^{m + n_t}` together with the norm exponent.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrushinSpace {
    pub m: usize,
    pub nt: usize,
    pub p: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub nodes: Vec<usize>,
}

impl GrushinSpace {
    pub const DEFAULT_P: f64 = 5.0;

    pub fn new(m: usize, nt: usize, p: f64, lower: Vec<f64>, upper: Vec<f64>, nodes: Vec<usize>) -> Result<Self> {
        if m == 0 || nt == 0 {
            return Err(Error::InvalidParameter("m and n_t must be at least 1".into()));
        }
        if !(p > 1.0) {
            return Err(Error::InvalidParameter(format!("norm exponent p = {p} must exceed 1")));
        }
        let dim = m + nt;
        if lower.len() != dim || upper.len() != dim || nodes.len() != dim {
            return Err(Error::InvalidGrid(format!("box and node lists must have length {dim}")));
        }
        for k in 0..dim {
            if !(upper[k] > lower[k]) {
                return Err(Error::DegenerateExtent { axis: k });
            }
            if nodes[k] < 4 {
                return Err(Error::TooFewNodes { axis: k, nodes: nodes[k], min: 4 });
            }
        }
        Ok(Self { m, nt, p, lower, upper, nodes })
    }

    /// The box `[-half, half]^{m + n_t}` with `n` cells per axis.
    pub fn cube(m: usize, nt: usize, p: f64, half: f64, n: usize) -> Result<Self> {
        let dim = m + nt;
        Self::new(m, nt, p, vec![-half; dim], vec![half; dim], vec![n; dim])
    }

    pub fn with_p(&self, p: f64) -> Result<Self> {
        Self::new(self.m, self.nt, p, self.lower.clone(), self.upper.clone(), self.nodes.clone())
    }

    /// Same box with twice as many cells per axis.
    pub fn refined(&self) -> Self {
        Self { nodes: self.nodes.iter().map(|&n| 2 * n).collect(), ..self.clone() }
    }

    pub fn dim(&self) -> usize {
        self.m + self.nt
    }

    /// Homogeneous dimension `m + 2 n_t`.
    pub fn homogeneous_dimension(&self) -> usize {
        self.m + 2 * self.nt
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.nodes[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.spacing(k)).product()
    }

    fn stride(&self, axis: usize) -> usize {
        self.nodes[axis + 1..].iter().product()
    }

    fn coord_index(&self, idx: usize, axis: usize) -> usize {
        (idx / self.stride(axis)) % self.nodes[axis]
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        (0..self.dim())
            .map(|k| self.lower[k] + (self.coord_index(idx, k) as f64 + 0.5) * self.spacing(k))
            .collect()
    }

    /// `|x|` at a point.
    pub fn x_norm(&self, z: &[f64]) -> f64 {
        z[..self.m].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn on_boundary_layer(&self, idx: usize) -> bool {
        (0..self.dim()).any(|k| {
            let i = self.coord_index(idx, k);
            i == 0 || i + 1 == self.nodes[k]
        })
    }

    pub fn sample<F: Fn(&[f64]) -> f64 + Sync>(&self, f: F) -> Vec<f64> {
        (0..self.len()).into_par_iter().map(|i| f(&self.point(i))).collect()
    }

    fn check_len(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.len() {
            return Err(Error::InvalidParameter(format!("field has {} values, grid has {}", u.len(), self.len())));
        }
        Ok(())
    }

    /// First derivative along `axis`.
    pub fn d1(&self, u: &[f64], axis: usize) -> Vec<f64> {
        let s = self.stride(axis);
        let n = self.nodes[axis];
        let h = self.spacing(axis);
        (0..self.len())
            .into_par_iter()
            .map(|idx| {
                let i = self.coord_index(idx, axis);
                if i == 0 {
                    (-3.0 * u[idx] + 4.0 * u[idx + s] - u[idx + 2 * s]) / (2.0 * h)
                } else if i + 1 == n {
                    (3.0 * u[idx] - 4.0 * u[idx - s] + u[idx - 2 * s]) / (2.0 * h)
                } else {
                    (u[idx + s] - u[idx - s]) / (2.0 * h)
                }
            })
            .collect()
    }

    /// Pure second derivative along `axis`.
    pub fn d2(&self, u: &[f64], axis: usize) -> Vec<f64> {
        let s = self.stride(axis);
        let n = self.nodes[axis];
        let h2 = self.spacing(axis).powi(2);
        (0..self.len())
            .into_par_iter()
            .map(|idx| {
                let i = self.coord_index(idx, axis);
                if i == 0 {
                    (2.0 * u[idx] - 5.0 * u[idx + s] + 4.0 * u[idx + 2 * s] - u[idx + 3 * s]) / h2
                } else if i + 1 == n {
                    (2.0 * u[idx] - 5.0 * u[idx - s] + 4.0 * u[idx - 2 * s] - u[idx - 3 * s]) / h2
                } else {
                    (u[idx + s] - 2.0 * u[idx] + u[idx - s]) / h2
                }
            })
            .collect()
    }

    /// Second derivative `∂_i ∂_j u`.
    pub fn d2_mixed(&self, u: &[f64], i: usize, j: usize) -> Vec<f64> {
        if i == j {
            self.d2(u, i)
        } else {
            self.d1(&self.d1(u, j), i)
        }
    }
}

/// `L_0 u = Δ_x u + |x|^2 Δ_t u`.
pub fn apply_l0(space: &GrushinSpace, u: &[f64]) -> Result<Vec<f64>> {
    apply_la(space, u, 1.0)
}

/// `a^2 |x|^2 Δ_t u + Δ_x u`; with `x = (y_{n-1}, y_n)` and `t = y''` this is the
/// operator obtained from the Legendre equation at the blowup.
pub fn apply_la(space: &GrushinSpace, u: &[f64], a: f64) -> Result<Vec<f64>> {
    space.check_len(u)?;
    let mut lx = vec![0.0; space.len()];
    for k in 0..space.m {
        for (acc, d) in lx.iter_mut().zip(space.d2(u, k)) {
            *acc += d;
        }
    }
    let mut lt = vec![0.0; space.len()];
    for k in space.m..space.dim() {
        for (acc, d) in lt.iter_mut().zip(space.d2(u, k)) {
            *acc += d;
        }
    }
    Ok((0..space.len())
        .into_par_iter()
        .map(|idx| {
            let r = space.x_norm(&space.point(idx));
            lx[idx] + a * a * r * r * lt[idx]
        })
        .collect())
}

/// `L_a v` at a point `y = (y'', y_{n-1}, y_n)` from the Hessian of a Legendre source.
pub fn apply_la_at<S: LegendreSource + ?Sized>(source: &S, y: &[f64], a: f64) -> Result<f64> {
    let n = source.dim();
    if y.len() != n || n < 2 {
        return Err(Error::InvalidParameter(format!("point of length {} for dimension {n}", y.len())));
    }
    let h = source.hessian(y)?;
    let (ia, ib) = (n - 2, n - 1);
    let rho2 = y[ia] * y[ia] + y[ib] * y[ib];
    let tangential: f64 = (0..n - 2).map(|i| h[i][i]).sum();
    Ok(a * a * rho2 * tangential + h[ia][ia] + h[ib][ib])
}

/// Subset of the grid over which norms are integrated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Region {
    All,
    /// `C_r = {|x| < r, |t| < r^2}` centred at the origin.
    Cylinder(f64),
}

impl Region {
    fn contains(&self, space: &GrushinSpace, z: &[f64]) -> bool {
        match *self {
            Region::All => true,
            Region::Cylinder(r) => {
                let t = z[space.m..].iter().map(|v| v * v).sum::<f64>().sqrt();
                space.x_norm(z) < r && t < r * r
            }
        }
    }

    fn check_inside(&self, space: &GrushinSpace) -> Result<()> {
        if let Region::Cylinder(r) = *self {
            for k in 0..space.dim() {
                let reach = if k < space.m { r } else { r * r };
                if space.lower[k] > -reach || space.upper[k] < reach {
                    return Err(Error::DomainExceeded(format!("cylinder of radius {r} leaves the box on axis {k}")));
                }
            }
        }
        Ok(())
    }
}

/// Composite-midpoint `L^p` norm of `g` over a region; `p = ∞` gives the maximum.
pub fn lp_norm(space: &GrushinSpace, g: &[f64], p: f64, region: Region) -> f64 {
    let vol = space.cell_volume();
    let mask: Vec<bool> = (0..space.len()).map(|i| region.contains(space, &space.point(i))).collect();
    if p.is_infinite() {
        return g.iter().zip(&mask).filter(|(_, &m)| m).fold(0.0, |acc, (v, _)| acc.max(v.abs()));
    }
    let terms: Vec<f64> = g.iter().zip(&mask).map(|(v, &m)| if m { v.abs().powf(p) * vol } else { 0.0 }).collect();
    pairwise_sum(&terms).powf(1.0 / p)
}

/// `‖∂¹_w u‖_p` and `‖∂²_w u‖_p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WeightedNorms {
    pub first: f64,
    pub second: f64,
}

/// Weighted norms over the whole grid.
pub fn weighted_norms(space: &GrushinSpace, u: &[f64]) -> Result<WeightedNorms> {
    weighted_norms_in(space, u, Region::All)
}

pub fn weighted_norms_in(space: &GrushinSpace, u: &[f64], region: Region) -> Result<WeightedNorms> {
    Ok(WeightedNorms { first: first_norm(space, u, region)?, second: second_norm(space, u, region)? })
}

fn x_weights(space: &GrushinSpace, power: i32) -> Vec<f64> {
    (0..space.len()).into_par_iter().map(|i| space.x_norm(&space.point(i)).powi(power)).collect()
}

fn first_norm(space: &GrushinSpace, u: &[f64], region: Region) -> Result<f64> {
    space.check_len(u)?;
    let p = space.p;
    let grads: Vec<Vec<f64>> = (0..space.dim()).map(|k| space.d1(u, k)).collect();
    let w = x_weights(space, 1);
    let gx: Vec<f64> = (0..space.len()).map(|i| (0..space.m).map(|k| grads[k][i].powi(2)).sum::<f64>().sqrt()).collect();
    let gt: Vec<f64> = (0..space.len())
        .map(|i| w[i] * (space.m..space.dim()).map(|k| grads[k][i].powi(2)).sum::<f64>().sqrt())
        .collect();
    Ok(lp_norm(space, &gx, p, region) + lp_norm(space, &gt, p, region))
}

fn second_norm(space: &GrushinSpace, u: &[f64], region: Region) -> Result<f64> {
    space.check_len(u)?;
    let p = space.p;
    let (m, dim) = (space.m, space.dim());
    let w1 = x_weights(space, 1);
    let w2 = x_weights(space, 2);
    let weighted = |d: Vec<f64>, w: &[f64]| -> Vec<f64> { d.iter().zip(w).map(|(a, b)| a * b).collect() };
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            total += lp_norm(space, &space.d2_mixed(u, i, j), p, region);
        }
    }
    for i in 0..m {
        for j in m..dim {
            total += lp_norm(space, &weighted(space.d2_mixed(u, i, j), &w1), p, region);
        }
    }
    for i in m..dim {
        for j in m..dim {
            total += lp_norm(space, &weighted(space.d2_mixed(u, i, j), &w2), p, region);
        }
    }
    for j in m..dim {
        total += lp_norm(space, &space.d1(u, j), p, region);
    }
    Ok(total)
}

/// Smooth compactly supported bump on `(-1, 1)`, equal to 1 at the origin.
pub fn bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

/// Tensor bump times a quadratic polynomial in the local coordinates
/// `s_k = (z_k - c_k) / w_k`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BumpSpec {
    pub center: Vec<f64>,
    pub widths: Vec<f64>,
    /// Coefficients of `1, s_k, s_k s_l (k <= l)` in that order.
    pub coeffs: Vec<f64>,
}

impl BumpSpec {
    pub fn eval(&self, z: &[f64]) -> f64 {
        let s: Vec<f64> = z.iter().zip(&self.center).zip(&self.widths).map(|((z, c), w)| (z - c) / w).collect();
        let envelope: f64 = s.iter().map(|&v| bump(v)).product();
        if envelope == 0.0 {
            return 0.0;
        }
        let d = s.len();
        let mut poly = self.coeffs[0];
        let mut c = 1;
        for &v in &s {
            poly += self.coeffs[c] * v;
            c += 1;
        }
        for k in 0..d {
            for l in k..d {
                poly += self.coeffs[c] * s[k] * s[l];
                c += 1;
            }
        }
        envelope * poly
    }

    /// The member `z ↦ u(λx, λ^2 t)`.
    pub fn dilated(&self, m: usize, lambda: f64) -> Self {
        let scale = |k: usize| if k < m { lambda } else { lambda * lambda };
        Self {
            center: self.center.iter().enumerate().map(|(k, c)| c / scale(k)).collect(),
            widths: self.widths.iter().enumerate().map(|(k, w)| w / scale(k)).collect(),
            coeffs: self.coeffs.clone(),
        }
    }

    /// The member `(x, t) ↦ u(x, t - shift)`.
    pub fn translated_t(&self, m: usize, shift: &[f64]) -> Self {
        let mut out = self.clone();
        for (c, s) in out.center[m..].iter_mut().zip(shift) {
            *c += s;
        }
        out
    }
}

type MemberFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// One test function of a family.
#[derive(Clone)]
pub struct FamilyMember {
    pub label: String,
    f: MemberFn,
}

impl FamilyMember {
    pub fn new<F: Fn(&[f64]) -> f64 + Send + Sync + 'static>(label: impl Into<String>, f: F) -> Self {
        Self { label: label.into(), f: Arc::new(f) }
    }

    pub fn from_bump(label: impl Into<String>, spec: BumpSpec) -> Self {
        Self::new(label, move |z| spec.eval(z))
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        (self.f)(z)
    }
}

impl std::fmt::Debug for FamilyMember {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FamilyMember").field("label", &self.label).finish()
    }
}

/// Test family with an identifier recorded in reports.
#[derive(Clone, Debug)]
pub struct TestFamily {
    pub id: String,
    pub members: Vec<FamilyMember>,
}

/// Parameters of the seeded bump family.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BumpFamilyConfig {
    pub count: usize,
    pub seed: u64,
    /// Supports stay inside `[-reach, reach]` on every axis.
    pub reach: f64,
    pub min_width: f64,
    pub max_width: f64,
}

impl Default for BumpFamilyConfig {
    fn default() -> Self {
        Self { count: 20, seed: 20_240_601, reach: 0.85, min_width: 0.35, max_width: 0.6 }
    }
}

/// Seeded tensor-bump specs for an `(m, n_t)` space.
pub fn bump_specs(m: usize, nt: usize, cfg: &BumpFamilyConfig) -> Vec<BumpSpec> {
    let dim = m + nt;
    let ncoeff = 1 + dim + dim * (dim + 1) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.count)
        .map(|_| {
            let widths: Vec<f64> = (0..dim).map(|_| rng.random_range(cfg.min_width..=cfg.max_width)).collect();
            let center: Vec<f64> = widths
                .iter()
                .map(|w| {
                    let room = (cfg.reach - w).max(0.0);
                    if room > 0.0 { rng.random_range(-room..=room) } else { 0.0 }
                })
                .collect();
            let mut coeffs: Vec<f64> = (0..ncoeff).map(|_| rng.random_range(-1.0..=1.0)).collect();
            coeffs[0] += 2.0;
            BumpSpec { center, widths, coeffs }
        })
        .collect()
}

impl TestFamily {
    pub fn from_specs(id: impl Into<String>, specs: Vec<BumpSpec>) -> Self {
        let members = specs.into_iter().enumerate().map(|(k, s)| FamilyMember::from_bump(format!("bump{k}"), s)).collect();
        Self { id: id.into(), members }
    }

    /// The default family: `count` seeded tensor bumps times quadratics.
    pub fn bumps(m: usize, nt: usize, cfg: &BumpFamilyConfig) -> Self {
        Self::from_specs(format!("tensor-bump-quadratic/m{m}-nt{nt}/n{}/seed{}", cfg.count, cfg.seed), bump_specs(m, nt, cfg))
    }
}

/// Per-member ratios at one resolution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioSample {
    pub sup_ratio: f64,
    pub ratios: Vec<Option<f64>>,
    pub used: usize,
    pub warnings: Vec<String>,
}

/// JSON report for the Grushin diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrushinReport {
    pub p: f64,
    /// Target exponent; `None` denotes `L^∞`.
    pub q: Option<f64>,
    pub family_id: String,
    pub sup_ratio: f64,
    pub sup_ratio_refined: f64,
    pub refinement_drift: f64,
    pub used: usize,
    pub warnings: Vec<String>,
}

impl GrushinReport {
    fn from_samples(p: f64, q: Option<f64>, family_id: &str, coarse: RatioSample, fine: RatioSample) -> Self {
        let drift = (fine.sup_ratio - coarse.sup_ratio).abs() / coarse.sup_ratio;
        let mut warnings = coarse.warnings;
        warnings.extend(fine.warnings.into_iter().map(|w| format!("refined grid: {w}")));
        Self {
            p,
            q,
            family_id: family_id.to_string(),
            sup_ratio: coarse.sup_ratio,
            sup_ratio_refined: fine.sup_ratio,
            refinement_drift: drift,
            used: coarse.used.min(fine.used),
            warnings,
        }
    }
}

fn boundary_defect(space: &GrushinSpace, u: &[f64]) -> f64 {
    let scale = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let edge = (0..space.len()).filter(|&i| space.on_boundary_layer(i)).fold(0.0f64, |a, i| a.max(u[i].abs()));
    if scale > 0.0 { edge / scale } else { 0.0 }
}

const SUPPORT_TOL: f64 = 1e-10;
const DEGENERATE_TOL: f64 = 1e-12;

fn collect_ratios<F>(space: &GrushinSpace, family: &TestFamily, ratio: F) -> Result<RatioSample>
where
    F: Fn(&[f64]) -> Result<(f64, f64)> + Sync,
{
    if family.members.is_empty() {
        return Err(Error::DegenerateField("empty test family".into()));
    }
    let results: Vec<Result<(Option<f64>, Option<String>)>> = family
        .members
        .par_iter()
        .map(|member| {
            let u = space.sample(|z| member.eval(z));
            let defect = boundary_defect(space, &u);
            if defect > SUPPORT_TOL {
                return Ok((None, Some(format!("{} excluded: does not vanish near the boundary ({defect:.2e})", member.label))));
            }
            let (num, den) = ratio(&u)?;
            if den < DEGENERATE_TOL {
                return Ok((None, Some(format!("{} excluded: denominator {den:.2e} below {DEGENERATE_TOL:e}", member.label))));
            }
            Ok((Some(num / den), None))
        })
        .collect();
    let mut ratios = Vec::with_capacity(results.len());
    let mut warnings = Vec::new();
    for r in results {
        let (ratio, warning) = r?;
        ratios.push(ratio);
        warnings.extend(warning);
    }
    let used = ratios.iter().flatten().count();
    if used == 0 {
        return Err(Error::DegenerateField("every family member was excluded".into()));
    }
    let sup_ratio = ratios.iter().flatten().fold(0.0f64, |a, &r| a.max(r));
    Ok(RatioSample { sup_ratio, ratios, used, warnings })
}

fn require_even_m(space: &GrushinSpace) -> Result<()> {
    if space.m < 2 || !space.m.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("the L^p estimate needs an even m >= 2, got m = {}", space.m)));
    }
    Ok(())
}

/// Sup over the family of `‖∂²_w u‖_p / ‖L_0 u‖_p` on one grid.
pub fn empirical_lp_constant(space: &GrushinSpace, family: &TestFamily) -> Result<RatioSample> {
    require_even_m(space)?;
    collect_ratios(space, family, |u| {
        let lu = apply_l0(space, u)?;
        Ok((second_norm(space, u, Region::All)?, lp_norm(space, &lu, space.p, Region::All)))
    })
}

/// Empirical `C_p` on `space` and on its refinement.
pub fn lp_constant_report(space: &GrushinSpace, family: &TestFamily) -> Result<GrushinReport> {
    let coarse = empirical_lp_constant(space, family)?;
    let fine = empirical_lp_constant(&space.refined(), family)?;
    Ok(GrushinReport::from_samples(space.p, Some(space.p), &family.id, coarse, fine))
}

/// Target exponent of the embedding: `Some(q)` with `1/q = 1/p - 1/Q`, or `None` for `L^∞` when `p > Q`.
pub fn embedding_exponent(space: &GrushinSpace) -> Result<Option<f64>> {
    let q_hom = space.homogeneous_dimension() as f64;
    let p = space.p;
    if p < q_hom {
        Ok(Some(p * q_hom / (q_hom - p)))
    } else if p > q_hom {
        Ok(None)
    } else {
        Err(Error::InvalidParameter(format!("p = {p} equals the homogeneous dimension; no embedding exponent")))
    }
}

/// Sup over the family of `‖u‖_q / ‖∂¹_w u‖_p` on one grid.
pub fn embedding_ratios(space: &GrushinSpace, family: &TestFamily, q: Option<f64>) -> Result<RatioSample> {
    let q = q.unwrap_or(f64::INFINITY);
    collect_ratios(space, family, |u| Ok((lp_norm(space, u, q, Region::All), first_norm(space, u, Region::All)?)))
}

/// Embedding check on `space` and its refinement. `q` must match the exponent relation
/// (`None` requests `L^∞`, which needs `p > Q`).
pub fn embedding_check(space: &GrushinSpace, family: &TestFamily, q: Option<f64>) -> Result<GrushinReport> {
    let expected = embedding_exponent(space)?;
    match (expected, q) {
        (Some(e), Some(q)) if (q - e).abs() <= 1e-9 * e => {}
        (None, None) => {}
        (None, Some(q)) if q.is_infinite() => {}
        _ => {
            return Err(Error::InvalidParameter(format!(
                "exponent q = {q:?} violates the embedding relation for p = {}, Q = {} (expected {expected:?})",
                space.p,
                space.homogeneous_dimension()
            )))
        }
    }
    let q = expected;
    let coarse = embedding_ratios(space, family, q)?;
    let fine = embedding_ratios(&space.refined(), family, q)?;
    Ok(GrushinReport::from_samples(space.p, q, &family.id, coarse, fine))
}

/// Coefficient matrix `B(x, t)` of size `(m + m n_t)^2`, row-major.
pub type CoeffField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// `B ≡ I`.
pub fn identity_coeffs(space: &GrushinSpace) -> CoeffField {
    let k = space.m + space.m * space.nt;
    Arc::new(move |_| {
        let mut b = vec![0.0; k * k];
        for i in 0..k {
            b[i * k + i] = 1.0;
        }
        b
    })
}

/// `B = I + δ0 S(x, t)` with a smooth symmetric `S` whose entries lie in `[-1, 1]`.
pub fn perturbed_coeffs(space: &GrushinSpace, delta0: f64) -> CoeffField {
    let k = space.m + space.m * space.nt;
    Arc::new(move |z| {
        let mut b = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let phase: f64 = z.iter().enumerate().map(|(a, v)| (a + 1) as f64 * v).sum();
                let s = ((i + 2 * j + i * j) as f64 + phase).sin() * ((j + 2 * i + i * j) as f64 - phase).cos();
                let sym = if i == j { s.abs() } else { s };
                b[i * k + j] = f64::from(u8::from(i == j)) + delta0 * sym;
            }
        }
        for i in 0..k {
            for j in 0..i {
                let avg = 0.5 * (b[i * k + j] + b[j * k + i]);
                b[i * k + j] = avg;
                b[j * k + i] = avg;
            }
        }
        b
    })
}

/// `ℓ = A B Aᵀ` with `A = diag(I_m, X, ..., X)` and `X = (x_1, ..., x_m)`.
pub fn operator_matrix(m: usize, nt: usize, x: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let k = m + m * nt;
    let dim = m + nt;
    let mut a = vec![vec![0.0; k]; dim];
    for i in 0..m {
        a[i][i] = 1.0;
    }
    for j in 0..nt {
        for i in 0..m {
            a[m + j][m + j * m + i] = x[i];
        }
    }
    let mut ab = vec![vec![0.0; k]; dim];
    for r in 0..dim {
        for c in 0..k {
            ab[r][c] = (0..k).map(|s| a[r][s] * b[s * k + c]).sum();
        }
    }
    let mut l = vec![vec![0.0; dim]; dim];
    for r in 0..dim {
        for c in 0..dim {
            l[r][c] = (0..k).map(|s| ab[r][s] * a[c][s]).sum();
        }
    }
    l
}

/// `L u = Σ ℓ_ij ∂_ij u`.
pub fn apply_perturbed(space: &GrushinSpace, u: &[f64], coeffs: &CoeffField) -> Result<Vec<f64>> {
    space.check_len(u)?;
    let dim = space.dim();
    let mut second = vec![vec![Vec::new(); dim]; dim];
    for i in 0..dim {
        for j in i..dim {
            second[i][j] = space.d2_mixed(u, i, j);
        }
    }
    Ok((0..space.len())
        .into_par_iter()
        .map(|idx| {
            let z = space.point(idx);
            let l = operator_matrix(space.m, space.nt, &z[..space.m], &coeffs(&z));
            let mut acc = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    let (a, b) = if i <= j { (i, j) } else { (j, i) };
                    acc += l[i][j] * second[a][b][idx];
                }
            }
            acc
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbedConfig {
    pub r: f64,
    pub sigma: f64,
    /// Declared bound on `max |b_ij - δ_ij|`.
    pub delta0: f64,
    /// Smallness threshold above which a warning is issued.
    pub delta0_limit: f64,
}

impl Default for PerturbedConfig {
    fn default() -> Self {
        Self { r: 0.9, sigma: 0.5, delta0: 0.1, delta0_limit: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbedReport {
    pub p: f64,
    pub r: f64,
    pub sigma: f64,
    pub delta0: f64,
    pub measured_delta: f64,
    /// `‖∂²_w u‖_{C_{σr}} (1-σ)^2 r^2 / (r^2 ‖Lu‖_{C_r} + ‖u‖_{C_r})` per member.
    pub constants: Vec<f64>,
    pub max_constant: f64,
    pub finite: bool,
    pub warnings: Vec<String>,
}

/// Measures the constant of the interior estimate for the perturbed operator on each member.
pub fn perturbed_estimate_check(
    space: &GrushinSpace,
    family: &TestFamily,
    coeffs: &CoeffField,
    cfg: &PerturbedConfig,
) -> Result<PerturbedReport> {
    if !(cfg.sigma > 0.0 && cfg.sigma < 1.0) || !(cfg.r > 0.0) {
        return Err(Error::InvalidParameter(format!("need 0 < σ < 1 and r > 0, got σ = {}, r = {}", cfg.sigma, cfg.r)));
    }
    let outer = Region::Cylinder(cfg.r);
    let inner = Region::Cylinder(cfg.sigma * cfg.r);
    outer.check_inside(space)?;
    let mut warnings = Vec::new();
    if cfg.delta0 > cfg.delta0_limit {
        warnings.push(format!(
            "δ0 = {} exceeds the smallness threshold {}; the estimate is not guaranteed",
            cfg.delta0, cfg.delta0_limit
        ));
    }
    let k = space.m + space.m * space.nt;
    let measured_delta = (0..space.len())
        .into_par_iter()
        .map(|idx| {
            let z = space.point(idx);
            if !outer.contains(space, &z) {
                return 0.0;
            }
            let b = coeffs(&z);
            (0..k * k).fold(0.0f64, |acc, e| {
                let id = if e / k == e % k { 1.0 } else { 0.0 };
                acc.max((b[e] - id).abs())
            })
        })
        .reduce(|| 0.0, f64::max);
    if measured_delta > cfg.delta0 * (1.0 + 1e-12) {
        return Err(Error::Validation(format!("coefficients deviate from I by {measured_delta:.3e} > δ0 = {}", cfg.delta0)));
    }
    let p = space.p;
    let r2 = cfg.r * cfg.r;
    let scale = (1.0 - cfg.sigma).powi(2) * r2;
    let constants: Vec<f64> = family
        .members
        .iter()
        .map(|member| {
            let u = space.sample(|z| member.eval(z));
            let lu = apply_perturbed(space, &u, coeffs)?;
            let lhs = second_norm(space, &u, inner)?;
            let rhs = r2 * lp_norm(space, &lu, p, outer) + lp_norm(space, &u, p, outer);
            Ok(if rhs > 0.0 { lhs * scale / rhs } else if lhs == 0.0 { 0.0 } else { f64::INFINITY })
        })
        .collect::<Result<_>>()?;
    let max_constant = constants.iter().fold(0.0f64, |a, &c| a.max(c));
    Ok(PerturbedReport {
        p,
        r: cfg.r,
        sigma: cfg.sigma,
        delta0: cfg.delta0,
        measured_delta,
        finite: max_constant.is_finite(),
        constants,
        max_constant,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::legendre::grushin_coefficient;
    use crate::profiles::{BlowupProfile, LegendreBlowup};

    fn space3(n: usize) -> GrushinSpace {
        GrushinSpace::cube(2, 1, 5.0, 1.0, n).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn l0_on_polynomials() {
        let s = space3(10);
        let lu = apply_l0(&s, &s.sample(|z| z[0] * z[0])).unwrap();
        assert!(lu.iter().all(|v| (v - 2.0).abs() < 1e-10));
        let lu = apply_l0(&s, &s.sample(|z| z[2] * z[2])).unwrap();
        let want = s.sample(|z| 2.0 * (z[0] * z[0] + z[1] * z[1]));
        assert!(max_abs_diff(&lu, &want) < 1e-10);
        let lu = apply_l0(&s, &s.sample(|z| z[0] * z[0] * z[2])).unwrap();
        assert!(max_abs_diff(&lu, &s.sample(|z| 2.0 * z[2])) < 1e-10);
        let lu = apply_l0(&s, &s.sample(|z| z[2])).unwrap();
        assert!(lu.iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn la_matches_grid_and_legendre_source() {
        let u0 = BlowupProfile::standard(3, 1.0_f64);
        let v = LegendreBlowup::new(&u0).unwrap();
        let a = grushin_coefficient(1.0);
        let y = [0.1, 0.3, -0.2];
        let direct = apply_la_at(&v, &y, a).unwrap();
        let h = v.hessian(&y).unwrap();
        let rho2 = 0.3f64 * 0.3 + 0.2 * 0.2;
        assert!((direct - (a * a * rho2 * h[0][0] + h[1][1] + h[2][2])).abs() < 1e-12);
        let s = space3(8);
        let u = s.sample(|z| z[0] * z[0] * z[1] + z[2] * z[2]);
        let la = apply_la(&s, &u, 0.5).unwrap();
        let want = s.sample(|z| 2.0 * z[1] + 0.25 * 2.0 * (z[0] * z[0] + z[1] * z[1]));
        assert!(max_abs_diff(&la, &want) < 1e-10);
    }

    #[test]
    fn norms_of_trivial_fields() {
        let s = GrushinSpace::cube(2, 1, 2.0, 0.5, 8).unwrap();
        let zero = vec![0.0; s.len()];
        let w = weighted_norms(&s, &zero).unwrap();
        assert_eq!((w.first, w.second), (0.0, 0.0));
        let w = weighted_norms(&s, &s.sample(|z| z[0])).unwrap();
        assert!((w.first - 1.0).abs() < 1e-12, "{}", w.first);
        assert!(w.second.abs() < 1e-10);
    }

    #[test]
    fn weighted_t_gradient_matches_quadrature() {
        let p = 3.0;
        let s = GrushinSpace::cube(2, 1, p, 1.0, 64).unwrap();
        let b = |x: f64, y: f64| bump(x / 0.8) * bump(y / 0.7);
        let u = s.sample(|z| b(z[0], z[1]) * z[2]);
        let gt = s.d1(&u, 2);
        let w: Vec<f64> = (0..s.len()).map(|i| s.x_norm(&s.point(i)) * gt[i]).collect();
        let got = lp_norm(&s, &w, p, Region::All);
        let (nodes, weights) = crate::quadrature::gauss_legendre(48);
        let mut acc = 0.0;
        for (xa, wa) in nodes.iter().zip(&weights) {
            for (xb, wb) in nodes.iter().zip(&weights) {
                let (x, y) = (0.8 * xa, 0.7 * xb);
                acc += 0.8 * 0.7 * wa * wb * (x * x + y * y).sqrt().powf(p) * b(x, y).abs().powf(p);
            }
        }
        let want = (2.0 * acc).powf(1.0 / p);
        assert!((got - want).abs() / want < 1e-3, "{got} vs {want}");
    }

    #[test]
    fn first_norm_is_absolutely_homogeneous() {
        let s = space3(12);
        let spec = &bump_specs(2, 1, &BumpFamilyConfig::default())[0];
        let u = s.sample(|z| spec.eval(z));
        let base = weighted_norms(&s, &u).unwrap().first;
        let scaled: Vec<f64> = u.iter().map(|v| -3.5 * v).collect();
        let w = weighted_norms(&s, &scaled).unwrap().first;
        assert!((w - 3.5 * base).abs() <= 1e-12 * w);
    }

    #[test]
    fn member_with_vanishing_operator_is_excluded() {
        let s = space3(12);
        let cfg = BumpFamilyConfig { count: 2, ..Default::default() };
        let mut fam = TestFamily::bumps(2, 1, &cfg);
        fam.members.push(FamilyMember::new("linear", |z: &[f64]| z[0]));
        let r = empirical_lp_constant(&s, &fam).unwrap();
        assert_eq!(r.used, 2);
        assert!(r.ratios[2].is_none());
        assert!(r.warnings.iter().any(|w| w.contains("linear")));
        let only = TestFamily { id: "x".into(), members: vec![FamilyMember::new("linear", |z: &[f64]| z[0])] };
        assert!(matches!(empirical_lp_constant(&s, &only), Err(Error::DegenerateField(_))));
    }

    #[test]
    fn odd_m_is_rejected_for_lp_constant() {
        let s = GrushinSpace::cube(1, 1, 5.0, 1.0, 8).unwrap();
        let fam = TestFamily::bumps(1, 1, &BumpFamilyConfig { count: 1, ..Default::default() });
        assert!(matches!(empirical_lp_constant(&s, &fam), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn embedding_exponent_relation() {
        let s = GrushinSpace::cube(2, 1, 2.0, 1.0, 8).unwrap();
        assert_eq!(embedding_exponent(&s).unwrap(), Some(4.0));
        assert_eq!(embedding_exponent(&s.with_p(6.0).unwrap()).unwrap(), None);
        assert!(embedding_exponent(&s.with_p(4.0).unwrap()).is_err());
        let fam = TestFamily::bumps(2, 1, &BumpFamilyConfig { count: 1, ..Default::default() });
        assert!(matches!(embedding_check(&s, &fam, Some(2.0)), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn operator_matrix_with_identity_is_grushin() {
        let x = [0.3, -0.4];
        let k = 2 + 2;
        let mut b = vec![0.0; k * k];
        for i in 0..k {
            b[i * k + i] = 1.0;
        }
        let l = operator_matrix(2, 1, &x, &b);
        let want = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.25]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((l[i][j] - want[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn perturbed_coefficients_respect_delta() {
        let s = space3(16);
        let c = perturbed_coeffs(&s, 0.1);
        let b = c(&[0.2, -0.1, 0.3]);
        let k = 4;
        for i in 0..k {
            for j in 0..k {
                let id = if i == j { 1.0 } else { 0.0 };
                assert!((b[i * k + j] - id).abs() <= 0.1 + 1e-15);
                assert_eq!(b[i * k + j], b[j * k + i]);
            }
        }
    }

    #[test]
    fn large_delta_warns_and_cylinder_must_fit() {
        let s = space3(16);
        let fam = TestFamily::bumps(2, 1, &BumpFamilyConfig { count: 2, ..Default::default() });
        let cfg = PerturbedConfig { delta0: 0.5, ..Default::default() };
        let rep = perturbed_estimate_check(&s, &fam, &perturbed_coeffs(&s, 0.5), &cfg).unwrap();
        assert!(!rep.warnings.is_empty());
        let cfg = PerturbedConfig { r: 1.5, ..Default::default() };
        assert!(matches!(perturbed_estimate_check(&s, &fam, &identity_coeffs(&s), &cfg), Err(Error::DomainExceeded(_))));
    }
}
