//! Partial hodograph transforms `T` and `T1 = psi ∘ T`, atlases of samples in a
//! tube around the free boundary, injectivity and collision diagnostics, and
//! the forward partial Legendre transform.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{ScalarField, SpatialField};
use crate::kdtree::KdTree;
use crate::solver::interface_thresholds;

/// `T(x) = (x'', ∂_{n-1}u, ∂_n u)`.
pub fn apply_t<F: SpatialField<f64>>(u: &F, x: &[f64]) -> Result<Vec<f64>> {
    let n = u.dim();
    let g = u.gradient(x)?;
    let mut y = x[..n - 2].to_vec();
    y.push(g[n - 2]);
    y.push(g[n - 1]);
    Ok(y)
}

/// `psi(y) = (y'', y_{n-1}^2 - y_n^2, -2 y_{n-1} y_n)`.
pub fn psi(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let (a, b) = (y[n - 2], y[n - 1]);
    let mut w = y[..n - 2].to_vec();
    w.push(a * a - b * b);
    w.push(-2.0 * a * b);
    w
}

pub fn apply_t1<F: SpatialField<f64>>(u: &F, x: &[f64]) -> Result<Vec<f64>> {
    Ok(psi(&apply_t(u, x)?))
}

/// Free boundary `x_{n-1} = f(x'')` on the thin plane, tabulated along `x_1`
/// (3D) or as a single point (2D).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterfaceTable {
    pub dim: usize,
    /// Stations in `x''` (empty in 2D).
    pub stations: Vec<f64>,
    pub values: Vec<f64>,
}

impl InterfaceTable {
    pub fn new(dim: usize, stations: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let ok = if dim == 2 { values.len() == 1 } else { stations.len() == values.len() && stations.len() >= 2 };
        if !ok || stations.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InsufficientData("interface table needs increasing stations with values".into()));
        }
        Ok(Self { dim, stations, values })
    }

    /// Straight interface `x_{n-1} = slope * x_1` over `[-1, 1]`.
    pub fn line(dim: usize, slope: f64) -> Self {
        if dim == 2 {
            return Self { dim, stations: vec![], values: vec![0.0] };
        }
        let stations: Vec<f64> = (0..=64).map(|k| -1.0 + k as f64 / 32.0).collect();
        let values = stations.iter().map(|s| slope * s).collect();
        Self { dim, stations, values }
    }

    /// Discrete interface of a solved field; lines without a sign change are dropped.
    pub fn from_field(u: &ScalarField<f64>) -> Result<Self> {
        let dim = u.grid().dim();
        let (mut s, mut v) = (Vec::new(), Vec::new());
        for (t, tau) in interface_thresholds(u) {
            if let Some(tau) = tau {
                if dim == 3 {
                    s.push(t[0]);
                }
                v.push(tau);
            }
        }
        if v.is_empty() {
            return Err(Error::InsufficientData("no free-boundary crossing on the thin plane".into()));
        }
        if dim == 2 {
            v.truncate(1);
        }
        Self::new(dim, s, v)
    }

    /// Linear interpolation of `f` at `x''`.
    pub fn eval(&self, xpp: &[f64]) -> Option<f64> {
        if self.dim == 2 {
            return Some(self.values[0]);
        }
        let t = xpp[0];
        let s = &self.stations;
        if t < s[0] || t > *s.last().unwrap() {
            return None;
        }
        let k = s.partition_point(|&v| v <= t).clamp(1, s.len() - 1);
        let a = (t - s[k - 1]) / (s[k] - s[k - 1]);
        Some(self.values[k - 1] * (1.0 - a) + self.values[k] * a)
    }

    /// `p(x) = (x'', f(x''), 0)`.
    pub fn foot(&self, x: &[f64]) -> Option<Vec<f64>> {
        let n = self.dim;
        let f = self.eval(&x[..n - 2])?;
        let mut p = x[..n - 2].to_vec();
        p.push(f);
        p.push(0.0);
        Some(p)
    }

    /// Euclidean distance from `x` to the tabulated interface curve.
    pub fn distance(&self, x: &[f64]) -> f64 {
        let n = self.dim;
        if n == 2 {
            return (x[0] - self.values[0]).hypot(x[1]);
        }
        let mut best = f64::INFINITY;
        for k in 0..self.stations.len() - 1 {
            let a = [self.stations[k], self.values[k]];
            let b = [self.stations[k + 1], self.values[k + 1]];
            let d = [b[0] - a[0], b[1] - a[1]];
            let t = (((x[0] - a[0]) * d[0] + (x[1] - a[1]) * d[1]) / (d[0] * d[0] + d[1] * d[1])).clamp(0.0, 1.0);
            let q = [a[0] + t * d[0], a[1] + t * d[1]];
            best = best.min(((x[0] - q[0]).powi(2) + (x[1] - q[1]).powi(2) + x[2] * x[2]).sqrt());
        }
        best
    }
}

/// One point of the atlas.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HodographSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    /// `u(x) - x_{n-1} y_{n-1} - x_n y_n`.
    pub v: f64,
    /// Determinant of the lower-right `2x2` block of `DT`, which equals `det DT`.
    pub jac_det: f64,
    pub pproj: Vec<f64>,
    pub dist_p: f64,
    pub dist_gamma: f64,
    /// `∂_{x''} u` at `x`.
    pub grad_tangential: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AtlasConfig {
    pub delta: f64,
    /// Half-width of the `x''` window.
    pub window: f64,
    /// Lattice spacing; defaults to the field grid spacing.
    pub spacing: f64,
    /// Samples closer than `exclusion * spacing` to the interface are skipped.
    pub exclusion: f64,
}

impl AtlasConfig {
    pub fn new(delta: f64, spacing: f64) -> Self {
        Self { delta, window: 0.5, spacing, exclusion: 2.0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HodographAtlas {
    pub samples: Vec<HodographSample>,
    pub delta: f64,
    pub spacing: f64,
    /// Largest observed `|x - p(x)| / d(x, Γ)`.
    pub c1: f64,
}

/// Samples a lattice of spacing `cfg.spacing` in the tube `{|x - p(x)| < delta}`.
pub fn build_atlas<F: SpatialField<f64>>(u: &F, table: &InterfaceTable, cfg: &AtlasConfig) -> Result<HodographAtlas> {
    let n = u.dim();
    let h = cfg.spacing;
    if !(h > 0.0 && cfg.delta > 0.0) {
        return Err(Error::InvalidParameter("atlas spacing and delta must be positive".into()));
    }
    let kmax = |extent: f64| (extent / h + 1e-9).floor() as i64;
    let kw = if n == 3 { kmax(cfg.window) } else { 0 };
    let mut candidates = Vec::new();
    for i in -kw..=kw {
        let xpp: Vec<f64> = if n == 3 { vec![i as f64 * h] } else { vec![] };
        let Some(f) = table.eval(&xpp) else { continue };
        let kd = kmax(cfg.delta) + 1;
        let jc = (f / h).round() as i64;
        for j in jc - kd..=jc + kd {
            for k in 0..=kd {
                let mut x = xpp.clone();
                x.push(j as f64 * h);
                x.push(k as f64 * h);
                candidates.push(x);
            }
        }
    }
    let samples: Vec<Option<HodographSample>> = candidates
        .par_iter()
        .map(|x| -> Result<Option<HodographSample>> {
            let p = table.foot(x).unwrap();
            let dist_p = x.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dist_p >= cfg.delta || dist_p < cfg.exclusion * h {
                return Ok(None);
            }
            let g = match u.gradient(x) {
                Ok(g) => g,
                Err(Error::TooCloseToBoundary(_) | Error::OutsideDomain(_) | Error::SingularLine) => return Ok(None),
                Err(e) => return Err(e),
            };
            let hess = match u.hessian(x) {
                Ok(m) => m,
                Err(Error::TooCloseToBoundary(_) | Error::OutsideDomain(_) | Error::SingularLine) => return Ok(None),
                Err(e) => return Err(e),
            };
            let mut y = x[..n - 2].to_vec();
            y.push(g[n - 2]);
            y.push(g[n - 1]);
            let v = u.value(x)? - x[n - 2] * y[n - 2] - x[n - 1] * y[n - 1];
            let jac_det = hess[n - 2][n - 2] * hess[n - 1][n - 1] - hess[n - 2][n - 1] * hess[n - 1][n - 2];
            Ok(Some(HodographSample {
                w: psi(&y),
                y,
                v,
                jac_det,
                dist_gamma: table.distance(x),
                pproj: p,
                dist_p,
                grad_tangential: g[..n - 2].to_vec(),
                x: x.clone(),
            }))
        })
        .collect::<Result<_>>()?;
    let samples: Vec<HodographSample> = samples.into_iter().flatten().collect();
    let c1 = samples.iter().map(|s| s.dist_p / s.dist_gamma.max(1e-300)).fold(1.0, f64::max);
    Ok(HodographAtlas { samples, delta: cfg.delta, spacing: h, c1 })
}

impl HodographAtlas {
    pub fn csv_header(dim: usize) -> String {
        let mut cols = Vec::new();
        for p in ["x", "y", "w"] {
            for k in 1..=dim {
                cols.push(format!("{p}{k}"));
            }
        }
        cols.push("v".into());
        cols.push("detDT".into());
        cols.join(",")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let dim = self.samples.first().map_or(3, |s| s.x.len());
        writeln!(w, "{}", Self::csv_header(dim))?;
        for s in &self.samples {
            let row: Vec<String> =
                s.x.iter().chain(&s.y).chain(&s.w).chain([&s.v, &s.jac_det]).map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InjectivityConfig {
    pub eps: f64,
    /// Growth constant `C_u` in the pass bound `2 C_u eps`.
    pub c_u: f64,
}

impl Default for InjectivityConfig {
    fn default() -> Self {
        Self { eps: 0.5, c_u: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InjectivityReport {
    pub samples: usize,
    /// Largest `| |T(x) - T(p(x))|^2 / |x - p(x)| - 9 C0^2/4 |`.
    pub max_dev_square: f64,
    /// Largest `| |x - p(x)| det DT + 9 C0^2/16 |`.
    pub max_dev_det: f64,
    /// Largest of the two, relative to `9 C0^2/4` resp. `9 C0^2/16`.
    pub max_relative_dev: f64,
    pub ratio_square_range: (f64, f64),
    pub ratio_det_range: (f64, f64),
    pub bound: f64,
    pub pass: bool,
}

/// Compares the two blowup ratios at every sample with `C0` given per foot point.
pub fn injectivity_diagnostic(
    atlas: &HodographAtlas,
    c0_at: impl Fn(&[f64]) -> f64,
    cfg: &InjectivityConfig,
) -> Result<InjectivityReport> {
    if atlas.samples.is_empty() {
        return Err(Error::InsufficientData("empty atlas".into()));
    }
    let mut rep = InjectivityReport {
        samples: atlas.samples.len(),
        max_dev_square: 0.0,
        max_dev_det: 0.0,
        max_relative_dev: 0.0,
        ratio_square_range: (f64::INFINITY, f64::NEG_INFINITY),
        ratio_det_range: (f64::INFINITY, f64::NEG_INFINITY),
        bound: 2.0 * cfg.c_u * cfg.eps,
        pass: false,
    };
    for s in &atlas.samples {
        let n = s.x.len();
        let c0 = c0_at(&s.pproj);
        let q = s.y[n - 2] * s.y[n - 2] + s.y[n - 1] * s.y[n - 1];
        let r1 = q / s.dist_p;
        let r2 = s.dist_p * s.jac_det;
        let (e1, e2) = (9.0 * c0 * c0 / 4.0, -9.0 * c0 * c0 / 16.0);
        let (d1, d2) = ((r1 - e1).abs(), (r2 - e2).abs());
        rep.max_dev_square = rep.max_dev_square.max(d1);
        rep.max_dev_det = rep.max_dev_det.max(d2);
        rep.max_relative_dev = rep.max_relative_dev.max(d1 / e1.abs()).max(d2 / e2.abs());
        rep.ratio_square_range = (rep.ratio_square_range.0.min(r1), rep.ratio_square_range.1.max(r1));
        rep.ratio_det_range = (rep.ratio_det_range.0.min(r2), rep.ratio_det_range.1.max(r2));
    }
    rep.pass = rep.max_dev_square.max(rep.max_dev_det) <= rep.bound;
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CollisionReport {
    pub samples: usize,
    /// Smallest `|T1(x) - T1(x')|` over pairs with `|x - x'| > 10 h`.
    pub min_image_distance: f64,
    pub threshold: f64,
    /// Samples whose nearest far-source image lies below the threshold.
    pub collisions: usize,
    pub pass: bool,
}

impl HodographAtlas {
    fn lattice_key(&self, x: &[f64]) -> Vec<i64> {
        x.iter().map(|v| (v / self.spacing).round() as i64).collect()
    }

    /// For each sample, the indices of its `2n` lattice neighbours present in the atlas.
    pub fn lattice_neighbours(&self) -> Vec<Vec<usize>> {
        let index: HashMap<Vec<i64>, usize> =
            self.samples.iter().enumerate().map(|(i, s)| (self.lattice_key(&s.x), i)).collect();
        self.samples
            .iter()
            .map(|s| {
                let key = self.lattice_key(&s.x);
                let mut out = Vec::new();
                for a in 0..key.len() {
                    for d in [-1, 1] {
                        let mut k = key.clone();
                        k[a] += d;
                        if let Some(&j) = index.get(&k) {
                            out.push(j);
                        }
                    }
                }
                out
            })
            .collect()
    }
}

/// Looks for distinct sources mapped to (nearly) the same `T1` image.
///
/// The image resolution is the median image displacement along lattice
/// edges; collisions are far-source pairs closer
/// than a tenth of it.
pub fn collision_check(atlas: &HodographAtlas) -> Result<CollisionReport> {
    let s = &atlas.samples;
    if s.len() < 1000 {
        return Err(Error::InsufficientData(format!("collision check needs >= 1000 samples, got {}", s.len())));
    }
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    let mut steps: Vec<f64> = atlas
        .lattice_neighbours()
        .iter()
        .enumerate()
        .flat_map(|(i, nb)| nb.iter().filter(move |&&j| j > i).map(move |&j| d2(&s[i].w, &s[j].w).sqrt()))
        .collect();
    if steps.is_empty() {
        return Err(Error::InsufficientData("atlas has no lattice neighbours".into()));
    }
    steps.sort_by(f64::total_cmp);
    let threshold = 0.1 * steps[steps.len() / 2];
    let images: Vec<Vec<f64>> = s.iter().map(|p| p.w.clone()).collect();
    let tree = KdTree::new(&images);
    let sep2 = (10.0 * atlas.spacing).powi(2);
    let far: Vec<f64> = (0..s.len())
        .into_par_iter()
        .map(|i| tree.nearest_filtered(&s[i].w, |j| d2(&s[i].x, &s[j].x) > sep2).map_or(f64::INFINITY, |p| p.1))
        .collect();
    let min_image_distance = far.iter().cloned().fold(f64::INFINITY, f64::min);
    let collisions = far.iter().filter(|&&d| d < threshold).count();
    Ok(CollisionReport { samples: s.len(), min_image_distance, threshold, collisions, pass: collisions == 0 })
}

/// Scattered sample of the Legendre transform.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LegendreSample {
    pub y: Vec<f64>,
    pub v: f64,
    pub x: Vec<f64>,
}

/// `v(y) = u(x) - x_{n-1} y_{n-1} - x_n y_n` at every atlas sample.
pub fn legendre_forward(atlas: &HodographAtlas) -> Vec<LegendreSample> {
    atlas.samples.iter().map(|s| LegendreSample { y: s.y.clone(), v: s.v, x: s.x.clone() }).collect()
}

/// Adds the image of the free boundary, `y = (x'', 0, 0)` with `v = 0`.
pub fn with_free_boundary_image(mut samples: Vec<LegendreSample>, table: &InterfaceTable, spacing: f64, window: f64) -> Vec<LegendreSample> {
    let n = table.dim;
    if n == 2 {
        samples.push(LegendreSample { y: vec![0.0, 0.0], v: 0.0, x: vec![table.values[0], 0.0] });
        return samples;
    }
    let k = (window / spacing).floor() as i64;
    for i in -k..=k {
        let t = i as f64 * spacing;
        if let Some(f) = table.eval(&[t]) {
            samples.push(LegendreSample { y: vec![t, 0.0, 0.0], v: 0.0, x: vec![t, f, 0.0] });
        }
    }
    samples
}

/// Solves a small dense least-squares problem via normal equations with
/// Cholesky; returns `None` when the system is singular.
pub fn least_squares(rows: &[Vec<f64>], rhs: &[f64], weights: &[f64]) -> Option<Vec<f64>> {
    let m = rows.first()?.len();
    let mut a = vec![vec![0.0; m]; m];
    let mut b = vec![0.0; m];
    for ((r, &y), &w) in rows.iter().zip(rhs).zip(weights) {
        for i in 0..m {
            b[i] += w * r[i] * y;
            for j in 0..=i {
                a[i][j] += w * r[i] * r[j];
            }
        }
    }
    // Column scaling keeps the normal equations well conditioned.
    let scale: Vec<f64> = (0..m).map(|i| if a[i][i] > 0.0 { 1.0 / a[i][i].sqrt() } else { 1.0 }).collect();
    for i in 0..m {
        b[i] *= scale[i];
        for j in 0..=i {
            a[i][j] *= scale[i] * scale[j];
        }
    }
    for j in 0..m {
        let mut d = a[j][j];
        for k in 0..j {
            d -= a[j][k] * a[j][k];
        }
        if !(d > 1e-13) {
            return None;
        }
        a[j][j] = d.sqrt();
        for i in j + 1..m {
            let mut s = a[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k];
            }
            a[i][j] = s / a[j][j];
        }
    }
    let mut z = vec![0.0; m];
    for i in 0..m {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i][k] * z[k];
        }
        z[i] = s / a[i][i];
    }
    let mut x = vec![0.0; m];
    for i in (0..m).rev() {
        let mut s = z[i];
        for k in i + 1..m {
            s -= a[k][i] * x[k];
        }
        x[i] = s / a[i][i];
    }
    Some(x.iter().zip(&scale).map(|(v, s)| v * s).collect())
}

/// Monomial exponents of total degree `<= deg` in `dim` variables.
pub fn monomials(dim: usize, deg: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..dim {
        out = out.into_iter().flat_map(|p| (0..=deg).map(move |e| [p.clone(), vec![e]].concat())).collect();
    }
    out.retain(|p| p.iter().sum::<usize>() <= deg);
    out.sort_by_key(|p| (p.iter().sum::<usize>(), std::cmp::Reverse(p.clone())));
    out
}

pub fn eval_monomial(p: &[usize], z: &[f64]) -> f64 {
    p.iter().zip(z).fold(1.0, |a, (&e, &v)| a * v.powi(e as i32))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientIdentityReport {
    pub checked: usize,
    /// Max over checked samples of `|∇_y v - (∂_{x''}u, -x_{n-1}, -x_n)|`.
    pub max_error: f64,
    pub mean_error: f64,
}

/// Fits local quadratics to the scattered `(y, v)` data around every `stride`-th
/// interior sample (all lattice neighbours present), using its `k` nearest
/// neighbours in `y`, and compares the fitted gradient with the identities
/// `∂_{y''} v = ∂_{x''} u`, `∂_{y_{n-1}} v = -x_{n-1}`, `∂_{y_n} v = -x_n`.
pub fn gradient_identity_check(atlas: &HodographAtlas, k: usize, stride: usize) -> Result<GradientIdentityReport> {
    let s = &atlas.samples;
    if s.len() < k + 1 {
        return Err(Error::InsufficientData("not enough samples for local fits".into()));
    }
    let n = s[0].x.len();
    let basis = monomials(n, 2);
    let ys: Vec<Vec<f64>> = s.iter().map(|p| p.y.clone()).collect();
    let tree = KdTree::new(&ys);
    let interior: Vec<usize> = atlas
        .lattice_neighbours()
        .iter()
        .enumerate()
        .filter(|(_, nb)| nb.len() == 2 * n)
        .map(|(i, _)| i)
        .step_by(stride.max(1))
        .collect();
    let errors: Vec<f64> = interior
        .par_iter()
        .filter_map(|&i| {
            let near = tree.k_nearest(&s[i].y, k);
            let radius = near.last()?.1.sqrt().max(1e-300);
            let rows: Vec<Vec<f64>> = near
                .iter()
                .map(|&(j, _)| {
                    let z: Vec<f64> = s[j].y.iter().zip(&s[i].y).map(|(a, b)| (a - b) / radius).collect();
                    basis.iter().map(|p| eval_monomial(p, &z)).collect()
                })
                .collect();
            let rhs: Vec<f64> = near.iter().map(|&(j, _)| s[j].v).collect();
            let w: Vec<f64> = near.iter().map(|&(_, d2)| (1.0 - d2 / (radius * radius * 1.0001)).powi(2)).collect();
            let c = least_squares(&rows, &rhs, &w)?;
            let grad: Vec<f64> = (0..n)
                .map(|a| c[basis.iter().position(|p| p.iter().sum::<usize>() == 1 && p[a] == 1).unwrap()] / radius)
                .collect();
            let mut expect = s[i].grad_tangential.clone();
            expect.push(-s[i].x[n - 2]);
            expect.push(-s[i].x[n - 1]);
            Some(grad.iter().zip(&expect).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        })
        .collect();
    if errors.is_empty() {
        return Err(Error::InsufficientData("no interior sample admitted a local fit".into()));
    }
    Ok(GradientIdentityReport {
        checked: errors.len(),
        max_error: errors.iter().cloned().fold(0.0, f64::max),
        mean_error: errors.iter().sum::<f64>() / errors.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecoveredInterface {
    /// `(y'', f(y''))` pairs.
    pub points: Vec<(Vec<f64>, f64)>,
}

/// Estimates `f(y'') = -∂_{y_{n-1}} v(y'', 0, 0)` by weighted cubic fits of the
/// samples near each station; the data lie on one side of the axis.
pub fn recover_free_boundary(samples: &[LegendreSample], stations: &[f64], bandwidth: f64, k: usize) -> Result<RecoveredInterface> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no Legendre samples".into()));
    }
    let n = samples[0].y.len();
    let basis = monomials(n, 3);
    let station_list: Vec<Vec<f64>> = if n == 2 { vec![vec![]] } else { stations.iter().map(|&t| vec![t]).collect() };
    let mut points = Vec::new();
    for st in station_list {
        let mut cand: Vec<(f64, usize)> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| n == 2 || (s.y[0] - st[0]).abs() <= bandwidth)
            .map(|(j, s)| {
                let mut d = s.y[n - 2] * s.y[n - 2] + s.y[n - 1] * s.y[n - 1];
                if n == 3 {
                    d += (s.y[0] - st[0]).powi(2);
                }
                (d, j)
            })
            .collect();
        if cand.len() < basis.len() * 2 {
            return Err(Error::InsufficientData(format!("only {} samples near station {st:?}", cand.len())));
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0));
        cand.truncate(k.max(basis.len() * 2));
        let radius = cand.last().unwrap().0.sqrt().max(1e-300);
        let mut origin = st.clone();
        origin.extend([0.0, 0.0]);
        let rows: Vec<Vec<f64>> = cand
            .iter()
            .map(|&(_, j)| {
                let z: Vec<f64> = samples[j].y.iter().zip(&origin).map(|(a, b)| (a - b) / radius).collect();
                basis.iter().map(|p| eval_monomial(p, &z)).collect()
            })
            .collect();
        let rhs: Vec<f64> = cand.iter().map(|&(_, j)| samples[j].v).collect();
        let w: Vec<f64> = cand.iter().map(|&(d2, _)| (1.0 - d2 / (radius * radius * 1.0001)).powi(2)).collect();
        let c = least_squares(&rows, &rhs, &w)
            .ok_or_else(|| Error::InsufficientData(format!("singular fit at station {st:?}")))?;
        let q = basis.iter().position(|p| p.iter().sum::<usize>() == 1 && p[n - 2] == 1).unwrap();
        points.push((st, -c[q] / radius));
    }
    Ok(RecoveredInterface { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AnalyticField, Grid};
    use crate::profiles::{BlowupProfile, LegendreBlowup};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn t1_of_planar_blowup_is_nine_quarters_identity() {
        let u0 = BlowupProfile::standard(2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)];
            let w = apply_t1(&u0, &x).unwrap();
            assert!((w[0] - 2.25 * x[0]).abs() < 1e-10 && (w[1] - 2.25 * x[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn quadrant_membership_on_the_plane() {
        let u0 = BlowupProfile::standard(3, 1.0);
        let y = apply_t(&u0, &[0.2, -0.5, 0.0]).unwrap();
        assert!(y[1].abs() < 1e-15 && y[2] < 0.0);
        let y = apply_t(&u0, &[0.2, 0.5, 0.0]).unwrap();
        assert!(y[2].abs() < 1e-15 && y[1] > 0.0);
    }

    #[test]
    fn psi_composition_matches_t1() {
        let y = [0.3, 0.7, -0.2];
        let w = psi(&y);
        for (a, b) in w.iter().zip([0.3, 0.45, 0.28]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn analytic_atlas(c0: f64, delta: f64) -> HodographAtlas {
        let u0 = BlowupProfile::standard(3, c0);
        build_atlas(&u0, &InterfaceTable::line(3, 0.0), &AtlasConfig::new(delta, delta / 12.0)).unwrap()
    }

    #[test]
    fn blowup_ratios_are_exact() {
        for c0 in [1.0, 2.0] {
            let atlas = analytic_atlas(c0, 0.1);
            assert!(atlas.samples.len() >= 1000);
            let rep = injectivity_diagnostic(&atlas, |_| c0, &InjectivityConfig::default()).unwrap();
            assert!(rep.max_dev_square < 1e-9 * c0 * c0 && rep.max_dev_det < 1e-9 * c0 * c0, "{rep:?}");
            let (lo, hi) = rep.ratio_square_range;
            assert!((hi - lo) / hi < 1e-9);
            assert!((atlas.c1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_atlas_has_no_collisions() {
        let rep = collision_check(&analytic_atlas(1.0, 0.1)).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn degenerate_field_produces_collisions() {
        let u = AnalyticField::new(
            3,
            |x: &[f64]| x[1] * x[1],
            |x: &[f64]| vec![0.0, 2.0 * x[1], 0.0],
            |_: &[f64]| vec![vec![0.0; 3], vec![0.0, 2.0, 0.0], vec![0.0; 3]],
        );
        let cfg = AtlasConfig { window: 0.1, ..AtlasConfig::new(0.1, 0.1 / 24.0) };
        let atlas = build_atlas(&u, &InterfaceTable::line(3, 0.0), &cfg).unwrap();
        let rep = collision_check(&atlas).unwrap();
        assert!(!rep.pass && rep.collisions > 0);
    }

    #[test]
    fn forward_transform_reproduces_legendre_blowup() {
        let u0 = BlowupProfile::standard(3, 1.0);
        let y = apply_t(&u0, &[0.0, 1.0, 0.0]).unwrap();
        assert!((y[1] - 1.5).abs() < 1e-15);
        let v = u0.eval_u0(&[0.0, 1.0, 0.0]) - 1.0 * y[1];
        assert!((v + 0.5).abs() < 1e-15);
        let vb = LegendreBlowup::new(&u0).unwrap();
        let atlas = analytic_atlas(1.0, 0.2);
        for s in legendre_forward(&atlas) {
            assert!((vb.eval(&s.y) - s.v).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_identities_on_analytic_scatter() {
        let atlas = analytic_atlas(1.0, 0.2);
        let rep = gradient_identity_check(&atlas, 40, 25).unwrap();
        assert!(rep.max_error < 1e-3, "{rep:?}");
    }

    #[test]
    fn recovered_interface_of_rotated_blowup() {
        let phi: f64 = 0.2;
        let u0 = BlowupProfile::rotated(1.0, phi);
        let table = InterfaceTable::line(3, phi.tan());
        let atlas = build_atlas(&u0, &table, &AtlasConfig { exclusion: 0.0, ..AtlasConfig::new(0.15, 0.01) }).unwrap();
        let samples = with_free_boundary_image(legendre_forward(&atlas), &table, 0.01, 0.5);
        let rec = recover_free_boundary(&samples, &[-0.3, 0.0, 0.3], 0.05, 200).unwrap();
        for (st, f) in rec.points {
            assert!((f - phi.tan() * st[0]).abs() < 1e-3, "{st:?} {f}");
        }
        assert!(recover_free_boundary(&[], &[0.0], 0.1, 10).is_err());
    }

    #[test]
    fn interface_table_from_flat_solution() {
        let grid = Grid::half_box(3, 17).unwrap();
        let u = ScalarField::sample(grid, &BlowupProfile::standard(3, 1.0)).unwrap();
        let t = InterfaceTable::from_field(&u).unwrap();
        assert!(t.values.iter().all(|v| v.abs() <= 2.0 / 8.0));
        assert!((t.distance(&[0.0, 0.3, 0.4]) - 0.5).abs() < 2.0 / 16.0);
        assert_eq!(InterfaceTable::line(3, 0.0).distance(&[0.0, 0.3, 0.4]), 0.5);
    }

    #[test]
    fn csv_header_lists_all_columns() {
        assert_eq!(HodographAtlas::csv_header(2), "x1,x2,y1,y2,w1,w2,v,detDT");
    }

    #[test]
    fn monomial_basis_counts() {
        assert_eq!(monomials(3, 2).len(), 10);
        assert_eq!(monomials(3, 3).len(), 20);
        assert_eq!(monomials(2, 1), vec![vec![0, 0], vec![1, 0], vec![0, 1]]);
    }
}
