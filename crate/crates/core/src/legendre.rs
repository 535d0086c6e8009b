//! The Legendre transform `v` on non-isotropic cylinders: nonlinear residual,
//! linearization and its `A B A^t` factorization, weighted limits at the axis
//! `{y_{n-1} = y_n = 0}`, and non-isotropic rescaling.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::io::{read_raw, write_raw, FieldHeader};
use crate::hodograph::{eval_monomial, least_squares, monomials, LegendreSample};
use crate::kdtree::KdTree;
use crate::profiles::LegendreBlowup;

pub type Matrix = Vec<Vec<f64>>;

/// Anything that can report `v`, `D^2 v` and the third derivatives in the last two variables.
pub trait LegendreSource: Sync {
    fn dim(&self) -> usize;
    fn value(&self, y: &[f64]) -> Result<f64>;
    fn hessian(&self, y: &[f64]) -> Result<Matrix>;
    /// `(v_{aaa}, v_{abb}, v_{aab}, v_{bbb})` with `a = n-1`, `b = n`.
    fn third(&self, y: &[f64]) -> Result<[f64; 4]>;
}

impl LegendreSource for LegendreBlowup<f64> {
    fn dim(&self) -> usize {
        LegendreBlowup::dim(self)
    }
    fn value(&self, y: &[f64]) -> Result<f64> {
        Ok(self.eval(y))
    }
    fn hessian(&self, y: &[f64]) -> Result<Matrix> {
        Ok(self.hess(y))
    }
    fn third(&self, _: &[f64]) -> Result<[f64; 4]> {
        Ok(self.third_derivatives())
    }
}

/// `F(D^2 v) = v_{aa} + v_{bb} - Σ_i det V^i` for any `n >= 2`.
pub fn f_of_hessian(h: &[Vec<f64>]) -> f64 {
    let n = h.len();
    let (a, b) = (n - 2, n - 1);
    let mut f = h[a][a] + h[b][b];
    for i in 0..n - 2 {
        let idx = [i, a, b];
        let m = |p: usize, q: usize| h[idx[p]][idx[q]];
        let det = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
            + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
        f -= det;
    }
    f
}

/// `F_{ij}(D^2 v) = ∂F/∂p_{ij}`, symmetric convention (off-diagonal entries halved).
pub fn linearization(h: &[Vec<f64>]) -> Matrix {
    let n = h.len();
    let (a, b) = (n - 2, n - 1);
    let j = h[a][a] * h[b][b] - h[a][b] * h[a][b];
    let mut f = vec![vec![0.0; n]; n];
    for i in 0..n - 2 {
        f[i][i] = -j;
        f[i][a] = h[a][i] * h[b][b] - h[a][b] * h[b][i];
        f[i][b] = -(h[a][i] * h[b][a] - h[a][a] * h[b][i]);
        f[a][i] = f[i][a];
        f[b][i] = f[i][b];
    }
    f[a][a] = 1.0 - (0..n - 2).map(|i| h[i][i] * h[b][b] - h[i][b] * h[b][i]).sum::<f64>();
    f[a][b] = (0..n - 2).map(|i| h[i][i] * h[b][a] - h[i][a] * h[b][i]).sum::<f64>();
    f[b][a] = f[a][b];
    f[b][b] = 1.0 - (0..n - 2).map(|i| h[i][i] * h[a][a] - h[i][a] * h[a][i]).sum::<f64>();
    f
}

/// Linearization at one off-axis point together with its factorization.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearizationCoeffs {
    pub y: Vec<f64>,
    pub f: Matrix,
    /// `n x 2(n-1)`: blocks `Y = (y_{n-1}, y_n)` for the tangential rows, `I_2` last.
    pub a: Matrix,
    pub b: Matrix,
    /// `(v_{aa}/y_a, v_{bb}/y_a, v_{ab}/y_b)`.
    pub ratios: [f64; 3],
}

impl LinearizationCoeffs {
    /// Errors on points with `y_{n-1} = 0` or `y_n = 0`, where the weighted ratios are undefined.
    pub fn at(y: &[f64], h: &[Vec<f64>]) -> Result<Self> {
        let n = h.len();
        let (ia, ib) = (n - 2, n - 1);
        let (ya, yb) = (y[ia], y[ib]);
        if ya == 0.0 || yb == 0.0 {
            return Err(Error::InvalidParameter(format!("weighted ratios undefined at {y:?}")));
        }
        let f = linearization(h);
        let ratios = [h[ia][ia] / ya, h[ib][ib] / ya, h[ia][ib] / yb];
        let m = 2 * (n - 1);
        let mut a = vec![vec![0.0; m]; n];
        for i in 0..n - 2 {
            a[i][2 * i] = ya;
            a[i][2 * i + 1] = yb;
        }
        a[ia][m - 2] = 1.0;
        a[ib][m - 1] = 1.0;
        let mut b = vec![vec![0.0; m]; m];
        let b0 = -ratios[0] * ratios[1];
        let bt0 = ratios[2] * ratios[2];
        for i in 0..n - 2 {
            b[2 * i][2 * i] = b0;
            b[2 * i + 1][2 * i + 1] = bt0;
            let bi = [
                [h[ia][i] * ratios[1], h[ib][i] * ratios[0]],
                [-h[ib][i] * ratios[2], -h[ia][i] * ratios[2]],
            ];
            for p in 0..2 {
                for q in 0..2 {
                    b[2 * i + p][m - 2 + q] = bi[p][q];
                    b[m - 2 + q][2 * i + p] = bi[p][q];
                }
            }
        }
        b[m - 2][m - 2] = f[ia][ia];
        b[m - 2][m - 1] = f[ia][ib];
        b[m - 1][m - 2] = f[ib][ia];
        b[m - 1][m - 1] = f[ib][ib];
        Ok(Self { y: y.to_vec(), f, a, b, ratios })
    }

    pub fn reconstruct(&self) -> Matrix {
        let n = self.a.len();
        let m = self.b.len();
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..m {
                    for q in 0..m {
                        s += self.a[i][p] * self.b[p][q] * self.a[j][q];
                    }
                }
                out[i][j] = s;
            }
        }
        out
    }

    /// `max |A B A^t - F| / max(1, max |F|)`.
    pub fn reconstruction_error(&self) -> f64 {
        let r = self.reconstruct();
        let scale = self.f.iter().flatten().fold(1.0_f64, |m, v| m.max(v.abs()));
        r.iter().flatten().zip(self.f.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    pub fn b_is_symmetric(&self) -> bool {
        let m = self.b.len();
        (0..m).all(|p| (0..m).all(|q| self.b[p][q] == self.b[q][p]))
    }
}

/// `a = 8 / (9 C0^2)`; for `v_0` the tangential blocks of `B(0)` equal `a^2 I`.
pub fn grushin_coefficient(c0: f64) -> f64 {
    8.0 / (9.0 * c0 * c0)
}

/// `C_r = {|y''| < r^2, |(y_{n-1}, y_n)| < r}` around a centre on the axis, with a
/// lattice of `2 m_t + 1` tangential and `2 m + 1` disc nodes per axis.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NonIsotropicCylinder {
    pub dim: usize,
    pub radius: f64,
    pub center: Vec<f64>,
    pub tangential_half_nodes: usize,
    pub disc_half_nodes: usize,
}

impl NonIsotropicCylinder {
    pub fn new(dim: usize, radius: f64, tangential_half_nodes: usize, disc_half_nodes: usize) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::InvalidParameter(format!("cylinder fields are wired for n = 2, 3; got {dim}")));
        }
        if !(radius > 0.0) || disc_half_nodes < 2 || (dim == 3 && tangential_half_nodes < 1) {
            return Err(Error::InvalidParameter("cylinder needs a positive radius and at least 2 disc nodes".into()));
        }
        let t = if dim == 3 { tangential_half_nodes } else { 0 };
        Ok(Self { dim, radius, center: vec![0.0; dim], tangential_half_nodes: t, disc_half_nodes })
    }

    pub fn centered(mut self, center: Vec<f64>) -> Result<Self> {
        let n = self.dim;
        if center.len() != n || center[n - 2] != 0.0 || center[n - 1] != 0.0 {
            return Err(Error::InvalidParameter("cylinder centre must lie on the axis".into()));
        }
        self.center = center;
        Ok(self)
    }

    pub fn with_radius(&self, radius: f64) -> Self {
        Self { radius, ..self.clone() }
    }

    pub fn nodes_per_axis(&self) -> Vec<usize> {
        let mut v = vec![2 * self.tangential_half_nodes + 1; self.dim - 2];
        v.extend([2 * self.disc_half_nodes + 1; 2]);
        v
    }

    pub fn spacing(&self) -> Vec<f64> {
        let mut v = vec![self.radius * self.radius / self.tangential_half_nodes.max(1) as f64; self.dim - 2];
        v.extend([self.radius / self.disc_half_nodes as f64; 2]);
        v
    }

    pub fn len(&self) -> usize {
        self.nodes_per_axis().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Signed lattice offsets of a flat index.
    pub fn offsets(&self, mut flat: usize) -> Vec<i64> {
        let nodes = self.nodes_per_axis();
        let mut idx = vec![0i64; self.dim];
        for k in (0..self.dim).rev() {
            let half = (nodes[k] / 2) as i64;
            idx[k] = (flat % nodes[k]) as i64 - half;
            flat /= nodes[k];
        }
        idx
    }

    pub fn flat(&self, off: &[i64]) -> Option<usize> {
        let nodes = self.nodes_per_axis();
        let mut f = 0usize;
        for k in 0..self.dim {
            let half = (nodes[k] / 2) as i64;
            let i = off[k] + half;
            if i < 0 || i >= nodes[k] as i64 {
                return None;
            }
            f = f * nodes[k] + i as usize;
        }
        Some(f)
    }

    pub fn point(&self, off: &[i64]) -> Vec<f64> {
        let h = self.spacing();
        (0..self.dim).map(|k| self.center[k] + off[k] as f64 * h[k]).collect()
    }

    pub fn in_disc(&self, off: &[i64]) -> bool {
        let m = self.disc_half_nodes as i64;
        let n = self.dim;
        off[n - 2] * off[n - 2] + off[n - 1] * off[n - 1] <= m * m
    }

    pub fn on_axis(&self, off: &[i64]) -> bool {
        let n = self.dim;
        off[n - 2] == 0 && off[n - 1] == 0
    }

    /// `δ_λ y = (λ^2 y'', λ y_{n-1}, λ y_n)`.
    pub fn dilate(y: &[f64], lambda: f64) -> Vec<f64> {
        let n = y.len();
        y.iter().enumerate().map(|(k, v)| if k < n - 2 { lambda * lambda * v } else { lambda * v }).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    ClosedForm,
    Regridded { samples: usize, filled: usize, skipped: usize },
    Rescaled { radius: f64 },
    File,
}

/// Moving least-squares settings for regridding scattered `(y, v)` data.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MlsConfig {
    /// Total degree of the local polynomial models.
    pub degree: usize,
    /// Support radius in units of the local sample spacing.
    pub radius_factor: f64,
    /// Neighbour rank defining the local sample spacing.
    pub spacing_rank: usize,
    /// Minimum support size, in multiples of the number of basis functions.
    pub min_support_factor: usize,
    /// Distances use `(s y'', y_{n-1}, y_n)`; the scattered data are much denser along `y''`.
    pub tangential_scale: f64,
    /// Reject nodes whose support centroid is farther than this fraction of the radius.
    pub max_centroid_offset: f64,
}

impl Default for MlsConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            radius_factor: 5.0,
            spacing_rank: 8,
            min_support_factor: 2,
            tangential_scale: 4.0,
            max_centroid_offset: 0.5,
        }
    }
}

/// Values of `v` on a cylinder lattice; `NaN` outside the disc or where no data was available.
#[derive(Clone, Debug, Serialize)]
pub struct LegendreField {
    pub cylinder: NonIsotropicCylinder,
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

/// Adds the reflections implied by oddness in `y_{n-1}` and evenness in `y_n`.
pub fn mirror_samples(samples: &[LegendreSample]) -> Vec<LegendreSample> {
    let mut out = Vec::with_capacity(samples.len() * 4);
    for s in samples {
        let n = s.y.len();
        for (sa, sb) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let mut y = s.y.clone();
            let dup_a = sa < 0.0 && y[n - 2] == 0.0;
            let dup_b = sb < 0.0 && y[n - 1] == 0.0;
            if dup_a || dup_b {
                continue;
            }
            y[n - 2] *= sa;
            y[n - 1] *= sb;
            let mut x = s.x.clone();
            x[n - 1] *= sb;
            out.push(LegendreSample { y, v: sa * s.v, x });
        }
    }
    out
}

impl LegendreField {
    pub fn from_fn(cylinder: NonIsotropicCylinder, f: impl Fn(&[f64]) -> f64 + Sync) -> Self {
        let values = (0..cylinder.len())
            .into_par_iter()
            .map(|k| {
                let off = cylinder.offsets(k);
                if cylinder.in_disc(&off) { f(&cylinder.point(&off)) } else { f64::NAN }
            })
            .collect();
        Self { cylinder, values, provenance: Provenance::ClosedForm }
    }

    /// Moving least squares with local polynomial models in the scaled metric of [`MlsConfig`].
    pub fn regrid(cylinder: NonIsotropicCylinder, samples: &[LegendreSample], cfg: &MlsConfig) -> Result<Self> {
        let n = cylinder.dim;
        if samples.is_empty() || samples[0].y.len() != n {
            return Err(Error::InsufficientData("no scattered samples of matching dimension".into()));
        }
        if !(cfg.tangential_scale > 0.0 && cfg.radius_factor > 0.0) || cfg.spacing_rank == 0 {
            return Err(Error::InvalidParameter("MLS scale, radius factor and spacing rank must be positive".into()));
        }
        let scale = |y: &[f64]| -> Vec<f64> {
            y.iter().enumerate().map(|(k, v)| if k < n - 2 { v * cfg.tangential_scale } else { *v }).collect()
        };
        let ys: Vec<Vec<f64>> = samples.iter().map(|s| scale(&s.y)).collect();
        let tree = KdTree::new(&ys);
        let basis = monomials(n, cfg.degree);
        let min_support = cfg.min_support_factor.max(1) * basis.len();
        let values: Vec<f64> = (0..cylinder.len())
            .into_par_iter()
            .map(|k| {
                let off = cylinder.offsets(k);
                if !cylinder.in_disc(&off) {
                    return f64::NAN;
                }
                let y0 = scale(&cylinder.point(&off));
                let knn = tree.k_nearest(&y0, cfg.spacing_rank.max(min_support));
                let spacing = knn[cfg.spacing_rank.min(knn.len()) - 1].1.sqrt();
                let mut radius = cfg.radius_factor * spacing;
                let mut support: Vec<(usize, f64)> = tree
                    .within(&y0, radius)
                    .into_iter()
                    .map(|j| (j, ys[j].iter().zip(&y0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                    .collect();
                if support.len() < min_support {
                    radius = knn.last().unwrap().1.sqrt() * 1.05;
                    support = knn;
                }
                let mut centroid = vec![0.0; n];
                for &(j, _) in &support {
                    for a in 0..n {
                        centroid[a] += ys[j][a] - y0[a];
                    }
                }
                let offset = centroid.iter().map(|c| c * c).sum::<f64>().sqrt() / support.len() as f64;
                if offset > cfg.max_centroid_offset * radius {
                    return f64::NAN;
                }
                let rows: Vec<Vec<f64>> = support
                    .iter()
                    .map(|&(j, _)| {
                        let z: Vec<f64> = ys[j].iter().zip(&y0).map(|(a, b)| (a - b) / radius).collect();
                        basis.iter().map(|p| eval_monomial(p, &z)).collect()
                    })
                    .collect();
                let rhs: Vec<f64> = support.iter().map(|&(j, _)| samples[j].v).collect();
                let w: Vec<f64> = support.iter().map(|&(_, d2)| (1.0 - d2 / (radius * radius)).max(0.0).powi(2)).collect();
                least_squares(&rows, &rhs, &w).map_or(f64::NAN, |c| c[0])
            })
            .collect();
        let in_disc = (0..cylinder.len()).filter(|&k| cylinder.in_disc(&cylinder.offsets(k))).count();
        let filled = values.iter().filter(|v| v.is_finite()).count();
        Ok(Self {
            provenance: Provenance::Regridded { samples: samples.len(), filled, skipped: in_disc - filled },
            cylinder,
            values,
        })
    }

    pub fn at(&self, off: &[i64]) -> Option<f64> {
        self.cylinder.flat(off).map(|k| self.values[k]).filter(|v| v.is_finite())
    }

    /// Central-difference Hessian at an off-axis node whose stencil is complete.
    pub fn hessian_at_node(&self, off: &[i64]) -> Option<Matrix> {
        if self.cylinder.on_axis(off) {
            return None;
        }
        let n = self.cylinder.dim;
        let h = self.cylinder.spacing();
        let get = |d: &[(usize, i64)]| {
            let mut o = off.to_vec();
            for &(k, s) in d {
                o[k] += s;
            }
            self.at(&o)
        };
        let mut m = vec![vec![0.0; n]; n];
        for k in 0..n {
            m[k][k] = (get(&[(k, 1)])? - 2.0 * get(&[])? + get(&[(k, -1)])?) / (h[k] * h[k]);
            for l in k + 1..n {
                let v = (get(&[(k, 1), (l, 1)])? - get(&[(k, 1), (l, -1)])? - get(&[(k, -1), (l, 1)])?
                    + get(&[(k, -1), (l, -1)])?)
                    / (4.0 * h[k] * h[l]);
                m[k][l] = v;
                m[l][k] = v;
            }
        }
        Some(m)
    }

    fn locate(&self, y: &[f64]) -> Result<(Vec<i64>, Vec<f64>)> {
        let c = &self.cylinder;
        let h = c.spacing();
        let nodes = c.nodes_per_axis();
        let mut base = Vec::with_capacity(c.dim);
        let mut frac = Vec::with_capacity(c.dim);
        for k in 0..c.dim {
            let half = (nodes[k] / 2) as i64;
            let s = (y[k] - c.center[k]) / h[k];
            let i = (s.floor() as i64).clamp(-half, half - 1);
            let t = s - i as f64;
            if !(-1e-9..=1.0 + 1e-9).contains(&t) {
                return Err(Error::DomainExceeded(format!("{y:?} outside the cylinder")));
            }
            base.push(i);
            frac.push(t.clamp(0.0, 1.0));
        }
        Ok((base, frac))
    }

    /// Multilinear interpolation; errors where any corner is missing.
    pub fn interpolate(&self, y: &[f64]) -> Result<f64> {
        let (base, frac) = self.locate(y)?;
        let d = self.cylinder.dim;
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut off = base.clone();
            for k in 0..d {
                if corner >> k & 1 == 1 {
                    w *= frac[k];
                    off[k] += 1;
                } else {
                    w *= 1.0 - frac[k];
                }
            }
            if w != 0.0 {
                acc += w * self.at(&off).ok_or_else(|| Error::DomainExceeded(format!("no data near {y:?}")))?;
            }
        }
        Ok(acc)
    }

    fn interp_hessian(&self, y: &[f64]) -> Result<Matrix> {
        let (base, frac) = self.locate(y)?;
        let d = self.cylinder.dim;
        let mut acc = vec![vec![0.0; d]; d];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut off = base.clone();
            for k in 0..d {
                if corner >> k & 1 == 1 {
                    w *= frac[k];
                    off[k] += 1;
                } else {
                    w *= 1.0 - frac[k];
                }
            }
            if w != 0.0 {
                let m = self
                    .hessian_at_node(&off)
                    .ok_or_else(|| Error::DomainExceeded(format!("no Hessian stencil near {y:?}")))?;
                for a in 0..d {
                    for b in 0..d {
                        acc[a][b] += w * m[a][b];
                    }
                }
            }
        }
        Ok(acc)
    }

    pub fn write_fld<W: Write>(&self, w: W) -> Result<()> {
        let c = &self.cylinder;
        let nodes = c.nodes_per_axis();
        let h = c.spacing();
        let lo: Vec<f64> = (0..c.dim).map(|k| c.center[k] - (nodes[k] / 2) as f64 * h[k]).collect();
        let hi: Vec<f64> = (0..c.dim).map(|k| c.center[k] + (nodes[k] / 2) as f64 * h[k]).collect();
        write_raw(w, &FieldHeader { lo, hi, nodes, noniso_radius: Some(c.radius) }, &self.values)
    }

    pub fn read_fld<R: BufRead>(r: R) -> Result<Self> {
        let (header, values) = read_raw(r)?;
        let radius = header.noniso_radius.ok_or_else(|| Error::Format("not a cylinder field".into()))?;
        let dim = header.nodes.len();
        if !(2..=3).contains(&dim) || header.nodes.iter().any(|n| n % 2 == 0) {
            return Err(Error::Format("cylinder fields need 2 or 3 axes with odd node counts".into()));
        }
        let center: Vec<f64> = (0..dim).map(|k| 0.5 * (header.lo[k] + header.hi[k])).collect();
        let th = if dim == 3 { header.nodes[0] / 2 } else { 0 };
        let cylinder = NonIsotropicCylinder::new(dim, radius, th.max(1), header.nodes[dim - 1] / 2)?.centered(center)?;
        if cylinder.nodes_per_axis() != header.nodes {
            return Err(Error::Format("inconsistent cylinder node counts".into()));
        }
        Ok(Self { cylinder, values, provenance: Provenance::File })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.cylinder.dim;
        let cols: Vec<String> = (1..=n).map(|k| format!("y{k}")).chain(["v".to_string()]).collect();
        writeln!(w, "{}", cols.join(","))?;
        for k in 0..self.values.len() {
            if self.values[k].is_finite() {
                let p = self.cylinder.point(&self.cylinder.offsets(k));
                let row: Vec<String> = p.iter().chain([&self.values[k]]).map(|v| format!("{v:?}")).collect();
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }

    /// Largest violation of oddness in `y_{n-1}` and evenness in `y_n` over mirrored node pairs.
    pub fn symmetry_defect(&self) -> (f64, f64) {
        let n = self.cylinder.dim;
        let (mut odd, mut even) = (0.0_f64, 0.0_f64);
        for k in 0..self.values.len() {
            let off = self.cylinder.offsets(k);
            let Some(v) = self.at(&off) else { continue };
            let mut o = off.clone();
            o[n - 2] = -o[n - 2];
            if let Some(m) = self.at(&o) {
                odd = odd.max((v + m).abs());
            }
            let mut e = off.clone();
            e[n - 1] = -e[n - 1];
            if let Some(m) = self.at(&e) {
                even = even.max((v - m).abs());
            }
        }
        (odd, even)
    }
}

impl LegendreSource for LegendreField {
    fn dim(&self) -> usize {
        self.cylinder.dim
    }

    fn value(&self, y: &[f64]) -> Result<f64> {
        self.interpolate(y)
    }

    /// Hessian from multilinear interpolation of the node stencils.
    fn hessian(&self, y: &[f64]) -> Result<Matrix> {
        self.interp_hessian(y)
    }

    /// Central differences of the interpolated Hessian, step one disc spacing.
    fn third(&self, y: &[f64]) -> Result<[f64; 4]> {
        let n = self.cylinder.dim;
        let (a, b) = (n - 2, n - 1);
        let h = self.cylinder.spacing()[a];
        let shifted = |k: usize, s: f64| {
            let mut p = y.to_vec();
            p[k] += s * h;
            self.interp_hessian(&p)
        };
        let (ap, am) = (shifted(a, 1.0)?, shifted(a, -1.0)?);
        let (bp, bm) = (shifted(b, 1.0)?, shifted(b, -1.0)?);
        let d = |p: &Matrix, m: &Matrix, i: usize, j: usize| (p[i][j] - m[i][j]) / (2.0 * h);
        Ok([d(&ap, &am, a, a), d(&ap, &am, b, b), d(&bp, &bm, a, a), d(&bp, &bm, b, b)])
    }
}

/// Residual statistics of `F(D^2 v)` over off-axis nodes with complete stencils.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualReport {
    pub nodes: usize,
    pub max_abs: f64,
    pub rms: f64,
}

pub fn eval_f(v: &LegendreField) -> ResidualReport {
    let r: Vec<f64> = (0..v.values.len())
        .into_par_iter()
        .filter_map(|k| v.hessian_at_node(&v.cylinder.offsets(k)).map(|h| f_of_hessian(&h)))
        .collect();
    let nodes = r.len();
    let max_abs = r.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let rms = if nodes == 0 { 0.0 } else { (r.iter().map(|x| x * x).sum::<f64>() / nodes as f64).sqrt() };
    ResidualReport { nodes, max_abs, rms }
}

/// `F(D^2 v)` at given points, via the interpolated stencil Hessian.
pub fn f_residual_at<S: LegendreSource + ?Sized>(v: &S, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    points.iter().map(|y| Ok(f_of_hessian(&v.hessian(y)?))).collect()
}

/// Linearization coefficients at every node with a complete stencil and `y_{n-1} y_n != 0`.
pub fn linearize(v: &LegendreField) -> Vec<LinearizationCoeffs> {
    let n = v.cylinder.dim;
    (0..v.values.len())
        .into_par_iter()
        .filter_map(|k| {
            let off = v.cylinder.offsets(k);
            if off[n - 2] == 0 || off[n - 1] == 0 {
                return None;
            }
            let h = v.hessian_at_node(&off)?;
            LinearizationCoeffs::at(&v.cylinder.point(&off), &h).ok()
        })
        .collect()
}

/// Three-level Richardson extrapolation to `ρ = 0` of values at `ρ, ρ/2, ρ/4`,
/// assuming `q(ρ) = q_0 + c_1 ρ + c_2 ρ^2 + ...`.
pub fn richardson3(q: [f64; 3]) -> f64 {
    (8.0 * q[2] - 6.0 * q[1] + q[0]) / 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LimitConfig {
    /// Largest ray radius; the rays are sampled at `rho, rho/2, rho/4`.
    pub rho: f64,
    /// Pass tolerance on the normalized deviation.
    pub tol: f64,
}

impl Default for LimitConfig {
    fn default() -> Self {
        Self { rho: 0.2, tol: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LimitRow {
    pub name: String,
    pub measured: f64,
    pub predicted: f64,
    /// Largest per-ray `|extrapolated - predicted|`.
    pub deviation: f64,
    /// `deviation / scale`.
    pub normalized: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LimitTable {
    pub y0: Vec<f64>,
    pub rows: Vec<LimitRow>,
    pub pass: bool,
}

impl LimitTable {
    pub fn csv_header() -> &'static str {
        "name,measured,predicted,deviation,normalized,pass"
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::csv_header())?;
        for r in &self.rows {
            writeln!(w, "{},{:?},{:?},{:?},{:?},{}", r.name, r.measured, r.predicted, r.deviation, r.normalized, r.pass)?;
        }
        Ok(())
    }
}

fn ray_point(y0: &[f64], rho: f64, theta: f64) -> Vec<f64> {
    let n = y0.len();
    let mut p = y0.to_vec();
    p[n - 2] += rho * theta.cos();
    p[n - 1] += rho * theta.sin();
    p
}

/// Extrapolates `q` to the axis along the rays at `kπ/4` for the given `k`s;
/// returns the per-ray limits.
fn ray_limits(y0: &[f64], rho: f64, rays: &[usize], q: &dyn Fn(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    rays.iter()
        .map(|&k| {
            let th = k as f64 * std::f64::consts::FRAC_PI_4;
            let v = [q(&ray_point(y0, rho, th))?, q(&ray_point(y0, rho / 2.0, th))?, q(&ray_point(y0, rho / 4.0, th))?];
            Ok(richardson3(v))
        })
        .collect()
}

const ALL_RAYS: [usize; 8] = [0, 1, 2, 3, 4, 5, 6, 7];
const DIAGONAL_RAYS: [usize; 4] = [1, 3, 5, 7];

/// The eight axis limits of the second and third derivatives of `v` at `y0`,
/// compared with the values implied by the blowup `(C0, ν')` at the matching
/// free-boundary point.
pub fn weighted_limits<S: LegendreSource + ?Sized>(v: &S, y0: &[f64], blowup: &LegendreBlowup<f64>, cfg: &LimitConfig) -> Result<LimitTable> {
    let n = v.dim();
    if n != 3 || y0.len() != 3 || y0[1] != 0.0 || y0[2] != 0.0 {
        return Err(Error::InvalidParameter("weighted limits need n = 3 and a point on the axis".into()));
    }
    let (a, b) = (1, 2);
    let nu = &blowup.nu_prime;
    let cubic = 8.0 / (9.0 * nu[1] * nu[1] * nu[1] * blowup.c0 * blowup.c0);
    let third = blowup.third_derivatives();
    type Quantity<'a> = (&'a str, Box<dyn Fn(&[f64]) -> Result<f64> + 'a>, f64, f64);
    let hess = |y: &[f64]| v.hessian(y);
    let quantities: Vec<Quantity> = vec![
        (
            "rho_d11",
            Box::new(move |y: &[f64]| Ok((y[a] * y[a] + y[b] * y[b]).sqrt() * hess(y)?[0][0])),
            0.0,
            1.0,
        ),
        ("d1a", Box::new(move |y: &[f64]| Ok(hess(y)?[0][a])), nu[0] / nu[1], 1.0),
        ("d1b", Box::new(move |y: &[f64]| Ok(hess(y)?[0][b])), 0.0, 1.0),
        (
            "d_ab_max",
            Box::new(move |y: &[f64]| {
                let h = hess(y)?;
                Ok(h[a][a].abs().max(h[a][b].abs()).max(h[b][b].abs()))
            }),
            0.0,
            cubic,
        ),
        ("d_aaa", Box::new(move |y: &[f64]| Ok(v.third(y)?[0])), third[0], cubic),
        ("d_abb", Box::new(move |y: &[f64]| Ok(v.third(y)?[1])), third[1], cubic),
        ("d_aab", Box::new(move |y: &[f64]| Ok(v.third(y)?[2])), third[2], cubic),
        ("d_bbb", Box::new(move |y: &[f64]| Ok(v.third(y)?[3])), third[3], cubic),
    ];
    let rows: Vec<LimitRow> = quantities
        .into_iter()
        .map(|(name, q, predicted, scale)| {
            let per_ray = ray_limits(y0, cfg.rho, &ALL_RAYS, &*q)?;
            let measured = per_ray.iter().sum::<f64>() / per_ray.len() as f64;
            let deviation = per_ray.iter().map(|m| (m - predicted).abs()).fold(0.0, f64::max);
            let normalized = deviation / scale.max(predicted.abs());
            Ok(LimitRow { name: name.to_string(), measured, predicted, deviation, normalized, pass: normalized <= cfg.tol })
        })
        .collect::<Result<_>>()?;
    let pass = rows.iter().all(|r| r.pass);
    Ok(LimitTable { y0: y0.to_vec(), rows, pass })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BLimitReport {
    pub a: f64,
    /// Extrapolated `B` at the axis point (mean over the diagonal rays).
    pub b_limit: Matrix,
    /// `max |B - a^2 I| / a^2` over the `2(n-2)` tangential rows and columns.
    pub relative_deviation: f64,
    /// `max |B_{n-1} - I_2|` for the trailing block, which carries `F_{n-1,n-1}`, `F_{n-1,n}`, `F_{nn}`.
    pub trailing_deviation: f64,
    pub pass: bool,
}

/// `diag(a^2 I_{2(n-2)}, I_2)`.
pub fn expected_b0(n: usize, a: f64) -> Matrix {
    let m = 2 * (n - 1);
    (0..m).map(|p| (0..m).map(|q| if p != q { 0.0 } else if p < m - 2 { a * a } else { 1.0 }).collect()).collect()
}

/// Extrapolates `B(y)` to the axis along the four diagonal rays, where both
/// weighting coordinates are nonzero, and compares with [`expected_b0`].
pub fn b_limit<S: LegendreSource + ?Sized>(v: &S, y0: &[f64], a: f64, rho: f64, tol: f64) -> Result<BLimitReport> {
    let n = v.dim();
    let m = 2 * (n - 1);
    let entry = |p: usize, q: usize| {
        move |y: &[f64]| -> Result<f64> { Ok(LinearizationCoeffs::at(y, &v.hessian(y)?)?.b[p][q]) }
    };
    let expect = expected_b0(n, a);
    let mut b_limit = vec![vec![0.0; m]; m];
    let (mut dev, mut trailing) = (0.0_f64, 0.0_f64);
    for p in 0..m {
        for q in 0..m {
            let per_ray = ray_limits(y0, rho, &DIAGONAL_RAYS, &entry(p, q))?;
            b_limit[p][q] = per_ray.iter().sum::<f64>() / per_ray.len() as f64;
            let worst = per_ray.iter().map(|x| (x - expect[p][q]).abs()).fold(0.0, f64::max);
            if p < m - 2 || q < m - 2 {
                dev = dev.max(worst / (a * a));
            } else {
                trailing = trailing.max(worst);
            }
        }
    }
    Ok(BLimitReport { a, b_limit, relative_deviation: dev, trailing_deviation: trailing, pass: dev <= tol && trailing <= tol })
}

/// `max |B(y) - B(0)|` over diagonal-ray points with `|(y_{n-1}, y_n)| <= rho`,
/// for each `rho` in `radii`, with tangential entries measured relative to `a^2`.
pub fn b_deviation_profile<S: LegendreSource + ?Sized>(v: &S, y0: &[f64], a: f64, radii: &[f64]) -> Result<Vec<f64>> {
    let a2 = a * a;
    let expect = expected_b0(v.dim(), a);
    let m = expect.len();
    radii
        .iter()
        .map(|&rho| {
            let mut dev = 0.0_f64;
            for &k in &DIAGONAL_RAYS {
                for frac in [1.0, 0.75, 0.5] {
                    let y = ray_point(y0, rho * frac, k as f64 * std::f64::consts::FRAC_PI_4);
                    let c = LinearizationCoeffs::at(&y, &v.hessian(&y)?)?;
                    for (p, row) in c.b.iter().enumerate() {
                        for (q, x) in row.iter().enumerate() {
                            let scale = if p < m - 2 || q < m - 2 { a2 } else { 1.0 };
                            dev = dev.max((x - expect[p][q]).abs() / scale);
                        }
                    }
                }
            }
            Ok(dev)
        })
        .collect()
}

/// `v_{r,y0}(y) = v(y0 + δ_r y) / r^3` sampled on `template` (centred at the origin).
pub fn nonisotropic_rescale<S: LegendreSource + ?Sized>(v: &S, y0: &[f64], r: f64, template: &NonIsotropicCylinder) -> Result<LegendreField> {
    if !(r > 0.0) {
        return Err(Error::InvalidParameter("rescaling radius must be positive".into()));
    }
    let values: Vec<f64> = (0..template.len())
        .into_par_iter()
        .map(|k| {
            let off = template.offsets(k);
            if !template.in_disc(&off) {
                return Ok(f64::NAN);
            }
            let y = template.point(&off);
            let p: Vec<f64> = NonIsotropicCylinder::dilate(&y, r).iter().zip(y0).map(|(a, b)| a + b).collect();
            v.value(&p).map(|x| x / (r * r * r)).map_err(|e| match e {
                Error::DomainExceeded(m) => Error::DomainExceeded(format!("rescaling radius {r} too large: {m}")),
                e => e,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LegendreField { cylinder: template.clone(), values, provenance: Provenance::Rescaled { radius: r } })
}

/// Sup-distance between `v` and the blowup over the nodes of `K = {1/2 <= |(y_{n-1}, y_n)| <= 1}`.
pub fn convergence_check(v: &LegendreField, blowup: &LegendreBlowup<f64>) -> Result<f64> {
    let c = &v.cylinder;
    let n = c.dim;
    let mut sup = 0.0_f64;
    let mut count = 0usize;
    for k in 0..v.values.len() {
        let off = c.offsets(k);
        let y = c.point(&off);
        let rr = (y[n - 2] - c.center[n - 2]).hypot(y[n - 1] - c.center[n - 1]);
        if rr < 0.5 || !c.in_disc(&off) {
            continue;
        }
        let Some(val) = v.at(&off) else {
            return Err(Error::DomainExceeded(format!("no data at {y:?} in the comparison annulus")));
        };
        sup = sup.max((val - blowup.eval(&y)).abs());
        count += 1;
    }
    if count == 0 {
        return Err(Error::InsufficientData("empty comparison annulus".into()));
    }
    Ok(sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::BlowupProfile;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v0(c0: f64) -> LegendreBlowup<f64> {
        LegendreBlowup::new(&BlowupProfile::standard(3, c0)).unwrap()
    }

    fn tilted(c0: f64, phi: f64) -> LegendreBlowup<f64> {
        LegendreBlowup::new(&BlowupProfile::rotated(c0, phi)).unwrap()
    }

    #[test]
    fn residual_vanishes_on_closed_forms() {
        let cyl = NonIsotropicCylinder::new(3, 0.5, 8, 32).unwrap();
        for (v, tol) in [(v0(1.0), 1e-10), (tilted(1.3, 0.4), 1e-8)] {
            let f = LegendreField::from_fn(cyl.clone(), |y| v.eval(y));
            let rep = eval_f(&f);
            assert!(rep.nodes > 1000 && rep.max_abs < tol, "{rep:?}");
        }
    }

    #[test]
    fn linearization_is_the_derivative_of_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut h = vec![vec![0.0; 3]; 3];
            for i in 0..3 {
                for j in i..3 {
                    h[i][j] = rng.random_range(-1.0..1.0);
                    h[j][i] = h[i][j];
                }
            }
            let f = linearization(&h);
            let eps = 1e-6;
            for i in 0..3 {
                for j in i..3 {
                    let mut p = h.clone();
                    let mut m = h.clone();
                    p[i][j] += eps;
                    m[i][j] -= eps;
                    if i != j {
                        p[j][i] += eps;
                        m[j][i] -= eps;
                    }
                    let fd = (f_of_hessian(&p) - f_of_hessian(&m)) / (2.0 * eps);
                    let expect = if i == j { f[i][j] } else { 2.0 * f[i][j] };
                    assert!((fd - expect).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn b_at_origin_of_v0() {
        let v = v0(1.0);
        let c = LinearizationCoeffs::at(&[0.0, 0.3, -0.2], &v.hess(&[0.0, 0.3, -0.2])).unwrap();
        assert!((c.b[0][0] - 64.0 / 81.0).abs() < 1e-14 && (c.b[1][1] - 64.0 / 81.0).abs() < 1e-14);
        assert!((c.f[1][1] - 1.0).abs() < 1e-14);
        assert!(c.b_is_symmetric());
        let rep = b_limit(&v, &[0.0, 0.0, 0.0], grushin_coefficient(1.0), 0.2, 0.01).unwrap();
        assert!(rep.pass && rep.relative_deviation < 1e-10, "{rep:?}");
        assert!((grushin_coefficient(1.0) - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn factorization_reconstructs_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in [v0(1.0), tilted(1.7, 0.35)] {
            for _ in 0..100 {
                let y = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
                let c = LinearizationCoeffs::at(&y, &v.hess(&y)).unwrap();
                assert!(c.reconstruction_error() < 1e-10);
            }
        }
        // Generic Hessians too.
        for _ in 0..100 {
            let mut h = vec![vec![0.0; 3]; 3];
            for i in 0..3 {
                for j in i..3 {
                    h[i][j] = rng.random_range(-1.0..1.0);
                    h[j][i] = h[i][j];
                }
            }
            let c = LinearizationCoeffs::at(&[0.1, 0.4, -0.3], &h).unwrap();
            assert!(c.reconstruction_error() < 1e-12);
        }
    }

    #[test]
    fn limits_of_closed_forms() {
        let v = v0(1.0);
        let t = weighted_limits(&v, &[0.0, 0.0, 0.0], &v, &LimitConfig::default()).unwrap();
        assert!(t.pass, "{t:?}");
        assert!((t.rows[4].measured + 8.0 / 9.0).abs() < 1e-12);
        let phi: f64 = 0.3;
        let vt = tilted(1.0, phi);
        let t = weighted_limits(&vt, &[0.1, 0.0, 0.0], &vt, &LimitConfig::default()).unwrap();
        assert!(t.pass);
        assert!((t.rows[1].measured + phi.tan()).abs() < 1e-12);
    }

    #[test]
    fn limits_from_gridded_closed_form() {
        let cyl = NonIsotropicCylinder::new(3, 0.5, 8, 64).unwrap();
        let vt = tilted(1.2, 0.25);
        let f = LegendreField::from_fn(cyl, |y| vt.eval(y));
        let t = weighted_limits(&f, &[0.0, 0.0, 0.0], &vt, &LimitConfig::default()).unwrap();
        assert!(t.pass, "{t:#?}");
    }

    #[test]
    fn rescaling_v0_is_identity() {
        let v = v0(1.0);
        let template = NonIsotropicCylinder::new(3, 1.0, 4, 16).unwrap();
        for r in [1.0, 0.5, 0.1] {
            let vr = nonisotropic_rescale(&v, &[0.0; 3], r, &template).unwrap();
            assert!(convergence_check(&vr, &v).unwrap() < 1e-12);
        }
        let small = LegendreField::from_fn(NonIsotropicCylinder::new(3, 0.3, 4, 16).unwrap(), |y| v.eval(y));
        assert!(matches!(nonisotropic_rescale(&small, &[0.0; 3], 0.5, &template), Err(Error::DomainExceeded(_))));
    }

    #[test]
    fn dilation_maps_node_sets() {
        let c = NonIsotropicCylinder::new(3, 0.4, 3, 5).unwrap();
        for lambda in [0.5, 2.0] {
            let d = c.with_radius(lambda * c.radius);
            for k in 0..c.len() {
                let off = c.offsets(k);
                let p = NonIsotropicCylinder::dilate(&c.point(&off), lambda);
                let q = d.point(&off);
                assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn regridding_recovers_a_quadratic_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = |y: &[f64]| 0.3 + y[0] - 2.0 * y[1] * y[2] + y[2] * y[2];
        let samples: Vec<LegendreSample> = (0..20000)
            .map(|_| {
                let y = vec![rng.random_range(-0.3..0.3), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
                LegendreSample { v: g(&y), x: y.clone(), y }
            })
            .collect();
        let cyl = NonIsotropicCylinder::new(3, 0.5, 4, 8).unwrap();
        let f = LegendreField::regrid(cyl, &samples, &MlsConfig::default()).unwrap();
        let mut checked = 0;
        for k in 0..f.values.len() {
            if f.values[k].is_finite() {
                let y = f.cylinder.point(&f.cylinder.offsets(k));
                assert!((f.values[k] - g(&y)).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn mirrored_regrid_is_odd_and_even() {
        let v = v0(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let quad: Vec<LegendreSample> = (0..8000)
            .map(|_| {
                let y = vec![rng.random_range(-0.3..0.3), rng.random_range(0.0..0.6), rng.random_range(-0.6..0.0)];
                LegendreSample { v: v.eval(&y), x: vec![0.0; 3], y }
            })
            .collect();
        let f = LegendreField::regrid(NonIsotropicCylinder::new(3, 0.5, 4, 8).unwrap(), &mirror_samples(&quad), &MlsConfig::default()).unwrap();
        let (odd, even) = f.symmetry_defect();
        assert!(odd < 1e-3 && even < 1e-3, "{odd} {even}");
    }

    #[test]
    fn noniso_file_round_trip() {
        let v = v0(1.0);
        let f = LegendreField::from_fn(NonIsotropicCylinder::new(3, 0.5, 2, 4).unwrap(), |y| v.eval(y));
        let mut buf = Vec::new();
        f.write_fld(&mut buf).unwrap();
        assert!(buf.starts_with(b"FLD1 NONISO"));
        let g = LegendreField::read_fld(&buf[..]).unwrap();
        assert_eq!(g.cylinder, f.cylinder);
        assert!(f.values.iter().zip(&g.values).all(|(a, b)| a == b || (a.is_nan() && b.is_nan())));
    }

    #[test]
    fn two_dimensional_cylinder() {
        let v = LegendreBlowup::new(&BlowupProfile::standard(2, 1.0)).unwrap();
        let f = LegendreField::from_fn(NonIsotropicCylinder::new(2, 0.5, 0, 16).unwrap(), |y| v.eval(y));
        let rep = eval_f(&f);
        assert!(rep.max_abs < 1e-10);
    }
}
