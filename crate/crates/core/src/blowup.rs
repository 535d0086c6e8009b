//! Rescalings at thin-plane points, 3/2-homogeneous blowup fits, regular
//! point classification and growth / nondegeneracy diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SpatialField;
use crate::functionals::{FunctionalKind, Functionals, RadialSeries};
use crate::profiles::HomogeneousProfile;
use crate::quadrature::{Hemisphere, QuadratureRule};
use crate::real::norm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `u(x0 + r x) / r^{3/2}`.
    Homogeneous32,
    /// `u(x0 + r x)` divided by the root-mean-square of `u` on `∂B_r^+(x0)`.
    L2Sphere,
}

/// Lazily evaluated rescaling of a field about a thin-plane center.
#[derive(Clone, Debug)]
pub struct RescaledField<F> {
    base: F,
    center: Vec<f64>,
    scale: f64,
    factor: f64,
    normalization: Normalization,
}

fn check_plane_center(x0: &[f64], dim: usize) -> Result<()> {
    if x0.len() != dim || x0[dim - 1] != 0.0 {
        return Err(Error::InvalidParameter(format!("center {x0:?} must lie on the thin plane")));
    }
    Ok(())
}

pub fn rescale<F: SpatialField<f64>>(
    u: F,
    x0: &[f64],
    r: f64,
    normalization: Normalization,
    rule: &QuadratureRule,
) -> Result<RescaledField<F>> {
    check_plane_center(x0, u.dim())?;
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!("scale {r} must be positive")));
    }
    if let Some(cap) = u.radius_cap(x0) {
        if r > cap * (1.0 + 1e-12) {
            return Err(Error::DomainExceeded(format!("scale {r} exceeds cap {cap}")));
        }
    }
    let factor = match normalization {
        Normalization::Homogeneous32 => r.powf(1.5),
        Normalization::L2Sphere => {
            let hemi: Hemisphere<f64> = rule.hemisphere(u.dim(), None)?;
            let mass = hemi.sphere_integral(x0, r, |x| {
                let v = u.value(x)?;
                Ok(v * v)
            })?;
            let mean = mass / (hemi.measure() * r.powi(u.dim() as i32 - 1));
            if !(mean > 1e-28) {
                return Err(Error::DegenerateField(format!("vanishing L2 mean {mean} on the sphere of radius {r}")));
            }
            mean.sqrt()
        }
    };
    Ok(RescaledField { base: u, center: x0.to_vec(), scale: r, factor, normalization })
}

impl<F: SpatialField<f64>> RescaledField<F> {
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    fn to_base(&self, x: &[f64]) -> Vec<f64> {
        self.center.iter().zip(x).map(|(c, xi)| c + self.scale * xi).collect()
    }
}

impl<F: SpatialField<f64>> SpatialField<f64> for RescaledField<F> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.base.value(&self.to_base(x))? / self.factor)
    }
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let k = self.scale / self.factor;
        Ok(self.base.gradient(&self.to_base(x))?.into_iter().map(|g| g * k).collect())
    }
    fn hessian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let k = self.scale * self.scale / self.factor;
        Ok(self.base.hessian(&self.to_base(x))?.into_iter().map(|row| row.into_iter().map(|h| h * k).collect()).collect())
    }
    fn radius_cap(&self, y0: &[f64]) -> Option<f64> {
        self.base.radius_cap(&self.to_base(y0)).map(|c| c / self.scale)
    }
}

/// In-plane normal `(-sin a, cos a)` (3D) or `cos a` (2D, `a ∈ {0, pi}`).
pub fn nu_from_angle(dim: usize, angle: f64) -> Vec<f64> {
    if dim == 2 {
        vec![if angle.cos() >= 0.0 { 1.0 } else { -1.0 }]
    } else {
        vec![-angle.sin(), angle.cos()]
    }
}

pub fn angle_of_nu(nu: &[f64]) -> f64 {
    if nu.len() == 1 {
        if nu[0] >= 0.0 {
            0.0
        } else {
            std::f64::consts::PI
        }
    } else {
        (-nu[0]).atan2(nu[1])
    }
}

/// Least-squares fit of `C0 Re(x'.nu' + i x_n)^{3/2}` on the unit hemisphere.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlowupFit {
    pub c0: f64,
    pub angle: f64,
    pub nu_prime: Vec<f64>,
    /// Relative L2 misfit on the unit hemisphere.
    pub residual: f64,
    pub degenerate: bool,
    pub stagnated: bool,
}

struct FitData {
    dim: usize,
    dirs: Vec<Vec<f64>>,
    weights: Vec<f64>,
    values: Vec<f64>,
    norm2: f64,
}

impl FitData {
    /// Misfit and coefficient at a trial angle.
    fn misfit(&self, angle: f64) -> (f64, f64) {
        let model = HomogeneousProfile { kappa: 1.5, coeff: 1.0, nu_prime: nu_from_angle(self.dim, angle) };
        let (mut wm, mut mm) = (0.0, 0.0);
        for ((d, w), v) in self.dirs.iter().zip(&self.weights).zip(&self.values) {
            let m = model.eval(d);
            wm += w * v * m;
            mm += w * m * m;
        }
        let c = (wm / mm).max(0.0);
        (self.norm2 - c * c * mm, c)
    }
}

pub fn fit_blowup<F: SpatialField<f64>>(w: &F, rule: &QuadratureRule) -> Result<BlowupFit> {
    let dim = w.dim();
    let hemi: Hemisphere<f64> = rule.hemisphere(dim, None)?;
    let dirs: Vec<Vec<f64>> = (0..hemi.len()).map(|k| hemi.direction(k).to_vec()).collect();
    let values = dirs.iter().map(|d| w.value(d)).collect::<Result<Vec<_>>>()?;
    let weights = hemi.weights().to_vec();
    let norm2: f64 = values.iter().zip(&weights).map(|(v, wt)| wt * v * v).sum();
    if !(norm2 > 1e-28) {
        return Ok(BlowupFit { c0: 0.0, angle: 0.0, nu_prime: nu_from_angle(dim, 0.0), residual: 0.0, degenerate: true, stagnated: false });
    }
    let data = FitData { dim, dirs, weights, values, norm2 };
    let pi = std::f64::consts::PI;
    let (angle, stagnated) = if dim == 2 {
        let a = if data.misfit(0.0).0 <= data.misfit(pi).0 { 0.0 } else { pi };
        (a, false)
    } else {
        const STEPS: usize = 360;
        let step = 2.0 * pi / STEPS as f64;
        let best = (0..STEPS)
            .map(|k| -pi + step * k as f64)
            .map(|a| (a, data.misfit(a).0))
            .fold((0.0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
        golden_section(|a| data.misfit(a).0, best.0 - step, best.0 + step, 1e-11, 200)
    };
    let (mis, c0) = data.misfit(angle);
    let angle = (angle + pi).rem_euclid(2.0 * pi) - pi;
    Ok(BlowupFit {
        c0,
        angle,
        nu_prime: nu_from_angle(dim, angle),
        residual: (mis.max(0.0) / data.norm2).sqrt(),
        degenerate: false,
        stagnated,
    })
}

/// Golden-section minimization; returns the minimizer and whether the budget ran out.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64, max_iter: usize) -> (f64, bool) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..max_iter {
        if (b - a).abs() < tol {
            return (0.5 * (a + b), false);
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    (0.5 * (a + b), true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Regular,
    NonRegular,
    Undecided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyConfig {
    pub regular_threshold: f64,
    pub residual_threshold: f64,
    /// Radius of the blowup fit; defaults to the largest rung of the ladder.
    pub fit_radius: Option<f64>,
    pub quadrature: QuadratureRule,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            regular_threshold: 1.75,
            residual_threshold: 0.05,
            fit_radius: None,
            quadrature: QuadratureRule { polar_points: 32, azimuth_points: 64, radial_intervals: 32 },
        }
    }
}

/// Classified free-boundary point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FreeBoundaryPoint {
    pub location: Vec<f64>,
    pub kappa: f64,
    #[serde(rename = "C0")]
    pub c0: f64,
    pub nu_prime: Vec<f64>,
    pub nu_angle: f64,
    pub residual: f64,
    pub classification: Classification,
    pub eps0_hat: Option<f64>,
    pub growth_slope: Option<f64>,
    pub frequency: RadialSeries,
}

/// Checks that `x0` sits between coincidence and positivity on the plane,
/// probing a circle of radius `rho` in the thin plane.
pub fn is_candidate<F: SpatialField<f64>>(u: &F, x0: &[f64], rho: f64) -> Result<bool> {
    let n = u.dim();
    let mut samples = Vec::new();
    let count = if n == 2 { 2 } else { 16 };
    for k in 0..count {
        let a = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
        let mut p = x0.to_vec();
        if n == 2 {
            p[0] += if k == 0 { rho } else { -rho };
        } else {
            p[0] += rho * a.cos();
            p[1] += rho * a.sin();
        }
        samples.push(u.value(&p)?);
    }
    let top = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let low = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let center = u.value(x0)?;
    Ok(top > 0.0 && center.abs() <= 0.1 * top && low <= 0.1 * top)
}

/// Intercept of the least-squares line through `(x, y)`.
pub fn linear_intercept(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    my - slope * mx
}

/// Slope of the least-squares line through `(x, y)`.
pub fn linear_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    sxy / sxx
}

/// Frequency extrapolated to `r -> 0` by a linear fit over the smallest decade.
pub fn extrapolate_kappa(series: &RadialSeries) -> Result<f64> {
    let rmin = series.radii.first().copied().unwrap_or(0.0);
    let (r, v): (Vec<f64>, Vec<f64>) =
        series.radii.iter().zip(&series.values).filter(|(r, _)| **r <= 10.0 * rmin * (1.0 + 1e-12)).map(|(r, v)| (*r, *v)).unzip();
    if r.len() < 3 {
        return Err(Error::InsufficientData(format!("ladder too short: {} radii in the smallest decade", r.len())));
    }
    Ok(linear_intercept(&r, &v))
}

pub fn classify_point<F: SpatialField<f64>>(u: &F, x0: &[f64], ladder: &[f64], cfg: &ClassifyConfig) -> Result<FreeBoundaryPoint> {
    check_plane_center(x0, u.dim())?;
    if ladder.len() < 3 {
        return Err(Error::InsufficientData(format!("ladder too short: {} radii", ladder.len())));
    }
    if !is_candidate(u, x0, ladder[0])? {
        return Err(Error::NotCandidate(format!("{x0:?} shows no sign change of u on the thin plane")));
    }
    let fun = Functionals::new(u, &cfg.quadrature)?;
    let series = fun.series(FunctionalKind::Frequency, x0, ladder, None)?;
    let kappa = extrapolate_kappa(&series)?;
    let r_fit = cfg.fit_radius.unwrap_or(*ladder.last().unwrap());
    let w = rescale(u, x0, r_fit, Normalization::Homogeneous32, &cfg.quadrature)?;
    let fit = fit_blowup(&w, &cfg.quadrature)?;
    let classification = if kappa >= cfg.regular_threshold {
        Classification::NonRegular
    } else if fit.residual < cfg.residual_threshold && !fit.degenerate {
        Classification::Regular
    } else {
        Classification::Undecided
    };
    Ok(FreeBoundaryPoint {
        location: x0.to_vec(),
        kappa,
        c0: fit.c0,
        nu_angle: fit.angle,
        nu_prime: fit.nu_prime,
        residual: fit.residual,
        classification,
        eps0_hat: None,
        growth_slope: None,
        frequency: series,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrowthReport {
    pub radii: Vec<f64>,
    pub sup_abs: Vec<f64>,
    pub growth_slope: f64,
    pub eps0_hat: f64,
    pub degenerate: bool,
    pub pass: bool,
}

/// Growth exponent of `sup_{B_r^+}|u|` and the smallest tangential derivative
/// ratio `∂_τ u(x0 + t nu') / t^{1/2}` over the ladder and the cone
/// `{τ : τ.nu' >= eta |τ|}`.
pub fn growth_and_nondegeneracy<F: SpatialField<f64>>(
    u: &F,
    x0: &[f64],
    nu_prime: &[f64],
    ladder: &[f64],
    eta: f64,
) -> Result<GrowthReport> {
    let n = u.dim();
    check_plane_center(x0, n)?;
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidParameter(format!("cone aperture {eta} not in (0,1]")));
    }
    let rule = QuadratureRule { polar_points: 16, azimuth_points: 32, radial_intervals: 2 };
    let hemi: Hemisphere<f64> = rule.hemisphere(n, None)?;
    let mut nu_dir = nu_prime.to_vec();
    nu_dir.push(0.0);
    let mut sup_abs = Vec::new();
    for &r in ladder {
        let mut m = 0.0f64;
        for frac in [0.25, 0.5, 0.75, 1.0] {
            let s = r * frac;
            let mut probe = |d: &[f64]| -> Result<()> {
                let p: Vec<f64> = x0.iter().zip(d).map(|(c, di)| c + s * di).collect();
                m = m.max(u.value(&p)?.abs());
                Ok(())
            };
            probe(&nu_dir)?;
            for k in 0..hemi.len() {
                probe(hemi.direction(k))?;
            }
        }
        sup_abs.push(m);
    }
    if sup_abs.iter().any(|&s| !(s > 1e-300)) {
        return Ok(GrowthReport { radii: ladder.to_vec(), sup_abs, growth_slope: f64::NAN, eps0_hat: 0.0, degenerate: true, pass: false });
    }
    let lr: Vec<f64> = ladder.iter().map(|r| r.ln()).collect();
    let ls: Vec<f64> = sup_abs.iter().map(|s| s.ln()).collect();
    let slope = linear_slope(&lr, &ls);

    let half = eta.acos();
    let dirs: Vec<Vec<f64>> = if n == 2 {
        vec![nu_prime.to_vec()]
    } else {
        (0..16)
            .map(|k| {
                let a = -half + 2.0 * half * k as f64 / 15.0;
                let (c, s) = (a.cos(), a.sin());
                vec![c * nu_prime[0] - s * nu_prime[1], s * nu_prime[0] + c * nu_prime[1]]
            })
            .collect()
    };
    let mut eps0 = f64::INFINITY;
    for &t in ladder {
        let p: Vec<f64> = x0.iter().zip(&nu_dir).map(|(c, d)| c + t * d).collect();
        let g = u.gradient(&p)?;
        for tau in &dirs {
            let l = norm(tau);
            let d: f64 = tau.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / l;
            eps0 = eps0.min(d / t.sqrt());
        }
    }
    Ok(GrowthReport {
        radii: ladder.to_vec(),
        sup_abs,
        growth_slope: slope,
        eps0_hat: eps0,
        degenerate: false,
        pass: slope >= 1.4 && eps0 > 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AnalyticField, Grid, ScalarField};
    use crate::profiles::BlowupProfile;

    fn rule() -> QuadratureRule {
        QuadratureRule { polar_points: 32, azimuth_points: 64, radial_intervals: 16 }
    }

    #[test]
    fn homogeneous_rescaling_fixes_the_blowup() {
        let u0 = BlowupProfile::new(1.3, vec![0.6, 0.8]).unwrap();
        for r in [0.1, 0.37, 0.9] {
            let w = rescale(&u0, &[0.0; 3], r, Normalization::Homogeneous32, &rule()).unwrap();
            for x in [[0.3, -0.2, 0.5], [-0.7, 0.1, 0.0], [0.05, 0.9, 0.2]] {
                assert!((w.value(&x).unwrap() - u0.eval_u0(&x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l2_rescaling_divides_by_sphere_rms() {
        let u0 = BlowupProfile::standard(3, 1.0);
        let w = rescale(&u0, &[0.0; 3], 1.0, Normalization::L2Sphere, &rule()).unwrap();
        // ∫_{∂B_1^+} u0^2 = 3 pi^2 / 16 over an area of 2 pi.
        let rms = (3.0 * std::f64::consts::PI / 32.0).sqrt();
        assert!((w.factor() - rms).abs() < 1e-12);
        let x = [0.1, 0.2, 0.3];
        assert!((w.value(&x).unwrap() - u0.eval_u0(&x) / rms).abs() < 1e-12);
    }

    #[test]
    fn rescale_beyond_cap_is_rejected() {
        let grid = Grid::half_box(3, 17).unwrap();
        let u = ScalarField::sample(grid, &BlowupProfile::standard(3, 1.0)).unwrap();
        assert!(matches!(rescale(&u, &[0.0; 3], 0.95, Normalization::Homogeneous32, &rule()), Err(Error::DomainExceeded(_))));
    }

    #[test]
    fn self_fit_recovers_parameters() {
        let angle = 30f64.to_radians();
        let u0 = BlowupProfile::rotated(2.5, angle);
        let w = rescale(&u0, &[0.0; 3], 1.0, Normalization::Homogeneous32, &rule()).unwrap();
        let fit = fit_blowup(&w, &rule()).unwrap();
        assert!((fit.c0 - 2.5).abs() < 1e-6, "{fit:?}");
        assert!((fit.angle - angle).abs() < 1e-6, "{fit:?}");
        assert!(fit.residual < 1e-6);
    }

    #[test]
    fn zero_field_fit_is_degenerate() {
        let z = AnalyticField::affine(0.0, vec![0.0; 3]);
        let fit = fit_blowup(&z, &rule()).unwrap();
        assert!(fit.degenerate && fit.c0 == 0.0 && fit.residual == 0.0);
    }

    #[test]
    fn two_dimensional_fit_picks_the_orientation() {
        let u0 = BlowupProfile::new(0.8, vec![-1.0]).unwrap();
        let fit = fit_blowup(&u0, &rule()).unwrap();
        assert_eq!(fit.nu_prime, vec![-1.0]);
        assert!((fit.c0 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn analytic_blowup_is_regular() {
        let u0 = BlowupProfile::standard(3, 1.0);
        let ladder = [0.05, 0.1, 0.2, 0.3, 0.4];
        let p = classify_point(&u0, &[0.0; 3], &ladder, &ClassifyConfig::default()).unwrap();
        assert_eq!(p.classification, Classification::Regular);
        assert!((p.kappa - 1.5).abs() < 1e-6);
    }

    #[test]
    fn point_inside_positivity_set_is_not_a_candidate() {
        let u0 = BlowupProfile::standard(3, 1.0);
        let ladder = [0.05, 0.1, 0.2, 0.3];
        let r = classify_point(&u0, &[0.0, 0.5, 0.0], &ladder, &ClassifyConfig::default());
        assert!(matches!(r, Err(Error::NotCandidate(_))));
    }

    #[test]
    fn short_ladder_is_rejected() {
        let u0 = BlowupProfile::standard(3, 1.0);
        let r = classify_point(&u0, &[0.0; 3], &[0.05, 0.6, 0.8], &ClassifyConfig::default());
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn growth_of_the_blowup() {
        let u0 = BlowupProfile::standard(3, 2.0);
        let rep = growth_and_nondegeneracy(&u0, &[0.0; 3], &[0.0, 1.0], &[0.05, 0.1, 0.2, 0.4], 0.5).unwrap();
        assert!((rep.growth_slope - 1.5).abs() < 1e-3);
        // ∂_τ u0(t nu') = (3/2) C0 t^{1/2} (τ.nu'), minimized on the cone edge τ.nu' = eta.
        assert!((rep.eps0_hat - 1.5 * 2.0 * 0.5).abs() < 1e-12);
        let z = AnalyticField::affine(0.0, vec![0.0; 3]);
        assert!(growth_and_nondegeneracy(&z, &[0.0; 3], &[0.0, 1.0], &[0.1, 0.2], 0.5).unwrap().degenerate);
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let (x, stalled) = golden_section(|x| (x - 0.3).powi(2), 0.0, 1.0, 1e-10, 200);
        assert!((x - 0.3).abs() < 1e-9 && !stalled);
    }
}
