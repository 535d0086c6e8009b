//! Almgren frequency, Weiss and Monneau functionals on half balls centred on
//! the thin plane, radial series over ladders and their monotonicity checks.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SpatialField;
use crate::profiles::HomogeneousProfile;
use crate::quadrature::{Hemisphere, QuadratureRule};
use crate::real::{dot, Real};

/// Guard for the frequency denominator.
pub const EPS_DEN: f64 = 1e-14;

/// Which radial functional a series holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalKind {
    Frequency,
    Weiss,
    Monneau,
}

impl FunctionalKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Frequency => "frequency",
            Self::Weiss => "weiss",
            Self::Monneau => "monneau",
        }
    }
}

/// Parameters of the Monneau functional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonneauConfig {
    pub c0: f64,
    pub nu_prime: Vec<f64>,
    /// Hölder exponent of the free-boundary graph.
    pub alpha: f64,
    /// Sanity bound on the fitted correction constant.
    pub ctilde_bound: f64,
}

impl MonneauConfig {
    pub fn new(c0: f64, nu_prime: Vec<f64>, alpha: f64) -> Result<Self> {
        if !(c0 > 0.0) {
            return Err(Error::InvalidParameter(format!("c0 must be positive, got {c0}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must lie in (0,1), got {alpha}")));
        }
        HomogeneousProfile::new(1.5, 1.0, nu_prime.clone())?;
        Ok(Self { c0, nu_prime, alpha, ctilde_bound: 1e3 })
    }
}

/// Samples of one functional over a radius ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialSeries {
    pub center: Vec<f64>,
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    pub kind: FunctionalKind,
}

impl RadialSeries {
    /// Appends rows `center..., r, value, kind` to a CSV writer.
    pub fn write_csv_rows<W: Write>(&self, w: &mut W) -> Result<()> {
        for (r, v) in self.radii.iter().zip(&self.values) {
            for c in &self.center {
                write!(w, "{c:?},")?;
            }
            writeln!(w, "{r:?},{v:?},{}", self.kind.name())?;
        }
        Ok(())
    }

    pub fn csv_header(dim: usize) -> String {
        let mut s: String = (0..dim).map(|k| format!("x0_{},", k + 1)).collect();
        s.push_str("r,value,kind");
        s
    }
}

/// Evaluates the radial functionals of one field with a fixed quadrature.
pub struct Functionals<'a, T: Real, F: SpatialField<T>> {
    u: &'a F,
    rule: Hemisphere<T>,
}

fn check_center<T: Real>(x0: &[T], dim: usize) -> Result<()> {
    if x0.len() != dim || x0[dim - 1] != T::zero() {
        return Err(Error::InvalidParameter(format!("center {x0:?} must lie on the thin plane")));
    }
    Ok(())
}

impl<'a, T: Real, F: SpatialField<T>> Functionals<'a, T, F> {
    pub fn new(u: &'a F, rule: &QuadratureRule) -> Result<Self> {
        Ok(Self { u, rule: rule.hemisphere(u.dim(), None)? })
    }

    /// Uses a polar axis adapted to a blowup with in-plane normal `nu'`.
    pub fn aligned(u: &'a F, rule: &QuadratureRule, nu_prime: &[T]) -> Result<Self> {
        let axis: Option<Vec<T>> = (u.dim() == 3).then(|| vec![-nu_prime[1], nu_prime[0], T::zero()]);
        Ok(Self { u, rule: rule.hemisphere(u.dim(), axis.as_deref())? })
    }

    pub fn dim(&self) -> usize {
        self.u.dim()
    }

    fn check(&self, x0: &[T], r: T) -> Result<()> {
        check_center(x0, self.dim())?;
        if !(r > T::zero()) {
            return Err(Error::InvalidParameter(format!("radius {r} must be positive")));
        }
        if let Some(cap) = self.u.radius_cap(x0) {
            if r > cap * (T::one() + T::lit(1e-12)) {
                return Err(Error::DomainExceeded(format!("radius {r} exceeds cap {cap} at {x0:?}")));
            }
        }
        Ok(())
    }

    /// `∫_{B_r^+} |∇u|^2`.
    pub fn dirichlet_energy(&self, x0: &[T], r: T) -> Result<T> {
        self.check(x0, r)?;
        self.rule.ball_integral(x0, r, |x| {
            let g = self.u.gradient(x)?;
            Ok(dot(&g, &g))
        })
    }

    /// `∫_{∂B_r^+} u^2`.
    pub fn boundary_l2(&self, x0: &[T], r: T) -> Result<T> {
        self.check(x0, r)?;
        self.rule.sphere_integral(x0, r, |x| {
            let v = self.u.value(x)?;
            Ok(v * v)
        })
    }

    pub fn frequency(&self, x0: &[T], r: T) -> Result<T> {
        let den = self.boundary_l2(x0, r)?;
        if !(den >= T::lit(EPS_DEN)) {
            return Err(Error::DegenerateField(format!("boundary L2 mass {den} below {EPS_DEN} at r={r}")));
        }
        Ok(r * self.dirichlet_energy(x0, r)? / den)
    }

    pub fn weiss(&self, x0: &[T], r: T) -> Result<T> {
        let n = self.dim() as i32;
        let e = self.dirichlet_energy(x0, r)?;
        let b = self.boundary_l2(x0, r)?;
        Ok(e / r.powi(n + 1) - T::lit(1.5) * b / r.powi(n + 2))
    }

    /// `(2/r^{n+3}) ∫_{∂B_r^+} ((x - x0).∇u - 3u/2)^2`.
    pub fn weiss_derivative(&self, x0: &[T], r: T) -> Result<T> {
        self.check(x0, r)?;
        let n = self.dim() as i32;
        let s = self.rule.sphere_integral(x0, r, |x| {
            let g = self.u.gradient(x)?;
            let radial = x.iter().zip(x0).zip(&g).fold(T::zero(), |a, ((&xi, &ci), &gi)| a + (xi - ci) * gi);
            let q = radial - T::lit(1.5) * self.u.value(x)?;
            Ok(q * q)
        })?;
        Ok(T::lit(2.0) * s / r.powi(n + 3))
    }

    /// `r^{-(n+2)} ∫_{∂B_r^+} (u - c0 u_{x0})^2` with `u_{x0}(x) = Re((x-x0)'.nu' + i x_n)^{3/2}`.
    pub fn monneau(&self, x0: &[T], r: T, cfg: &MonneauConfig) -> Result<T> {
        self.check(x0, r)?;
        let nu: Vec<T> = cfg.nu_prime.iter().map(|&v| T::lit(v)).collect();
        let model = HomogeneousProfile::new(T::lit(1.5), T::lit(cfg.c0), nu)?;
        let n = self.dim() as i32;
        let s = self.rule.sphere_integral(x0, r, |x| {
            let shifted: Vec<T> = x.iter().zip(x0).map(|(&a, &b)| a - b).collect();
            let d = self.u.value(x)? - model.eval(&shifted);
            Ok(d * d)
        })?;
        Ok(s / r.powi(n + 2))
    }

    pub fn series(&self, kind: FunctionalKind, x0: &[T], radii: &[T], monneau: Option<&MonneauConfig>) -> Result<RadialSeries> {
        if radii.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("radii must be strictly increasing".into()));
        }
        let values = radii
            .iter()
            .map(|&r| match kind {
                FunctionalKind::Frequency => self.frequency(x0, r),
                FunctionalKind::Weiss => self.weiss(x0, r),
                FunctionalKind::Monneau => {
                    let cfg = monneau.ok_or_else(|| Error::InvalidParameter("Monneau series needs a config".into()))?;
                    self.monneau(x0, r, cfg)
                }
            })
            .map(|v| v.map(Real::to_f64_lossy))
            .collect::<Result<Vec<_>>>()?;
        Ok(RadialSeries {
            center: x0.iter().map(|v| v.to_f64_lossy()).collect(),
            radii: radii.iter().map(|v| v.to_f64_lossy()).collect(),
            values,
            kind,
        })
    }
}

/// Largest decrease between consecutive values of a ladder.
pub fn max_downward_jump(values: &[f64]) -> f64 {
    values.windows(2).map(|w| (w[0] - w[1]).max(0.0)).fold(0.0, f64::max)
}

/// Outcome of the Weiss monotonicity check.
#[derive(Clone, Debug, Serialize)]
pub struct WeissReport {
    pub max_downward_jump: f64,
    /// `(r, finite difference, surface formula)` at interior rungs.
    pub derivative_pairs: Vec<(f64, f64, f64)>,
    pub max_relative_derivative_mismatch: f64,
    pub jump_tol: f64,
    pub monotone: bool,
    pub derivative_agrees: bool,
    pub pass: bool,
}

/// Derivative of a sampled function at the middle of three non-uniform nodes.
pub fn nonuniform_central_difference(r: [f64; 3], w: [f64; 3]) -> f64 {
    let (h0, h1) = (r[1] - r[0], r[2] - r[1]);
    (-h1 / (h0 * (h0 + h1))) * w[0] + ((h1 - h0) / (h0 * h1)) * w[1] + (h0 / (h1 * (h0 + h1))) * w[2]
}

/// Checks a Weiss series for monotonicity and compares its finite-difference
/// derivative with the surface formula where the derivative exceeds `1e-8`.
pub fn weiss_monotonicity_check<F: SpatialField<f64>>(
    series: &RadialSeries,
    fun: &Functionals<'_, f64, F>,
    jump_tol: f64,
) -> Result<WeissReport> {
    if series.kind != FunctionalKind::Weiss || series.radii.len() < 8 {
        return Err(Error::InsufficientData("Weiss check needs a Weiss series with at least 8 radii".into()));
    }
    let jump = max_downward_jump(&series.values);
    let mut pairs = Vec::new();
    let mut worst = 0.0f64;
    for k in 1..series.radii.len() - 1 {
        let r = [series.radii[k - 1], series.radii[k], series.radii[k + 1]];
        let w = [series.values[k - 1], series.values[k], series.values[k + 1]];
        let fd = nonuniform_central_difference(r, w);
        let formula = fun.weiss_derivative(&series.center, r[1])?;
        if formula.abs() > 1e-8 {
            worst = worst.max((fd - formula).abs() / formula.abs());
        }
        pairs.push((r[1], fd, formula));
    }
    let monotone = jump <= jump_tol;
    let derivative_agrees = worst <= 0.1;
    Ok(WeissReport {
        max_downward_jump: jump,
        derivative_pairs: pairs,
        max_relative_derivative_mismatch: worst,
        jump_tol,
        monotone,
        derivative_agrees,
        pass: monotone && derivative_agrees,
    })
}

/// Outcome of the Monneau monotonicity check.
#[derive(Clone, Debug, Serialize)]
pub struct MonneauReport {
    pub ctilde: f64,
    pub corrected: Vec<f64>,
    pub max_downward_jump: f64,
    pub ctilde_bound: f64,
    pub pass: bool,
}

/// Smallest `C >= 0` making `M(r) + C r^alpha` nondecreasing over the ladder.
pub fn fit_ctilde(radii: &[f64], values: &[f64], alpha: f64) -> f64 {
    radii
        .windows(2)
        .zip(values.windows(2))
        .filter(|(_, m)| m[1] < m[0])
        .map(|(r, m)| (m[0] - m[1]) / (r[1].powf(alpha) - r[0].powf(alpha)))
        .fold(0.0, f64::max)
}

pub fn monneau_monotonicity_check(series: &RadialSeries, cfg: &MonneauConfig, jump_tol: f64) -> Result<MonneauReport> {
    if series.kind != FunctionalKind::Monneau || series.radii.len() < 2 {
        return Err(Error::InsufficientData("Monneau check needs a Monneau series".into()));
    }
    let ctilde = fit_ctilde(&series.radii, &series.values, cfg.alpha);
    let corrected: Vec<f64> =
        series.radii.iter().zip(&series.values).map(|(r, m)| m + ctilde * r.powf(cfg.alpha)).collect();
    let jump = max_downward_jump(&corrected);
    Ok(MonneauReport {
        ctilde,
        max_downward_jump: jump,
        pass: ctilde <= cfg.ctilde_bound && jump <= jump_tol,
        corrected,
        ctilde_bound: cfg.ctilde_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AnalyticField, Grid, ScalarField};
    use crate::profiles::{harmonics, BlowupProfile};
    use std::f64::consts::PI;

    fn coarse() -> QuadratureRule {
        QuadratureRule { polar_points: 24, azimuth_points: 48, radial_intervals: 16 }
    }

    #[test]
    fn frequency_of_homogeneous_harmonics() {
        let rule = coarse();
        let u0 = BlowupProfile::standard(3, 1.0_f64);
        let f = Functionals::new(&u0, &rule).unwrap();
        assert!((f.frequency(&[0.0; 3], 0.5).unwrap() - 1.5).abs() < 1e-9);
        let xn = harmonics::normal_coordinate::<f64>(3);
        let f = Functionals::new(&xn, &rule).unwrap();
        assert!((f.frequency(&[0.0; 3], 0.7).unwrap() - 1.0).abs() < 1e-10);
        let q = harmonics::product_last_two::<f64>(3);
        let f = Functionals::new(&q, &rule).unwrap();
        // The radial integrand is s^4 here, so Simpson carries an O(h^4) error.
        assert!((f.frequency(&[0.0; 3], 0.3).unwrap() - 2.0).abs() < 1e-4);
    }

    #[test]
    fn weiss_reference_values() {
        let rule = coarse();
        let xn = harmonics::normal_coordinate::<f64>(3);
        let f = Functionals::new(&xn, &rule).unwrap();
        assert!((f.weiss(&[0.0; 3], 1.0).unwrap() + PI / 3.0).abs() < 1e-10);
        let zero = AnalyticField::affine(0.0_f64, vec![0.0; 3]);
        let f = Functionals::new(&zero, &rule).unwrap();
        assert_eq!(f.weiss(&[0.0; 3], 0.4).unwrap(), 0.0);
        let u0 = BlowupProfile::standard(3, 1.0_f64);
        let f = Functionals::new(&u0, &rule).unwrap();
        assert!(f.weiss(&[0.0; 3], 0.5).unwrap().abs() < 1e-10);
        assert!(f.weiss_derivative(&[0.0; 3], 0.5).unwrap().abs() < 1e-12);
    }

    #[test]
    fn weiss_derivative_of_linear_field_matches_closed_form() {
        // W(r) = -(pi/3)/r for x_n in 3D, so dW/dr = (pi/3)/r^2.
        let xn = harmonics::normal_coordinate::<f64>(3);
        let f = Functionals::new(&xn, &coarse()).unwrap();
        let d = f.weiss_derivative(&[0.0; 3], 0.5).unwrap();
        assert!((d - PI / 3.0 / 0.25).abs() < 1e-10);
    }

    #[test]
    fn monneau_vanishes_on_its_model_and_is_scale_invariant_for_zero() {
        let rule = coarse();
        let p = BlowupProfile::rotated(2.0_f64, 0.4);
        let cfg = MonneauConfig::new(2.0, p.nu_prime.clone(), 0.5).unwrap();
        let f = Functionals::aligned(&p, &rule, &p.nu_prime).unwrap();
        assert!(f.monneau(&[0.0; 3], 0.6, &cfg).unwrap() < 1e-20);
        let zero = AnalyticField::affine(0.0_f64, vec![0.0; 3]);
        let f = Functionals::new(&zero, &rule).unwrap();
        let cfg = MonneauConfig::new(1.0, vec![0.0, 1.0], 0.5).unwrap();
        let m1 = f.monneau(&[0.0; 3], 1.0, &cfg).unwrap();
        let m2 = f.monneau(&[0.0; 3], 0.3, &cfg).unwrap();
        assert!((m1 - m2).abs() < 1e-8 * m1);
        // ∫_{∂B_1^+} u0^2 = ∫ sin^4(t) dt ∫ cos^2(3p/2) dp = (3 pi/8)(pi/2).
        assert!((m1 - 3.0 * PI * PI / 16.0).abs() < 1e-10);
    }

    #[test]
    fn radius_beyond_cap_rejected() {
        let grid = Grid::half_box(3, 17).unwrap();
        let u = ScalarField::sample(grid, &harmonics::normal_coordinate::<f64>(3)).unwrap();
        let f = Functionals::new(&u, &coarse()).unwrap();
        assert!(matches!(f.frequency(&[0.0; 3], 0.95), Err(Error::DomainExceeded(_))));
        assert!(f.frequency(&[0.0, 0.0, 0.1], 0.5).is_err());
    }

    #[test]
    fn zero_field_frequency_is_degenerate() {
        let zero = AnalyticField::affine(0.0_f64, vec![0.0; 2]);
        let f = Functionals::new(&zero, &coarse()).unwrap();
        assert!(matches!(f.frequency(&[0.0; 2], 0.5), Err(Error::DegenerateField(_))));
    }

    #[test]
    fn ctilde_fit_restores_monotonicity() {
        let radii = [0.1, 0.2, 0.3, 0.4];
        let values = [1.0, 0.9, 0.95, 0.94];
        let c = fit_ctilde(&radii, &values, 0.5);
        let corrected: Vec<f64> = radii.iter().zip(&values).map(|(r, m)| m + c * f64::powf(*r, 0.5)).collect();
        assert!(max_downward_jump(&corrected) < 1e-14);
        assert_eq!(fit_ctilde(&radii, &[1.0, 2.0, 3.0, 4.0], 0.5), 0.0);
    }

    #[test]
    fn nonuniform_difference_is_exact_on_quadratics() {
        let f = |r: f64| 3.0 * r * r - r + 2.0;
        let r = [0.1, 0.25, 0.45];
        let d = nonuniform_central_difference(r, r.map(f));
        assert!((d - (6.0 * 0.25 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn csv_rows_have_center_radius_value_kind() {
        let s = RadialSeries { center: vec![0.0, 0.0, 0.0], radii: vec![0.5], values: vec![1.5], kind: FunctionalKind::Frequency };
        let mut buf = Vec::new();
        s.write_csv_rows(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0.0,0.0,0.0,0.5,1.5,frequency\n");
        assert_eq!(RadialSeries::csv_header(3), "x0_1,x0_2,x0_3,r,value,kind");
    }
}
