//! Manufactured problems: Dirichlet data on the half box.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::field::{io::read_field, Grid, ScalarField, SpatialField};
use crate::hodograph::InterfaceTable;
use crate::profiles::{blowup_with_correction, BlowupProfile};
use crate::solver::VIProblem;
use crate::{Error, Result};

fn one() -> f64 {
    1.0
}

/// Source of the boundary data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scenario {
    /// The blowup with `ν' = e_{n-1}`.
    Flat {
        #[serde(default = "one")]
        c0: f64,
    },
    /// The blowup with free boundary `x_2 = tan(angle) x_1`.
    Rotated {
        #[serde(default = "one")]
        c0: f64,
        angle: f64,
    },
    /// `u0(R_φ x)` with the slowly varying angle `φ = angle + curvature x_1`.
    Curved {
        #[serde(default = "one")]
        c0: f64,
        #[serde(default)]
        angle: f64,
        curvature: f64,
    },
    /// `u0 + λ C0 Re(z)^{5/2}`.
    Perturbed {
        #[serde(default = "one")]
        c0: f64,
        lambda: f64,
    },
    /// Boundary values read from an FLD1 half-box file.
    CustomDirichlet { file: PathBuf },
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario::Flat { c0: 1.0 }
    }
}

impl Scenario {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let c0 = match self {
            Scenario::Flat { c0 } | Scenario::Rotated { c0, .. } | Scenario::Curved { c0, .. } | Scenario::Perturbed { c0, .. } => *c0,
            Scenario::CustomDirichlet { file } => {
                if !file.is_file() {
                    return Err(Error::Validation(format!("Dirichlet file {} does not exist", file.display())));
                }
                return Ok(());
            }
        };
        if !(c0 > 0.0 && c0.is_finite()) {
            return Err(Error::Validation(format!("c0 must be positive, got {c0}")));
        }
        match *self {
            Scenario::Rotated { angle, .. } | Scenario::Curved { angle, .. } if dim != 3 || angle.abs() >= std::f64::consts::FRAC_PI_4 => {
                Err(Error::Validation(format!("rotations need n = 3 and |angle| < pi/4, got n = {dim}, angle = {angle}")))
            }
            Scenario::Curved { angle, curvature, .. } if (angle.abs() + curvature.abs()) >= std::f64::consts::FRAC_PI_4 => {
                Err(Error::Validation(format!("|angle| + |curvature| must stay below pi/4, got {}", angle.abs() + curvature.abs())))
            }
            Scenario::Perturbed { lambda, .. } if !(lambda.abs() < 0.5) => {
                Err(Error::Validation(format!("|lambda| must be below 0.5 to keep the correction admissible, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    /// Blowup at the origin expected for the manufactured data.
    pub fn blowup(&self, dim: usize) -> Option<BlowupProfile<f64>> {
        match *self {
            Scenario::Flat { c0 } | Scenario::Perturbed { c0, .. } => Some(BlowupProfile::standard(dim, c0)),
            Scenario::Rotated { c0, angle } | Scenario::Curved { c0, angle, .. } => Some(BlowupProfile::rotated(c0, angle)),
            Scenario::CustomDirichlet { .. } => None,
        }
    }

    /// Known free-boundary curve `x_{n-1} = f(x'')` for the straight cases.
    pub fn interface(&self, dim: usize) -> Option<InterfaceTable> {
        match *self {
            Scenario::Flat { .. } | Scenario::Perturbed { .. } => Some(InterfaceTable::line(dim, 0.0)),
            Scenario::Rotated { angle, .. } => Some(InterfaceTable::line(dim, angle.tan())),
            _ => None,
        }
    }

    /// Boundary data evaluated at a point.
    pub fn dirichlet(&self, x: &[f64]) -> Result<f64> {
        let n = x.len();
        match *self {
            Scenario::Flat { c0 } => Ok(BlowupProfile::standard(n, c0).eval_u0(x)),
            Scenario::Rotated { c0, angle } => Ok(BlowupProfile::rotated(c0, angle).eval_u0(x)),
            Scenario::Curved { c0, angle, curvature } => Ok(BlowupProfile::rotated(c0, angle + curvature * x[0]).eval_u0(x)),
            Scenario::Perturbed { c0, lambda } => blowup_with_correction(&BlowupProfile::standard(n, c0), lambda).value(x),
            Scenario::CustomDirichlet { .. } => Err(Error::InvalidParameter("custom data is grid-based".into())),
        }
    }

    /// Variational inequality on `grid` with this boundary data.
    pub fn problem(&self, grid: Grid<f64>, base: &Path) -> Result<VIProblem<f64>> {
        match self {
            Scenario::CustomDirichlet { file } => {
                let path = if file.is_absolute() { file.clone() } else { base.join(file) };
                let f = std::fs::File::open(&path)
                    .map_err(|e| Error::Validation(format!("cannot open Dirichlet file {}: {e}", path.display())))?;
                let data: ScalarField<f64> = read_field(std::io::BufReader::new(f))?;
                if data.grid().nodes() != grid.nodes() || data.grid().lo() != grid.lo() || data.grid().hi() != grid.hi() {
                    return Err(Error::Validation(format!("Dirichlet file grid {:?} does not match the configured grid {:?}", data.grid().nodes(), grid.nodes())));
                }
                VIProblem::from_values(grid, data.into_values())
            }
            s => {
                let err = std::cell::RefCell::new(None);
                let p = VIProblem::from_fn(grid, |x| {
                    s.dirichlet(x).unwrap_or_else(|e| {
                        err.borrow_mut().get_or_insert(e);
                        f64::NAN
                    })
                });
                match err.into_inner() {
                    Some(e) => Err(e),
                    None => p,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curved_reduces_to_rotated_at_zero_curvature() {
        let c = Scenario::Curved { c0: 1.0, angle: 0.2, curvature: 0.0 };
        let r = Scenario::Rotated { c0: 1.0, angle: 0.2 };
        for x in [[0.3, -0.2, 0.1], [-0.5, 0.4, 0.0]] {
            assert_eq!(c.dirichlet(&x).unwrap(), r.dirichlet(&x).unwrap());
        }
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(Scenario::Flat { c0: -1.0 }.validate(3).is_err());
        assert!(Scenario::Rotated { c0: 1.0, angle: 1.0 }.validate(3).is_err());
        assert!(Scenario::Perturbed { c0: 1.0, lambda: 0.7 }.validate(3).is_err());
        assert!(Scenario::CustomDirichlet { file: "/nonexistent.fld".into() }.validate(3).is_err());
        assert!(Scenario::Curved { c0: 1.0, angle: 0.1, curvature: 0.3 }.validate(3).is_ok());
    }

    #[test]
    fn scenario_parses_from_toml() {
        let s: Scenario = toml::from_str("kind = \"rotated\"\nangle = 0.1").unwrap();
        assert_eq!(s, Scenario::Rotated { c0: 1.0, angle: 0.1 });
        assert!(toml::from_str::<Scenario>("kind = \"rotated\"\nangel = 0.1").is_err());
    }
}
