//! Experiment orchestration: a TOML config in, FLD1/CSV/JSON artifacts out.
//!
//! Every command works on an output directory holding `manifest.json`. The
//! manifest records the config hash, the artifacts with their SHA-256
//! checksums, and one record per stage with its checks and wall time.

mod scenario;
mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use scenario::Scenario;
pub use stages::{cmd_analyze, cmd_grushin, cmd_hodograph, cmd_legendre, cmd_pipeline, cmd_report, cmd_solve};

use crate::legendre::MlsConfig;
use crate::solver::SolverConfig;
use crate::{Error, Result};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Exit code for an error: configuration and input problems are validation
/// failures, everything else is numerical.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation(_) | Error::InvalidParameter(_) | Error::InvalidGrid(_) | Error::TooFewNodes { .. } | Error::DegenerateExtent { .. } | Error::Io(_) | Error::Format(_) | Error::Json(_) => EXIT_VALIDATION,
        _ => EXIT_NUMERICAL,
    }
}

/// Sizes the global rayon pool; `0` keeps the default.
pub fn init_threads(threads: usize) -> Result<()> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Validation(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    /// Nodes per tangential axis of the half box `[-1,1]^{n-1} x [0,1]`.
    pub nodes: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { dim: 3, nodes: 33 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderConfig {
    /// Thin-plane points to classify.
    pub points: Vec<Vec<f64>>,
    /// Radii for the frequency ladder and the blowup fit (largest rung).
    pub frequency: Vec<f64>,
    pub weiss: Vec<f64>,
    pub monneau: Vec<f64>,
    pub monneau_alpha: f64,
}

impl Default for LadderConfig {
    fn default() -> Self {
        let ladder: Vec<f64> = (0..8).map(|k| 0.2 + 0.05 * k as f64).collect();
        Self { points: vec![], frequency: ladder.clone(), weiss: ladder.clone(), monneau: ladder, monneau_alpha: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HodographStageConfig {
    pub delta: f64,
    pub window: f64,
    /// Atlas lattice spacing in units of the grid spacing.
    pub spacing_factor: f64,
    /// Samples closer than `exclusion` grid spacings to the free boundary are skipped.
    pub exclusion: f64,
    pub injectivity_eps: f64,
    pub gradient_neighbours: usize,
    pub gradient_stride: usize,
    pub recover_bandwidth: f64,
    pub recover_neighbours: usize,
}

impl Default for HodographStageConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            window: 0.25,
            spacing_factor: 0.25,
            exclusion: 1.0,
            injectivity_eps: 0.5,
            gradient_neighbours: 40,
            gradient_stride: 25,
            recover_bandwidth: 0.05,
            recover_neighbours: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LegendreStageConfig {
    pub radius: f64,
    pub tangential_half_nodes: usize,
    pub disc_half_nodes: usize,
    pub mls: MlsConfig,
    pub limit_rho: f64,
    pub limit_tol: f64,
}

impl Default for LegendreStageConfig {
    fn default() -> Self {
        Self { radius: 0.4, tangential_half_nodes: 2, disc_half_nodes: 16, mls: MlsConfig::default(), limit_rho: 0.3, limit_tol: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrushinStageConfig {
    pub m: usize,
    pub nt: usize,
    pub p: f64,
    pub nodes: usize,
    pub half_width: f64,
    pub family_size: usize,
    /// Exponent below the homogeneous dimension for the `L^q` embedding.
    pub embedding_p: f64,
    /// Exponent above the homogeneous dimension for the `L^∞` embedding.
    pub embedding_p_sup: f64,
    pub drift_tol: f64,
    pub r: f64,
    pub sigma: f64,
    pub delta0: f64,
    pub delta0_limit: f64,
}

impl Default for GrushinStageConfig {
    fn default() -> Self {
        Self {
            m: 2,
            nt: 1,
            p: 5.0,
            nodes: 32,
            half_width: 1.0,
            family_size: 20,
            embedding_p: 2.0,
            embedding_p_sup: 6.0,
            drift_tol: 0.1,
            r: 0.9,
            sigma: 0.5,
            delta0: 0.1,
            delta0_limit: 0.1,
        }
    }
}

fn default_seed() -> u64 {
    20_240_601
}

fn default_tol_scale() -> f64 {
    1.0
}

/// Full experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub scenario: Scenario,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub ladders: LadderConfig,
    #[serde(default)]
    pub hodograph: HodographStageConfig,
    #[serde(default)]
    pub legendre: LegendreStageConfig,
    #[serde(default)]
    pub grushin: GrushinStageConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Multiplies every tolerance: solver target and stage check thresholds.
    #[serde(default = "default_tol_scale")]
    pub tol_scale: f64,
    /// Default output directory; not part of the config hash.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Scenario::CustomDirichlet { file } = &mut cfg.scenario {
            if file.is_relative() {
                if let Some(dir) = path.parent() {
                    *file = dir.join(&*file);
                }
            }
        }
        Ok(cfg)
    }

    /// Canonical JSON text: defaults filled in, fixed key order, no output directory.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Grid spacing of the configured half box.
    pub fn spacing(&self) -> f64 {
        2.0 / (self.grid.nodes as f64 - 1.0)
    }

    /// Checks parameters and radius ladders against the domain caps before any compute.
    pub fn validate(&self) -> Result<()> {
        let dim = self.grid.dim;
        if !(2..=3).contains(&dim) {
            return Err(Error::Validation(format!("grid.dim must be 2 or 3, got {dim}")));
        }
        if self.grid.nodes < crate::field::MIN_NODES || self.grid.nodes.is_multiple_of(2) {
            return Err(Error::Validation(format!("grid.nodes must be odd and at least {}, got {}", crate::field::MIN_NODES, self.grid.nodes)));
        }
        if !(self.tol_scale > 0.0 && self.tol_scale.is_finite()) {
            return Err(Error::Validation(format!("tol_scale must be positive, got {}", self.tol_scale)));
        }
        self.solver.validate().map_err(|e| Error::Validation(e.to_string()))?;
        self.scenario.validate(dim)?;
        let grid = crate::field::Grid::<f64>::half_box(dim, self.grid.nodes)?;
        let h = self.spacing();
        let points = self.analysis_points();
        for x0 in &points {
            if x0.len() != dim || x0[dim - 1] != 0.0 {
                return Err(Error::Validation(format!("analysis point {x0:?} must lie on the thin plane of R^{dim}")));
            }
            let cap = grid.radius_cap(x0);
            for (name, ladder) in [("frequency", &self.ladders.frequency), ("weiss", &self.ladders.weiss), ("monneau", &self.ladders.monneau)] {
                if ladder.len() < 3 {
                    return Err(Error::Validation(format!("{name} ladder needs at least 3 radii")));
                }
                if ladder.windows(2).any(|w| !(w[1] > w[0])) || !(ladder[0] > 0.0) {
                    return Err(Error::Validation(format!("{name} ladder must be positive and increasing")));
                }
                let top = *ladder.last().unwrap();
                if top > cap {
                    return Err(Error::Validation(format!("{name} ladder radius {top} exceeds the cap {cap:.4} at {x0:?}")));
                }
            }
        }
        let hc = &self.hodograph;
        if !(hc.delta > 0.0 && hc.window > 0.0 && hc.spacing_factor > 0.0) {
            return Err(Error::Validation("hodograph delta, window and spacing_factor must be positive".into()));
        }
        if hc.window + hc.delta > 0.9 || hc.delta > 0.9 {
            return Err(Error::Validation(format!("hodograph tube (window {} + delta {}) exceeds the cap 0.9", hc.window, hc.delta)));
        }
        if hc.delta <= hc.exclusion * h {
            return Err(Error::Validation(format!("hodograph delta {} does not exceed the exclusion radius at spacing {h}", hc.delta)));
        }
        let lc = &self.legendre;
        if !(lc.radius > 0.0 && lc.limit_rho > 0.0 && lc.limit_rho < lc.radius && lc.limit_tol > 0.0) {
            return Err(Error::Validation("legendre radius, limit_rho and limit_tol must satisfy 0 < limit_rho < radius".into()));
        }
        if lc.radius * lc.radius > hc.window {
            return Err(Error::Validation(format!("legendre cylinder half-length {} exceeds the hodograph window {}", lc.radius * lc.radius, hc.window)));
        }
        let gc = &self.grushin;
        if gc.m == 0 || gc.nt == 0 || !(gc.p > 1.0) || gc.nodes < 4 || gc.family_size == 0 {
            return Err(Error::Validation("grushin needs m, n_t >= 1, p > 1, nodes >= 4 and a nonempty family".into()));
        }
        if !(gc.sigma > 0.0 && gc.sigma < 1.0) || gc.r > gc.half_width || gc.r * gc.r > gc.half_width {
            return Err(Error::Validation(format!("grushin cylinder r = {} must fit the box of half width {} and 0 < sigma < 1", gc.r, gc.half_width)));
        }
        Ok(())
    }

    /// Points to classify; the origin by default.
    pub fn analysis_points(&self) -> Vec<Vec<f64>> {
        if self.ladders.points.is_empty() {
            vec![vec![0.0; self.grid.dim]]
        } else {
            self.ladders.points.clone()
        }
    }
}

/// Outcome of one check inside a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
    /// Gating checks decide the exit code; the others are reported diagnostics.
    pub gating: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, limit, pass: value <= limit, gating: true }
    }

    pub fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, limit, pass: value >= limit, gating: true }
    }

    pub fn flag(name: &str, ok: bool) -> Self {
        Self { name: name.into(), value: f64::from(u8::from(ok)), limit: 1.0, pass: ok, gating: true }
    }

    pub fn diagnostic(mut self) -> Self {
        self.gating = false;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pass,
    Fail,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub wall_time_s: f64,
    pub checks: Vec<Check>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub stage: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: serde_json::Value,
    /// Keyed by file name relative to the output directory.
    pub artifacts: BTreeMap<String, Artifact>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            config: serde_json::from_str(&cfg.canonical()).expect("canonical config is JSON"),
            artifacts: BTreeMap::new(),
            stages: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(Self::FILE);
        if !path.is_file() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Output directory plus the manifest being built.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub manifest: RunManifest,
}

impl Workspace {
    /// Opens `out`, keeping a prior manifest only when it was produced by the same config.
    pub fn open(cfg: ExperimentConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(&out)?;
        let manifest = match RunManifest::load(&out)? {
            Some(m) if m.config_hash == cfg.hash() => m,
            _ => RunManifest::new(&cfg),
        };
        Ok(Self { cfg, out, manifest })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Path of an artifact produced earlier by `stage` under this config.
    pub fn input(&self, name: &str, stage: &str) -> Result<PathBuf> {
        let path = self.path(name);
        match self.manifest.artifacts.get(name) {
            Some(a) if path.is_file() => {
                let bytes = fs::read(&path)?;
                if hex::encode(Sha256::digest(&bytes)) != a.sha256 {
                    return Err(Error::Validation(format!("{name} changed since the {stage} stage wrote it")));
                }
                Ok(path)
            }
            _ => Err(Error::Validation(format!("missing input {name}: run the {stage} stage first with this config"))),
        }
    }

    fn record_artifact(&mut self, stage: &str, name: &str, bytes: &[u8]) {
        self.manifest.artifacts.insert(
            name.to_string(),
            Artifact { stage: stage.into(), sha256: hex::encode(Sha256::digest(bytes)), bytes: bytes.len() as u64 },
        );
    }

    /// Writes an artifact in one piece and records its checksum.
    pub fn write(&mut self, stage: &str, name: &str, bytes: Vec<u8>) -> Result<()> {
        if name.ends_with(".csv") {
            check_csv_finite(name, &bytes)?;
        }
        let mut f = fs::File::create(self.path(name))?;
        f.write_all(&bytes)?;
        self.record_artifact(stage, name, &bytes);
        Ok(())
    }

    pub fn write_json<S: Serialize>(&mut self, stage: &str, name: &str, value: &S) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(value)?;
        text.push(b'\n');
        self.write(stage, name, text)
    }

    fn save_manifest(&self) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(&self.manifest)?;
        text.push(b'\n');
        fs::write(self.path(RunManifest::FILE), text)?;
        Ok(())
    }

    /// Runs a stage, records its status and wall time, and saves the manifest.
    /// Returns the exit code of the stage.
    pub fn run_stage<F>(&mut self, name: &str, body: F) -> Result<i32>
    where
        F: FnOnce(&mut Workspace) -> Result<Vec<Check>>,
    {
        self.manifest.artifacts.retain(|_, a| a.stage != name);
        self.manifest.stages.retain(|s| s.name != name);
        let start = Instant::now();
        let outcome = body(self);
        let wall_time_s = start.elapsed().as_secs_f64();
        let (record, result) = match outcome {
            Ok(checks) => {
                let pass = checks.iter().filter(|c| c.gating).all(|c| c.pass);
                let status = if pass { StageStatus::Pass } else { StageStatus::Fail };
                let code = if pass { EXIT_PASS } else { EXIT_NUMERICAL };
                (StageRecord { name: name.into(), status, wall_time_s, checks, error: None }, Ok(code))
            }
            Err(e) => (
                StageRecord { name: name.into(), status: StageStatus::Error, wall_time_s, checks: vec![], error: Some(e.to_string()) },
                Err(e),
            ),
        };
        self.manifest.stages.push(record);
        self.save_manifest()?;
        result
    }
}

fn check_csv_finite(name: &str, bytes: &[u8]) -> Result<()> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(format!("{name}: {e}")))?;
    for (line_no, line) in text.lines().enumerate().skip(1) {
        for cell in line.split(',') {
            if let Ok(v) = cell.parse::<f64>() {
                if !v.is_finite() {
                    return Err(Error::DegenerateField(format!("{name} line {}: non-finite value {cell}", line_no + 1)));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_whitespace_and_explicit_defaults() {
        let a = ExperimentConfig::from_toml("[grid]\nnodes = 33\n").unwrap();
        let b = ExperimentConfig::from_toml("  [grid]\n\n   nodes=33   \n# comment\n").unwrap();
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash(), c.hash());
        let d = ExperimentConfig::from_toml("[grid]\nnodes = 35\n").unwrap();
        assert_ne!(a.hash(), d.hash());
        let e = ExperimentConfig::from_toml("output_dir = \"/tmp/x\"\n").unwrap();
        assert_eq!(c.hash(), e.hash());
    }

    #[test]
    fn ladder_over_cap_is_a_validation_error() {
        let cfg = ExperimentConfig::from_toml("[ladders]\nfrequency = [0.2, 0.5, 0.95]\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert_eq!(exit_code(&err), EXIT_VALIDATION);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[grid]\nnodez = 3\n").is_err());
    }

    #[test]
    fn non_finite_csv_cells_are_caught() {
        assert!(check_csv_finite("a.csv", b"a,b\n1.0,2\n").is_ok());
        assert!(check_csv_finite("a.csv", b"a,b\n1.0,NaN\n").is_err());
        assert!(check_csv_finite("a.csv", b"a,b\n1.0,inf\n").is_err());
    }

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }
}
