//! Stage commands. Each one reads the artifacts of earlier stages from the
//! output directory and records its own artifacts and checks in the manifest.

use std::fs;
use std::io::BufReader;

use serde::Serialize;

use super::{Check, ExperimentConfig, RunManifest, StageStatus, Workspace, EXIT_PASS};
use crate::blowup::{classify_point, ClassifyConfig, Classification, FreeBoundaryPoint};
use crate::field::io::{read_field, write_field};
use crate::field::{Grid, ScalarField};
use crate::functionals::{monneau_monotonicity_check, weiss_monotonicity_check, FunctionalKind, Functionals, MonneauConfig, RadialSeries};
use crate::grushin::{
    embedding_check, embedding_exponent, identity_coeffs, lp_constant_report, perturbed_coeffs, perturbed_estimate_check, BumpFamilyConfig, GrushinSpace,
    PerturbedConfig, TestFamily,
};
use crate::hodograph::{
    build_atlas, collision_check, gradient_identity_check, injectivity_diagnostic, legendre_forward, recover_free_boundary,
    with_free_boundary_image, AtlasConfig, InjectivityConfig, InterfaceTable, LegendreSample,
};
use crate::legendre::{
    b_limit, convergence_check, eval_f, grushin_coefficient, mirror_samples, nonisotropic_rescale, weighted_limits, LegendreField, LimitConfig, NonIsotropicCylinder,
};
use crate::profiles::{BlowupProfile, LegendreBlowup};
use crate::solver::{kkt_report, solve};
use crate::{Error, Result};

const SOLUTION: &str = "solution.fld";
const FREE_BOUNDARY: &str = "free_boundary.json";
const ATLAS: &str = "atlas.csv";

fn load_solution(ws: &Workspace) -> Result<ScalarField<f64>> {
    let path = ws.input(SOLUTION, "solve")?;
    read_field(BufReader::new(fs::File::open(path)?))
}

fn to_bytes<F: FnOnce(&mut Vec<u8>) -> Result<()>>(f: F) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn series_csv(series: &[&RadialSeries]) -> Result<Vec<u8>> {
    to_bytes(|w| {
        use std::io::Write;
        let dim = series.first().map_or(3, |s| s.center.len());
        writeln!(w, "{}", RadialSeries::csv_header(dim))?;
        for s in series {
            s.write_csv_rows(w)?;
        }
        Ok(())
    })
}

/// Blowup at the origin: the analysis fit when available, else the scenario's.
fn reference_blowup(ws: &Workspace) -> Result<BlowupProfile<f64>> {
    let dim = ws.cfg.grid.dim;
    if let Ok(path) = ws.input(FREE_BOUNDARY, "analyze") {
        let points: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(path)?)?;
        let nearest = points.iter().min_by(|a, b| {
            let d = |p: &serde_json::Value| {
                p["location"].as_array().map_or(f64::INFINITY, |l| l.iter().filter_map(|v| v.as_f64()).map(|v| v * v).sum::<f64>())
            };
            d(a).total_cmp(&d(b))
        });
        if let Some(p) = nearest {
            let c0 = p["C0"].as_f64().unwrap_or(f64::NAN);
            let nu: Vec<f64> = p["nu_prime"].as_array().map(|a| a.iter().filter_map(|v| v.as_f64()).collect()).unwrap_or_default();
            if let Ok(b) = BlowupProfile::new(c0, nu) {
                return Ok(b);
            }
        }
    }
    ws.cfg
        .scenario
        .blowup(dim)
        .ok_or_else(|| Error::Validation("no blowup reference: run the analyze stage first".into()))
}

/// Solves the variational inequality and writes the discrete solution.
pub fn cmd_solve(ws: &mut Workspace) -> Result<i32> {
    ws.run_stage("solve", |ws| {
        let cfg = &ws.cfg;
        let grid = Grid::<f64>::half_box(cfg.grid.dim, cfg.grid.nodes)?;
        let base = std::env::current_dir()?;
        let problem = cfg.scenario.problem(grid, &base)?;
        let mut solver = cfg.solver;
        solver.tol *= cfg.tol_scale;
        let sol = solve(&problem, &solver)?;
        let report = sol.report();
        let kkt = kkt_report(&sol);
        let buf = to_bytes(|w| write_field(w, &sol.u))?;
        ws.write("solve", SOLUTION, buf)?;
        #[derive(Serialize)]
        struct SolveJson {
            scenario: super::Scenario,
            report: crate::solver::SolveReport,
        }
        let json = SolveJson { scenario: ws.cfg.scenario.clone(), report: report.clone() };
        ws.write_json("solve", "solve.json", &json)?;
        Ok(vec![Check::flag("converged", report.converged), Check::at_most("kkt_residual", kkt.max, solver.tol)])
    })
}

#[derive(Serialize)]
struct AnalysisJson {
    weiss: crate::functionals::WeissReport,
    monneau: Option<crate::functionals::MonneauReport>,
}

/// Classifies the analysis points and evaluates the radial functionals at the first one.
pub fn cmd_analyze(ws: &mut Workspace) -> Result<i32> {
    ws.run_stage("analyze", |ws| {
        let u = load_solution(ws)?;
        let cfg = ws.cfg.clone();
        let classify = ClassifyConfig::default();
        let points: Vec<FreeBoundaryPoint> =
            cfg.analysis_points().iter().map(|x0| classify_point(&u, x0, &cfg.ladders.frequency, &classify)).collect::<Result<_>>()?;
        let x0 = &points[0].location;
        let fun = Functionals::new(&u, &classify.quadrature)?;
        let weiss_series = fun.series(FunctionalKind::Weiss, x0, &cfg.ladders.weiss, None)?;
        let jump_tol = 1e-5 * cfg.tol_scale;
        let weiss = weiss_monotonicity_check(&weiss_series, &fun, jump_tol)?;
        let mcfg = MonneauConfig::new(points[0].c0, points[0].nu_prime.clone(), cfg.ladders.monneau_alpha)?;
        let monneau_series = fun.series(FunctionalKind::Monneau, x0, &cfg.ladders.monneau, Some(&mcfg))?;
        let monneau = monneau_monotonicity_check(&monneau_series, &mcfg, 1e-4 * cfg.tol_scale).ok();

        let freq: Vec<&RadialSeries> = points.iter().map(|p| &p.frequency).collect();
        ws.write("analyze", "frequency.csv", series_csv(&freq)?)?;
        ws.write("analyze", "weiss.csv", series_csv(&[&weiss_series])?)?;
        ws.write("analyze", "monneau.csv", series_csv(&[&monneau_series])?)?;
        ws.write_json("analyze", FREE_BOUNDARY, &points)?;

        let mut checks = Vec::new();
        let expect_regular = cfg.scenario.blowup(cfg.grid.dim).is_some();
        for (k, p) in points.iter().enumerate() {
            let c = Check::flag(&format!("point{k}_regular"), p.classification == Classification::Regular);
            checks.push(if expect_regular { c } else { c.diagnostic() });
        }
        checks.push(Check::at_most("weiss_max_downward_jump", weiss.max_downward_jump, jump_tol).diagnostic());
        if let Some(m) = &monneau {
            checks.push(Check::flag("monneau_monotone", m.pass).diagnostic());
        }
        ws.write_json("analyze", "analysis.json", &AnalysisJson { weiss, monneau })?;
        Ok(checks)
    })
}

fn atlas_config(cfg: &ExperimentConfig) -> AtlasConfig {
    let h = cfg.spacing();
    let hc = &cfg.hodograph;
    AtlasConfig { window: hc.window, exclusion: hc.exclusion / hc.spacing_factor, ..AtlasConfig::new(hc.delta, hc.spacing_factor * h) }
}

fn require_3d(cfg: &ExperimentConfig, stage: &str) -> Result<()> {
    if cfg.grid.dim != 3 {
        return Err(Error::Validation(format!("the {stage} stage is wired for n = 3 only")));
    }
    Ok(())
}

#[derive(Serialize)]
struct InterfaceRow {
    station: f64,
    recovered: f64,
    discrete: f64,
    manufactured: Option<f64>,
}

#[derive(Serialize)]
struct HodographJson {
    samples: usize,
    spacing: f64,
    injectivity: crate::hodograph::InjectivityReport,
    collisions: crate::hodograph::CollisionReport,
    gradient_identities: crate::hodograph::GradientIdentityReport,
    interface: Vec<InterfaceRow>,
    /// Largest `|recovered - manufactured|` in grid spacings, when the interface is known.
    interface_error_h: Option<f64>,
}

/// Builds the hodograph atlas near the free boundary and runs its diagnostics.
pub fn cmd_hodograph(ws: &mut Workspace) -> Result<i32> {
    ws.run_stage("hodograph", |ws| {
        require_3d(&ws.cfg, "hodograph")?;
        let u = load_solution(ws)?;
        let cfg = ws.cfg.clone();
        let table = InterfaceTable::from_field(&u)?;
        let acfg = atlas_config(&cfg);
        let atlas = build_atlas(&u, &table, &acfg)?;
        let c0 = reference_blowup(ws)?.c0;
        let injectivity = injectivity_diagnostic(&atlas, |_| c0, &InjectivityConfig { eps: cfg.hodograph.injectivity_eps, ..Default::default() })?;
        let collisions = collision_check(&atlas)?;
        let gradient = gradient_identity_check(&atlas, cfg.hodograph.gradient_neighbours, cfg.hodograph.gradient_stride)?;
        let samples = with_free_boundary_image(legendre_forward(&atlas), &table, acfg.spacing, acfg.window);
        let half = 0.5 * cfg.hodograph.window;
        let stations: Vec<f64> = (-4..=4).map(|k| half * k as f64 / 4.0).collect();
        let recovered = recover_free_boundary(&samples, &stations, cfg.hodograph.recover_bandwidth, cfg.hodograph.recover_neighbours)?;
        let known = cfg.scenario.interface(3);
        let h = cfg.spacing();
        let interface: Vec<InterfaceRow> = recovered
            .points
            .iter()
            .map(|(s, f)| InterfaceRow {
                station: s[0],
                recovered: *f,
                discrete: table.eval(s).unwrap_or(f64::NAN),
                manufactured: known.as_ref().and_then(|t| t.eval(s)),
            })
            .collect();
        let interface_error_h = known.as_ref().map(|_| {
            interface.iter().filter_map(|r| r.manufactured.map(|m| (r.recovered - m).abs() / h)).fold(0.0, f64::max)
        });

        let mut buf = Vec::new();
        atlas.write_csv(&mut buf)?;
        ws.write("hodograph", ATLAS, buf)?;
        let csv = to_bytes(|w| {
            use std::io::Write;
            writeln!(w, "station,recovered,discrete")?;
            for r in &interface {
                if r.discrete.is_finite() {
                    writeln!(w, "{:?},{:?},{:?}", r.station, r.recovered, r.discrete)?;
                }
            }
            Ok(())
        })?;
        ws.write("hodograph", "interface.csv", csv)?;
        let mut checks = vec![
            Check::at_most("collisions", collisions.collisions as f64, 0.0),
            Check::flag("gradient_identities_finite", gradient.max_error.is_finite()),
            Check::at_most("injectivity_max_relative_dev", injectivity.max_relative_dev, injectivity.bound).diagnostic(),
        ];
        if let Some(e) = interface_error_h {
            checks.push(Check::at_most("interface_error_h", e, 3.0 * cfg.tol_scale));
        }
        let report = HodographJson {
            samples: atlas.samples.len(),
            spacing: atlas.spacing,
            injectivity,
            collisions,
            gradient_identities: gradient,
            interface,
            interface_error_h,
        };
        ws.write_json("hodograph", "hodograph.json", &report)?;
        Ok(checks)
    })
}

/// Reads Legendre samples `(y, v, x)` back from the atlas CSV.
pub fn read_atlas_samples(text: &str) -> Result<Vec<LegendreSample>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty atlas".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let dim = cols.iter().filter(|c| c.starts_with('x')).count();
    if dim == 0 || cols.len() != 3 * dim + 2 {
        return Err(Error::Format(format!("unexpected atlas header {header}")));
    }
    lines
        .map(|line| {
            let v: Vec<f64> = line.split(',').map(|c| c.parse::<f64>().map_err(|e| Error::Format(format!("atlas cell {c}: {e}")))).collect::<Result<_>>()?;
            if v.len() != cols.len() {
                return Err(Error::Format(format!("atlas row has {} cells", v.len())));
            }
            Ok(LegendreSample { x: v[..dim].to_vec(), y: v[dim..2 * dim].to_vec(), v: v[3 * dim] })
        })
        .collect()
}

#[derive(Serialize)]
struct LegendreJson {
    provenance: crate::legendre::Provenance,
    residual: crate::legendre::ResidualReport,
    symmetry_defect: (f64, f64),
    blowup_c0: f64,
    blowup_nu: Vec<f64>,
    limits: crate::legendre::LimitTable,
    b_limit: crate::legendre::BLimitReport,
    /// Sup deviation of the rescaling at `0.9 * radius` from the blowup transform on `1/2 <= |y_ab| <= 1`.
    blowup_deviation: f64,
}

/// Regrids the Legendre transform on a non-isotropic cylinder and evaluates the equation and its limits.
pub fn cmd_legendre(ws: &mut Workspace) -> Result<i32> {
    ws.run_stage("legendre", |ws| {
        require_3d(&ws.cfg, "legendre")?;
        let cfg = ws.cfg.clone();
        let atlas_path = ws.input(ATLAS, "hodograph")?;
        let samples = read_atlas_samples(&fs::read_to_string(atlas_path)?)?;
        let u = load_solution(ws)?;
        let table = InterfaceTable::from_field(&u)?;
        let acfg = atlas_config(&cfg);
        let samples = mirror_samples(&with_free_boundary_image(samples, &table, acfg.spacing, acfg.window));
        let lc = &cfg.legendre;
        let cyl = NonIsotropicCylinder::new(3, lc.radius, lc.tangential_half_nodes, lc.disc_half_nodes)?;
        let field = LegendreField::regrid(cyl, &samples, &lc.mls)?;
        let residual = eval_f(&field);
        let symmetry = field.symmetry_defect();
        let blowup = reference_blowup(ws)?;
        let vb = LegendreBlowup::new(&blowup)?;
        let tol = lc.limit_tol * cfg.tol_scale;
        let limits = weighted_limits(&field, &[0.0; 3], &vb, &LimitConfig { rho: lc.limit_rho, tol })?;
        let a = grushin_coefficient(blowup.c0);
        let b = b_limit(&field, &[0.0; 3], a, lc.limit_rho, tol)?;
        let template = NonIsotropicCylinder::new(3, 1.0, lc.tangential_half_nodes, 8)?;
        let rescaled = nonisotropic_rescale(&field, &[0.0; 3], 0.9 * lc.radius, &template)?;
        let deviation = convergence_check(&rescaled, &vb)?;

        let buf = to_bytes(|w| field.write_fld(w))?;
        ws.write("legendre", "legendre.fld", buf)?;
        let buf = to_bytes(|w| field.write_csv(w))?;
        ws.write("legendre", "legendre.csv", buf)?;
        let buf = to_bytes(|w| limits.write_csv(w))?;
        ws.write("legendre", "limits.csv", buf)?;
        let checks = vec![
            Check::flag("residual_finite", residual.rms.is_finite() && residual.nodes > 0),
            Check::at_most("symmetry_defect", symmetry.0.max(symmetry.1), 1e-12),
            Check::flag("weighted_limits", limits.pass).diagnostic(),
            Check::flag("b_limit", b.pass).diagnostic(),
        ];
        let report = LegendreJson {
            provenance: field.provenance.clone(),
            residual,
            symmetry_defect: symmetry,
            blowup_c0: blowup.c0,
            blowup_nu: blowup.nu_prime.clone(),
            limits,
            b_limit: b,
            blowup_deviation: deviation,
        };
        ws.write_json("legendre", "legendre.json", &report)?;
        Ok(checks)
    })
}

/// Empirical Grushin constants: `C_p`, both embedding regimes, and the perturbed interior estimate.
pub fn cmd_grushin(ws: &mut Workspace) -> Result<i32> {
    ws.run_stage("grushin", |ws| {
        let gc = ws.cfg.grushin.clone();
        let space = GrushinSpace::cube(gc.m, gc.nt, gc.p, gc.half_width, gc.nodes)?;
        let family_cfg = BumpFamilyConfig { count: gc.family_size, seed: ws.cfg.seed, ..Default::default() };
        let family = TestFamily::bumps(gc.m, gc.nt, &family_cfg);
        let drift_tol = gc.drift_tol * ws.cfg.tol_scale;
        let lp = lp_constant_report(&space, &family)?;
        let low_space = space.with_p(gc.embedding_p)?;
        let low = embedding_check(&low_space, &family, embedding_exponent(&low_space)?)?;
        let sup = embedding_check(&space.with_p(gc.embedding_p_sup)?, &family, None)?;
        let pcfg = PerturbedConfig { r: gc.r, sigma: gc.sigma, delta0: gc.delta0, delta0_limit: gc.delta0_limit };
        let unperturbed = perturbed_estimate_check(&space, &family, &identity_coeffs(&space), &PerturbedConfig { delta0: 0.0, ..pcfg.clone() })?;
        let perturbed = perturbed_estimate_check(&space, &family, &perturbed_coeffs(&space, gc.delta0), &pcfg)?;
        ws.write_json("grushin", "grushin_lp.json", &lp)?;
        ws.write_json("grushin", "grushin_embedding.json", &[&low, &sup])?;
        ws.write_json("grushin", "grushin_perturbed.json", &[&unperturbed, &perturbed])?;
        Ok(vec![
            Check::at_most("lp_refinement_drift", lp.refinement_drift, drift_tol),
            Check::at_most("embedding_q_drift", low.refinement_drift, drift_tol),
            Check::at_most("embedding_sup_drift", sup.refinement_drift, drift_tol),
            Check::flag("perturbed_constant_finite", unperturbed.finite && perturbed.finite),
        ])
    })
}

#[derive(Serialize)]
struct StageSummary {
    name: String,
    status: StageStatus,
    checks: Vec<Check>,
    error: Option<String>,
}

#[derive(Serialize)]
struct Report {
    config_hash: String,
    config: serde_json::Value,
    stages: Vec<StageSummary>,
    artifacts: std::collections::BTreeMap<String, serde_json::Value>,
}

/// Collects every JSON artifact and the radial series into one report and a long-format CSV.
/// Wall times are left out so that the report is reproducible byte for byte.
pub fn cmd_report(ws: &mut Workspace) -> Result<i32> {
    ws.run_stage("report", |ws| {
        let manifest: RunManifest = ws.manifest.clone();
        let mut artifacts = std::collections::BTreeMap::new();
        let mut series_rows = Vec::new();
        for (name, a) in &manifest.artifacts {
            if a.stage == "report" {
                continue;
            }
            let path = ws.input(name, &a.stage)?;
            if name.ends_with(".json") {
                artifacts.insert(name.clone(), serde_json::from_slice(&fs::read(&path)?)?);
            } else if matches!(name.as_str(), "frequency.csv" | "weiss.csv" | "monneau.csv") {
                let text = fs::read_to_string(&path)?;
                series_rows.extend(text.lines().skip(1).map(str::to_owned));
            }
        }
        let stages = manifest
            .stages
            .iter()
            .filter(|s| s.name != "report")
            .map(|s| StageSummary { name: s.name.clone(), status: s.status, checks: s.checks.clone(), error: s.error.clone() })
            .collect::<Vec<_>>();
        let failed = stages.iter().filter(|s| s.status != StageStatus::Pass).count();
        let report = Report { config_hash: manifest.config_hash.clone(), config: manifest.config.clone(), stages, artifacts };
        ws.write_json("report", "report.json", &report)?;
        if !series_rows.is_empty() {
            let mut csv = format!("{}\n", RadialSeries::csv_header(ws.cfg.grid.dim));
            for row in series_rows {
                csv.push_str(&row);
                csv.push('\n');
            }
            ws.write("report", "report_series.csv", csv.into_bytes())?;
        }
        Ok(vec![Check::at_most("failed_stages", failed as f64, 0.0)])
    })
}

/// `solve -> analyze -> hodograph -> legendre -> report`. Stops at the first
/// stage that errors; failed checks are recorded and the chain continues.
pub fn cmd_pipeline(ws: &mut Workspace) -> Result<i32> {
    let mut code = EXIT_PASS;
    let mut stages: Vec<fn(&mut Workspace) -> Result<i32>> = vec![cmd_solve, cmd_analyze];
    if ws.cfg.grid.dim == 3 {
        stages.push(cmd_hodograph);
        stages.push(cmd_legendre);
    }
    for stage in stages {
        code = code.max(stage(ws)?);
    }
    Ok(code.max(cmd_report(ws)?))
}
