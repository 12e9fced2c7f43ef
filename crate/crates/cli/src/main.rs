//! Experiment runner: loads a JSON configuration, executes the
//! requested verification stages in dependency order, and writes JSON
//! reports, CSV tables, and SVG plots. Exit codes: 0 all asserted
//! checks pass, 1 a check failed, 2 configuration or IO trouble.

use clap::{Parser, Subcommand};
use lirlab::covering::{build_cover, overlap_stats};
use lirlab::doubling::{boundary_solve, build_double};
use lirlab::elliptic::{
    flat_norm, harmonic_basis, harmonic_projection, min_norm_solve_with, EllipticOperator,
};
use lirlab::export::{
    read_radius_csv, write_cover_csv, write_exponent_csv, write_json, write_loglog_svg,
    write_radius_csv, write_section_csv, PlotSeries,
};
use lirlab::exponents::{exponent_chain, parse_ratio, weight_family};
use lirlab::fields::GridSection;
use lirlab::geometry::{
    build_metric, cf10_audit, inject_radius_field, radius_field, AdmissibleRadiusField,
    ManifoldModel, MetricField, RadiusProvenance,
};
use lirlab::lir::{bootstrap, verify_global_weighted, verify_local_estimate, EstimateReport};
use lirlab::Grid;
use lirlab::C64;
use num::rational::BigRational;
use num::ToPrimitive;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "lirlab", about = "estimate-verification experiment runner", version)]
struct Cli {
    /// Experiment configuration (JSON). Required unless the subcommand
    /// is self-contained.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for reports, tables, and plots.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the grid resolution, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Computes the admissible radius field and audits comparability.
    Radius,
    /// Builds the inflated disjoint cover and checks the overlap bound.
    Cover,
    /// Prints the integrability chain and weight exponents (no grid).
    Exponents {
        #[arg(long)]
        n: Option<u32>,
        #[arg(long)]
        m: Option<u32>,
        #[arg(long)]
        r: Option<String>,
    },
    /// Solves D u = omega for seeded data orthogonal to the kernel.
    Solve,
    /// Verifies the base local estimate over the radius sweep.
    VerifyLir,
    /// Verifies the weighted global estimate on the whole grid.
    VerifyGlobal,
    /// Solves a boundary problem on the cylinder through its double.
    Double,
    /// Re-renders plots from an existing JSON report.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Debug)]
struct ConfigError {
    field: String,
    message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config field {:?}: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn bad(field: &str, message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError {
        field: field.into(),
        message: message.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CheckKind {
    Radius,
    Cover,
    Exponents,
    Solve,
    LocalEstimate,
    Bootstrap,
    Global,
    Double,
}

impl CheckKind {
    fn name(self) -> &'static str {
        match self {
            CheckKind::Radius => "radius",
            CheckKind::Cover => "cover",
            CheckKind::Exponents => "exponents",
            CheckKind::Solve => "solve",
            CheckKind::LocalEstimate => "local_estimate",
            CheckKind::Bootstrap => "bootstrap",
            CheckKind::Global => "global",
            CheckKind::Double => "double",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum OperatorKind {
    Laplacian,
    LaplacianShifted { shift: f64 },
    Dirac,
    LaplaceBeltrami,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    version: u32,
    seed: u64,
    manifold: ManifoldModel,
    grid: Vec<usize>,
    operator: OperatorKind,
    epsilon: f64,
    m: u32,
    /// Lebesgue exponent, an integer or "p/q".
    r: String,
    #[serde(default)]
    radius_sweep: Option<Vec<f64>>,
    #[serde(default)]
    family_size: Option<usize>,
    checks: Vec<CheckKind>,
    /// Optional injected radius field (CSV from `radius`).
    #[serde(default)]
    radius_csv: Option<PathBuf>,
    /// Extension margin for the doubling stage.
    #[serde(default)]
    margin: Option<f64>,
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

struct Context {
    config: ExperimentConfig,
    r: BigRational,
    r_f64: f64,
    out: PathBuf,
    metric: MetricField,
}

fn load_config(cli: &Cli) -> anyhow::Result<Context> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| bad("config", "no configuration file given"))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| bad("config", format!("cannot read {}: {e}", path.display())))?;
    let mut config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| bad("config", format!("cannot parse {}: {e}", path.display())))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(grid) = &cli.grid {
        config.grid = grid.clone();
    }
    if config.version != 1 {
        return Err(bad("version", format!("unsupported version {}", config.version)));
    }
    if !(config.epsilon > 0.0 && config.epsilon < 1.0) {
        return Err(bad("epsilon", format!("{} outside (0, 1)", config.epsilon)));
    }
    if config.grid.is_empty() || config.grid.iter().any(|&d| d < 2) {
        return Err(bad("grid", "need at least two nodes per axis"));
    }
    if config.m == 0 {
        return Err(bad("m", "order must be positive"));
    }
    let r = parse_ratio(&config.r).map_err(|e| bad("r", e.to_string()))?;
    let r_f64 = r.to_f64().unwrap();
    if r_f64 < 1.0 {
        return Err(bad("r", format!("{r} below 1")));
    }
    if let Some(sweep) = &config.radius_sweep {
        if sweep.iter().any(|&x| !(x > 0.0)) {
            return Err(bad("radius_sweep", "radii must be positive"));
        }
    }
    if matches!(config.operator, OperatorKind::Dirac) && config.grid.len() != 3 {
        return Err(bad("operator", "the Dirac-type operator needs three axes"));
    }
    let metric = build_metric(&config.manifold, &config.grid)
        .map_err(|e| bad("manifold", e.to_string()))?;
    let out = cli
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;
    Ok(Context {
        config,
        r,
        r_f64,
        out,
        metric,
    })
}

fn build_operator(kind: &OperatorKind, metric: &MetricField) -> Result<EllipticOperator, String> {
    let grid = metric.grid().clone();
    match kind {
        OperatorKind::Laplacian => Ok(EllipticOperator::laplacian(grid)),
        OperatorKind::LaplacianShifted { shift } => {
            Ok(EllipticOperator::laplacian_shifted(grid, *shift))
        }
        OperatorKind::Dirac => {
            if grid.ndim() != 3 {
                return Err("the Dirac-type operator needs three axes".into());
            }
            Ok(EllipticOperator::dirac(grid))
        }
        OperatorKind::LaplaceBeltrami => Ok(EllipticOperator::laplace_beltrami(metric)),
    }
}

/// Deterministic mixed family: axis trig modes with doubling
/// frequencies, band-limited random sections, one constant.
fn test_family(grid: &Grid, rank: usize, size: usize, seed: u64) -> Vec<GridSection> {
    let mut family = Vec::with_capacity(size);
    let max_k = |axis: usize| (grid.dims()[axis] / 2).saturating_sub(1).max(1);
    for i in 0..size {
        if i + 1 == size {
            family.push(GridSection::from_fn(grid.clone(), rank, |_, _| C64::new(1.0, 0.0)));
        } else if i % 2 == 0 {
            let axis = (i / 2) % grid.ndim();
            let k = (1usize << (i / 2 / grid.ndim())).min(max_k(axis)) as f64;
            let comp = (i / 2) % rank;
            family.push(GridSection::from_fn(grid.clone(), rank, move |x, c| {
                if c == comp {
                    C64::new((k * x[axis]).cos(), 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            }));
        } else {
            let kmax = grid.dims().iter().map(|&d| d / 2).min().unwrap_or(2).saturating_sub(1);
            family.push(GridSection::random_band_limited(
                grid.clone(),
                rank,
                kmax.clamp(1, 32),
                seed.wrapping_add(i as u64),
                false,
            ));
        }
    }
    family
}

fn seeded_orthogonal_data(
    op: &EllipticOperator,
    count: usize,
    seed: u64,
) -> Result<Vec<GridSection>, String> {
    let grid = op.grid();
    let basis = harmonic_basis(op).map_err(|e| e.to_string())?;
    let kmax = grid.dims().iter().map(|&d| d / 2).min().unwrap_or(2).saturating_sub(1);
    Ok((0..count)
        .map(|i| {
            let mut w = GridSection::random_band_limited(
                grid.clone(),
                op.rank(),
                kmax.clamp(1, 3),
                seed.wrapping_add(1000 + i as u64),
                false,
            );
            let h = harmonic_projection(&w, &basis);
            w.add_scaled(&h, C64::new(-1.0, 0.0));
            w
        })
        .collect())
}

fn radius_for(ctx: &Context, allow_unit_fallback: bool) -> Result<AdmissibleRadiusField, String> {
    if let Some(csv) = &ctx.config.radius_csv {
        let values = read_radius_csv(csv, ctx.metric.grid()).map_err(|e| e.to_string())?;
        return inject_radius_field(
            &ctx.metric,
            values,
            ctx.config.epsilon,
            ctx.config.m,
            ctx.config.seed,
        )
        .map_err(|e| e.to_string());
    }
    if ctx.config.m >= 2 {
        return radius_field(&ctx.metric, ctx.config.epsilon, ctx.config.m)
            .map_err(|e| e.to_string());
    }
    if allow_unit_fallback {
        // First-order admissibility has no computed field; the
        // unweighted variant runs with the unit radius.
        return Ok(AdmissibleRadiusField::constant(
            ctx.metric.grid(),
            1.0,
            RadiusProvenance::Injected {
                eps: ctx.config.epsilon,
                m: ctx.config.m,
            },
        ));
    }
    Err("computed admissibility needs m >= 2; inject a radius CSV instead".into())
}

#[derive(Serialize)]
struct CheckRecord {
    name: String,
    pass: bool,
    detail: Value,
}

#[derive(Serialize)]
struct RunReport {
    version: u32,
    tool_version: String,
    seed: u64,
    grid: Vec<usize>,
    operator: String,
    r: String,
    checks: Vec<CheckRecord>,
    /// Fitted constants and slopes pulled out of the check details.
    /// These are studies, not assertions; the verdict ignores them.
    informational: Value,
    verdict: bool,
    wall_seconds: f64,
}

fn fitted_summary(detail: &Value) -> Option<Value> {
    fn visit(v: &Value, prefix: &str, out: &mut serde_json::Map<String, Value>) {
        if let Value::Object(map) = v {
            if let Some(c) = map.get("constants") {
                out.insert(format!("{prefix}constants"), c.clone());
            }
            if let Some(s) = map.get("slope") {
                if !s.is_null() {
                    out.insert(format!("{prefix}slope"), s.clone());
                }
            }
            for (k, child) in map {
                if child.is_object() {
                    visit(child, &format!("{prefix}{k}."), out);
                }
            }
        }
    }
    let mut out = serde_json::Map::new();
    visit(detail, "", &mut out);
    (!out.is_empty()).then_some(Value::Object(out))
}

fn center_node(grid: &Grid) -> usize {
    let mid: Vec<usize> = grid.dims().iter().map(|&d| d / 2).collect();
    grid.index(&mid)
}

fn sweep(ctx: &Context) -> Vec<f64> {
    ctx.config
        .radius_sweep
        .clone()
        .unwrap_or_else(|| vec![1.0, 0.5, 0.25, 0.125])
}

/// Splits the sweep into resolved radii and radii too small for the
/// grid. Local norms over balls holding a handful of nodes measure
/// quadrature luck, not the estimate, so those radii are reported but
/// not asserted.
fn resolved_sweep(ctx: &Context) -> (Vec<f64>, Vec<f64>) {
    let grid = ctx.metric.grid();
    let h = (0..grid.ndim())
        .map(|a| grid.spacing(a))
        .fold(0.0f64, f64::max);
    sweep(ctx).into_iter().partition(|&r| r >= 4.0 * h)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn multiplier_plot(out: &Path, name: &str, report: &EstimateReport) {
    let points: Vec<(f64, f64)> = report
        .per_radius
        .iter()
        .filter(|p| p.multiplier > 0.0 && p.multiplier.is_finite())
        .map(|p| (p.radius, p.multiplier))
        .collect();
    if points.is_empty() {
        return;
    }
    let series = [PlotSeries {
        label: "per-radius multiplier".into(),
        points,
    }];
    let _ = write_loglog_svg(
        &out.join(format!("{name}-multipliers.svg")),
        &format!("{name}: fitted multiplier vs radius"),
        "R",
        "t_R",
        &series,
    );
}

fn run_check(ctx: &Context, kind: CheckKind) -> CheckRecord {
    let result = match kind {
        CheckKind::Radius => check_radius(ctx),
        CheckKind::Cover => check_cover(ctx),
        CheckKind::Exponents => check_exponents(ctx),
        CheckKind::Solve => check_solve(ctx),
        CheckKind::LocalEstimate => check_local(ctx),
        CheckKind::Bootstrap => check_bootstrap(ctx),
        CheckKind::Global => check_global(ctx),
        CheckKind::Double => check_double(ctx),
    };
    let record = match result {
        Ok((pass, detail)) => CheckRecord {
            name: kind.name().into(),
            pass,
            detail,
        },
        Err(message) => CheckRecord {
            name: kind.name().into(),
            pass: false,
            detail: json!({ "error": message }),
        },
    };
    let verdict = if record.pass { "pass" } else { "FAIL" };
    println!("check {}: {}", record.name, verdict);
    record
}

type CheckResult = Result<(bool, Value), String>;

fn check_radius(ctx: &Context) -> CheckResult {
    let field = radius_for(ctx, false)?;
    let audit = cf10_audit(&ctx.metric, &field, 10_000, ctx.config.seed);
    write_radius_csv(&ctx.out.join("radius.csv"), ctx.metric.grid(), &field)
        .map_err(|e| e.to_string())?;
    let min = field.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = field.values.iter().cloned().fold(0.0f64, f64::max);
    let pass = audit.violations == 0;
    Ok((
        pass,
        json!({
            "min_radius": min,
            "max_radius": max,
            "comparability": to_value(&audit),
        }),
    ))
}

fn check_cover(ctx: &Context) -> CheckResult {
    let field = radius_for(ctx, false)?;
    let cover = build_cover(&ctx.metric, &field).map_err(|e| e.to_string())?;
    let stats = overlap_stats(&cover, &ctx.metric, ctx.config.seed);
    write_cover_csv(&ctx.out.join("cover.csv"), ctx.metric.grid(), &cover)
        .map_err(|e| e.to_string())?;
    write_json(&ctx.out.join("overlap.json"), &stats).map_err(|e| e.to_string())?;
    let pass = stats.pass && stats.integral_pass;
    Ok((
        pass,
        json!({
            "balls": cover.balls.len(),
            "max_overlap": cover.max_overlap,
            "bound": cover.bound,
            "overlap": to_value(&stats),
        }),
    ))
}

fn check_exponents(ctx: &Context) -> CheckResult {
    let n = ctx.metric.grid().ndim() as u32;
    let chain = exponent_chain(n, ctx.config.m, &ctx.r).map_err(|e| e.to_string())?;
    let weights = weight_family(&chain).map_err(|e| e.to_string())?;
    write_exponent_csv(&ctx.out.join("exponents.csv"), &chain, &weights)
        .map_err(|e| e.to_string())?;
    let rungs: Vec<String> = chain.chain.iter().map(|t| t.to_string()).collect();
    println!("chain: {}", rungs.join(", "));
    println!("l = {}", chain.l);
    Ok((
        true,
        json!({
            "chain": rungs,
            "l": chain.l,
            "weights": to_value(&weights),
        }),
    ))
}

const SOLVE_TOL: f64 = 1e-8;

fn check_solve(ctx: &Context) -> CheckResult {
    if !ctx.metric.grid().fully_periodic() {
        return Err("the solve stage needs a boundary-free grid".into());
    }
    let op = build_operator(&ctx.config.operator, &ctx.metric)?;
    let omega = seeded_orthogonal_data(&op, 1, ctx.config.seed)?.remove(0);
    let basis = harmonic_basis(&op).map_err(|e| e.to_string())?;
    let u = min_norm_solve_with(&op, &omega, &basis).map_err(|e| e.to_string())?;
    let mut diff = op.apply(&u).map_err(|e| e.to_string())?;
    diff.add_scaled(&omega, C64::new(-1.0, 0.0));
    let denom = flat_norm(&omega);
    let residual = if denom > 0.0 { flat_norm(&diff) / denom } else { 0.0 };
    write_section_csv(&ctx.out.join("solution.csv"), &u).map_err(|e| e.to_string())?;
    write_section_csv(&ctx.out.join("data.csv"), &omega).map_err(|e| e.to_string())?;
    println!("residual {residual:.3e} (tolerance {SOLVE_TOL:.0e})");
    Ok((
        residual <= SOLVE_TOL,
        json!({
            "residual": residual,
            "tolerance": SOLVE_TOL,
            "kernel_dimension": basis.len(),
        }),
    ))
}

fn check_local(ctx: &Context) -> CheckResult {
    if !ctx.metric.grid().fully_periodic() {
        return Err("the local estimate stage needs a boundary-free grid".into());
    }
    let op = build_operator(&ctx.config.operator, &ctx.metric)?;
    let family = test_family(
        ctx.metric.grid(),
        op.rank(),
        ctx.config.family_size.unwrap_or(20),
        ctx.config.seed,
    );
    let (radii, dropped) = resolved_sweep(ctx);
    if radii.is_empty() {
        return Err(format!(
            "every sweep radius sits below the resolved scale 4h = {:.3}",
            4.0 * (0..ctx.metric.grid().ndim())
                .map(|a| ctx.metric.grid().spacing(a))
                .fold(0.0f64, f64::max)
        ));
    }
    let report = verify_local_estimate(
        &op,
        &ctx.metric,
        &family,
        center_node(ctx.metric.grid()),
        &radii,
        ctx.r_f64,
    )
    .map_err(|e| e.to_string())?;
    write_json(&ctx.out.join("local_estimate.json"), &report).map_err(|e| e.to_string())?;
    multiplier_plot(&ctx.out, "local_estimate", &report);
    Ok((
        report.pass,
        json!({
            "report": to_value(&report),
            "dropped_radii": dropped,
        }),
    ))
}

fn check_bootstrap(ctx: &Context) -> CheckResult {
    if !ctx.metric.grid().fully_periodic() {
        return Err("the bootstrap stage needs a boundary-free grid".into());
    }
    let op = build_operator(&ctx.config.operator, &ctx.metric)?;
    let omegas = seeded_orthogonal_data(&op, 10, ctx.config.seed)?;
    let grid = ctx.metric.grid();
    let center = center_node(grid);
    let cap = lirlab::geometry::chart_cap(&ctx.metric, center);
    let report = bootstrap(&op, &ctx.metric, &omegas, center, cap.min(1.0), &ctx.r)
        .map_err(|e| e.to_string())?;
    write_json(&ctx.out.join("bootstrap.json"), &report).map_err(|e| e.to_string())?;
    let pass = report.pass() && report.steps as u64 <= report.step_bound;
    Ok((pass, to_value(&report)))
}

fn check_global(ctx: &Context) -> CheckResult {
    if !ctx.metric.grid().fully_periodic() {
        return Err("the global estimate stage needs a boundary-free grid".into());
    }
    let op = build_operator(&ctx.config.operator, &ctx.metric)?;
    let field = radius_for(ctx, true)?;
    let omegas = seeded_orthogonal_data(&op, 4, ctx.config.seed)?;
    let report = verify_global_weighted(&op, &ctx.metric, &field, &omegas, &ctx.r)
        .map_err(|e| e.to_string())?;
    write_json(&ctx.out.join("global.json"), &report).map_err(|e| e.to_string())?;
    Ok((report.pass(), to_value(&report)))
}

const DOUBLE_RESIDUAL_TOL: f64 = 1e-6;

fn check_double(ctx: &Context) -> CheckResult {
    let ManifoldModel::CylinderWithBoundary { circumference, length } = &ctx.config.manifold
    else {
        return Err("the doubling stage needs a cylinder manifold".into());
    };
    let grid = Grid::new(
        &ctx.config.grid,
        &[*circumference, *length],
        &[true, false],
    );
    let domain = build_double(&grid, ctx.config.margin.unwrap_or(0.0)).map_err(|e| e.to_string())?;
    let op = match &ctx.config.operator {
        OperatorKind::Laplacian => EllipticOperator::laplacian(domain.double.clone()),
        OperatorKind::LaplacianShifted { shift } => {
            EllipticOperator::laplacian_shifted(domain.double.clone(), *shift)
        }
        _ => return Err("the doubling stage supports scalar operators only".into()),
    };
    let l = *length;
    let omega = GridSection::from_scalar_fn(grid.clone(), move |x| {
        C64::new((core::f64::consts::PI * x[1] / l).sin() * x[0].cos(), 0.0)
    });
    let sol = boundary_solve(&op, &domain, &omega, ctx.r_f64).map_err(|e| e.to_string())?;
    write_section_csv(&ctx.out.join("boundary_solution.csv"), &sol.u)
        .map_err(|e| e.to_string())?;
    write_json(&ctx.out.join("double.json"), &sol.report).map_err(|e| e.to_string())?;
    let pass = sol.report.spectral_residual <= DOUBLE_RESIDUAL_TOL
        && sol.report.trace.orthogonality_residual <= 1e-10;
    Ok((pass, to_value(&sol.report)))
}

fn run_pipeline(ctx: &Context, checks: &[CheckKind]) -> anyhow::Result<bool> {
    let start = Instant::now();
    let records: Vec<CheckRecord> = checks.iter().map(|&k| run_check(ctx, k)).collect();
    let verdict = records.iter().all(|r| r.pass);
    let mut informational = serde_json::Map::new();
    for record in &records {
        if let Some(summary) = fitted_summary(&record.detail) {
            informational.insert(record.name.clone(), summary);
        }
    }
    let op_label = match &ctx.config.operator {
        OperatorKind::Laplacian => "laplacian".to_string(),
        OperatorKind::LaplacianShifted { shift } => format!("laplacian+{shift}"),
        OperatorKind::Dirac => "dirac".to_string(),
        OperatorKind::LaplaceBeltrami => "laplace-beltrami".to_string(),
    };
    let report = RunReport {
        version: 1,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: ctx.config.seed,
        grid: ctx.config.grid.clone(),
        operator: op_label,
        r: ctx.config.r.clone(),
        checks: records,
        informational: Value::Object(informational),
        verdict,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&ctx.out.join("report.json"), &report)?;
    println!(
        "verdict: {} ({} checks, report at {})",
        if verdict { "pass" } else { "FAIL" },
        report.checks.len(),
        ctx.out.join("report.json").display()
    );
    Ok(verdict)
}

fn exponents_standalone(
    cli: &Cli,
    n: Option<u32>,
    m: Option<u32>,
    r: Option<String>,
) -> anyhow::Result<bool> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;
    let (n, m, r) = match (n, m, r) {
        (Some(n), Some(m), Some(r)) => (n, m, r),
        _ => {
            let ctx = load_config(cli)?;
            (
                ctx.metric.grid().ndim() as u32,
                ctx.config.m,
                ctx.config.r.clone(),
            )
        }
    };
    let ratio = parse_ratio(&r).map_err(|e| bad("r", e.to_string()))?;
    let chain = exponent_chain(n, m, &ratio).map_err(|e| bad("r", e.to_string()))?;
    let weights = weight_family(&chain).map_err(|e| bad("r", e.to_string()))?;
    write_exponent_csv(&out.join("exponents.csv"), &chain, &weights)?;
    let rungs: Vec<String> = chain.chain.iter().map(|t| t.to_string()).collect();
    println!("chain: {}", rungs.join(", "));
    println!("l = {}", chain.l);
    println!(
        "weights: w_l = R^{} in L^{}, v'_r = R^{} in L^{}",
        weights.w_l.exponent, weights.w_l.norm, weights.v_r_prime.exponent, weights.v_r_prime.norm
    );
    Ok(true)
}

/// Walks a report and re-renders every per-radius multiplier table.
fn render_report(input: &Path, out: &Path) -> anyhow::Result<bool> {
    let text = std::fs::read_to_string(input)?;
    let report: Value = serde_json::from_str(&text)?;
    std::fs::create_dir_all(out)?;
    let mut written = 0usize;
    let checks = report["checks"]
        .as_array()
        .ok_or_else(|| bad("checks", "report has no check array"))?;
    for check in checks {
        let name = check["name"].as_str().unwrap_or("check");
        let mut tables = Vec::new();
        collect_per_radius(&check["detail"], &mut tables);
        for (i, points) in tables.into_iter().enumerate() {
            let series = [PlotSeries {
                label: format!("{name} multiplier"),
                points,
            }];
            let path = out.join(format!("{name}-{i}.svg"));
            if write_loglog_svg(&path, name, "R", "t_R", &series).is_ok() {
                written += 1;
            }
        }
    }
    println!("rendered {written} plots into {}", out.display());
    Ok(true)
}

fn collect_per_radius(value: &Value, tables: &mut Vec<Vec<(f64, f64)>>) {
    match value {
        Value::Object(map) => {
            if let Some(Value::Array(rows)) = map.get("per_radius") {
                let points: Vec<(f64, f64)> = rows
                    .iter()
                    .filter_map(|row| {
                        let r = row["radius"].as_f64()?;
                        let t = row["multiplier"].as_f64()?;
                        (r > 0.0 && t > 0.0).then_some((r, t))
                    })
                    .collect();
                if !points.is_empty() {
                    tables.push(points);
                }
            }
            for v in map.values() {
                collect_per_radius(v, tables);
            }
        }
        Value::Array(items) => {
            for v in items {
                collect_per_radius(v, tables);
            }
        }
        _ => {}
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Some(Command::Exponents { n, m, r }) => {
            return exponents_standalone(&cli, *n, *m, r.clone())
        }
        Some(Command::Report { input }) => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            return render_report(input, &out);
        }
        _ => {}
    }
    let ctx = load_config(&cli)?;
    let checks: Vec<CheckKind> = match &cli.command {
        None => ctx.config.checks.clone(),
        Some(Command::Radius) => vec![CheckKind::Radius],
        Some(Command::Cover) => vec![CheckKind::Cover],
        Some(Command::Solve) => vec![CheckKind::Solve],
        Some(Command::VerifyLir) => vec![CheckKind::LocalEstimate],
        Some(Command::VerifyGlobal) => vec![CheckKind::Global],
        Some(Command::Double) => vec![CheckKind::Double],
        Some(Command::Exponents { .. }) | Some(Command::Report { .. }) => unreachable!(),
    };
    run_pipeline(&ctx, &checks)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
