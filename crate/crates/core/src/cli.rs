//! Command-line driver. `run` returns the process exit code: 0 on success,
//! 1 on a validation or runtime error, 2 on a failed check under `--strict`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64 as C64;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cluster::{self, SiteBox};
use crate::config::{parse_override, ExperimentConfig};
use crate::error::{Error, Result};
use crate::geometry::{self, FitBasis};
use crate::loops::CompositeLoop;
use crate::mc;
use crate::model::convergence_diagnostics;
use crate::oracle::{self, HardCoreBasis};
use crate::pathint::{self, SeriesEstimate};
use crate::report::{self, CheckRow};

#[derive(Parser, Debug)]
#[command(name = "loopgas", version, about = "Loop-gas cluster expansion experiments")]
pub struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration leaf, e.g. --set model.z=0.05
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Exit with code 2 when any bound check fails.
    #[arg(long, global = true)]
    pub strict: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// M, M0, M_l, ‖ψ‖, ‖ψ‖_l.
    Norms,
    /// Convergence radii q, q_l, p, p_l.
    Diagnostics,
    /// Numerical bound checks.
    Check {
        #[command(subcommand)]
        what: CheckCommand,
    },
    /// ln Z of the boxes Λ_R for every configured R.
    Lnz(LnzArgs),
    /// Boundary coefficients of one order.
    Coeffs {
        #[arg(long)]
        order: usize,
    },
    /// Weighted least-squares fit of ln Z(R) data.
    Fit(FitArgs),
    /// ln Z over a list of fugacities or scales.
    Sweep(SweepArgs),
    /// (R, lnZ, prediction, residual) columns for plotting.
    Plotdata(FitArgs),
    /// Re-run the command recorded in a run manifest.
    Replay { manifest: PathBuf },
}

#[derive(Subcommand, Debug, Clone)]
pub enum CheckCommand {
    /// Runs the checks listed in checks.which.
    Bounds {
        /// Comma-separated subset of checks.which.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ed,
    Direct,
    Cluster,
}

impl Method {
    fn name(&self) -> &'static str {
        match self {
            Method::Ed => "ed",
            Method::Direct => "direct",
            Method::Cluster => "cluster",
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct LnzArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    /// Scales R (defaults to geometry.R).
    #[arg(long = "R", value_delimiter = ',')]
    pub scales: Vec<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    /// CSV with columns R, lnZ, err.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "raw")]
    pub basis: BasisArg,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum BasisArg {
    Raw,
    SiteCount,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVar {
    Z,
    R,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub var: SweepVar,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[arg(long, value_enum, default_value = "cluster")]
    pub method: Method,
}

/// Parses and runs; never panics on bad input.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, &argv[1..]) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    cfg_value: Value,
    out: PathBuf,
    outputs: Vec<String>,
}

impl Ctx {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join(name), bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }
}

fn execute(cli: &Cli, args: &[String]) -> Result<i32> {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest, cli);
    }
    let path = cli.config.as_ref().ok_or_else(|| Error::Validation("--config is required".into()))?;
    let text = fs::read_to_string(path)?;
    let ov = cli.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    let (cfg, cfg_value) = ExperimentConfig::load(&text, &ov)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    let mut ctx = Ctx { cfg, cfg_value, out, outputs: Vec::new() };
    let command = cli.command.clone();
    let strict = cli.strict;
    let code = mc::with_threads(cli.threads, || dispatch(&command, &mut ctx, strict))?;
    write_manifest(&mut ctx, args, cli.threads)?;
    Ok(code)
}

fn replay(manifest: &Path, cli: &Cli) -> Result<i32> {
    let m: Value = serde_json::from_str(&fs::read_to_string(manifest)?)?;
    let args: Vec<String> = serde_json::from_value(m["args"].clone())?;
    let cfg_value = m["config"].clone();
    let cfg = ExperimentConfig::from_value(cfg_value.clone())?;
    let mut argv = vec!["loopgas".to_string()];
    argv.extend(args.iter().cloned());
    let rec = Cli::try_parse_from(&argv).map_err(|e| Error::Validation(format!("manifest args: {e}")))?;
    if matches!(rec.command, Command::Replay { .. }) {
        return Err(Error::Validation("manifest records a replay".into()));
    }
    let out = cli.out.clone().unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default());
    let mut ctx = Ctx { cfg, cfg_value, out, outputs: Vec::new() };
    let threads = cli.threads.or(rec.threads);
    let command = rec.command.clone();
    let code = mc::with_threads(threads, || dispatch(&command, &mut ctx, rec.strict || cli.strict))?;
    write_manifest(&mut ctx, &args, threads)?;
    Ok(code)
}

fn write_manifest(ctx: &mut Ctx, args: &[String], threads: Option<usize>) -> Result<()> {
    let canon = serde_json::to_vec(&ctx.cfg_value)?;
    let hash = Sha256::digest(&canon);
    let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
    let m = json!({
        "args": args,
        "config": ctx.cfg_value,
        "config_sha256": hex,
        "seed": ctx.cfg.truncation.seed,
        "threads": threads,
        "versions": {"loopgas": env!("CARGO_PKG_VERSION"), "manifest": 1},
        "outputs": ctx.outputs,
    });
    let text = serde_json::to_string_pretty(&m)?;
    fs::create_dir_all(&ctx.out)?;
    fs::write(ctx.out.join("run.json"), text + "\n")?;
    Ok(())
}

fn fmt(x: f64) -> String {
    format!("{x:.17e}")
}

fn dispatch(cmd: &Command, ctx: &mut Ctx, strict: bool) -> Result<i32> {
    let params = ctx.cfg.params()?;
    let trunc = ctx.cfg.truncation;
    match cmd {
        Command::Norms => {
            let text = serde_json::to_string_pretty(&params.norms())? + "\n";
            print!("{text}");
            ctx.write("norms.json", text.as_bytes())?;
            Ok(0)
        }
        Command::Diagnostics => {
            let dg = convergence_diagnostics(&params, ctx.cfg.checks.ql_variant);
            let text = serde_json::to_string_pretty(&dg)? + "\n";
            print!("{text}");
            ctx.write("diagnostics.json", text.as_bytes())?;
            Ok(0)
        }
        Command::Check { what: CheckCommand::Bounds { only } } => {
            let rows = run_checks(&ctx.cfg, only)?;
            let mut buf = Vec::new();
            report::write_checks(&mut buf, &rows)?;
            std::io::stdout().write_all(&buf)?;
            ctx.write("checks.csv", &buf)?;
            let failed = rows.iter().any(|r| r.status.is_fail());
            Ok(if strict && failed { 2 } else { 0 })
        }
        Command::Lnz(a) => {
            let scales = if a.scales.is_empty() { ctx.cfg.geometry.r.clone() } else { a.scales.clone() };
            let mut buf = Vec::new();
            {
                let mut w = csv::Writer::from_writer(&mut buf);
                w.write_record(LNZ_HEADER)?;
                for &s in &scales {
                    let row = lnz_row(&ctx.cfg, a.method, s, params.z)?;
                    w.write_record(&row)?;
                }
                w.flush()?;
            }
            std::io::stdout().write_all(&buf)?;
            ctx.write("lnz.csv", &buf)?;
            Ok(0)
        }
        Command::Coeffs { order } => {
            if *order > params.d {
                return Err(Error::Validation(format!("order {order} exceeds the dimension {}", params.d)));
            }
            let g = geometry::geometric_coefficients(&params, &trunc)?;
            let mut buf = Vec::new();
            {
                let mut w = csv::Writer::from_writer(&mut buf);
                w.write_record(["coefficient_name", "set", "value_re", "value_im", "stat_error", "tail_bound"])?;
                let name = format!("A{order}");
                let list: Vec<(String, SeriesEstimate)> = match order {
                    0 => vec![("bulk".into(), g.a0.clone())],
                    1 => g.a1.iter().map(|(f, e)| (f.label(params.d), e.clone())).collect(),
                    2 => g.a2.iter().map(|(f, e)| (f.label(params.d), e.clone())).collect(),
                    _ => g.a3.iter().map(|(f, e)| (f.label(params.d), e.clone())).collect(),
                };
                for (label, e) in &list {
                    w.write_record([name.clone(), label.clone(), fmt(e.value.re), fmt(e.value.im), fmt(e.stat_error), fmt(e.tail_bound)])?;
                }
                if *order > 0 && g.symmetric {
                    if let Some(e) = g.symmetric_value(*order) {
                        w.write_record([name, "symmetric".into(), fmt(e.value.re), fmt(e.value.im), fmt(e.stat_error), fmt(e.tail_bound)])?;
                    }
                }
                w.flush()?;
            }
            std::io::stdout().write_all(&buf)?;
            ctx.write("coeffs.csv", &buf)?;
            Ok(0)
        }
        Command::Fit(a) | Command::Plotdata(a) => {
            let data = geometry::read_fit_data(fs::File::open(&a.data)?)?;
            let bx = ctx.cfg.lattice_box(1.0)?;
            let basis = match a.basis {
                BasisArg::Raw => FitBasis::Raw,
                BasisArg::SiteCount => FitBasis::SiteCount,
            };
            let fit = geometry::fit_geometric(&data, &bx, basis)?;
            let mut buf = Vec::new();
            let name = if matches!(cmd, Command::Fit(_)) {
                geometry::write_fit(&mut buf, &fit)?;
                "fit.csv"
            } else {
                geometry::write_plotdata(&mut buf, &data, &bx, &fit)?;
                "plotdata.csv"
            };
            std::io::stdout().write_all(&buf)?;
            ctx.write(name, &buf)?;
            Ok(0)
        }
        Command::Sweep(a) => {
            let mut text = String::new();
            for &v in &a.values {
                let (scale, z) = match a.var {
                    SweepVar::Z => (*ctx.cfg.geometry.r.first().unwrap_or(&1.0), C64::new(v, 0.0)),
                    SweepVar::R => (v, params.z),
                };
                let row = lnz_row(&ctx.cfg, a.method, scale, z)?;
                let rec: serde_json::Map<String, Value> =
                    LNZ_HEADER.iter().zip(row.iter()).map(|(k, x)| (k.to_string(), Value::String(x.clone()))).collect();
                text.push_str(&serde_json::to_string(&rec)?);
                text.push('\n');
            }
            print!("{text}");
            ctx.write("sweep.jsonl", text.as_bytes())?;
            Ok(0)
        }
        Command::Replay { .. } => Err(Error::Validation("nested replay".into())),
    }
}

const LNZ_HEADER: [&str; 10] = ["method", "R", "sites", "beta", "z_re", "z_im", "lnZ", "stat_error", "tail_bound", "exact"];

fn lnz_row(cfg: &ExperimentConfig, method: Method, scale: f64, z: C64) -> Result<Vec<String>> {
    let params = cfg.params()?.with_z(z);
    params.validate()?;
    let trunc = cfg.truncation;
    let bx = cfg.lattice_box(scale)?;
    let sb: SiteBox = bx.site_box();
    let (v, err, tail, exact) = match method {
        Method::Ed => {
            let basis = HardCoreBasis::from_box(&sb, params.d)?;
            let lz = oracle::log_partition_ed(&basis, &params, cfg.oracle.boundary)?;
            (C64::new(lz, 0.0), 0.0, 0.0, true)
        }
        Method::Cluster => {
            let e = cluster::log_partition_cluster(&sb, &params, &trunc)?;
            (e.value, e.stat_error, e.tail_bound, e.meta.exact)
        }
        Method::Direct => {
            let e = cluster::partition_direct(&sb, &params, &trunc)?;
            let a = e.value.norm();
            let tail = if e.tail_bound < a { -(1.0 - e.tail_bound / a).ln() } else { f64::INFINITY };
            (e.value.ln(), e.stat_error / a, tail, e.meta.exact)
        }
    };
    Ok(vec![
        method.name().into(),
        scale.to_string(),
        bx.volume().to_string(),
        params.beta.to_string(),
        fmt(params.z.re),
        fmt(params.z.im),
        fmt(v.re),
        fmt(err),
        fmt(tail),
        exact.to_string(),
    ])
}

/// Rows of all requested checks, in a fixed order.
pub fn run_checks(cfg: &ExperimentConfig, only: &[String]) -> Result<Vec<CheckRow>> {
    let params = cfg.params()?;
    let trunc = cfg.truncation;
    let ch = &cfg.checks;
    for w in only {
        if !ch.which.contains(w) {
            return Err(Error::Validation(format!("check '{w}' is not enabled in checks.which")));
        }
    }
    let on = |name: &str| ch.which.iter().any(|w| w == name) && (only.is_empty() || only.iter().any(|w| w == name));
    let xs = cfg.test_loops();
    let ball = |x: &CompositeLoop| ch.ball_radius.unwrap_or_else(|| x.sup_radius().ceil());
    let mut rows = Vec::new();
    if on("lemma1") {
        for &j in &ch.j {
            rows.extend(pathint::lemma1_check(j, &params, &trunc));
        }
    }
    if on("lemma2") {
        for &j in &ch.j {
            for &r in &ch.lemma2_radii {
                rows.extend(pathint::lemma2_check(j, r, &params, &trunc));
            }
        }
    }
    if on("assumption3") {
        for x in &xs {
            rows.push(cluster::assumption3_check(x, &params, &trunc)?);
        }
    }
    if on("assumption4") {
        for x in &xs {
            for &r in &ch.r {
                rows.push(cluster::assumption4_check(x, ball(x), r, &params, &trunc)?);
            }
        }
    }
    if on("prop3") {
        for x in &xs {
            rows.push(cluster::prop3_check(x, &params, &trunc)?);
        }
    }
    if on("prop1") {
        rows.extend(cluster::prop1_decay_check(&ch.prop1_radii, &params, &trunc)?);
    }
    if on("dm") {
        for &m in &ch.dm_orders {
            for &r in &ch.r {
                rows.push(cluster::dm_check(&xs[0], ball(&xs[0]), r, m, &params, &trunc)?);
            }
        }
    }
    if on("twopoint") && trunc.cluster_n_max >= 2 {
        for x in &xs {
            for shift in [0, 1] {
                let mut t = [0, 0, 0];
                t[0] = shift;
                rows.push(cluster::twopoint_check(x, &x.shift(t), &params, &trunc)?);
            }
        }
    }
    if on("remainder") {
        rows.extend(geometry::remainder_bound_check(&ch.remainder_radii, &cfg.lattice_box(1.0)?, &params, &trunc)?);
    }
    Ok(rows)
}
