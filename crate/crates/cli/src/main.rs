use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lipmargin::analysis::{analyze_run, AnalysisConfig, AnalysisReport, DEFAULT_GRID_SIZE};
use lipmargin::dynamics::{correlation_heatmap, default_gamma_grid, DetectorConfig, StopProxy};
use lipmargin::margin::normalize_run;
use lipmargin::norm::{network_lipschitz, LipschitzConfig, NormMethod};
use lipmargin::run::{RunManifest, RunRecord};
use lipmargin::snapshot::{
    heatmap_csv, heatmap_svg, open_run, read_network, resolve_lipschitz, write_atomic,
    write_network, write_report, write_run,
};
use lipmargin::trainer::{train_with, TrainConfig, TrainStatus};

const THREADS_ENV: &str = "LIPMARGIN_THREADS";

#[derive(Parser)]
#[command(
    name = "lipmargin",
    version,
    about = "Lipschitz-normalized margin dynamics of training runs"
)]
struct Cli {
    /// Worker threads [env: LIPMARGIN_THREADS]; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy network on Gaussian blobs and write its run file.
    TrainToy(TrainToyArgs),
    /// Estimate the Lipschitz factor of a stored network.
    Estimate(EstimateArgs),
    /// Analyze a run and write the report bundle.
    Analyze(AnalyzeArgs),
    /// Write the (gamma1, gamma2) rank-correlation heatmap of a run.
    Heatmap(HeatmapArgs),
    /// Print a summary of a report written by `analyze`.
    Report(ReportArgs),
    /// Check a run file or a network directory.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Small,
    Large,
}

#[derive(Args)]
struct TrainToyArgs {
    /// JSON training configuration.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    out: PathBuf,
    /// Also store each epoch's network under this directory.
    #[arg(long)]
    weights_dir: Option<PathBuf>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override both the data and the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long, default_value = "l1")]
    method: NormMethod,
    /// Print the per-layer factors.
    #[arg(long)]
    per_layer: bool,
}

#[derive(Args)]
struct DetectorArgs {
    /// Moving-average window of the phase detector.
    #[arg(long, default_value_t = DetectorConfig::default().window)]
    window: usize,
    /// Minimum relative prominence of an interior extremum.
    #[arg(long, default_value_t = DetectorConfig::default().prominence)]
    prominence: f64,
}

#[derive(Clone, Copy)]
enum GammaArg {
    Auto,
    Fixed(f64),
}

fn parse_gamma(s: &str) -> Result<GammaArg, String> {
    if s == "auto" {
        return Ok(GammaArg::Auto);
    }
    s.parse::<f64>()
        .ok()
        .filter(|g| g.is_finite())
        .map(GammaArg::Fixed)
        .ok_or_else(|| format!("expected `auto` or a finite number, got `{s}`"))
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    run: PathBuf,
    /// Quantile level; defaults to the selected q* when test margins exist, else 0.95.
    #[arg(long)]
    q: Option<f64>,
    /// Margin threshold, or `auto` to select it from the test error.
    #[arg(long, default_value = "auto", value_parser = parse_gamma)]
    gamma: GammaArg,
    /// Complexity constant C_H in the bounds.
    #[arg(long, default_value_t = 0.0)]
    ch: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Margin floor tau of the quantile bound.
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    /// Bound M on input norms.
    #[arg(long, default_value_t = 1.0)]
    input_bound: f64,
    /// Network depth l in the quantile bound.
    #[arg(long, default_value_t = 1)]
    depth: usize,
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    grid_size: usize,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Estimator for epochs that reference weights instead of a stored factor.
    #[arg(long)]
    method: Option<NormMethod>,
    /// Skip the heatmap files.
    #[arg(long)]
    no_heatmap: bool,
    /// Report path (`.json`) or directory for the bundle.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    grid_size: usize,
    #[arg(long)]
    method: Option<NormMethod>,
    /// Output file; `.csv` or `.svg`, the other format is written alongside.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// `report.json` written by `analyze`.
    report: PathBuf,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ValidateArgs {
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    network: Option<PathBuf>,
}

/// Bad flags or configuration detected after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Run that stopped early because training diverged.
#[derive(Debug)]
struct Diverged(u64);

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "training diverged at epoch {}; the run holds the epochs before it",
            self.0
        )
    }
}

impl std::error::Error for Diverged {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<Usage>() {
        return 2;
    }
    if err.is::<Diverged>() {
        return 3;
    }
    match err
        .chain()
        .find_map(|e| e.downcast_ref::<lipmargin::Error>())
    {
        Some(e) if e.is_numeric() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn thread_count(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v.trim().parse().map(Some).map_err(|_| {
            usage(format!(
                "{THREADS_ENV} must be a non-negative integer, got `{v}`"
            ))
        }),
        _ => Ok(None),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::TrainToy(a) => train_toy(a),
        Command::Estimate(a) => estimate(a),
        Command::Analyze(a) => analyze(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Report(a) => report(a),
        Command::Validate(a) => validate(a),
    }
}

fn load_config(a: &TrainToyArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match (&a.config, a.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?
        }
        (None, Some(Preset::Small)) => TrainConfig::small(),
        (None, Some(Preset::Large)) => TrainConfig::large(),
        (None, None) => unreachable!("clap requires --config or --preset"),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()
        .map_err(|e| usage(format!("invalid config: {e}")))?;
    Ok(cfg)
}

fn train_toy(a: TrainToyArgs) -> anyhow::Result<()> {
    let cfg = load_config(&a)?;
    let weights_dir = a
        .weights_dir
        .as_ref()
        .map(|d| -> anyhow::Result<PathBuf> {
            std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
            Ok(d.canonicalize()?)
        })
        .transpose()?;
    let out = train_with(&cfg, |epoch, net, rec| {
        if let Some(dir) = &weights_dir {
            let sub = dir.join(format!("epoch-{epoch:04}"));
            write_network(&sub, &net.to_spec())?;
            rec.weights = Some(sub.to_string_lossy().into_owned());
        }
        Ok(())
    })?;
    write_run(&a.out, &out.manifest, &out.records)?;
    if let TrainStatus::Diverged { epoch } = out.status {
        return Err(Diverged(epoch).into());
    }
    if let Some(last) = out.records.last() {
        println!(
            "epochs {}  train_loss {:.6}  train_error {:.4}  test_error {:.4}  lipschitz {:.6}",
            last.epoch,
            last.train_loss.unwrap_or(f64::NAN),
            last.train_error.unwrap_or(f64::NAN),
            last.test_error.unwrap_or(f64::NAN),
            last.lipschitz.unwrap_or(f64::NAN),
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn estimate(a: EstimateArgs) -> anyhow::Result<()> {
    let net = read_network(&a.network)?;
    let est = network_lipschitz(&net, &LipschitzConfig::with_method(a.method))?;
    println!("L_f = {}", est.value);
    if a.per_layer {
        println!(
            "{:<28} {:<16} {:>22} {:>6} {:>9}",
            "layer", "method", "value", "iters", "converged"
        );
        for l in &est.layers {
            let method = serde_json::to_value(l.method)?;
            println!(
                "{:<28} {:<16} {:>22} {:>6} {:>9}",
                l.layer_id,
                method.as_str().unwrap_or_default(),
                l.value,
                l.iterations_used
                    .map(|i| i.to_string())
                    .unwrap_or_else(|| "-".into()),
                l.converged
            );
        }
    }
    Ok(())
}

/// Reads a run, computing missing factors from referenced weights.
fn load_run(
    path: &Path,
    method: Option<NormMethod>,
) -> anyhow::Result<(RunManifest, Vec<RunRecord>)> {
    let (manifest, reader) = open_run(path)?;
    let mut records = reader.collect::<Result<Vec<_>, _>>()?;
    if records.iter().any(|r| r.lipschitz.is_none()) {
        let method = match method {
            Some(m) => m,
            None => manifest.normalization_method.parse().map_err(|_| {
                usage(format!(
                    "run uses normalization `{}`; pass --method l1|power to estimate factors from weights",
                    manifest.normalization_method
                ))
            })?,
        };
        let base = path.parent().unwrap_or(Path::new("."));
        resolve_lipschitz(&mut records, base, &LipschitzConfig::with_method(method))?;
    }
    Ok((manifest, records))
}

fn analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    let cfg = AnalysisConfig {
        q: a.q,
        gamma: match a.gamma {
            GammaArg::Auto => None,
            GammaArg::Fixed(g) => Some(g),
        },
        grid_size: a.grid_size,
        detector: DetectorConfig {
            window: a.detector.window,
            prominence: a.detector.prominence,
        },
        complexity: a.ch,
        delta: a.delta,
        tau: a.tau,
        input_bound: a.input_bound,
        depth: a.depth,
        heatmap: !a.no_heatmap,
        ..Default::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let out = if a.out.extension().is_some_and(|e| e == "json") {
        a.out.clone()
    } else {
        a.out.join("report.json")
    };
    let (manifest, records) = load_run(&a.run, a.method)?;
    let dynamics = normalize_run(&records)?;
    let bundle = analyze_run(&manifest, &dynamics, &cfg)?;
    let files = write_report(&out, &bundle.report, bundle.heatmap.as_ref())?;
    print!("{}", summarize(&bundle.report));
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn heatmap(a: HeatmapArgs) -> anyhow::Result<()> {
    if a.grid_size == 0 {
        return Err(usage("--grid-size must be at least 1"));
    }
    let (csv_path, svg_path) = match a.out.extension().and_then(|e| e.to_str()) {
        Some("csv") => (a.out.clone(), a.out.with_extension("svg")),
        Some("svg") => (a.out.with_extension("csv"), a.out.clone()),
        _ => return Err(usage("--out must end in .csv or .svg")),
    };
    let (_, records) = load_run(&a.run, a.method)?;
    let dynamics = normalize_run(&records)?;
    let grid = default_gamma_grid(&dynamics, a.grid_size)?;
    let h = correlation_heatmap(&dynamics, &grid, &grid)?;
    if let Some(dir) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    for (path, text) in [(&csv_path, heatmap_csv(&h)), (&svg_path, heatmap_svg(&h))] {
        write_atomic(path, |w| w.write_all(text.as_bytes()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}"))
        .unwrap_or_else(|| "undefined".into())
}

fn summarize(r: &AnalysisReport) -> String {
    let mut s = String::new();
    let run = &r.run;
    writeln!(
        s,
        "run: {} epochs ({}..{}), {} classes, n_train {}, normalization {}",
        run.epochs,
        run.first_epoch,
        run.last_epoch,
        run.num_classes,
        run.n_train,
        run.normalization_method
    )
    .unwrap();
    if let Some(sel) = &r.selection {
        writeln!(
            s,
            "selected gamma* {} (rho {}), q* {} (rho {})",
            fmt_opt(sel.gamma),
            fmt_opt(sel.gamma_rho),
            fmt_opt(sel.q),
            fmt_opt(sel.q_rho)
        )
        .unwrap();
    }
    writeln!(
        s,
        "q {} ({:?}), gamma {} ({:?})",
        r.settings.q,
        r.settings.q_source,
        fmt_opt(r.settings.gamma),
        r.settings.gamma_source
    )
    .unwrap();
    for stop in &r.stop {
        let label = match stop.proxy {
            StopProxy::InverseQuantile(q) => format!("1/quantile margin q={q}"),
            StopProxy::MarginError(g) => format!("train margin error gamma={g}"),
        };
        writeln!(
            s,
            "suggested stop ({label}): epoch {}, local minima {:?}",
            stop.epoch, stop.local_minima_epochs
        )
        .unwrap();
    }
    if let Some(d) = &r.dilemma {
        writeln!(s, "uniform-improvement dilemma: {}", d.flag).unwrap();
    }
    for n in &r.notes {
        writeln!(s, "note: {n}").unwrap();
    }
    s
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.report)
        .with_context(|| format!("reading {}", a.report.display()))?;
    let r: AnalysisReport = serde_json::from_str(&text)
        .map_err(|e| anyhow!("{}: not an analysis report: {e}", a.report.display()))?;
    print!("{}", summarize(&r));
    Ok(())
}

fn validate(a: ValidateArgs) -> anyhow::Result<()> {
    if let Some(path) = &a.run {
        let (manifest, reader) = open_run(path)?;
        let mut epochs = 0usize;
        for rec in reader {
            rec?;
            epochs += 1;
        }
        println!(
            "{}: valid run, {} classes, {epochs} epochs",
            path.display(),
            manifest.num_classes
        );
    } else if let Some(dir) = &a.network {
        let net = read_network(dir)?;
        let out = net.validate()?;
        println!(
            "{}: valid network, {} layers, input {:?} -> output {:?}",
            dir.display(),
            net.layers.len(),
            net.input_shape,
            out
        );
    } else {
        bail!("nothing to validate");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_flag_parsing() {
        assert!(matches!(parse_gamma("auto"), Ok(GammaArg::Auto)));
        assert!(matches!(parse_gamma("0.25"), Ok(GammaArg::Fixed(g)) if g == 0.25));
        assert!(parse_gamma("nan").is_err());
        assert!(parse_gamma("soon").is_err());
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&usage("bad")), 2);
        assert_eq!(exit_code(&Diverged(3).into()), 3);
        assert_eq!(
            exit_code(&lipmargin::Error::Numeric("nan".into()).into()),
            3
        );
        assert_eq!(exit_code(&lipmargin::Error::Data("x".into()).into()), 1);
        let wrapped =
            anyhow::Error::from(lipmargin::Error::Numeric("nan".into())).context("while training");
        assert_eq!(exit_code(&wrapped), 3);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
