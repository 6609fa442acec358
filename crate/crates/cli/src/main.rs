mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use tsnl_core::data::{load_dataset, save_dataset, synth_dataset};
use tsnl_core::eval::{
    read_report, render_run_markdown, render_sweep_table, run_cv, write_json, RunConfig, RunReport, SweepCell,
    REPORT_JSON,
};
use tsnl_core::noise::inject;
use tsnl_core::train::{EpochRecord, Method};
use tsnl_core::{EncoderVariant, NoiseKind, NoiseSpec, Selector};

use plot::{Figure, Series};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "TSNL_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Parser)]
#[command(name = "tsnl", version, about = "Noisy-label time-series classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark.
    Synth(SynthArgs),
    /// Corrupt a dataset's labels and record noise.json.
    Inject(InjectArgs),
    /// Cross-validated training run.
    Train(TrainArgs),
    /// Noise settings by methods grid.
    Sweep(SweepArgs),
    /// Render markdown and plots for a finished run.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 50)]
    length: usize,
    #[arg(long, default_value_t = 1)]
    features: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Sym,
    Idn,
}

impl From<KindArg> for NoiseKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Sym => NoiseKind::Symmetric,
            KindArg::Idn => NoiseKind::Instance,
        }
    }
}

#[derive(Args)]
struct InjectArgs {
    /// Dataset directory to read.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectorArg {
    Bmm,
    Gmm,
    Sloss,
}

impl From<SelectorArg> for Selector {
    fn from(s: SelectorArg) -> Self {
        match s {
            SelectorArg::Bmm => Selector::Bmm,
            SelectorArg::Gmm => Selector::Gmm,
            SelectorArg::Sloss => Selector::Sloss,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Lg,
    Cnn,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum MethodArg {
    Actll,
    Vanilla,
}

/// Flags shared by `train` and `sweep`. Each overrides the matching field of
/// the `--config` file, which overrides the built-in default.
#[derive(Args)]
struct RunArgs {
    /// RunConfig JSON (as written to a run's config.json).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    selector: Option<SelectorArg>,
    #[arg(long, value_enum)]
    encoder: Option<EncoderArg>,
    #[arg(long)]
    no_aug: bool,
    #[arg(long)]
    no_corr: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    t_warmup: Option<usize>,
    #[arg(long)]
    t_corr: Option<usize>,
    #[arg(long)]
    t_temp: Option<f64>,
    /// Steepness of the correction ramp.
    #[arg(long)]
    steepness: Option<f64>,
    #[arg(long)]
    eps_maxcorr: Option<f64>,
    #[arg(long)]
    lambda_enc: Option<f64>,
    #[arg(long)]
    lambda_aug: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    aug_multiplier: Option<usize>,
    #[arg(long)]
    warp_knots: Option<usize>,
    #[arg(long)]
    warp_sigma: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    conv_channels: Option<Vec<usize>>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Number of cross-validation folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Run only these folds (default: all).
    #[arg(long = "fold", value_delimiter = ',')]
    only_folds: Option<Vec<usize>>,
    /// Repetition seeds; each reshuffles folds, noise and initialisation.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Dump per-epoch selections.
    #[arg(long)]
    keep_selections: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Inject label noise into each training fold.
    #[arg(long, value_enum)]
    noise: Option<KindArg>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Vanilla,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Noise settings as kind:tau, e.g. sym:0.2,idn:0.3.
    #[arg(long, value_delimiter = ',', value_parser = parse_setting)]
    settings: Option<Vec<(KindArg, f64)>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Option<Vec<MethodArg>>,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding report.json.
    #[arg(long)]
    run: PathBuf,
    /// Where to write report.md and plots/ (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

const DEFAULT_SETTINGS: [(KindArg, f64); 7] = [
    (KindArg::Sym, 0.1),
    (KindArg::Sym, 0.2),
    (KindArg::Sym, 0.3),
    (KindArg::Sym, 0.4),
    (KindArg::Sym, 0.5),
    (KindArg::Idn, 0.3),
    (KindArg::Idn, 0.4),
];

fn parse_setting(s: &str) -> Result<(KindArg, f64), String> {
    let (kind, tau) = s.split_once(':').ok_or_else(|| format!("expected kind:tau, got {s:?}"))?;
    let kind = KindArg::from_str(kind, true)?;
    let tau = tau.parse::<f64>().map_err(|e| format!("{tau:?}: {e}"))?;
    Ok((kind, tau))
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Inject(a) => cmd_inject(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    if a.classes < 2 {
        return usage("--classes must be at least 2");
    }
    if a.per_class == 0 || a.length == 0 || a.features == 0 {
        return usage("--per-class, --length and --features must be positive");
    }
    let out = a.out.unwrap_or_else(|| {
        out_root().join(format!(
            "synth-c{}-n{}-t{}-f{}-s{}",
            a.classes, a.per_class, a.length, a.features, a.seed
        ))
    });
    let ds = synth_dataset(a.per_class, a.classes, a.length, a.features, a.seed).context("generating dataset")?;
    save_dataset(&ds, &out).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_inject(a: InjectArgs) -> Result<(), Failure> {
    let spec = match NoiseSpec::new(a.kind.into(), a.tau, a.seed) {
        Ok(s) => s,
        Err(e) => return usage(format!("--tau: {e}")),
    };
    let ds = load_dataset(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let out = a.out.unwrap_or_else(|| {
        let name = a.data.file_name().map_or_else(|| "data".into(), |n| n.to_string_lossy().into_owned());
        out_root().join(format!("{name}-{}", path_label(&spec)))
    });
    let (noisy, _, report) = inject(&ds, &spec).context("injecting noise")?;
    save_dataset(&noisy, &out).with_context(|| format!("writing {}", out.display()))?;
    report.write(&out).context("writing noise.json")?;
    println!("{}", out.display());
    Ok(())
}

fn path_label(spec: &NoiseSpec) -> String {
    format!("{}-{:.2}", spec.kind.short(), spec.tau)
}

/// Flag > file > default.
fn resolve(run: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &run.config {
        Some(path) => match RunConfig::read(path) {
            Ok(c) => c,
            Err(e) => return usage(format!("--config: {e}")),
        },
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(v) = &run.data {
        cfg.dataset = Some(fs::canonicalize(v).unwrap_or_else(|_| v.clone()));
    }
    if let Some(v) = run.selector {
        t.selector = v.into();
    }
    if let Some(v) = run.encoder {
        t.encoder.variant = match v {
            EncoderArg::Lg => EncoderVariant::LocalGlobal,
            EncoderArg::Cnn => EncoderVariant::CnnOnly,
        };
    }
    t.disable_aug |= run.no_aug;
    t.disable_corr |= run.no_corr;
    t.keep_selections |= run.keep_selections;
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = run.$flag.clone() { t.$($field).+ = v; })*
        };
    }
    set! {
        epochs => max_epochs,
        t_warmup => t_warmup,
        t_corr => t_corr,
        t_temp => t_temp,
        steepness => k,
        eps_maxcorr => eps_maxcorr,
        lambda_enc => lambda_enc,
        lambda_aug => lambda_aug,
        lr => learning_rate,
        batch_size => batch_size,
        aug_multiplier => aug_multiplier,
        warp_knots => warp_knots,
        warp_sigma => warp_sigma,
        conv_channels => encoder.conv_channels,
        kernel_size => encoder.kernel_size,
        d_model => encoder.d_model,
        heads => encoder.n_heads,
        dropout => encoder.dropout,
    }
    if let Some(v) = run.folds {
        cfg.plan.k = v;
    }
    if let Some(v) = &run.only_folds {
        cfg.plan.folds = v.clone();
    }
    if let Some(v) = &run.seed {
        cfg.plan.seeds = v.clone();
    }
    Ok(cfg)
}

fn check(cfg: &RunConfig) -> Result<(), Failure> {
    if cfg.dataset.is_none() {
        return usage("a dataset is required (--data or \"dataset\" in --config)");
    }
    if cfg.plan.k < 2 {
        return usage("--folds must be at least 2");
    }
    if cfg.plan.seeds.is_empty() {
        return usage("at least one --seed is required");
    }
    if let Some(f) = cfg.plan.folds.iter().find(|&&f| f >= cfg.plan.k) {
        return usage(format!("--fold {f} is out of range for {} folds", cfg.plan.k));
    }
    if let Err(e) = cfg.train.validate() {
        return usage(e.to_string());
    }
    Ok(())
}

fn load(cfg: &RunConfig) -> Result<tsnl_core::TimeSeriesDataset, Failure> {
    let dir = cfg.dataset.as_ref().expect("checked");
    Ok(load_dataset(dir).with_context(|| format!("reading {}", dir.display()))?)
}

fn file_label(label: &str) -> String {
    label.replace('%', "pct")
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = resolve(&a.run)?;
    if a.noise.is_some() || a.tau.is_some() || a.noise_seed.is_some() {
        let prior = cfg.noise;
        let kind = a.noise.map(NoiseKind::from).or(prior.map(|n| n.kind)).unwrap_or(NoiseKind::Symmetric);
        let Some(tau) = a.tau.or(prior.map(|n| n.tau)) else {
            return usage("--noise needs --tau");
        };
        let seed = a.noise_seed.or(prior.map(|n| n.seed)).unwrap_or(0);
        cfg.noise = match NoiseSpec::new(kind, tau, seed) {
            Ok(s) => Some(s),
            Err(e) => return usage(format!("--tau: {e}")),
        };
    }
    if a.baseline.is_some() {
        cfg.train = cfg.train.vanilla();
    }
    check(&cfg)?;
    let ds = load(&cfg)?;
    let out = a.run.out.clone().unwrap_or_else(|| {
        out_root().join(format!(
            "train-{}-{}",
            method_slug(cfg.train.method),
            file_label(&cfg.noise_label())
        ))
    });
    let report = run_cv(&ds, &cfg, Some(&out)).context("training")?;
    println!(
        "{}: weighted F1 {:.3}({:.3}) -> {}",
        report.noise_label,
        report.mean_f1,
        report.std_f1,
        out.display()
    );
    Ok(())
}

fn method_slug(m: Method) -> &'static str {
    match m {
        Method::Actll => "actll",
        Method::Vanilla => "vanilla",
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    let base = resolve(&a.run)?;
    check(&base)?;
    let ds = load(&base)?;
    let out = a.run.out.clone().unwrap_or_else(|| out_root().join("sweep"));
    let settings = a.settings.clone().unwrap_or_else(|| DEFAULT_SETTINGS.to_vec());
    let methods = a.methods.clone().unwrap_or_else(|| vec![MethodArg::Actll, MethodArg::Vanilla]);

    let mut cells = Vec::new();
    for &(kind, tau) in &settings {
        let kind = NoiseKind::from(kind);
        let spec = NoiseSpec::new(kind, tau, a.noise_seed);
        for &m in &methods {
            let mut cfg = base.clone();
            if m == MethodArg::Vanilla {
                cfg.train = cfg.train.vanilla();
            }
            let method = tsnl_core::eval::method_name(cfg.train.method).to_string();
            let (noise_label, result) = match &spec {
                Ok(spec) => {
                    cfg.noise = Some(*spec);
                    let dir = out.join(path_label(spec)).join(method_slug(cfg.train.method));
                    let r = run_cv(&ds, &cfg, Some(&dir)).map(|r| (r.mean_f1, r.std_f1)).map_err(|e| e.to_string());
                    (spec.label(), r)
                }
                Err(e) => (format!("{}-{tau}", kind.short()), Err(e.to_string())),
            };
            match &result {
                Ok((m, s)) => eprintln!("{noise_label} {method}: {m:.3}({s:.3})"),
                Err(e) => eprintln!("{noise_label} {method}: ERR {e}"),
            }
            cells.push(SweepCell { noise_label, method, result });
        }
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("sweep.json"), &cells).context("writing sweep.json")?;
    let md = format!("# Weighted F1, mean(std)\n\n{}", render_sweep_table(&cells));
    fs::write(out.join("sweep.md"), &md).with_context(|| format!("writing {}", out.display()))?;
    print!("{md}");
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<(), Failure> {
    if !a.run.join(REPORT_JSON).is_file() {
        return Err(anyhow::anyhow!("no {REPORT_JSON} in {}", a.run.display()).into());
    }
    let report = read_report(&a.run).with_context(|| format!("reading {}", a.run.display()))?;
    let out = a.out.unwrap_or_else(|| a.run.clone());
    let plots = out.join("plots");
    fs::create_dir_all(&plots).with_context(|| format!("creating {}", plots.display()))?;
    let mut md = render_run_markdown(&report);
    md += "\n## Curves\n";
    for fold in &report.folds {
        let stem = format!("seed_{}_fold_{}", fold.seed, fold.fold);
        md += &format!("\n### Seed {}, fold {}\n\n", fold.seed, fold.fold);
        for (name, fig) in figures(&report, &fold.history) {
            let file = format!("{stem}_{name}");
            write_figure(&plots, &file, &fig)?;
            md += &format!("![{}](plots/{file}.svg)\n", fig.title);
        }
    }
    let path = out.join("report.md");
    fs::write(&path, md).with_context(|| format!("writing {}", path.display()))?;
    println!("{}", path.display());
    Ok(())
}

fn write_figure(dir: &Path, stem: &str, fig: &Figure) -> anyhow::Result<()> {
    fs::write(dir.join(format!("{stem}.svg")), fig.to_svg())?;
    fs::write(dir.join(format!("{stem}.csv")), fig.to_csv())?;
    Ok(())
}

fn figures(report: &RunReport, history: &[EpochRecord]) -> Vec<(&'static str, Figure)> {
    let x: Vec<f64> = history.iter().map(|r| r.epoch as f64).collect();
    let column = |name: &str, f: &dyn Fn(&EpochRecord) -> Option<f64>| Series {
        name: name.into(),
        values: history.iter().map(f).collect(),
    };
    let mut out = Vec::new();

    let losses: Vec<Series> = [
        column("L_ce", &|r| r.l_ce),
        column("L_enc", &|r| r.l_enc),
        column("L_aug", &|r| r.l_aug),
        column("L_unce", &|r| r.l_unce),
        column("total", &|r| Some(r.total)),
    ]
    .into_iter()
    .filter(|s| s.values.iter().any(Option::is_some))
    .collect();
    out.push(("losses", Figure { title: "Loss terms".into(), y_label: "loss".into(), x: x.clone(), series: losses }));

    if report.method == Method::Actll {
        out.push((
            "lambda_unce",
            Figure {
                title: "Correction weight".into(),
                y_label: "lambda_unce".into(),
                x: x.clone(),
                series: vec![column("lambda_unce", &|r| Some(r.lambda_unce))],
            },
        ));
    }

    if history.iter().any(|r| r.n_certain.is_some()) {
        let count = |f: fn(&EpochRecord) -> Option<usize>| move |r: &EpochRecord| f(r).map(|v| v as f64);
        out.push((
            "partition",
            Figure {
                title: "Partition sizes".into(),
                y_label: "samples".into(),
                x: x.clone(),
                series: vec![
                    column("certain", &count(|r| r.n_certain)),
                    column("uncertain", &count(|r| r.n_uncertain)),
                    column("hard", &count(|r| r.n_hard)),
                ],
            },
        ));
    }

    if history.iter().any(|r| r.certain_purity.is_some()) {
        out.push((
            "selection",
            Figure {
                title: "Selection quality".into(),
                y_label: "fraction".into(),
                x,
                series: vec![
                    column("certain purity", &|r| r.certain_purity),
                    column("hard noise recall", &|r| r.hard_noise_recall),
                ],
            },
        ));
    }
    out
}
