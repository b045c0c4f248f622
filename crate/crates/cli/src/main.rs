//! Command-line front end for dataset generation, training, inverse
//! design, evaluation and reporting.
//!
//! Errors are printed to stderr as a single JSON line
//! `{"error":"<kind>","message":"..."}` with exit code 1; usage errors
//! exit with code 2.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vardesign::acoustics::{unit_stl, AirMedium, FrequencyGrid, StlCurve};
use vardesign::apnn::{self, Apnn, ApnnConfig};
use vardesign::arvae::{self, ArVae, ArVaeSpec, LossWeights, TrainConfig};
use vardesign::dataset::{self, Dataset};
use vardesign::detect::detect_parameters;
use vardesign::fdfd::solve_stl;
use vardesign::geometry::{SamplerConfig, VarGeometry};
use vardesign::raster::{mm_to_px, rasterize, rasterize_in, CrossSection, FRAME_COLS, FRAME_ROWS};
use vardesign::workflows::{self, ComposeStrategy, InvertConfig, RunHeader};
use vardesign::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "vardesign", version, about = "Inverse design of ventilated acoustic resonators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate or split a training corpus.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train the conditional VAE or the parameter-regression baseline.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Generate and evaluate candidates for a target STL curve.
    Invert(InvertArgs),
    /// Evaluate a comparison method against a target curve.
    #[command(subcommand)]
    Baseline(BaselineCmd),
    /// Compute the STL of a geometry or image.
    #[command(subcommand)]
    Evaluate(EvaluateCmd),
    /// Detect the five parameters of a cross-section image or of every
    /// candidate in a report directory.
    Parameterize(ParameterizeArgs),
    /// Serialize several units on one waveguide.
    Compose(ComposeArgs),
    /// Print the summary of a report directory.
    Report(ReportArgs),
    /// Write the canonical target curves.
    Targets(TargetsArgs),
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    Gen(GenArgs),
    Split(SplitArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SplitArgs {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value_t = dataset::DEFAULT_TRAIN_FRACTION)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum TrainCmd {
    Arvae(TrainArvaeArgs),
    Apnn(TrainApnnArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
enum Preset {
    /// Default hyper-parameters (learning rate 1e-5).
    Reference,
    /// Larger step size for a few thousand samples.
    Desk,
}

#[derive(Args, Debug, Serialize)]
struct TrainArvaeArgs {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Output directory; defaults to runs/<time>-<hash>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Reference)]
    preset: Preset,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Loss weights `recon,kl,latent`.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    no_standardize: bool,
    /// JSON network architecture file.
    #[arg(long)]
    net_config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct TrainApnnArgs {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Reference)]
    preset: Preset,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Hidden layer widths, comma separated.
    #[arg(long)]
    hidden: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct InvertArgs {
    /// Target curve CSV (`freq_hz,stl_db`).
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value = "arvae.ckpt")]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset for the nearest-training-sample baseline.
    #[arg(long)]
    data: Option<PathBuf>,
    /// APNN checkpoint for the regression baseline.
    #[arg(long)]
    apnn: Option<PathBuf>,
    /// Evaluation threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum BaselineCmd {
    /// Nearest training sample by MSE.
    Nn(BaselineNnArgs),
    /// Parameter regression network.
    Apnn(BaselineApnnArgs),
}

#[derive(Args, Debug, Serialize)]
struct BaselineNnArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// CSV file for the matched response.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BaselineApnnArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value = "apnn.ckpt")]
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
enum GridChoice {
    /// 50 bins, 1 to 1961 Hz in 40 Hz steps.
    Standard,
    /// 1 Hz steps over the same band.
    Fine,
}

impl GridChoice {
    fn grid(self) -> FrequencyGrid {
        match self {
            GridChoice::Standard => FrequencyGrid::standard(),
            GridChoice::Fine => FrequencyGrid::fine(),
        }
    }
}

#[derive(Subcommand, Debug)]
enum EvaluateCmd {
    /// Closed-form model.
    Analytical(AnalyticalArgs),
    /// Finite-difference solver on a raster image.
    Fdfd(FdfdArgs),
}

#[derive(Args, Debug, Serialize)]
struct AnalyticalArgs {
    /// `R,l_a,l_b,R_n,R_c` in mm.
    #[arg(long)]
    params: String,
    #[arg(long, value_enum, default_value_t = GridChoice::Standard)]
    grid: GridChoice,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct FdfdArgs {
    /// Cross-section PGM image.
    #[arg(long, conflicts_with = "params")]
    image: Option<PathBuf>,
    /// `R,l_a,l_b,R_n,R_c` in mm, rasterized first.
    #[arg(long)]
    params: Option<String>,
    #[arg(long, value_enum, default_value_t = GridChoice::Standard)]
    grid: GridChoice,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ParameterizeArgs {
    #[arg(long, conflicts_with = "report")]
    image: Option<PathBuf>,
    /// Report directory to augment in place.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
enum StrategyChoice {
    Strict,
    CommonR,
}

#[derive(Args, Debug, Serialize)]
struct ComposeArgs {
    /// Units as `R,l_a,l_b,R_n,R_c` groups separated by `;`.
    #[arg(long, conflicts_with = "peaks")]
    params: Option<String>,
    /// Target peak frequencies (Hz), comma separated; units are searched.
    #[arg(long)]
    peaks: Option<String>,
    /// Shared waveguide radius for `--peaks` or `common-r`.
    #[arg(long)]
    r: Option<f64>,
    #[arg(long, value_enum, default_value_t = StrategyChoice::Strict)]
    strategy: StrategyChoice,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TargetsArgs {
    #[arg(long, default_value = "targets")]
    out: PathBuf,
    #[arg(long, default_value_t = workflows::CANONICAL_SEED)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(cli.command, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({"error": e.kind(), "message": e.to_string()});
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}

fn header<A: Serialize>(argv: &[String], seed: u64, args: &A) -> Result<RunHeader> {
    Ok(RunHeader::new(argv.to_vec(), seed, serde_json::to_value(args)?))
}

/// Writes a header next to a file output as `<file>.run.json`.
fn write_file_header(path: &Path, h: &RunHeader) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    let hp = path.with_file_name(name);
    std::fs::write(&hp, serde_json::to_vec_pretty(h)?).map_err(|source| Error::Io { path: hp, source })
}

fn emit_curve(curve: &StlCurve, out: Option<&Path>, h: &RunHeader) -> Result<()> {
    match out {
        Some(p) => {
            curve.write_csv(p)?;
            write_file_header(p, h)
        }
        None => {
            print!("{}", curve.to_csv());
            Ok(())
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|e| Error::Config(format!("bad {what} `{p}`: {e}")))
        })
        .collect()
}

fn open_split(dir: &Path) -> Result<Dataset> {
    let ds = Dataset::open(dir)?;
    if ds.manifest.split.is_none() {
        return Err(Error::Config(format!(
            "{} has no recorded split; run `dataset split` first",
            dir.display()
        )));
    }
    Ok(ds)
}

/// Rasterizes into the standard frame, growing the row count when the
/// cavity does not fit.
fn rasterize_any(g: &VarGeometry) -> Result<CrossSection> {
    match rasterize(g) {
        Err(Error::OutOfFrame(_)) => rasterize_in(g, FRAME_ROWS.max(mm_to_px(g.r_c) + 8), FRAME_COLS),
        other => other,
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cmd: Command, argv: Vec<String>) -> Result<()> {
    let medium = AirMedium::default();
    match cmd {
        Command::Dataset(DatasetCmd::Gen(a)) => {
            let h = header(&argv, a.seed, &a)?;
            let m = dataset::generate(&SamplerConfig::new(a.seed, a.count), &medium, &a.out)?;
            h.write(&a.out)?;
            println!("{} samples in {} (acceptance rate {:.4})", m.count, a.out.display(), m.acceptance_rate);
        }
        Command::Dataset(DatasetCmd::Split(a)) => {
            let mut ds = Dataset::open(&a.data)?;
            let (train, test) = ds.split(a.fraction, a.seed)?;
            println!("train {} test {}", train.len(), test.len());
        }
        Command::Train(TrainCmd::Arvae(a)) => {
            let mut cfg = match a.preset {
                Preset::Reference => TrainConfig::default(),
                Preset::Desk => TrainConfig::desk(a.seed),
            };
            cfg.seed = a.seed;
            cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
            cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
            cfg.lr = a.lr.unwrap_or(cfg.lr);
            cfg.standardize = !a.no_standardize;
            if let Some(w) = &a.weights {
                match parse_list::<f64>(w, "loss weight")?[..] {
                    [recon, kl, latent] => cfg.weights = LossWeights { recon, kl, latent },
                    _ => return Err(Error::Config("--weights needs recon,kl,latent".into())),
                }
            }
            let spec = match &a.net_config {
                Some(p) => ArVaeSpec::from_json(
                    &std::fs::read_to_string(p).map_err(|source| Error::Io { path: p.clone(), source })?,
                )?,
                None => ArVaeSpec::default(),
            };
            let ds = open_split(&a.data)?;
            let config = serde_json::json!({"train": cfg, "network": spec, "data_seed": ds.manifest.seed});
            let h = RunHeader::new(argv, cfg.seed, config);
            let out = workflows::resolve_out_dir(a.out.as_deref(), Path::new("runs"), &h.config_hash);
            std::fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
            h.write(&out)?;
            let (_, report) = arvae::train_arvae::<f32>(&ds, &cfg, &spec, &out)?;
            let last = report.epochs.last().expect("epochs > 0").loss;
            println!(
                "trained {} epochs into {} (best epoch {}, final total {:.4})",
                report.epochs.len(),
                out.display(),
                report.best_epoch,
                last.total
            );
        }
        Command::Train(TrainCmd::Apnn(a)) => {
            let mut cfg = match a.preset {
                Preset::Reference => ApnnConfig::default(),
                Preset::Desk => ApnnConfig::desk(a.seed),
            };
            cfg.seed = a.seed;
            cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
            cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
            cfg.lr = a.lr.unwrap_or(cfg.lr);
            if let Some(hs) = &a.hidden {
                cfg.hidden = parse_list(hs, "hidden width")?;
            }
            let ds = open_split(&a.data)?;
            let config = serde_json::json!({"train": cfg, "data_seed": ds.manifest.seed});
            let h = RunHeader::new(argv, cfg.seed, config);
            let out = workflows::resolve_out_dir(a.out.as_deref(), Path::new("runs"), &h.config_hash);
            std::fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
            h.write(&out)?;
            let (_, report) = apnn::train_apnn::<f32>(&ds, &cfg, &out)?;
            println!(
                "trained {} epochs into {} (best epoch {}, final mse {:.6})",
                report.losses.len(),
                out.display(),
                report.best_epoch,
                report.losses.last().expect("epochs > 0")
            );
        }
        Command::Invert(a) => {
            let target = StlCurve::read_csv(&a.target)?;
            let model = ArVae::<f32>::load(&a.model)?;
            let cfg = InvertConfig {
                n: a.n,
                seed: a.seed,
                threshold: a.threshold,
                threads: a.threads,
            };
            let target_id = a
                .target
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "target".into());
            let config = serde_json::json!({
                "invert": cfg,
                "target": target.values,
                "model": a.model,
                "data": a.data,
                "apnn": a.apnn,
            });
            let h = RunHeader::new(argv, a.seed, config);
            let out = workflows::resolve_out_dir(a.out.as_deref(), Path::new("runs"), &h.config_hash);
            let mut inv = workflows::invert(&model, &target_id, &target, &cfg, &medium, h)?;
            workflows::parameterized_variant(&mut inv.report, &inv.images, &medium)?;
            let apnn = a.apnn.as_deref().map(Apnn::<f32>::load).transpose()?;
            let ds = a.data.as_deref().map(open_split).transpose()?;
            workflows::add_baselines(&mut inv.report, apnn.as_ref(), ds.as_ref(), &medium)?;
            workflows::write_report(&out, &inv.report, &inv.images)?;
            let s = &inv.report.summary;
            println!(
                "{} candidates ({} excluded) in {}: best #{} mse {:.4} peak {} Hz",
                s.evaluated,
                s.excluded.len(),
                out.display(),
                s.best_index,
                s.best_mse,
                inv.report.best_peak_hz()
            );
        }
        Command::Baseline(BaselineCmd::Nn(a)) => {
            let target = StlCurve::read_csv(&a.target)?;
            let ds = open_split(&a.data)?;
            let (id, mse) = workflows::nearest_training_candidate(&target.values, &ds)?;
            let curve = StlCurve::new(ds.manifest.grid.clone(), ds.responses[id].clone())?;
            if let Some(p) = &a.out {
                emit_curve(&curve, Some(p), &header(&argv, 0, &a)?)?;
            }
            print_json(&serde_json::json!({
                "sample_id": id,
                "geometry": ds.geometries[id],
                "mse": mse,
                "peak_hz": curve.peak_frequency(),
            }))?;
        }
        Command::Baseline(BaselineCmd::Apnn(a)) => {
            let target = StlCurve::read_csv(&a.target)?;
            let model = Apnn::<f32>::load(&a.model)?;
            let g = model.predict_parameters(&target.values)?;
            let curve = unit_stl(&g, &medium, &target.grid)?;
            if let Some(p) = &a.out {
                emit_curve(&curve, Some(p), &header(&argv, 0, &a)?)?;
            }
            print_json(&serde_json::json!({
                "geometry": g,
                "mse": workflows::mse(&curve.values, &target.values)?,
                "peak_hz": curve.peak_frequency(),
            }))?;
        }
        Command::Evaluate(EvaluateCmd::Analytical(a)) => {
            let g = VarGeometry::parse_list(&a.params)?;
            g.check_ordering()?;
            let curve = unit_stl(&g, &medium, &a.grid.grid())?;
            emit_curve(&curve, a.out.as_deref(), &header(&argv, 0, &a)?)?;
        }
        Command::Evaluate(EvaluateCmd::Fdfd(a)) => {
            let img = match (&a.image, &a.params) {
                (Some(p), None) => CrossSection::read_pgm(p)?,
                (None, Some(s)) => rasterize_any(&VarGeometry::parse_list(s)?)?,
                _ => return Err(Error::Config("give exactly one of --image or --params".into())),
            };
            let curve = solve_stl(&img, &a.grid.grid(), &medium)?;
            emit_curve(&curve, a.out.as_deref(), &header(&argv, 0, &a)?)?;
        }
        Command::Parameterize(a) => match (&a.image, &a.report) {
            (Some(p), None) => {
                let g = detect_parameters(&CrossSection::read_pgm(p)?)?;
                print_json(&g)?;
            }
            (None, Some(dir)) => {
                let mut report = workflows::read_report(dir)?;
                let images = report
                    .candidates
                    .iter()
                    .map(|c| CrossSection::read_pgm(&dir.join(&c.image)))
                    .collect::<Result<Vec<_>>>()?;
                report.baselines.retain(|b| b.method != "parameterized_candidate");
                workflows::parameterized_variant(&mut report, &images, &medium)?;
                workflows::write_report(dir, &report, &images)?;
                print_json(&report.parameterized_summary)?;
            }
            _ => return Err(Error::Config("give exactly one of --image or --report".into())),
        },
        Command::Compose(a) => {
            let grid = FrequencyGrid::standard();
            let units = match (&a.params, &a.peaks) {
                (Some(p), None) => p
                    .split(';')
                    .map(VarGeometry::parse_list)
                    .collect::<Result<Vec<_>>>()?,
                (None, Some(p)) => {
                    let r = a
                        .r
                        .ok_or_else(|| Error::Config("--peaks needs --r".into()))?;
                    workflows::units_for_peaks(&parse_list::<f64>(p, "peak")?, r, &medium, &grid, a.seed)?
                }
                _ => return Err(Error::Config("give exactly one of --params or --peaks".into())),
            };
            let strategy = match a.strategy {
                StrategyChoice::Strict => ComposeStrategy::Strict,
                StrategyChoice::CommonR => ComposeStrategy::CommonR { r: a.r },
            };
            let c = workflows::compose_multi(&units, strategy, &medium, &grid)?;
            let h = header(&argv, a.seed, &a)?;
            if let Some(dir) = &a.out {
                std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
                c.curve.write_csv(&dir.join("combined.csv"))?;
                let p = dir.join("composition.json");
                std::fs::write(&p, serde_json::to_vec_pretty(&c)?).map_err(|source| Error::Io { path: p, source })?;
                h.write(dir)?;
            }
            print_json(&serde_json::json!({
                "units": c.units,
                "solo_peaks_hz": c.solo_peaks.iter().map(|&b| grid.frequencies()[b]).collect::<Vec<_>>(),
                "preserved": c.preserved,
            }))?;
        }
        Command::Report(a) => {
            let r = workflows::read_report(&a.dir)?;
            print!("{}", render_report(&r));
        }
        Command::Targets(a) => {
            let ts = workflows::canonical_targets(&medium, a.seed)?;
            std::fs::create_dir_all(&a.out).map_err(|source| Error::Io { path: a.out.clone(), source })?;
            for t in &ts {
                t.curve.write_csv(&a.out.join(format!("{}.csv", t.id)))?;
            }
            let p = a.out.join("targets.json");
            std::fs::write(&p, serde_json::to_vec_pretty(&ts)?).map_err(|source| Error::Io { path: p, source })?;
            header(&argv, a.seed, &a)?.write(&a.out)?;
            println!("{} targets in {}", ts.len(), a.out.display());
        }
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

fn render_report(r: &workflows::DesignReport) -> String {
    let mut s = format!("target {} (peak {} Hz)\n", r.target_id, r.target.peak_frequency());
    s.push_str("set,evaluated,excluded,best_mse,mean_mse,peaks,peak_var_hz2,peak_var_bin2\n");
    let mut row = |name: &str, x: &workflows::Summary| {
        s.push_str(&format!(
            "{name},{},{},{:.4},{:.4},{},{},{}\n",
            x.evaluated,
            x.excluded.len(),
            x.best_mse,
            x.mean_mse,
            x.peaks_detected,
            opt(x.peak_variance_hz2),
            opt(x.peak_variance_bin2)
        ))
    };
    row("non_parameterized", &r.summary);
    if let Some(p) = &r.parameterized_summary {
        row("parameterized", p);
    }
    s.push_str("method,mse,peak_hz\n");
    s.push_str(&format!("arvae_best,{:.4},{}\n", r.summary.best_mse, r.best_peak_hz()));
    for b in &r.baselines {
        s.push_str(&format!("{},{:.4},{}\n", b.method, b.mse, b.peak_hz));
    }
    s
}
