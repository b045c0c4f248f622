//! End-to-end design workflows: metrics, response-conditioned inverse
//! design with FDFD evaluation, baselines, parameterization of generated
//! shapes, multi-cavity composition and run reports.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustics::{multi_cavity_stl, unit_stl, AirMedium, FrequencyGrid, StlCurve};
use crate::apnn::Apnn;
use crate::arvae::{generate_candidates, ArVae};
use crate::dataset::{self, Dataset};
use crate::detect::detect_parameters;
use crate::error::{Error, IoContext, Result};
use crate::fdfd::solve_stl;
use crate::fmtutil::fmt_sig;
use crate::geometry::{sample_geometries, Bounds, SamplerConfig, VarGeometry};
use crate::nn::{checkpoint, Scalar};
use crate::raster::CrossSection;

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const RUN_HEADER_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";
pub const CANDIDATES_CSV: &str = "candidates.csv";
pub const TARGET_CSV: &str = "target.csv";
pub const CANDIDATE_DIR: &str = "candidates";
/// Curves whose maximum stays below this level have no detected peak and
/// are left out of peak-frequency statistics.
pub const PEAK_FLOOR_DB: f64 = 3.0;
/// Peak frequencies of the canonical inverse-design targets.
pub const CANONICAL_PEAKS_HZ: [f64; 6] = [601.0, 801.0, 1001.0, 1201.0, 1401.0, 1601.0];
/// Seed of the geometry stream searched for canonical targets.
pub const CANONICAL_SEED: u64 = 0x7a29_e7c5;

// ---------------------------------------------------------------- metrics

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::InvalidGrid(format!("curves of length {} and {}", a.len(), b.len())))
    }
}

/// Mean squared difference per bin.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    if a.is_empty() {
        return Err(Error::InvalidGrid("empty curves".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Per-bin absolute difference.
pub fn stl_error(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    same_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect())
}

/// Grid frequency of the maximum; ties go to the lowest frequency.
pub fn peak_freq(curve: &StlCurve) -> f64 {
    curve.peak_frequency()
}

/// Population variance, `None` for an empty slice.
pub fn variance(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    Some(xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
}

/// Bin of `grid` nearest to `freq_hz`.
pub fn nearest_bin(grid: &FrequencyGrid, freq_hz: f64) -> usize {
    let f = grid.frequencies();
    (0..f.len())
        .min_by(|&a, &b| (f[a] - freq_hz).abs().total_cmp(&(f[b] - freq_hz).abs()))
        .unwrap_or(0)
}

// ------------------------------------------------------- reproducibility

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub dataset: u32,
    pub checkpoint: String,
    pub report: u32,
}

impl Default for FormatVersions {
    fn default() -> Self {
        Self {
            dataset: dataset::FORMAT_VERSION,
            checkpoint: String::from_utf8_lossy(checkpoint::MAGIC).into_owned(),
            report: REPORT_FORMAT_VERSION,
        }
    }
}

/// Everything needed to regenerate a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub tool: String,
    pub version: String,
    pub command: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub formats: FormatVersions,
}

impl RunHeader {
    pub fn new(command: Vec<String>, seed: u64, config: serde_json::Value) -> Self {
        let config_hash = config_hash(&config);
        Self {
            tool: "vardesign".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            seed,
            config,
            config_hash,
            formats: FormatVersions::default(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_HEADER_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?).at(&path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_HEADER_FILE);
        Ok(serde_json::from_slice(&fs::read(&path).at(&path)?)?)
    }
}

/// SHA-256 of the compact JSON encoding (object keys sorted).
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values serialize");
    hex::encode(Sha256::digest(bytes))
}

/// Run directory name: UNIX seconds plus the first 12 hash digits.
pub fn run_dir_name(hash: &str) -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{secs}-{}", &hash[..hash.len().min(12)])
}

// ------------------------------------------------------------- reports

/// Analytical re-evaluation of a candidate through detected parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEval {
    pub geometry: Option<VarGeometry>,
    pub stl: Option<Vec<f64>>,
    pub mse: Option<f64>,
    pub peak_hz: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub index: usize,
    /// Image path relative to the run directory.
    pub image: String,
    pub stl: Option<Vec<f64>>,
    pub mse: Option<f64>,
    pub peak_hz: Option<f64>,
    pub peak_db: Option<f64>,
    pub error: Option<String>,
    pub parameterized: Option<ParamEval>,
}

/// Aggregate statistics of one candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub evaluated: usize,
    pub excluded: Vec<usize>,
    pub best_index: usize,
    pub best_mse: f64,
    pub mean_mse: f64,
    /// Candidates whose maximum reaches [`PEAK_FLOOR_DB`].
    pub peaks_detected: usize,
    pub peak_variance_hz2: Option<f64>,
    pub peak_variance_bin2: Option<f64>,
}

impl Summary {
    /// `rows` are `(index, mse, curve)` of successful evaluations.
    fn from_rows(rows: &[(usize, f64, &[f64])], excluded: Vec<usize>, grid: &FrequencyGrid) -> Result<Self> {
        let total = rows.len() + excluded.len();
        let best = rows
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .ok_or(Error::AllCandidatesFailed(total))?;
        let mean_mse = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
        let mut bins = Vec::new();
        for (_, _, v) in rows {
            let c = StlCurve::new(grid.clone(), v.to_vec())?;
            if c.peak_value() >= PEAK_FLOOR_DB {
                bins.push(c.peak_index());
            }
        }
        let hz: Vec<f64> = bins.iter().map(|&b| grid.frequencies()[b]).collect();
        let b: Vec<f64> = bins.iter().map(|&b| b as f64).collect();
        Ok(Self {
            evaluated: rows.len(),
            excluded,
            best_index: best.0,
            best_mse: best.1,
            mean_mse,
            peaks_detected: bins.len(),
            peak_variance_hz2: variance(&hz),
            peak_variance_bin2: variance(&b),
        })
    }
}

/// A comparison design evaluated against the same target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub method: String,
    pub sample_id: Option<usize>,
    pub geometry: Option<VarGeometry>,
    pub stl: Vec<f64>,
    pub mse: f64,
    pub peak_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub header: RunHeader,
    pub target_id: String,
    pub target: StlCurve,
    pub candidates: Vec<CandidateRow>,
    pub summary: Summary,
    pub parameterized_summary: Option<Summary>,
    pub baselines: Vec<BaselineRow>,
}

impl DesignReport {
    pub fn best(&self) -> &CandidateRow {
        &self.candidates[self.summary.best_index]
    }

    pub fn best_peak_hz(&self) -> f64 {
        self.best().peak_hz.expect("best candidate was evaluated")
    }

    pub fn add_baseline(&mut self, method: &str, sample_id: Option<usize>, geometry: Option<VarGeometry>, stl: Vec<f64>) -> Result<()> {
        let curve = StlCurve::new(self.target.grid.clone(), stl)?;
        self.baselines.push(BaselineRow {
            method: method.into(),
            sample_id,
            geometry,
            mse: mse(&curve.values, &self.target.values)?,
            peak_hz: curve.peak_frequency(),
            stl: curve.values,
        });
        Ok(())
    }
}

pub fn candidate_image_name(index: usize) -> String {
    format!("{CANDIDATE_DIR}/cand_{index:03}.pgm")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertConfig {
    pub n: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Worker threads for FDFD evaluation; 0 uses all available cores.
    #[serde(default)]
    pub threads: usize,
}

impl Default for InvertConfig {
    fn default() -> Self {
        Self {
            n: 100,
            seed: 0,
            threshold: 0.5,
            threads: 0,
        }
    }
}

fn worker_count(requested: usize, jobs: usize) -> usize {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let n = if requested == 0 { avail } else { requested };
    n.clamp(1, jobs.max(1))
}

/// Runs `f` over `0..jobs` on a small thread pool; results keep job order.
pub fn parallel_map<R: Send>(jobs: usize, threads: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..worker_count(threads, jobs) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs {
                    break;
                }
                let r = f(i);
                out.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Generated candidates together with their FDFD evaluation.
pub struct Inversion {
    pub report: DesignReport,
    pub images: Vec<CrossSection>,
}

/// Generates `cfg.n` candidates for `target`, evaluates each with the FDFD
/// solver on the target grid and ranks them by MSE.
pub fn invert<T: Scalar>(
    model: &ArVae<T>,
    target_id: &str,
    target: &StlCurve,
    cfg: &InvertConfig,
    medium: &AirMedium,
    header: RunHeader,
) -> Result<Inversion> {
    let images = generate_candidates(model, &target.values, cfg.n, cfg.seed, cfg.threshold)?;
    let evals = parallel_map(images.len(), cfg.threads, |i| solve_stl(&images[i], &target.grid, medium));
    let mut rows = Vec::with_capacity(images.len());
    let mut ok = Vec::new();
    let mut excluded = Vec::new();
    for (i, e) in evals.into_iter().enumerate() {
        let mut row = CandidateRow {
            index: i,
            image: candidate_image_name(i),
            stl: None,
            mse: None,
            peak_hz: None,
            peak_db: None,
            error: None,
            parameterized: None,
        };
        match e {
            Ok(curve) => {
                row.mse = Some(mse(&curve.values, &target.values)?);
                row.peak_hz = Some(curve.peak_frequency());
                row.peak_db = Some(curve.peak_value());
                row.stl = Some(curve.values);
            }
            Err(err) => {
                log::warn!("candidate {i} excluded: {err}");
                row.error = Some(err.to_string());
                excluded.push(i);
            }
        }
        rows.push(row);
    }
    for r in &rows {
        if let (Some(m), Some(v)) = (r.mse, &r.stl) {
            ok.push((r.index, m, v.as_slice()));
        }
    }
    let summary = Summary::from_rows(&ok, excluded, &target.grid)?;
    Ok(Inversion {
        report: DesignReport {
            header,
            target_id: target_id.into(),
            target: target.clone(),
            candidates: rows,
            summary,
            parameterized_summary: None,
            baselines: Vec::new(),
        },
        images,
    })
}

/// Detects the five parameters of every candidate image, re-evaluates
/// them analytically and adds the parameterized statistics plus the best
/// parameterized candidate as a baseline row.
pub fn parameterized_variant(report: &mut DesignReport, images: &[CrossSection], medium: &AirMedium) -> Result<()> {
    let grid = report.target.grid.clone();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (row, img) in report.candidates.iter_mut().zip(images) {
        let eval = detect_parameters(img)
            .and_then(|g| g.check_ordering().map(|_| g))
            .and_then(|g| Ok((g, unit_stl(&g, medium, &grid)?)));
        row.parameterized = Some(match eval {
            Ok((g, curve)) => ParamEval {
                geometry: Some(g),
                mse: Some(mse(&curve.values, &report.target.values)?),
                peak_hz: Some(curve.peak_frequency()),
                stl: Some(curve.values),
                error: None,
            },
            Err(e) => {
                failed.push(row.index);
                ParamEval {
                    geometry: None,
                    stl: None,
                    mse: None,
                    peak_hz: None,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    for row in &report.candidates {
        if let Some(p) = &row.parameterized {
            if let (Some(m), Some(v)) = (p.mse, &p.stl) {
                ok.push((row.index, m, v.as_slice()));
            }
        }
    }
    if ok.is_empty() {
        report.parameterized_summary = None;
        return Ok(());
    }
    let s = Summary::from_rows(&ok, failed, &grid)?;
    let best = report.candidates[s.best_index]
        .parameterized
        .clone()
        .expect("summarized rows are parameterized");
    report.parameterized_summary = Some(s);
    report.add_baseline("parameterized_candidate", None, best.geometry, best.stl.expect("evaluated"))
}

/// Exhaustive MSE argmin over the recorded train split; ties go to the
/// lowest id.
pub fn nearest_training_candidate(target: &[f64], ds: &Dataset) -> Result<(usize, f64)> {
    let (train, _) = ds
        .split_ids()?
        .ok_or_else(|| Error::Config("dataset has no recorded split".into()))?;
    nearest_among(target, &train, &ds.responses)
}

pub fn nearest_among(target: &[f64], ids: &[usize], responses: &[Vec<f64>]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &id in ids {
        let r = responses.get(id).ok_or(Error::MissingId(id))?;
        let m = mse(r, target)?;
        if best.map_or(true, |(bid, bm)| m < bm || (m == bm && id < bid)) {
            best = Some((id, m));
        }
    }
    best.ok_or(Error::EmptyTrainSplit)
}

/// Adds the APNN and nearest-training-sample baselines to `report`.
pub fn add_baselines<T: Scalar>(
    report: &mut DesignReport,
    apnn: Option<&Apnn<T>>,
    ds: Option<&Dataset>,
    medium: &AirMedium,
) -> Result<()> {
    if let Some(net) = apnn {
        let g = net.predict_parameters(&report.target.values)?;
        let curve = unit_stl(&g, medium, &report.target.grid)?;
        report.add_baseline("apnn", None, Some(g), curve.values)?;
    }
    if let Some(ds) = ds {
        let (id, _) = nearest_training_candidate(&report.target.values, ds)?;
        let stl = ds.responses[id].clone();
        report.add_baseline("nearest_training", Some(id), Some(ds.geometries[id]), stl)?;
    }
    Ok(())
}

/// Writes `report.json`, `candidates.csv`, `target.csv` and the candidate
/// images into `dir`.
pub fn write_report(dir: &Path, report: &DesignReport, images: &[CrossSection]) -> Result<()> {
    fs::create_dir_all(dir.join(CANDIDATE_DIR)).at(dir)?;
    for (row, img) in report.candidates.iter().zip(images) {
        img.write_pgm(&dir.join(&row.image))?;
    }
    report.target.write_csv(&dir.join(TARGET_CSV))?;
    report.header.write(dir)?;
    let path = dir.join(REPORT_FILE);
    fs::write(&path, serde_json::to_vec_pretty(report)?).at(&path)?;
    let path = dir.join(CANDIDATES_CSV);
    let mut f = BufWriter::new(File::create(&path).at(&path)?);
    writeln!(
        f,
        "index,image,mse,peak_hz,peak_db,param_mse,param_peak_hz,r,l_a,l_b,r_n,r_c,error"
    )
    .at(&path)?;
    let num = |v: Option<f64>| v.map(|x| fmt_sig(x, 9)).unwrap_or_default();
    for row in &report.candidates {
        let p = row.parameterized.as_ref();
        let g = p.and_then(|p| p.geometry).map(|g| g.to_array());
        let gp = |i: usize| num(g.map(|a| a[i]));
        let err = row
            .error
            .as_deref()
            .or(p.and_then(|p| p.error.as_deref()))
            .unwrap_or("")
            .replace([',', '\n'], ";");
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.index,
            row.image,
            num(row.mse),
            num(row.peak_hz),
            num(row.peak_db),
            num(p.and_then(|p| p.mse)),
            num(p.and_then(|p| p.peak_hz)),
            gp(0),
            gp(1),
            gp(2),
            gp(3),
            gp(4),
            err
        )
        .at(&path)?;
    }
    f.flush().at(&path)
}

pub fn read_report(dir: &Path) -> Result<DesignReport> {
    let path = dir.join(REPORT_FILE);
    Ok(serde_json::from_slice(&fs::read(&path).at(&path)?)?)
}

/// Re-solves the stored best candidate image against the stored target
/// and returns its MSE.
pub fn reevaluate_best(dir: &Path, medium: &AirMedium) -> Result<f64> {
    let report = read_report(dir)?;
    let target = StlCurve::read_csv(&dir.join(TARGET_CSV))?;
    let img = CrossSection::read_pgm(&dir.join(&report.best().image))?;
    let curve = solve_stl(&img, &target.grid, medium)?;
    mse(&curve.values, &target.values)
}

// ------------------------------------------------------ target search

/// Searches seeded draws from the design space for a geometry whose
/// analytical peak falls in the bin nearest `peak_hz`. With `radius`, the
/// waveguide radius of every draw is replaced before clamping.
pub fn find_geometry_with_peak(
    peak_hz: f64,
    radius: Option<f64>,
    medium: &AirMedium,
    grid: &FrequencyGrid,
    seed: u64,
    max_draws: usize,
) -> Result<(VarGeometry, StlCurve)> {
    const CHUNK: usize = 2048;
    let bounds = Bounds::default();
    let want = nearest_bin(grid, peak_hz);
    let mut seen = 0;
    let mut chunk = 0u64;
    while seen < max_draws {
        let cfg = SamplerConfig::new(seed.wrapping_add(chunk.wrapping_mul(0x9e37_79b9)), CHUNK);
        for g in sample_geometries(&cfg)? {
            seen += 1;
            let g = match radius {
                Some(r) => bounds.clamp(&VarGeometry { r, ..g }),
                None => g,
            };
            if !bounds.contains(&g) {
                continue;
            }
            let curve = unit_stl(&g, medium, grid)?;
            if curve.peak_index() == want && curve.peak_value() >= PEAK_FLOOR_DB {
                return Ok((g, curve));
            }
            if seen >= max_draws {
                break;
            }
        }
        chunk += 1;
    }
    Err(Error::NoMatch(format!(
        "no geometry{} peaks at {peak_hz} Hz within {max_draws} draws",
        radius.map(|r| format!(" with R = {r} mm")).unwrap_or_default()
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalTarget {
    pub id: String,
    pub peak_hz: f64,
    pub geometry: VarGeometry,
    pub curve: StlCurve,
}

/// One analytical target curve per entry of [`CANONICAL_PEAKS_HZ`], drawn
/// from a geometry stream independent of any training corpus seed.
pub fn canonical_targets(medium: &AirMedium, seed: u64) -> Result<Vec<CanonicalTarget>> {
    let grid = FrequencyGrid::standard();
    CANONICAL_PEAKS_HZ
        .iter()
        .enumerate()
        .map(|(i, &hz)| {
            let (geometry, curve) =
                find_geometry_with_peak(hz, None, medium, &grid, seed.wrapping_add(i as u64 * 7919), 2_000_000)?;
            Ok(CanonicalTarget {
                id: format!("peak_{hz}"),
                peak_hz: hz,
                geometry,
                curve,
            })
        })
        .collect()
}

// ---------------------------------------------------------- composition

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ComposeStrategy {
    /// Units must already share R.
    Strict,
    /// Units are refitted to a common R (the first unit's when `r` is
    /// unset) and clamped back into the design space.
    CommonR { r: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub units: Vec<VarGeometry>,
    pub curve: StlCurve,
    /// Peak bin of each unit alone.
    pub solo_peaks: Vec<usize>,
    /// Whether the combined curve has a local maximum within one bin of
    /// each solo peak.
    pub preserved: Vec<bool>,
}

impl Composition {
    pub fn all_preserved(&self) -> bool {
        self.preserved.iter().all(|p| *p)
    }
}

/// Bins that are at least as high as their neighbours, including the
/// grid ends.
pub fn peak_bins(v: &[f64]) -> Vec<usize> {
    (0..v.len())
        .filter(|&i| {
            let left = i == 0 || v[i] > v[i - 1];
            let right = i + 1 == v.len() || v[i] >= v[i + 1];
            left && right
        })
        .collect()
}

/// Serializes `units` on one waveguide and checks that each solo peak
/// survives in the combined response.
pub fn compose_multi(
    units: &[VarGeometry],
    strategy: ComposeStrategy,
    medium: &AirMedium,
    grid: &FrequencyGrid,
) -> Result<Composition> {
    let first = units.first().ok_or(Error::EmptyUnits)?;
    let units: Vec<VarGeometry> = match strategy {
        ComposeStrategy::Strict => units.to_vec(),
        ComposeStrategy::CommonR { r } => {
            let r = r.unwrap_or(first.r);
            let b = Bounds::default();
            units.iter().map(|u| b.clamp(&VarGeometry { r, ..*u })).collect()
        }
    };
    let curve = multi_cavity_stl(&units, medium, grid)?;
    let maxima = peak_bins(&curve.values);
    let mut solo_peaks = Vec::with_capacity(units.len());
    let mut preserved = Vec::with_capacity(units.len());
    for u in &units {
        let p = unit_stl(u, medium, grid)?.peak_index();
        solo_peaks.push(p);
        preserved.push(maxima.iter().any(|&m| m.abs_diff(p) <= 1));
    }
    Ok(Composition {
        units,
        curve,
        solo_peaks,
        preserved,
    })
}

/// Finds one unit per requested peak on a shared radius.
pub fn units_for_peaks(
    peaks_hz: &[f64],
    r: f64,
    medium: &AirMedium,
    grid: &FrequencyGrid,
    seed: u64,
) -> Result<Vec<VarGeometry>> {
    peaks_hz
        .iter()
        .enumerate()
        .map(|(i, &hz)| {
            find_geometry_with_peak(hz, Some(r), medium, grid, seed.wrapping_add(i as u64), 500_000).map(|(g, _)| g)
        })
        .collect()
}

/// Output directory for a CLI run: `base/<seconds>-<hash>` unless the
/// caller fixed it.
pub fn resolve_out_dir(out: Option<&Path>, base: &Path, hash: &str) -> PathBuf {
    out.map(Path::to_path_buf)
        .unwrap_or_else(|| base.join(run_dir_name(hash)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arvae::ArVaeSpec;
    use crate::raster::rasterize;
    use proptest::prelude::*;

    #[test]
    fn metric_basics() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 4.0]).unwrap(), 2.0);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(stl_error(&[1.0, 2.0], &[3.0, 1.0]).unwrap(), vec![2.0, 1.0]);
        let c = StlCurve::new(FrequencyGrid::standard(), {
            let mut v = vec![0.0; 50];
            v[10] = 5.0;
            v[30] = 5.0;
            v
        })
        .unwrap();
        assert_eq!(peak_freq(&c), 401.0);
        assert_eq!(variance(&[1.0, 3.0]), Some(1.0));
        assert_eq!(variance(&[]), None);
    }

    proptest! {
        #[test]
        fn mse_nonnegative_and_symmetric(a in proptest::collection::vec(-100.0f64..100.0, 50), b in proptest::collection::vec(-100.0f64..100.0, 50)) {
            let m = mse(&a, &b).unwrap();
            prop_assert!(m >= 0.0);
            prop_assert_eq!(m, mse(&b, &a).unwrap());
            prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn parallel_map_keeps_order(n in 0usize..40, t in 0usize..5) {
            prop_assert_eq!(parallel_map(n, t, |i| i * 3), (0..n).map(|i| i * 3).collect::<Vec<_>>());
        }
    }

    fn brute_force_nearest(target: &[f64], ids: &[usize], resp: &[Vec<f64>]) -> Option<(usize, f64)> {
        let mut scored: Vec<(f64, usize)> = ids
            .iter()
            .map(|&i| {
                let d: f64 = resp[i].iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum();
                (d / target.len() as f64, i)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.first().map(|&(m, i)| (i, m))
    }

    #[test]
    fn nearest_matches_brute_force() {
        let m = AirMedium::default();
        let grid = FrequencyGrid::standard();
        let gs = sample_geometries(&SamplerConfig::new(12, 60)).unwrap();
        let mut resp: Vec<Vec<f64>> = gs.iter().map(|g| unit_stl(g, &m, &grid).unwrap().values).collect();
        resp.push(resp[7].clone());
        let ids: Vec<usize> = (0..resp.len()).collect();
        // self match, with a duplicate at a higher id
        assert_eq!(nearest_among(&resp[7], &ids, &resp).unwrap(), (7, 0.0));
        for k in 0..10 {
            let target: Vec<f64> = (0..50).map(|i| ((i * (k + 3)) % 17) as f64).collect();
            let (id, d) = nearest_among(&target, &ids, &resp).unwrap();
            let (bid, bd) = brute_force_nearest(&target, &ids, &resp).unwrap();
            assert_eq!(id, bid);
            assert!((d - bd).abs() <= 1e-9 * bd.max(1.0));
        }
        assert!(matches!(nearest_among(&resp[0], &[], &resp), Err(Error::EmptyTrainSplit)));
    }

    #[test]
    fn composition_identities() {
        let m = AirMedium::default();
        let grid = FrequencyGrid::standard();
        let gs = sample_geometries(&SamplerConfig::new(31, 5)).unwrap();
        let one = compose_multi(&gs[..1], ComposeStrategy::Strict, &m, &grid).unwrap();
        let solo = unit_stl(&gs[0], &m, &grid).unwrap();
        for (a, b) in one.curve.values.iter().zip(&solo.values) {
            assert!((a - b).abs() <= 0.1);
        }
        assert!(one.all_preserved());
        assert!(matches!(
            compose_multi(&gs[..2], ComposeStrategy::Strict, &m, &grid),
            Err(Error::RadiusMismatch { .. })
        ));
        let common = compose_multi(&gs, ComposeStrategy::CommonR { r: None }, &m, &grid).unwrap();
        assert!(common.units.iter().all(|u| u.r == gs[0].r && Bounds::default().contains(u)));

        // duplicating an in-band resonator keeps a single peak and raises it
        let (g, solo) = find_geometry_with_peak(1001.0, None, &m, &grid, 5, 200_000).unwrap();
        let p = solo.peak_index();
        let twice = compose_multi(&[g, g], ComposeStrategy::Strict, &m, &grid).unwrap();
        assert_eq!(twice.curve.peak_index(), p);
        assert!(twice.curve.values[p] >= solo.values[p]);
        // the pair spacing adds only weak interaction maxima
        for b in peak_bins(&twice.curve.values) {
            if b != p {
                assert!(twice.curve.values[b] < solo.values[p], "bin {b}");
            }
        }
    }

    #[test]
    fn peak_search_hits_requested_bin() {
        let m = AirMedium::default();
        let grid = FrequencyGrid::standard();
        let (g, c) = find_geometry_with_peak(1001.0, None, &m, &grid, 3, 200_000).unwrap();
        assert_eq!(c.peak_frequency(), 1001.0);
        assert_eq!(unit_stl(&g, &m, &grid).unwrap(), c);
        let (g, _) = find_geometry_with_peak(1201.0, Some(10.0), &m, &grid, 3, 200_000).unwrap();
        assert_eq!(g.r, 10.0);
        assert!(find_geometry_with_peak(1201.0, None, &m, &grid, 3, 0).is_err());
    }

    #[test]
    fn exact_tshape_candidate_parameterizes_back() {
        let m = AirMedium::default();
        let g = VarGeometry::new(10.0, 12.0, 4.0, 22.0, 40.0);
        let img = rasterize(&g).unwrap();
        let target = unit_stl(&g, &m, &FrequencyGrid::standard()).unwrap();
        let mut report = DesignReport {
            header: RunHeader::new(vec![], 0, serde_json::json!({})),
            target_id: "t".into(),
            target: target.clone(),
            candidates: vec![CandidateRow {
                index: 0,
                image: candidate_image_name(0),
                stl: Some(target.values.clone()),
                mse: Some(0.0),
                peak_hz: Some(target.peak_frequency()),
                peak_db: Some(target.peak_value()),
                error: None,
                parameterized: None,
            }],
            summary: Summary::from_rows(&[(0, 0.0, &target.values)], vec![], &target.grid).unwrap(),
            parameterized_summary: None,
            baselines: vec![],
        };
        parameterized_variant(&mut report, &[img], &m).unwrap();
        let p = report.candidates[0].parameterized.clone().unwrap();
        let d = p.geometry.unwrap().to_array();
        for (a, b) in d.iter().zip(g.to_array()) {
            assert!((a - b).abs() <= 0.4 + 1e-9, "{d:?}");
        }
        assert!(p.mse.is_some());
        let s = report.parameterized_summary.as_ref().unwrap();
        assert!(s.peak_variance_hz2.is_some() && s.peak_variance_bin2.is_some());
        assert_eq!(report.baselines[0].method, "parameterized_candidate");
    }

    #[test]
    fn untrained_inversion_report_is_consistent() {
        let m = AirMedium::default();
        let model = ArVae::<f32>::init(&ArVaeSpec::default(), 4).unwrap();
        let g = VarGeometry::new(10.0, 12.0, 4.0, 22.0, 40.0);
        let target = unit_stl(&g, &m, &FrequencyGrid::standard()).unwrap();
        let cfg = InvertConfig {
            n: 3,
            seed: 9,
            ..InvertConfig::default()
        };
        let header = RunHeader::new(vec!["invert".into()], 9, serde_json::to_value(&cfg).unwrap());
        let inv = invert(&model, "t", &target, &cfg, &m, header.clone()).unwrap();
        let again = invert(&model, "t", &target, &cfg, &m, header).unwrap();
        assert_eq!(inv.report, again.report);
        let s = &inv.report.summary;
        assert!(s.evaluated + s.excluded.len() == 3);
        assert!(s.best_mse <= s.mean_mse);

        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &inv.report, &inv.images).unwrap();
        assert_eq!(read_report(dir.path()).unwrap(), inv.report);
        let re = reevaluate_best(dir.path(), &m).unwrap();
        assert!((re - s.best_mse).abs() <= 1e-6 * s.best_mse.max(1.0));
        let csv = std::fs::read_to_string(dir.path().join(CANDIDATES_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(RunHeader::read(dir.path()).unwrap(), inv.report.header);
    }

    #[test]
    fn header_hash_is_stable() {
        let a = RunHeader::new(vec![], 1, serde_json::json!({"b": 1, "a": [1, 2]}));
        let b = RunHeader::new(vec![], 1, serde_json::json!({"a": [1, 2], "b": 1}));
        assert_eq!(a.config_hash, b.config_hash);
        assert_eq!(a.config_hash.len(), 64);
        assert_ne!(a.config_hash, config_hash(&serde_json::json!({"a": [1, 2], "b": 2})));
    }
}
