//! On-disk training corpus of (geometry, image, response) samples.
//!
//! A dataset is one directory:
//!
//! ```text
//! manifest.json      written last; its presence marks completion
//! params.csv         id,r,l_a,l_b,r_n,r_c (mm)
//! responses.f32      little-endian float32, row-major id × 50
//! images/ID.pgm      binary cross-section per sample
//! ```
//!
//! While generation runs an `INCOMPLETE` marker file sits in the
//! directory; it is removed after the manifest lands.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustics::{unit_stl, AirMedium, FrequencyGrid, StlCurve};
use crate::error::{Error, IoContext, Result};
use crate::geometry::{sample_with_stats, Bounds, SamplerConfig, VarGeometry};
use crate::raster::{rasterize, CrossSection, FRAME_COLS, FRAME_ROWS};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.csv";
pub const RESPONSES_FILE: &str = "responses.f32";
pub const IMAGES_DIR: &str = "images";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;
const PARAMS_HEADER: &str = "id,r,l_a,l_b,r_n,r_c";

/// One corpus entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub geometry: VarGeometry,
    pub image: CrossSection,
    pub response: StlCurve,
}

impl Sample {
    /// Rasterizes and evaluates `geometry` on the default grid.
    pub fn compute(id: usize, geometry: VarGeometry, medium: &AirMedium) -> Result<Self> {
        Ok(Self {
            id,
            geometry,
            image: rasterize(&geometry)?,
            response: unit_stl(&geometry, medium, &FrequencyGrid::standard())?,
        })
    }
}

/// Per-bin mean and standard deviation of train responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ResponseStats {
    /// Population statistics of the rows of `responses` (n × bins). Bins
    /// with zero spread get a unit std so standardization stays finite.
    pub fn from_rows(responses: &[Vec<f64>]) -> Self {
        let bins = responses.first().map_or(0, Vec::len);
        let n = responses.len().max(1) as f64;
        let mut mean = vec![0.0; bins];
        for row in responses {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; bins];
        for row in responses {
            for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        Self { mean, std }
    }

    pub fn standardize(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub fraction: f64,
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    /// Standardization statistics over the train split.
    pub response_stats: ResponseStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub params: String,
    pub responses: String,
    pub images: String,
    /// Bytes per sample in the responses file.
    pub response_stride: usize,
}

impl Default for DatasetFiles {
    fn default() -> Self {
        Self {
            params: PARAMS_FILE.into(),
            responses: RESPONSES_FILE.into(),
            images: IMAGES_DIR.into(),
            response_stride: 4 * FrequencyGrid::standard().len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub count: usize,
    pub bounds: Bounds,
    pub medium: AirMedium,
    pub grid: FrequencyGrid,
    pub image_rows: usize,
    pub image_cols: usize,
    /// Accepted / drawn geometries during rejection sampling.
    pub acceptance_rate: f64,
    pub files: DatasetFiles,
    pub split: Option<SplitInfo>,
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() || dir.join(INCOMPLETE_MARKER).exists() {
            return Err(Error::IncompleteDataset(dir.to_path_buf()));
        }
        let m: Self = serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?;
        if m.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "dataset format version {} (expected {FORMAT_VERSION})",
                m.version
            )));
        }
        Ok(m)
    }

    /// Writes through a temporary file and a rename so readers never see
    /// a partial manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&tmp, text).at(&tmp)?;
        let path = dir.join(MANIFEST_FILE);
        fs::rename(&tmp, &path).at(&path)
    }
}

/// Streams samples to a dataset directory in id order.
pub struct DatasetWriter {
    dir: PathBuf,
    params: BufWriter<File>,
    responses: BufWriter<File>,
    count: usize,
}

impl DatasetWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join(IMAGES_DIR)).at(dir)?;
        let marker = dir.join(INCOMPLETE_MARKER);
        fs::write(&marker, b"").at(&marker)?;
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.exists() {
            fs::remove_file(&manifest).at(&manifest)?;
        }
        let p = dir.join(PARAMS_FILE);
        let mut params = BufWriter::new(File::create(&p).at(&p)?);
        writeln!(params, "{PARAMS_HEADER}").at(&p)?;
        let r = dir.join(RESPONSES_FILE);
        let responses = BufWriter::new(File::create(&r).at(&r)?);
        Ok(Self {
            dir: dir.to_path_buf(),
            params,
            responses,
            count: 0,
        })
    }

    pub fn push(&mut self, s: &Sample) -> Result<()> {
        if s.id != self.count {
            return Err(Error::Format(format!(
                "samples must arrive in id order: expected {}, got {}",
                self.count, s.id
            )));
        }
        let g = &s.geometry;
        let p = self.dir.join(PARAMS_FILE);
        writeln!(
            self.params,
            "{},{},{},{},{},{}",
            s.id, g.r, g.l_a, g.l_b, g.r_n, g.r_c
        )
        .at(&p)?;
        let r = self.dir.join(RESPONSES_FILE);
        for v in &s.response.values {
            self.responses.write_all(&(*v as f32).to_le_bytes()).at(&r)?;
        }
        s.image.write_pgm(&image_path(&self.dir, s.id))?;
        self.count += 1;
        Ok(())
    }

    /// Flushes data files, then writes the manifest and clears the
    /// incomplete marker.
    pub fn finish(mut self, mut manifest: DatasetManifest) -> Result<DatasetManifest> {
        let p = self.dir.join(PARAMS_FILE);
        self.params.flush().at(&p)?;
        self.params.get_ref().sync_all().at(&p)?;
        let r = self.dir.join(RESPONSES_FILE);
        self.responses.flush().at(&r)?;
        self.responses.get_ref().sync_all().at(&r)?;
        manifest.count = self.count;
        manifest.write(&self.dir)?;
        let marker = self.dir.join(INCOMPLETE_MARKER);
        fs::remove_file(&marker).at(&marker)?;
        Ok(manifest)
    }
}

pub fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(IMAGES_DIR).join(format!("{id}.pgm"))
}

/// Samples geometries and writes the full corpus to `dir`.
pub fn generate(cfg: &SamplerConfig, medium: &AirMedium, dir: &Path) -> Result<DatasetManifest> {
    let run = sample_with_stats(cfg)?;
    let mut writer = DatasetWriter::create(dir)?;
    for (id, g) in run.geometries.iter().enumerate() {
        writer.push(&Sample::compute(id, *g, medium)?)?;
    }
    log::info!(
        "generated {} samples (acceptance rate {:.4})",
        run.geometries.len(),
        run.acceptance_rate()
    );
    writer.finish(DatasetManifest {
        version: FORMAT_VERSION,
        seed: cfg.seed,
        count: 0,
        bounds: cfg.bounds,
        medium: *medium,
        grid: FrequencyGrid::standard(),
        image_rows: FRAME_ROWS,
        image_cols: FRAME_COLS,
        acceptance_rate: run.acceptance_rate(),
        files: DatasetFiles::default(),
        split: None,
    })
}

/// Train size for `count` samples: `round(fraction · count)`.
pub fn train_size(count: usize, fraction: f64) -> usize {
    (fraction * count as f64).round() as usize
}

/// Deterministic shuffled partition of `0..count`; both id lists are
/// returned sorted.
pub fn split_ids(count: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut ids: Vec<usize> = (0..count).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = train_size(count, fraction);
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// A batch of samples as flat real arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    /// n × rows × cols values in {0, 1}.
    pub images: Vec<f64>,
    /// n × bins.
    pub responses: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Read access to a completed dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub geometries: Vec<VarGeometry>,
    /// Raw responses as stored (float32 widened to f64).
    pub responses: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(dir)?;
        let geometries = read_params(&dir.join(&manifest.files.params))?;
        let bins = manifest.grid.len();
        let rpath = dir.join(&manifest.files.responses);
        let bytes = fs::read(&rpath).at(&rpath)?;
        if geometries.len() != manifest.count || bytes.len() != manifest.count * bins * 4 {
            return Err(Error::Format(format!(
                "manifest count {} disagrees with {} params rows / {} response bytes",
                manifest.count,
                geometries.len(),
                bytes.len()
            )));
        }
        let responses = bytes
            .chunks_exact(bins * 4)
            .map(|row| {
                row.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect()
            })
            .collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            geometries,
            responses,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id < self.len() {
            Ok(())
        } else {
            Err(Error::MissingId(id))
        }
    }

    pub fn image(&self, id: usize) -> Result<CrossSection> {
        self.check_id(id)?;
        CrossSection::read_pgm(&image_path(&self.dir, id))
    }

    pub fn sample(&self, id: usize) -> Result<Sample> {
        self.check_id(id)?;
        Ok(Sample {
            id,
            geometry: self.geometries[id],
            image: self.image(id)?,
            response: StlCurve::new(self.manifest.grid.clone(), self.responses[id].clone())?,
        })
    }

    /// Partitions the ids, computes train response statistics and records
    /// both in the manifest.
    pub fn split(&mut self, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        let (train, test) = split_ids(self.len(), fraction, seed)?;
        if train.is_empty() {
            return Err(Error::EmptyTrainSplit);
        }
        let rows: Vec<Vec<f64>> = train.iter().map(|&i| self.responses[i].clone()).collect();
        self.manifest.split = Some(SplitInfo {
            fraction,
            seed,
            train_count: train.len(),
            test_count: test.len(),
            response_stats: ResponseStats::from_rows(&rows),
        });
        self.manifest.write(&self.dir)?;
        Ok((train, test))
    }

    /// The recorded split, if any.
    pub fn split_ids(&self) -> Result<Option<(Vec<usize>, Vec<usize>)>> {
        match &self.manifest.split {
            Some(s) => split_ids(self.len(), s.fraction, s.seed).map(Some),
            None => Ok(None),
        }
    }

    /// Loads `ids` in the given order. With `standardize`, responses are
    /// shifted and scaled by the train statistics (requires a split).
    pub fn load_batch(&self, ids: &[usize], standardize: bool) -> Result<Batch> {
        let stats = if standardize {
            Some(
                self.manifest
                    .split
                    .as_ref()
                    .map(|s| &s.response_stats)
                    .ok_or_else(|| {
                        Error::Config("standardized responses need a recorded split".into())
                    })?,
            )
        } else {
            None
        };
        let mut images = Vec::with_capacity(ids.len() * FRAME_ROWS * FRAME_COLS);
        let mut responses = Vec::with_capacity(ids.len() * self.manifest.grid.len());
        for &id in ids {
            images.extend(self.image(id)?.to_f64());
            let mut row = self.responses[id].clone();
            if let Some(s) = stats {
                s.standardize(&mut row);
            }
            responses.extend(row);
        }
        Ok(Batch {
            ids: ids.to_vec(),
            images,
            responses,
        })
    }
}

fn read_params(path: &Path) -> Result<Vec<VarGeometry>> {
    let f = BufReader::new(File::open(path).at(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line.at(path)?;
        if n == 0 {
            if line.trim() != PARAMS_HEADER {
                return Err(Error::Format(format!("unexpected params header `{line}`")));
            }
            continue;
        }
        let bad = || Error::Format(format!("{}:{}: malformed row", path.display(), n + 1));
        let (id, rest) = line.split_once(',').ok_or_else(bad)?;
        if id.parse::<usize>().map_err(|_| bad())? != out.len() {
            return Err(bad());
        }
        out.push(VarGeometry::parse_list(rest).map_err(|_| bad())?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::resonance_frequency;

    fn files_of(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for name in [MANIFEST_FILE, PARAMS_FILE, RESPONSES_FILE] {
            out.push((name.to_string(), fs::read(dir.join(name)).unwrap()));
        }
        let mut imgs: Vec<_> = fs::read_dir(dir.join(IMAGES_DIR))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        imgs.sort();
        for p in imgs {
            out.push((p.display().to_string(), fs::read(&p).unwrap()));
        }
        out
    }

    #[test]
    fn generation_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = AirMedium::default();
        generate(&SamplerConfig::new(1, 100), &m, a.path()).unwrap();
        generate(&SamplerConfig::new(1, 100), &m, b.path()).unwrap();
        let (fa, fb) = (files_of(a.path()), files_of(b.path()));
        assert_eq!(fa.len(), 103);
        for ((_, x), (_, y)) in fa.iter().zip(&fb) {
            assert_eq!(x, y);
        }
        assert!(!a.path().join(INCOMPLETE_MARKER).exists());
    }

    #[test]
    fn split_sizes() {
        assert_eq!(train_size(10, 0.7), 7);
        assert_eq!(train_size(53_350, 0.7), 37_345);
        assert_eq!(53_350 - train_size(53_350, 0.7), 16_005);
        let (tr, te) = split_ids(10, 0.7, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        let mut all: Vec<_> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_ids(10, 0.7, 4).unwrap(), (tr, te));
        assert!(split_ids(10, 1.0, 4).is_err());
    }

    #[test]
    fn round_trip_and_standardization() {
        let dir = tempfile::tempdir().unwrap();
        let m = AirMedium::default();
        generate(&SamplerConfig::new(2, 60), &m, dir.path()).unwrap();
        let mut ds = Dataset::open(dir.path()).unwrap();
        let (train, _) = ds.split(0.7, 9).unwrap();

        // stored responses equal recomputation through the same path
        for id in 0..ds.len() {
            let s = Sample::compute(id, ds.geometries[id], &m).unwrap();
            let stored: Vec<f32> = ds.responses[id].iter().map(|v| *v as f32).collect();
            let fresh: Vec<f32> = s.response.values.iter().map(|v| *v as f32).collect();
            assert_eq!(stored, fresh);
            assert_eq!(ds.image(id).unwrap(), s.image);
        }

        // re-saving loaded samples reproduces the data files
        let copy = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::create(copy.path()).unwrap();
        for id in 0..ds.len() {
            w.push(&ds.sample(id).unwrap()).unwrap();
        }
        w.finish(ds.manifest.clone()).unwrap();
        let (fa, fb) = (files_of(dir.path()), files_of(copy.path()));
        for ((_, x), (_, y)) in fa.iter().zip(&fb).skip(1) {
            assert_eq!(x, y);
        }

        let batch = ds.load_batch(&train, true).unwrap();
        let bins = ds.manifest.grid.len();
        for b in 0..bins {
            let col: Vec<f64> = (0..train.len()).map(|i| batch.responses[i * bins + b]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() <= 1e-6, "bin {b} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() <= 1e-6, "bin {b} std {}", var.sqrt());
        }
        assert!(batch.images.iter().all(|v| *v == 0.0 || *v == 1.0));

        let empty = ds.load_batch(&[], false).unwrap();
        assert!(empty.is_empty());
        assert!(matches!(ds.load_batch(&[60], false), Err(Error::MissingId(60))));
    }

    #[test]
    fn missing_manifest_is_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        let w = DatasetWriter::create(dir.path()).unwrap();
        drop(w);
        assert!(matches!(
            Dataset::open(dir.path()),
            Err(Error::IncompleteDataset(_))
        ));
    }

    /// Every sample whose closed-form resonance lies on the grid shows a
    /// clear peak; the rest resonate above 1961 Hz and only show the
    /// rising tail.
    #[test]
    fn in_band_resonators_peak_clearly() {
        let m = AirMedium::default();
        let cfg = SamplerConfig::new(1, 4000);
        let geoms = crate::geometry::sample_geometries(&cfg).unwrap();
        let grid = FrequencyGrid::standard();
        let (mut in_band, mut clear) = (0, 0);
        for g in &geoms {
            let stl = unit_stl(g, &m, &grid).unwrap();
            assert!(stl.values.iter().all(|v| *v >= -1e-9));
            if resonance_frequency(g, &m, 1.0, 1961.0, 5.0).unwrap().is_some() {
                in_band += 1;
                if stl.peak_value() >= 5.0 {
                    clear += 1;
                }
            }
        }
        assert!(in_band >= 1000, "{in_band}");
        assert!(clear as f64 >= 0.95 * in_band as f64, "{clear}/{in_band}");
    }
}
