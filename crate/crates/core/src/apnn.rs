//! Dense regression baseline: STL curve to the five geometric parameters.
//!
//! Targets are min-max normalized per parameter over the design-space
//! envelope; predictions are de-normalized and clamped into the
//! admissible region, so every prediction is a valid geometry.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ResponseStats};
use crate::error::{Error, IoContext, Result};
use crate::fmtutil::fmt_sig;
use crate::geometry::{Bounds, VarGeometry};
use crate::nn::{checkpoint, AdamConfig, AdamState, Graph, LayerSpec, NetSpec, Network, Scalar, Tensor};

pub const CHECKPOINT_FILE: &str = "apnn.ckpt";
pub const LOSS_CSV: &str = "losses.csv";
const INPUTS: usize = 50;
const OUTPUTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApnnConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Per-parameter normalization ranges in `R, l_a, l_b, R_n, R_c` order.
    pub ranges: [(f64, f64); 5],
    pub standardize: bool,
}

impl Default for ApnnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 128],
            batch_size: 512,
            lr: 1e-5,
            epochs: 500,
            seed: 0,
            ranges: Bounds::default().envelope(),
            standardize: true,
        }
    }
}

impl ApnnConfig {
    /// Desk-scale settings: a few thousand samples make only a handful of
    /// steps per epoch at batch 512, so the step size is raised.
    pub fn desk(seed: u64) -> Self {
        Self {
            lr: 1e-3,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.hidden.is_empty()
            && self.hidden.iter().all(|h| *h > 0)
            && self.batch_size > 0
            && self.lr > 0.0
            && self.epochs > 0
            && self.ranges.iter().all(|(lo, hi)| hi > lo);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid APNN config {self:?}")))
        }
    }

    pub fn net_spec(&self) -> NetSpec {
        let mut layers = Vec::new();
        let mut width = INPUTS;
        for &h in &self.hidden {
            layers.push(LayerSpec::Dense {
                inputs: width,
                outputs: h,
            });
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::Dense {
            inputs: width,
            outputs: OUTPUTS,
        });
        NetSpec {
            name: "apnn".into(),
            input: vec![INPUTS],
            layers,
        }
    }
}

/// Maps a geometry to normalized network targets.
pub fn normalize(g: &VarGeometry, ranges: &[(f64, f64); 5]) -> [f64; 5] {
    let a = g.to_array();
    std::array::from_fn(|i| (a[i] - ranges[i].0) / (ranges[i].1 - ranges[i].0))
}

pub fn denormalize(v: &[f64], ranges: &[(f64, f64); 5]) -> VarGeometry {
    VarGeometry::from_array(std::array::from_fn(|i| ranges[i].0 + v[i] * (ranges[i].1 - ranges[i].0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Apnn<T> {
    pub net: Network<T>,
    pub ranges: [(f64, f64); 5],
    pub bounds: Bounds,
    pub response_stats: Option<ResponseStats>,
}

impl<T: Scalar> Apnn<T> {
    pub fn init(cfg: &ApnnConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            net: Network::init(cfg.net_spec(), cfg.seed)?,
            ranges: cfg.ranges,
            bounds: Bounds::default(),
            response_stats: None,
        })
    }

    pub fn zeros(cfg: &ApnnConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            net: Network::zeros(cfg.net_spec())?,
            ranges: cfg.ranges,
            bounds: Bounds::default(),
            response_stats: None,
        })
    }

    /// Raw normalized network outputs for a raw STL curve.
    pub fn predict_normalized(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let mut y = raw.to_vec();
        if let Some(s) = &self.response_stats {
            s.standardize(&mut y);
        }
        Ok(self.net.predict(Tensor::from_f64(vec![1, INPUTS], &y)?)?.to_f64())
    }

    /// Predicted geometry, always inside the admissible region.
    pub fn predict_parameters(&self, raw: &[f64]) -> Result<VarGeometry> {
        let out = self.predict_normalized(raw)?;
        Ok(self.bounds.clamp(&denormalize(&out, &self.ranges)))
    }

    pub fn save(&self, path: &Path, seed: u64, step: u64, cfg: Option<&ApnnConfig>) -> Result<()> {
        let meta = serde_json::json!({
            "model": "apnn",
            "ranges": self.ranges,
            "bounds": self.bounds,
            "response_stats": self.response_stats,
            "train_config": cfg,
        });
        checkpoint::save(path, &[&self.net], seed, step, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, mut nets) = checkpoint::load::<T>(path)?;
        if header.meta.get("model").and_then(|m| m.as_str()) != Some("apnn") || nets.len() != 1 {
            return Err(Error::Format(format!("{} is not an APNN checkpoint", path.display())));
        }
        Ok(Self {
            net: nets.remove(0),
            ranges: serde_json::from_value(header.meta["ranges"].clone())?,
            bounds: serde_json::from_value(header.meta["bounds"].clone())?,
            response_stats: serde_json::from_value(header.meta["response_stats"].clone())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApnnReport {
    /// Epoch-mean training MSE (normalized units), one per epoch.
    pub losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Trains on `(inputs, targets)` pairs already in network units.
pub fn train_on<T: Scalar>(
    model: &mut Apnn<T>,
    inputs: &[Vec<f64>],
    targets: &[[f64; 5]],
    cfg: &ApnnConfig,
    out_dir: &Path,
) -> Result<(Apnn<T>, ApnnReport)> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let csv_path = out_dir.join(LOSS_CSV);
    let mut csv = BufWriter::new(File::create(&csv_path).at(&csv_path)?);
    writeln!(csv, "epoch,mse").at(&csv_path)?;
    let names = model.net.param_names();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), model.net.params.iter());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Apnn<T>)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x: Vec<T> = chunk
                .iter()
                .flat_map(|&i| inputs[i].iter().map(|v| T::of(*v)))
                .collect();
            let t: Vec<T> = chunk
                .iter()
                .flat_map(|&i| targets[i].iter().map(|v| T::of(*v)))
                .collect();
            let mut g = Graph::new();
            let xv = g.input(Tensor::new(vec![chunk.len(), INPUTS], x)?);
            let tv = g.input(Tensor::new(vec![chunk.len(), OUTPUTS], t)?);
            let (out, vars) = model.net.forward(&mut g, xv, true)?;
            let d = g.sq_dist(out, tv)?;
            let mse = g.scale(d, 1.0 / OUTPUTS as f64);
            let value = g.value(mse).data[0].f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(format!("epoch {epoch}: mse {value}")));
            }
            g.backward(mse)?;
            let grads = model.net.grads(&g, &vars);
            drop(g);
            let mut params: Vec<&mut Tensor<T>> = model.net.params.iter_mut().collect();
            adam.update(&mut params, &grads, &names)?;
            sum += value * chunk.len() as f64;
        }
        let loss = sum / inputs.len() as f64;
        writeln!(csv, "{epoch},{}", fmt_sig(loss, 9)).at(&csv_path)?;
        log::debug!("apnn epoch {epoch}: mse {loss:.6}");
        if best.as_ref().map_or(true, |(b, _, _)| loss < *b) {
            model.save(&out_dir.join(CHECKPOINT_FILE), cfg.seed, adam.step, Some(cfg))?;
            best = Some((loss, epoch, model.clone()));
        }
        losses.push(loss);
    }
    csv.flush().at(&csv_path)?;
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok((best_model, ApnnReport { losses, best_epoch }))
}

/// Trains on the recorded train split of `ds`, writing `losses.csv` and
/// `apnn.ckpt` (best epoch) into `out_dir`.
pub fn train_apnn<T: Scalar>(ds: &Dataset, cfg: &ApnnConfig, out_dir: &Path) -> Result<(Apnn<T>, ApnnReport)> {
    cfg.validate()?;
    let split = ds
        .manifest
        .split
        .clone()
        .ok_or_else(|| Error::Config("dataset has no recorded split; run `dataset split`".into()))?;
    let (train_ids, _) = ds.split_ids()?.expect("split recorded");
    let stats = cfg.standardize.then_some(split.response_stats);
    let inputs: Vec<Vec<f64>> = train_ids
        .iter()
        .map(|&id| {
            let mut y = ds.responses[id].clone();
            if let Some(s) = &stats {
                s.standardize(&mut y);
            }
            y
        })
        .collect();
    let targets: Vec<[f64; 5]> = train_ids
        .iter()
        .map(|&id| normalize(&ds.geometries[id], &cfg.ranges))
        .collect();
    let mut model = Apnn::<T>::init(cfg)?;
    model.response_stats = stats;
    train_on(&mut model, &inputs, &targets, cfg, out_dir)
}
