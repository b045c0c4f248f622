//! Response-conditioned variational autoencoder.
//!
//! Three networks share one latent layout:
//! - the image encoder maps a cross-section to 24 values, split into the
//!   mean and log-variance of an 8-dimensional Gaussian code `z_p` and an
//!   8-dimensional deterministic code `z_d`;
//! - the response encoder maps a 50-bin STL curve to an 8-dimensional code
//!   `z_r` that is trained to match `z_d`;
//! - the decoder maps `z_p ⊕ z_r` to per-pixel air probabilities.
//!
//! The training loss is `w_r·recon + w_k·kl + w_l·latent` with a
//! Bernoulli reconstruction term, the closed-form KL of `z_p` against
//! N(0, I), and `‖z_r − z_d‖²`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ResponseStats};
use crate::error::{Error, IoContext, Result};
use crate::fmtutil::fmt_sig;
use crate::nn::{checkpoint, AdamConfig, AdamState, Graph, NetSpec, Network, Scalar, Tensor, Var};
use crate::raster::{binarize, CrossSection};

pub const LATENT_DIM: usize = 8;
pub const ENCODER_OUTPUTS: usize = 3 * LATENT_DIM;
pub const RESPONSE_BINS: usize = 50;
pub const CHECKPOINT_FILE: &str = "arvae.ckpt";
pub const LOSS_CSV: &str = "losses.csv";
const DEFAULT_SPEC: &str = include_str!("../config/arvae.json");

/// Architectures of the three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArVaeSpec {
    pub encoder: NetSpec,
    pub response_encoder: NetSpec,
    pub decoder: NetSpec,
}

impl Default for ArVaeSpec {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_SPEC).expect("bundled network config parses")
    }
}

impl ArVaeSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    /// Image rows and columns.
    pub fn image_shape(&self) -> Result<(usize, usize)> {
        match self.encoder.input[..] {
            [1, r, c] => Ok((r, c)),
            _ => Err(Error::Config(format!(
                "encoder input must be 1×rows×cols, got {:?}",
                self.encoder.input
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = self.image_shape()?;
        let check = |net: &NetSpec, input: &[usize], output: &[usize]| -> Result<()> {
            let out = net.output_shape()?;
            if net.input != input || out != output {
                return Err(Error::Config(format!(
                    "network `{}` maps {:?} to {out:?}, expected {input:?} to {output:?}",
                    net.name, net.input
                )));
            }
            Ok(())
        };
        check(&self.encoder, &[1, rows, cols], &[ENCODER_OUTPUTS])?;
        check(&self.response_encoder, &[1, RESPONSE_BINS], &[LATENT_DIM])?;
        check(&self.decoder, &[2 * LATENT_DIM], &[1, rows, cols])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub kl: f64,
    pub latent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            kl: 1.0,
            latent: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub threshold: f64,
    /// Feed standardized responses to the response encoder.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-5,
            epochs: 200,
            seed: 0,
            weights: LossWeights::default(),
            threshold: 0.5,
            standardize: true,
        }
    }
}

impl TrainConfig {
    /// Settings for a few thousand samples and a few hundred epochs; the
    /// larger step size compensates for the short schedule.
    pub fn desk(seed: u64) -> Self {
        Self {
            lr: 1e-3,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        let ok = self.batch_size > 0
            && self.lr > 0.0
            && self.epochs > 0
            && w.recon >= 0.0
            && w.kl >= 0.0
            && w.latent >= 0.0
            && self.threshold > 0.0
            && self.threshold < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

/// Image encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z_d: Vec<f64>,
}

/// Loss values of one batch, batch-meaned.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub latent: f64,
}

/// Graph handles of a recorded loss.
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub latent: Var,
    /// Parameter leaves in [`ArVae::params`] order.
    pub params: Vec<Var>,
}

/// `mu + ε · exp(logvar / 2)` with ε ~ N(0, I) drawn from `seed`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mu.iter()
        .zip(logvar)
        .map(|(m, l)| {
            let e: f64 = rng.sample(StandardNormal);
            m + e * (l / 2.0).exp()
        })
        .collect()
}

/// The three networks plus the response standardization they expect.
#[derive(Debug, Clone, PartialEq)]
pub struct ArVae<T> {
    pub encoder: Network<T>,
    pub response_encoder: Network<T>,
    pub decoder: Network<T>,
    pub response_stats: Option<ResponseStats>,
}

impl<T: Scalar> ArVae<T> {
    pub fn init(spec: &ArVaeSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            encoder: Network::init(spec.encoder.clone(), seed)?,
            response_encoder: Network::init(spec.response_encoder.clone(), seed.wrapping_add(1))?,
            decoder: Network::init(spec.decoder.clone(), seed.wrapping_add(2))?,
            response_stats: None,
        })
    }

    pub fn zeros(spec: &ArVaeSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            encoder: Network::zeros(spec.encoder.clone())?,
            response_encoder: Network::zeros(spec.response_encoder.clone())?,
            decoder: Network::zeros(spec.decoder.clone())?,
            response_stats: None,
        })
    }

    pub fn spec(&self) -> ArVaeSpec {
        ArVaeSpec {
            encoder: self.encoder.spec.clone(),
            response_encoder: self.response_encoder.spec.clone(),
            decoder: self.decoder.spec.clone(),
        }
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.encoder.spec.input[1], self.encoder.spec.input[2])
    }

    fn nets(&self) -> [&Network<T>; 3] {
        [&self.encoder, &self.response_encoder, &self.decoder]
    }

    pub fn param_names(&self) -> Vec<String> {
        self.nets().iter().flat_map(|n| n.param_names()).collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.encoder
            .params
            .iter()
            .chain(&self.response_encoder.params)
            .chain(&self.decoder.params)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.encoder
            .params
            .iter_mut()
            .chain(self.response_encoder.params.iter_mut())
            .chain(self.decoder.params.iter_mut())
            .collect()
    }

    /// Encodes `n` images given as n×rows×cols values in [0, 1].
    pub fn encode_batch(&self, images: &[f64], n: usize) -> Result<Vec<Encoding>> {
        let (r, c) = self.image_shape();
        let out = self
            .encoder
            .predict(Tensor::from_f64(vec![n, 1, r, c], images)?)?
            .to_f64();
        Ok(out
            .chunks(ENCODER_OUTPUTS)
            .map(|row| Encoding {
                mu: row[..LATENT_DIM].to_vec(),
                logvar: row[LATENT_DIM..2 * LATENT_DIM].to_vec(),
                z_d: row[2 * LATENT_DIM..].to_vec(),
            })
            .collect())
    }

    pub fn encode(&self, image: &[f64]) -> Result<Encoding> {
        Ok(self.encode_batch(image, 1)?.remove(0))
    }

    /// Response code of network-ready (already standardized if the model
    /// expects it) responses, n×50.
    pub fn encode_response_batch(&self, responses: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self
            .response_encoder
            .predict(Tensor::from_f64(vec![n, 1, RESPONSE_BINS], responses)?)?
            .to_f64())
    }

    pub fn encode_response(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.encode_response_batch(y, 1)
    }

    /// Applies the stored standardization to a raw STL curve.
    pub fn prepare_response(&self, raw: &[f64]) -> Vec<f64> {
        let mut y = raw.to_vec();
        if let Some(s) = &self.response_stats {
            s.standardize(&mut y);
        }
        y
    }

    /// Response code of a raw STL curve in dB.
    pub fn condition(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.encode_response(&self.prepare_response(raw))
    }

    /// Decodes n×16 latent rows (`z_p ⊕ z_r`) to n×rows×cols
    /// probabilities.
    pub fn decode_batch(&self, z: &[f64], n: usize) -> Result<Vec<f64>> {
        let logits = self
            .decoder
            .predict(Tensor::from_f64(vec![n, 2 * LATENT_DIM], z)?)?;
        let mut g = Graph::new();
        let v = g.input(logits);
        let p = g.sigmoid(v);
        Ok(g.value(p).to_f64())
    }

    pub fn decode(&self, z_p: &[f64], z_r: &[f64]) -> Result<Vec<f64>> {
        if z_p.len() != LATENT_DIM || z_r.len() != LATENT_DIM {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!("decode needs 8 + 8 latents, got {} + {}", z_p.len(), z_r.len()),
            });
        }
        let z: Vec<f64> = z_p.iter().chain(z_r).copied().collect();
        self.decode_batch(&z, 1)
    }

    /// Records the loss of a batch on `g` with fresh trainable parameter
    /// leaves. `images` is n×rows×cols in {0, 1}, `responses` n×50
    /// network-ready, `eps` n×8 standard normal noise.
    pub fn loss_graph(
        &self,
        g: &mut Graph<T>,
        images: Tensor<T>,
        responses: Tensor<T>,
        eps: Vec<T>,
        w: &LossWeights,
    ) -> Result<LossVars> {
        let vars: Vec<Var> = self.params().map(|p| g.param(p.clone())).collect();
        self.loss_with(g, images, responses, eps, w, &vars)
    }

    /// Like [`ArVae::loss_graph`] with caller-provided parameter nodes in
    /// [`ArVae::params`] order.
    pub fn loss_with(
        &self,
        g: &mut Graph<T>,
        images: Tensor<T>,
        responses: Tensor<T>,
        eps: Vec<T>,
        w: &LossWeights,
        vars: &[Var],
    ) -> Result<LossVars> {
        let (ne, nr) = (self.encoder.params.len(), self.response_encoder.params.len());
        if vars.len() != ne + nr + self.decoder.params.len() {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!("{} parameter nodes for {} tensors", vars.len(), self.params().count()),
            });
        }
        let target = images.data.clone();
        let x = g.input(images);
        let y = g.input(responses);
        let h = self.encoder.forward_with(g, x, &vars[..ne])?;
        let mu = g.slice_cols(h, 0, LATENT_DIM)?;
        let logvar = g.slice_cols(h, LATENT_DIM, LATENT_DIM)?;
        let z_d = g.slice_cols(h, 2 * LATENT_DIM, LATENT_DIM)?;
        let z_r = self.response_encoder.forward_with(g, y, &vars[ne..ne + nr])?;
        let z_p = g.reparameterize(mu, logvar, eps)?;
        let z = g.concat_cols(z_p, z_r)?;
        let logits = self.decoder.forward_with(g, z, &vars[ne + nr..])?;
        let recon = g.bce_logits(logits, target)?;
        let kl = g.kl_standard_normal(mu, logvar)?;
        let latent = g.sq_dist(z_r, z_d)?;
        let a = g.scale(recon, w.recon);
        let b = g.scale(kl, w.kl);
        let c = g.scale(latent, w.latent);
        let ab = g.add(a, b)?;
        let total = g.add(ab, c)?;
        Ok(LossVars {
            total,
            recon,
            kl,
            latent,
            params: vars.to_vec(),
        })
    }

    /// Loss values without gradients.
    pub fn loss(&self, images: &[f64], responses: &[f64], eps: &[f64], w: &LossWeights) -> Result<LossParts> {
        let (r, c) = self.image_shape();
        let n = images.len() / (r * c);
        let mut g = Graph::new();
        let lv = self.loss_graph(
            &mut g,
            Tensor::from_f64(vec![n, 1, r, c], images)?,
            Tensor::from_f64(vec![n, 1, RESPONSE_BINS], responses)?,
            eps.iter().map(|v| T::of(*v)).collect(),
            w,
        )?;
        Ok(read_parts(&g, &lv))
    }

    pub fn save(&self, path: &Path, seed: u64, step: u64, train: Option<&TrainConfig>) -> Result<()> {
        let meta = serde_json::json!({
            "model": "arvae",
            "response_stats": self.response_stats,
            "train_config": train,
        });
        checkpoint::save(path, &self.nets(), seed, step, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, mut nets) = checkpoint::load::<T>(path)?;
        if header.meta.get("model").and_then(|m| m.as_str()) != Some("arvae") || nets.len() != 3 {
            return Err(Error::Format(format!("{} is not an AR-VAE checkpoint", path.display())));
        }
        let response_stats = serde_json::from_value(header.meta["response_stats"].clone())?;
        let decoder = nets.pop().expect("three nets");
        let response_encoder = nets.pop().expect("three nets");
        let encoder = nets.pop().expect("three nets");
        let model = Self {
            encoder,
            response_encoder,
            decoder,
            response_stats,
        };
        model.spec().validate()?;
        Ok(model)
    }
}

fn read_parts<T: Scalar>(g: &Graph<T>, lv: &LossVars) -> LossParts {
    let v = |x: Var| g.value(x).data[0].f64();
    LossParts {
        total: v(lv.total),
        recon: v(lv.recon),
        kl: v(lv.kl),
        latent: v(lv.latent),
    }
}

/// Images and responses held in memory for training.
pub struct TrainingSet {
    pub ids: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    /// Per sample rows×cols bytes in {0, 1}.
    pub pixels: Vec<Vec<u8>>,
    /// Per sample network-ready responses.
    pub responses: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn load(ds: &Dataset, ids: &[usize], stats: Option<&ResponseStats>) -> Result<Self> {
        let mut pixels = Vec::with_capacity(ids.len());
        let mut responses = Vec::with_capacity(ids.len());
        let (mut rows, mut cols) = (ds.manifest.image_rows, ds.manifest.image_cols);
        for &id in ids {
            let img = ds.image(id)?;
            rows = img.rows();
            cols = img.cols();
            pixels.push(img.pixels().to_vec());
            let mut y = ds.responses[id].clone();
            if let Some(s) = stats {
                s.standardize(&mut y);
            }
            responses.push(y);
        }
        Ok(Self {
            ids: ids.to_vec(),
            rows,
            cols,
            pixels,
            responses,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Image and response tensors for the given positions.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> (Tensor<T>, Tensor<T>) {
        let n = idx.len();
        let mut img = Vec::with_capacity(n * self.rows * self.cols);
        let mut resp = Vec::with_capacity(n * RESPONSE_BINS);
        for &i in idx {
            img.extend(self.pixels[i].iter().map(|p| if *p == 1 { T::one() } else { T::zero() }));
            resp.extend(self.responses[i].iter().map(|v| T::of(*v)));
        }
        (
            Tensor {
                shape: vec![n, 1, self.rows, self.cols],
                data: img,
            },
            Tensor {
                shape: vec![n, 1, RESPONSE_BINS],
                data: resp,
            },
        )
    }
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: LossParts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLoss>,
    pub best_epoch: usize,
}

fn csv_row(e: &EpochLoss) -> String {
    let l = e.loss;
    format!(
        "{},{},{},{},{}",
        e.epoch,
        fmt_sig(l.total, 9),
        fmt_sig(l.recon, 9),
        fmt_sig(l.kl, 9),
        fmt_sig(l.latent, 9)
    )
}

/// Trains on the recorded train split of `ds`, writing `losses.csv` and
/// the best-total-loss checkpoint `arvae.ckpt` into `out_dir`. Returns
/// the weights of the best epoch.
pub fn train_arvae<T: Scalar>(
    ds: &Dataset,
    cfg: &TrainConfig,
    spec: &ArVaeSpec,
    out_dir: &Path,
) -> Result<(ArVae<T>, TrainReport)> {
    cfg.validate()?;
    let split = ds
        .manifest
        .split
        .clone()
        .ok_or_else(|| Error::Config("dataset has no recorded split; run `dataset split`".into()))?;
    let (train_ids, _) = ds.split_ids()?.expect("split recorded");
    if train_ids.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    let stats = cfg.standardize.then_some(&split.response_stats);
    let data = TrainingSet::load(ds, &train_ids, stats)?;
    let mut model = ArVae::<T>::init(spec, cfg.seed)?;
    model.response_stats = stats.cloned();
    train_on(&mut model, &data, cfg, out_dir)
}

/// Training loop over an in-memory set; see [`train_arvae`].
pub fn train_on<T: Scalar>(
    model: &mut ArVae<T>,
    data: &TrainingSet,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(ArVae<T>, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let csv_path = out_dir.join(LOSS_CSV);
    let mut csv = BufWriter::new(File::create(&csv_path).at(&csv_path)?);
    writeln!(csv, "epoch,total,recon,kl,latent").at(&csv_path)?;
    let names = model.param_names();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ArVae<T>)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        for chunk in order.chunks(cfg.batch_size) {
            let (img, resp) = data.batch::<T>(chunk);
            let eps: Vec<T> = (0..chunk.len() * LATENT_DIM)
                .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let mut g = Graph::new();
            let lv = model.loss_graph(&mut g, img, resp, eps, &cfg.weights)?;
            let parts = read_parts(&g, &lv);
            if !parts.total.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "epoch {epoch}: total {} (recon {}, kl {}, latent {})",
                    parts.total, parts.recon, parts.kl, parts.latent
                )));
            }
            g.backward(lv.total)?;
            let grads: Vec<Vec<T>> = lv
                .params
                .iter()
                .zip(model.params())
                .map(|(v, p)| {
                    g.grad(*v)
                        .map(<[T]>::to_vec)
                        .unwrap_or_else(|| vec![T::zero(); p.len()])
                })
                .collect();
            drop(g);
            adam.update(&mut model.params_mut(), &grads, &names)?;
            let k = chunk.len() as f64;
            sum.total += parts.total * k;
            sum.recon += parts.recon * k;
            sum.kl += parts.kl * k;
            sum.latent += parts.latent * k;
        }
        let n = data.len() as f64;
        let e = EpochLoss {
            epoch,
            loss: LossParts {
                total: sum.total / n,
                recon: sum.recon / n,
                kl: sum.kl / n,
                latent: sum.latent / n,
            },
        };
        writeln!(csv, "{}", csv_row(&e)).at(&csv_path)?;
        csv.flush().at(&csv_path)?;
        log::info!(
            "epoch {epoch}: total {:.4} recon {:.4} kl {:.4} latent {:.5}",
            e.loss.total,
            e.loss.recon,
            e.loss.kl,
            e.loss.latent
        );
        if best.as_ref().map_or(true, |(b, _, _)| e.loss.total < *b) {
            model.save(&out_dir.join(CHECKPOINT_FILE), cfg.seed, adam.step, Some(cfg))?;
            best = Some((e.loss.total, epoch, model.clone()));
        }
        epochs.push(e);
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok((best_model, TrainReport { epochs, best_epoch }))
}

/// Decodes `n` images for a target STL curve (raw dB) with `z_p` drawn
/// uniformly from [−1, 1]⁸ and binarizes them.
pub fn generate_candidates<T: Scalar>(
    model: &ArVae<T>,
    target: &[f64],
    n: usize,
    seed: u64,
    threshold: f64,
) -> Result<Vec<CrossSection>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let z_r = model.condition(target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Vec::with_capacity(n * 2 * LATENT_DIM);
    for _ in 0..n {
        z.extend((0..LATENT_DIM).map(|_| rng.gen_range(-1.0..=1.0)));
        z.extend_from_slice(&z_r);
    }
    let (rows, cols) = model.image_shape();
    let soft = model.decode_batch(&z, n)?;
    Ok(soft
        .chunks(rows * cols)
        .map(|p| binarize(p, rows, cols, threshold))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradient_check;

    fn small_spec() -> ArVaeSpec {
        serde_json::from_value(serde_json::json!({
            "encoder": {"name": "enc", "input": [1, 8, 4], "layers": [
                {"kind": "conv2d", "in_ch": 1, "out_ch": 2, "kernel": 4, "stride": 2, "padding": 1},
                {"kind": "leaky_relu", "slope": 0.2},
                {"kind": "residual", "in_ch": 2, "out_ch": 3, "body": [
                    {"kind": "conv2d", "in_ch": 2, "out_ch": 3, "kernel": 3, "stride": 1, "padding": 1}
                ]},
                {"kind": "reshape", "shape": [24]},
                {"kind": "dense", "inputs": 24, "outputs": 24}
            ]},
            "response_encoder": {"name": "resp", "input": [1, 50], "layers": [
                {"kind": "conv1d", "in_ch": 1, "out_ch": 2, "kernel": 4, "stride": 2, "padding": 1},
                {"kind": "leaky_relu", "slope": 0.2},
                {"kind": "reshape", "shape": [50]},
                {"kind": "dense", "inputs": 50, "outputs": 8}
            ]},
            "decoder": {"name": "dec", "input": [16], "layers": [
                {"kind": "dense", "inputs": 16, "outputs": 4},
                {"kind": "leaky_relu", "slope": 0.2},
                {"kind": "reshape", "shape": [2, 2, 1]},
                {"kind": "conv_transpose2d", "in_ch": 2, "out_ch": 1, "kernel": 4, "stride": 2, "padding": 1},
                {"kind": "conv_transpose2d", "in_ch": 1, "out_ch": 1, "kernel": 4, "stride": 2, "padding": 1}
            ]}
        }))
        .unwrap()
    }

    #[test]
    fn default_spec_shapes() {
        let spec = ArVaeSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.image_shape().unwrap(), (128, 64));
        let m = ArVae::<f32>::init(&spec, 1).unwrap();
        let img = crate::raster::rasterize(&crate::geometry::VarGeometry::new(8.0, 12.0, 4.0, 20.0, 35.0))
            .unwrap()
            .to_f64();
        let e = m.encode(&img).unwrap();
        assert_eq!((e.mu.len(), e.logvar.len(), e.z_d.len()), (8, 8, 8));
        assert_eq!(e, m.encode(&img).unwrap());
        let zr = m.encode_response(&[0.0; 50]).unwrap();
        assert_eq!(zr.len(), 8);
        let out = m.decode(&e.mu, &zr).unwrap();
        assert_eq!(out.len(), 128 * 64);
        assert!(out.iter().all(|p| *p > 0.0 && *p < 1.0));
        assert_eq!(out, m.decode(&e.mu, &zr).unwrap());
    }

    #[test]
    fn zero_networks() {
        let spec = ArVaeSpec::default();
        let m = ArVae::<f64>::zeros(&spec).unwrap();
        let img = vec![1.0; 128 * 64];
        let e = m.encode(&img).unwrap();
        assert!(e.mu.iter().chain(&e.logvar).chain(&e.z_d).all(|v| *v == 0.0));
        assert!(m.encode_response(&[3.0; 50]).unwrap().iter().all(|v| *v == 0.0));
        // zero logits: p = ½ everywhere, so recon = rows·cols·ln 2 for any
        // binary target
        let x: Vec<f64> = (0..128 * 64).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let parts = m.loss(&x, &[0.5; 50], &[0.3; 8], &LossWeights::default()).unwrap();
        let expect = 128.0 * 64.0 * std::f64::consts::LN_2;
        assert!((parts.recon - expect).abs() < 1e-9 * expect);
        assert_eq!(parts.kl, 0.0);
        assert_eq!(parts.latent, 0.0);
    }

    #[test]
    fn collapsed_variance_returns_mean() {
        let mu = [0.3, -1.2, 4.0, 0.0, 1.0, 2.0, -3.0, 0.5];
        let z = reparameterize(&mu, &[-50.0; 8], 4);
        for (a, b) in z.iter().zip(&mu) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(reparameterize(&mu, &[0.0; 8], 9), reparameterize(&mu, &[0.0; 8], 9));
    }

    #[test]
    fn standard_draws_have_unit_moments() {
        let n = 100_000;
        let mut sums = [0.0f64; 8];
        let mut sq = [0.0f64; 8];
        for s in 0..n {
            let z = reparameterize(&[0.0; 8], &[0.0; 8], s as u64);
            for d in 0..8 {
                sums[d] += z[d];
                sq[d] += z[d] * z[d];
            }
        }
        for d in 0..8 {
            let m = sums[d] / n as f64;
            let v = sq[d] / n as f64 - m * m;
            assert!(m.abs() <= 0.02, "dim {d} mean {m}");
            assert!((0.97..=1.03).contains(&v), "dim {d} var {v}");
        }
    }

    /// Closed-form KL against a Monte-Carlo estimate of E_q[log q − log p].
    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lv: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let closed: f64 = mu
            .iter()
            .zip(&lv)
            .map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l))
            .sum();
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for (m, l) in mu.iter().zip(&lv) {
                let e: f64 = rng.sample(StandardNormal);
                let z = m + e * (l / 2.0).exp();
                // log q(z) − log p(z), constants cancel
                acc += -0.5 * l - 0.5 * e * e + 0.5 * z * z;
            }
        }
        let mc = acc / n as f64;
        assert!((mc - closed).abs() <= 0.02 * closed, "{mc} vs {closed}");
    }

    #[test]
    fn latent_term_vanishes_when_codes_agree() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::new(vec![2, 8], (0..16).map(|v| v as f64).collect()).unwrap());
        let b = g.input(Tensor::new(vec![2, 8], (0..16).map(|v| v as f64).collect()).unwrap());
        let d = g.sq_dist(a, b).unwrap();
        assert_eq!(g.value(d).data[0], 0.0);
    }

    #[test]
    fn end_to_end_loss_gradient() {
        let spec = small_spec();
        spec.validate().unwrap();
        let proto = ArVae::<f64>::init(&spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let images: Vec<f64> = (0..2 * 32).map(|_| rng.gen_range(0..2) as f64).collect();
        let resp: Vec<f64> = (0..2 * 50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
        let leaves: Vec<Tensor<f64>> = proto.params().cloned().collect();
        let counts = [
            proto.encoder.params.len(),
            proto.response_encoder.params.len(),
        ];
        let w = LossWeights { recon: 1.0, kl: 0.7, latent: 1.3 };
        let err = gradient_check(&leaves, 1e-5, |g, vars| {
            let x = g.input(Tensor::new(vec![2, 1, 8, 4], images.clone())?);
            let y = g.input(Tensor::new(vec![2, 1, 50], resp.clone())?);
            let (pe, rest) = vars.split_at(counts[0]);
            let (pr, pd) = rest.split_at(counts[1]);
            let h = proto.encoder.forward_with(g, x, pe)?;
            let mu = g.slice_cols(h, 0, 8)?;
            let lv = g.slice_cols(h, 8, 8)?;
            let zd = g.slice_cols(h, 16, 8)?;
            let zr = proto.response_encoder.forward_with(g, y, pr)?;
            let zp = g.reparameterize(mu, lv, eps.clone())?;
            let z = g.concat_cols(zp, zr)?;
            let logits = proto.decoder.forward_with(g, z, pd)?;
            let recon = g.bce_logits(logits, images.clone())?;
            let kl = g.kl_standard_normal(mu, lv)?;
            let lat = g.sq_dist(zr, zd)?;
            let a = g.scale(recon, w.recon);
            let b = g.scale(kl, w.kl);
            let c = g.scale(lat, w.latent);
            let ab = g.add(a, b)?;
            g.add(ab, c)
        })
        .unwrap();
        assert!(err <= 1e-3, "{err:e}");

        // the production loss graph has the same gradients
        let err = gradient_check(&leaves, 1e-5, |g, vars| {
            let lv = proto.loss_with(
                g,
                Tensor::new(vec![2, 1, 8, 4], images.clone())?,
                Tensor::new(vec![2, 1, 50], resp.clone())?,
                eps.clone(),
                &w,
                vars,
            )?;
            Ok(lv.total)
        })
        .unwrap();
        assert!(err <= 1e-3, "{err:e}");

        // the production loss graph agrees with the hand-built one
        let mut g = Graph::new();
        let lv = proto
            .loss_graph(
                &mut g,
                Tensor::new(vec![2, 1, 8, 4], images.clone()).unwrap(),
                Tensor::new(vec![2, 1, 50], resp.clone()).unwrap(),
                eps.clone(),
                &w,
            )
            .unwrap();
        let parts = read_parts(&g, &lv);
        let direct = parts.recon * w.recon + parts.kl * w.kl + parts.latent * w.latent;
        assert!((parts.total - direct).abs() < 1e-12);
    }

    #[test]
    fn candidates_are_reproducible_and_keep_channel() {
        let m = ArVae::<f32>::init(&ArVaeSpec::default(), 2).unwrap();
        let y: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        assert!(generate_candidates(&m, &y, 0, 1, 0.5).unwrap().is_empty());
        let a = generate_candidates(&m, &y, 5, 1, 0.5).unwrap();
        let b = generate_candidates(&m, &y, 5, 1, 0.5).unwrap();
        assert_eq!(a, b);
        for img in &a {
            assert!(img.channel_rows() >= crate::raster::MIN_CHANNEL_ROWS);
        }
    }

    #[test]
    fn short_training_is_deterministic_and_checkpoints() {
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 12;
        let data = TrainingSet {
            ids: (0..n).collect(),
            rows: 8,
            cols: 4,
            pixels: (0..n).map(|_| (0..32).map(|_| rng.gen_range(0..2)).collect()).collect(),
            responses: (0..n)
                .map(|_| (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        };
        let cfg = TrainConfig {
            batch_size: 5,
            epochs: 4,
            ..TrainConfig::desk(7)
        };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut m1 = ArVae::<f64>::init(&spec, 7).unwrap();
        let mut m2 = m1.clone();
        let (best1, r1) = train_on(&mut m1, &data, &cfg, d1.path()).unwrap();
        let (_, r2) = train_on(&mut m2, &data, &cfg, d2.path()).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        let csv = std::fs::read(d1.path().join(LOSS_CSV)).unwrap();
        assert_eq!(csv, std::fs::read(d2.path().join(LOSS_CSV)).unwrap());
        assert_eq!(
            String::from_utf8(csv).unwrap().lines().next(),
            Some("epoch,total,recon,kl,latent")
        );
        let loaded = ArVae::<f64>::load(&d1.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(loaded, best1);
        assert!(r1.epochs.last().unwrap().loss.total < r1.epochs[0].loss.total);
    }
}
