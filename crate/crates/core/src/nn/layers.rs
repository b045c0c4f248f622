//! Serializable network descriptions and their parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{ConvGeom, Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Convolution along the last axis of an N×C×L input.
    Conv1d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Relu,
    Sigmoid,
    /// Per-item target shape; the batch axis is kept.
    Reshape {
        shape: Vec<usize>,
    },
    /// `body(x) + skip(x)`; the skip is the identity when channel counts
    /// agree and a 1×1 convolution otherwise. The body must preserve the
    /// spatial size.
    Residual {
        in_ch: usize,
        out_ch: usize,
        body: Vec<LayerSpec>,
    },
}

/// Parameter tensor shapes and fan-in used for initialization.
struct ParamShape {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    bias: bool,
}

impl LayerSpec {
    fn params(&self, prefix: &str, out: &mut Vec<ParamShape>) {
        let mut push = |suffix: &str, shape: Vec<usize>, fan_in: usize, bias: bool| {
            out.push(ParamShape {
                name: format!("{prefix}.{suffix}"),
                shape,
                fan_in,
                bias,
            })
        };
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                push("w", vec![outputs, inputs], inputs, false);
                push("b", vec![outputs], inputs, true);
            }
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                let fan = in_ch * kernel * kernel;
                push("w", vec![out_ch, in_ch, kernel, kernel], fan, false);
                push("b", vec![out_ch], fan, true);
            }
            LayerSpec::ConvTranspose2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => {
                // each output pixel sees about in_ch·(k/s)² taps
                let fan = (in_ch * kernel * kernel / (stride * stride)).max(1);
                push("w", vec![in_ch, out_ch, kernel, kernel], fan, false);
                push("b", vec![out_ch], fan, true);
            }
            LayerSpec::Conv1d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                let fan = in_ch * kernel;
                push("w", vec![out_ch, in_ch, 1, kernel], fan, false);
                push("b", vec![out_ch], fan, true);
            }
            LayerSpec::Residual {
                in_ch,
                out_ch,
                ref body,
            } => {
                for (i, l) in body.iter().enumerate() {
                    l.params(&format!("{prefix}.body{i}"), out);
                }
                if in_ch != out_ch {
                    out.push(ParamShape {
                        name: format!("{prefix}.skip.w"),
                        shape: vec![out_ch, in_ch, 1, 1],
                        fan_in: in_ch,
                        bias: false,
                    });
                    out.push(ParamShape {
                        name: format!("{prefix}.skip.b"),
                        shape: vec![out_ch],
                        fan_in: in_ch,
                        bias: true,
                    });
                }
            }
            LayerSpec::LeakyRelu { .. }
            | LayerSpec::Relu
            | LayerSpec::Sigmoid
            | LayerSpec::Reshape { .. } => {}
        }
    }

    /// Per-item output shape for a per-item input shape.
    fn out_shape(&self, s: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let conv = |s: &[usize], c: usize, o: usize, k: usize, st: usize, p: usize, t: bool| {
            if s.len() != 3 || s[0] != c {
                return Err(format!("expected {c}×H×W input, got {s:?}"));
            }
            let f = |v| {
                if t {
                    ConvGeom::conv_t_out(v, k, st, p)
                } else {
                    ConvGeom::conv_out(v, k, st, p)
                }
            };
            match (f(s[1]), f(s[2])) {
                (Some(h), Some(w)) if h > 0 && w > 0 => Ok(vec![o, h, w]),
                _ => Err(format!("kernel {k} does not fit {s:?}")),
            }
        };
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                if s != [*inputs] {
                    return Err(format!("expected [{inputs}] input, got {s:?}"));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => conv(s, *in_ch, *out_ch, *kernel, *stride, *padding, false),
            LayerSpec::ConvTranspose2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => conv(s, *in_ch, *out_ch, *kernel, *stride, *padding, true),
            LayerSpec::Conv1d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                if s.len() != 2 || s[0] != *in_ch {
                    return Err(format!("expected {in_ch}×L input, got {s:?}"));
                }
                let l = ConvGeom::conv_out(s[1], *kernel, *stride, *padding)
                    .filter(|l| *l > 0)
                    .ok_or_else(|| format!("kernel {kernel} does not fit {s:?}"))?;
                Ok(vec![*out_ch, l])
            }
            LayerSpec::LeakyRelu { .. } | LayerSpec::Relu | LayerSpec::Sigmoid => Ok(s.to_vec()),
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != s.iter().product::<usize>() {
                    return Err(format!("cannot reshape {s:?} to {shape:?}"));
                }
                Ok(shape.clone())
            }
            LayerSpec::Residual {
                in_ch,
                out_ch,
                body,
            } => {
                if s.len() != 3 || s[0] != *in_ch {
                    return Err(format!("expected {in_ch}×H×W input, got {s:?}"));
                }
                let mut cur = s.to_vec();
                for l in body {
                    cur = l.out_shape(&cur)?;
                }
                if cur != [*out_ch, s[1], s[2]] {
                    return Err(format!("residual body maps {s:?} to {cur:?}"));
                }
                Ok(cur)
            }
        }
    }
}

/// A sequential network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub name: String,
    /// Per-item input shape.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetSpec {
    /// Per-item output shape; fails with the index of the first layer
    /// whose input does not fit.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut cur = self.input.clone();
        for (i, l) in self.layers.iter().enumerate() {
            cur = l.out_shape(&cur).map_err(|detail| Error::ShapeMismatch {
                layer: i,
                detail: format!("{}: {detail}", self.name),
            })?;
        }
        Ok(cur)
    }

    fn param_shapes(&self) -> Vec<ParamShape> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&format!("{}.{i}", self.name), &mut out);
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.param_shapes().into_iter().map(|p| p.name).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }
}

/// Network description plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub spec: NetSpec,
    pub params: Vec<Tensor<T>>,
}

impl<T: Scalar> Network<T> {
    /// Kaiming-uniform weights (bound √(6/fan_in)) and zero biases.
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.output_shape()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|p| {
                let n: usize = p.shape.iter().product();
                let data = if p.bias {
                    vec![T::zero(); n]
                } else {
                    let bound = (6.0 / p.fan_in as f64).sqrt();
                    (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
                };
                Tensor { shape: p.shape, data }
            })
            .collect();
        Ok(Self { spec, params })
    }

    /// All weights and biases set to zero.
    pub fn zeros(spec: NetSpec) -> Result<Self> {
        spec.output_shape()?;
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|p| Tensor::zeros(p.shape))
            .collect();
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: NetSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = spec.param_shapes();
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s.shape != p.shape)
        {
            return Err(Error::Format(format!(
                "weights do not match network `{}`",
                spec.name
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.spec.param_names()
    }

    /// Records the forward pass of a batch on `g`. Weights become
    /// trainable leaves when `trainable` is set; their handles are
    /// returned in parameter order.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let batch = g.shape(x).first().copied().unwrap_or(0);
        let expect: Vec<usize> = std::iter::once(batch).chain(self.spec.input.iter().copied()).collect();
        if g.shape(x) != expect.as_slice() {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!(
                    "{}: input {:?}, expected {expect:?}",
                    self.spec.name,
                    g.shape(x)
                ),
            });
        }
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            vars.push(if trainable {
                g.param(p.clone())
            } else {
                g.input(p.clone())
            });
        }
        let y = self.forward_with(g, x, &vars)?;
        Ok((y, vars))
    }

    /// Forward pass using caller-provided parameter nodes, in parameter
    /// order. Their values must match the spec's shapes.
    pub fn forward_with(&self, g: &mut Graph<T>, x: Var, vars: &[Var]) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!(
                    "{}: {} parameter nodes for {} tensors",
                    self.spec.name,
                    vars.len(),
                    self.params.len()
                ),
            });
        }
        let batch = g.shape(x).first().copied().unwrap_or(0);
        let mut next = vars.iter().copied();
        let mut cur = x;
        for (i, l) in self.spec.layers.iter().enumerate() {
            cur = apply(g, l, cur, batch, &mut next).map_err(|e| match e {
                Error::ShapeMismatch { detail, .. } => Error::ShapeMismatch {
                    layer: i,
                    detail: format!("{}: {detail}", self.spec.name),
                },
                other => other,
            })?;
        }
        Ok(cur)
    }

    /// Gradients of `vars` after backward, zero-filled where none flowed.
    pub fn grads(&self, g: &Graph<T>, vars: &[Var]) -> Vec<Vec<T>> {
        vars.iter()
            .zip(&self.params)
            .map(|(v, p)| {
                g.grad(*v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); p.len()])
            })
            .collect()
    }

    /// Plain inference on a batch tensor.
    pub fn predict(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(input);
        let (y, _) = self.forward(&mut g, x, false)?;
        Ok(g.value(y).clone())
    }
}

fn apply<T: Scalar>(
    g: &mut Graph<T>,
    l: &LayerSpec,
    x: Var,
    batch: usize,
    params: &mut impl Iterator<Item = Var>,
) -> Result<Var> {
    let mut take = || params.next().expect("parameter count matches spec");
    match *l {
        LayerSpec::Dense { .. } => {
            let (w, b) = (take(), take());
            g.dense(x, w, b)
        }
        LayerSpec::Conv2d {
            stride, padding, kernel, ..
        } => {
            let (w, b) = (take(), take());
            g.conv2d(x, w, b, ConvGeom::square(kernel, stride, padding))
        }
        LayerSpec::ConvTranspose2d {
            stride, padding, kernel, ..
        } => {
            let (w, b) = (take(), take());
            g.conv_t2d(x, w, b, ConvGeom::square(kernel, stride, padding))
        }
        LayerSpec::Conv1d {
            stride, padding, kernel, ..
        } => {
            let (w, b) = (take(), take());
            let s = g.shape(x).to_vec();
            if s.len() != 3 {
                return Err(Error::ShapeMismatch {
                    layer: 0,
                    detail: format!("conv1d needs N×C×L input, got {s:?}"),
                });
            }
            let x4 = g.reshape(x, vec![s[0], s[1], 1, s[2]])?;
            let geom = ConvGeom {
                kh: 1,
                kw: kernel,
                sh: 1,
                sw: stride,
                ph: 0,
                pw: padding,
            };
            let y = g.conv2d(x4, w, b, geom)?;
            let ys = g.shape(y).to_vec();
            g.reshape(y, vec![ys[0], ys[1], ys[3]])
        }
        LayerSpec::LeakyRelu { slope } => Ok(g.leaky_relu(x, slope)),
        LayerSpec::Relu => Ok(g.leaky_relu(x, 0.0)),
        LayerSpec::Sigmoid => Ok(g.sigmoid(x)),
        LayerSpec::Reshape { ref shape } => {
            let full = std::iter::once(batch).chain(shape.iter().copied()).collect();
            g.reshape(x, full)
        }
        LayerSpec::Residual {
            in_ch,
            out_ch,
            ref body,
        } => {
            let mut cur = x;
            for inner in body {
                cur = apply(g, inner, cur, batch, params)?;
            }
            let skip = if in_ch != out_ch {
                let (w, b) = (
                    params.next().expect("skip weight"),
                    params.next().expect("skip bias"),
                );
                g.conv2d(x, w, b, ConvGeom::square(1, 1, 0))?
            } else {
                x
            };
            g.add(cur, skip)
        }
    }
}
