//! Small reverse-mode autodiff library: tensors, a recording graph,
//! convolutional and dense layers, Adam and a checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{ConvGeom, Graph, Var};
pub use layers::{LayerSpec, NetSpec, Network};
pub use tensor::{gemm, Mat, Scalar, Tensor};

/// Central finite-difference gradient check. `build` records a scalar
/// loss from the given leaves; the return value is the largest relative
/// error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` over the leaves.
pub fn gradient_check(
    leaves: &[Tensor<f64>],
    h: f64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>,
) -> crate::Result<f64> {
    let eval = |ls: &[Tensor<f64>]| -> crate::Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ls.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let mut worst = 0.0f64;
    let mut probe = leaves.to_vec();
    for (li, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; leaves[li].len()]);
        let mut numeric = vec![0.0; leaves[li].len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let x0 = probe[li].data[k];
            probe[li].data[k] = x0 + h;
            let up = eval(&probe)?;
            probe[li].data[k] = x0 - h;
            let down = eval(&probe)?;
            probe[li].data[k] = x0;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn rand_t(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        // keep values away from the ReLU kink
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    fn probe(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Checks a single-layer network for parameter and input gradients.
    fn check_layer(spec: LayerSpec, input: Vec<usize>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = NetSpec {
            name: "t".into(),
            input: input.clone(),
            layers: vec![spec.clone()],
        };
        let out = net.output_shape().unwrap();
        let proto = Network::<f64>::init(net.clone(), seed).unwrap();
        let mut leaves: Vec<Tensor<f64>> = proto
            .params
            .iter()
            .map(|p| rand_t(&mut rng, p.shape.clone()))
            .collect();
        let batch = 2;
        leaves.push(rand_t(
            &mut rng,
            std::iter::once(batch).chain(input).collect(),
        ));
        let r = probe(&mut rng, batch * out.iter().product::<usize>());
        let err = gradient_check(&leaves, H, |g, vars| {
            let (x, ps) = vars.split_last().unwrap();
            let y = proto.forward_with(g, *x, ps)?;
            g.dot_const(y, r.clone())
        })
        .unwrap();
        assert!(err <= TOL, "{spec:?}: relative error {err:e}");
    }

    #[test]
    fn dense_layer_gradients() {
        check_layer(LayerSpec::Dense { inputs: 5, outputs: 3 }, vec![5], 1);
    }

    #[test]
    fn activation_gradients() {
        check_layer(LayerSpec::LeakyRelu { slope: 0.1 }, vec![7], 2);
        check_layer(LayerSpec::Relu, vec![7], 3);
        check_layer(LayerSpec::Sigmoid, vec![3, 2, 2], 4);
        check_layer(LayerSpec::Reshape { shape: vec![2, 6] }, vec![3, 4], 5);
    }

    #[test]
    fn convolution_gradients() {
        check_layer(
            LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 4, stride: 2, padding: 1 },
            vec![2, 6, 4],
            6,
        );
        check_layer(
            LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1, padding: 1 },
            vec![1, 5, 3],
            7,
        );
        check_layer(
            LayerSpec::ConvTranspose2d { in_ch: 3, out_ch: 2, kernel: 4, stride: 2, padding: 1 },
            vec![3, 3, 2],
            8,
        );
        check_layer(
            LayerSpec::Conv1d { in_ch: 2, out_ch: 3, kernel: 3, stride: 2, padding: 1 },
            vec![2, 9],
            9,
        );
    }

    #[test]
    fn residual_gradients() {
        let body = vec![
            LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::Conv2d { in_ch: 3, out_ch: 3, kernel: 3, stride: 1, padding: 1 },
        ];
        check_layer(LayerSpec::Residual { in_ch: 2, out_ch: 3, body }, vec![2, 4, 3], 10);
        let same = vec![LayerSpec::Conv2d { in_ch: 2, out_ch: 2, kernel: 3, stride: 1, padding: 1 }];
        check_layer(LayerSpec::Residual { in_ch: 2, out_ch: 2, body: same }, vec![2, 3, 3], 11);
    }

    #[test]
    fn loss_and_latent_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mu = rand_t(&mut rng, vec![2, 4]);
        let lv = rand_t(&mut rng, vec![2, 4]);
        let other = rand_t(&mut rng, vec![2, 4]);
        let eps = probe(&mut rng, 8);
        let target: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let leaves = [mu, lv, other];
        let err = gradient_check(&leaves, H, |g, v| {
            let z = g.reparameterize(v[0], v[1], eps.clone())?;
            let cat = g.concat_cols(z, v[2])?;
            let right = g.slice_cols(cat, 3, 4)?;
            let bce = g.bce_logits(right, target.clone())?;
            let kl = g.kl_standard_normal(v[0], v[1])?;
            let d = g.sq_dist(z, v[2])?;
            let s = g.scale(d, 0.7);
            let a = g.add(bce, kl)?;
            g.add(a, s)
        })
        .unwrap();
        assert!(err <= TOL, "{err:e}");
    }

    #[test]
    fn identity_dense_and_scaling_conv() {
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let spec = NetSpec {
            name: "id".into(),
            input: vec![3],
            layers: vec![LayerSpec::Dense { inputs: 3, outputs: 3 }],
        };
        let net = Network::from_params(
            spec,
            vec![Tensor::new(vec![3, 3], eye).unwrap(), Tensor::zeros(vec![3])],
        )
        .unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(net.predict(x.clone()).unwrap(), x);

        let spec = NetSpec {
            name: "c".into(),
            input: vec![1, 3, 2],
            layers: vec![LayerSpec::Conv2d { in_ch: 1, out_ch: 1, kernel: 1, stride: 1, padding: 0 }],
        };
        let net = Network::from_params(
            spec,
            vec![Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(), Tensor::zeros(vec![1])],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = net.predict(x.clone()).unwrap();
        assert_eq!(y.data, x.data.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
    }

    #[test]
    fn transposed_conv_doubles_size() {
        for (h, w) in [(4, 2), (8, 4), (7, 5)] {
            let spec = NetSpec {
                name: "t".into(),
                input: vec![2, h, w],
                layers: vec![LayerSpec::ConvTranspose2d {
                    in_ch: 2,
                    out_ch: 1,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                }],
            };
            // (in − 1)·s − 2p + k with s = 2, p = 1, k = 4
            let expect = |n: usize| (n - 1) * 2 - 2 + 4;
            assert_eq!(spec.output_shape().unwrap(), vec![1, expect(h), expect(w)]);
            assert_eq!(expect(h), 2 * h);
            let net = Network::<f64>::init(spec, 1).unwrap();
            let y = net.predict(Tensor::zeros(vec![1, 2, h, w])).unwrap();
            assert_eq!(y.shape, vec![1, 1, 2 * h, 2 * w]);
        }
    }

    #[test]
    fn sum_gradient_is_ones_and_constants_get_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.param(Tensor::new(vec![1], vec![5.0]).unwrap());
        let c = g.input(Tensor::scalar(3.0));
        let s = g.sum(x);
        let _unused = g.scale(w, 2.0);
        let loss = g.add(s, c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
        assert!(g.grad(w).is_none());
        assert!(matches!(g.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let spec = NetSpec {
            name: "bad".into(),
            input: vec![4],
            layers: vec![
                LayerSpec::Dense { inputs: 4, outputs: 3 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 5, outputs: 2 },
            ],
        };
        match spec.output_shape() {
            Err(Error::ShapeMismatch { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("{other:?}"),
        }
        let ok = NetSpec {
            layers: spec.layers[..2].to_vec(),
            ..spec
        };
        let net = Network::<f64>::init(ok, 0).unwrap();
        assert!(matches!(
            net.predict(Tensor::zeros(vec![1, 5])),
            Err(Error::ShapeMismatch { layer: 0, .. })
        ));
    }

    /// The input gradient of a convolution is the transposed convolution
    /// of the output gradient with the same kernel.
    #[test]
    fn conv_and_transposed_conv_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let geom = ConvGeom::square(4, 2, 1);
        let (c, o, h, w) = (2, 3, 8, 6);
        let x = rand_t(&mut rng, vec![1, c, h, w]);
        let k = rand_t(&mut rng, vec![o, c, 4, 4]);
        let r = probe(&mut rng, o * 4 * 3);

        let mut g = Graph::<f64>::new();
        let xv = g.param(x);
        let kv = g.input(k.clone());
        let b = g.input(Tensor::zeros(vec![o]));
        let y = g.conv2d(xv, kv, b, geom).unwrap();
        assert_eq!(g.shape(y), &[1, o, 4, 3]);
        let loss = g.dot_const(y, r.clone()).unwrap();
        g.backward(loss).unwrap();
        let dx = g.grad(xv).unwrap().to_vec();

        let mut g2 = Graph::<f64>::new();
        let rv = g2.input(Tensor::new(vec![1, o, 4, 3], r).unwrap());
        let kv = g2.input(k);
        let b = g2.input(Tensor::zeros(vec![c]));
        let t = g2.conv_t2d(rv, kv, b, geom).unwrap();
        for (a, b) in dx.iter().zip(&g2.value(t).data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = NetSpec {
            name: "enc".into(),
            input: vec![1, 4, 4],
            layers: vec![
                LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 4, stride: 2, padding: 1 },
                LayerSpec::Reshape { shape: vec![8] },
                LayerSpec::Dense { inputs: 8, outputs: 3 },
            ],
        };
        let a = Network::<f32>::init(spec.clone(), 5).unwrap();
        let b = Network::<f32>::init(NetSpec { name: "dec".into(), ..spec }, 6).unwrap();
        let meta = serde_json::json!({"lr": 0.001});
        let bytes = checkpoint::encode(&[&a, &b], 5, 42, meta.clone()).unwrap();
        assert_eq!(&bytes[..13], b"ARVAE-CKPT-v1");
        assert!(bytes[13..32].iter().all(|v| *v == 0));
        let (h, nets) = checkpoint::decode::<f32>(&bytes).unwrap();
        assert_eq!((h.seed, h.step, h.meta), (5, 42, meta));
        assert_eq!(nets, vec![a, b]);
        assert!(checkpoint::decode::<f64>(&bytes).is_err());
        assert!(checkpoint::decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let spec = NetSpec {
            name: "n".into(),
            input: vec![6],
            layers: vec![LayerSpec::Dense { inputs: 6, outputs: 4 }],
        };
        let a = Network::<f64>::init(spec.clone(), 3).unwrap();
        assert_eq!(a, Network::<f64>::init(spec.clone(), 3).unwrap());
        assert_ne!(a, Network::<f64>::init(spec, 4).unwrap());
        let bound = 1.0f64;
        assert!(a.params[0].data.iter().all(|v| v.abs() <= bound));
        assert!(a.params[1].data.iter().all(|v| *v == 0.0));
    }
}
