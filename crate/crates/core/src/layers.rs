//! Convolution, batch normalisation and bottleneck residual units over
//! `(N, C, H, W, D)` values.

use maprotonet_tensor::{conv3d, Array, Conv3dSpec, Var};
use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::params::{ParamStore, Session, StatUpdate};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// He-normal convolution weight `(cout, cin, k, k, k)` plus optional zero bias.
pub fn init_conv<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    cout: usize,
    cin: usize,
    kernel: usize,
    bias: bool,
) {
    let fan_in = (cin * kernel * kernel * kernel) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
    let w = Array::from_shape_simple_fn(IxDyn(&[cout, cin, kernel, kernel, kernel]), || normal.sample(rng));
    store.insert(format!("{name}.weight"), w);
    if bias {
        store.insert(format!("{name}.bias"), Array::zeros(IxDyn(&[cout])));
    }
}

/// Applies the convolution registered under `name`; a bias is used when
/// one was registered.
pub fn conv<'a>(sess: &Session<'a>, name: &str, x: Var<'a>, spec: Conv3dSpec) -> Var<'a> {
    let w = sess.param(&format!("{name}.weight"));
    let bias_name = format!("{name}.bias");
    let b = sess.store().get(&bias_name).map(|_| sess.param(&bias_name));
    conv3d(x, w, b, spec)
}

/// Identity-affine normalisation with zero running mean and unit running variance.
pub fn init_bn(store: &mut ParamStore, name: &str, channels: usize) {
    store.insert(format!("{name}.weight"), Array::ones(IxDyn(&[channels])));
    store.insert(format!("{name}.bias"), Array::zeros(IxDyn(&[channels])));
    store.insert_buffer(format!("{name}.running_mean"), Array::zeros(IxDyn(&[channels])));
    store.insert_buffer(format!("{name}.running_var"), Array::ones(IxDyn(&[channels])));
}

/// Per-channel batch normalisation. Training mode normalises with batch
/// statistics (biased variance) and records running-statistic updates
/// (unbiased variance); evaluation mode uses the running statistics.
pub fn batch_norm<'a>(sess: &Session<'a>, name: &str, x: Var<'a>) -> Var<'a> {
    let gamma = sess.param(&format!("{name}.weight"));
    let beta = sess.param(&format!("{name}.bias"));
    let xv = x.value();
    let shape = xv.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let m = n * inner;
    let xs = xv.as_slice().expect("standard layout");
    let (g, b) = (gamma.value(), beta.value());
    let (gs, bs) = (g.as_slice().unwrap().to_vec(), b.as_slice().unwrap().to_vec());

    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let train = sess.is_training();
    if train {
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..n {
                let off = (i * c + ch) * inner;
                acc += xs[off..off + inner].iter().sum::<f64>();
            }
            mean[ch] = acc / m as f64;
            let mut sq = 0.0;
            for i in 0..n {
                let off = (i * c + ch) * inner;
                sq += xs[off..off + inner].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
            var[ch] = sq / m as f64;
        }
        let unbiased = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
        sess.record_stats(StatUpdate {
            prefix: name.to_string(),
            mean: Array::from_shape_vec(IxDyn(&[c]), mean.clone()).unwrap(),
            var: Array::from_shape_vec(IxDyn(&[c]), var.iter().map(|v| v * unbiased).collect()).unwrap(),
            momentum: BN_MOMENTUM,
        });
    } else {
        mean.copy_from_slice(sess.buffer(&format!("{name}.running_mean")).as_slice().unwrap());
        var.copy_from_slice(sess.buffer(&format!("{name}.running_var")).as_slice().unwrap());
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut xhat = vec![0.0; xs.len()];
    let mut out = vec![0.0; xs.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * inner;
            for k in off..off + inner {
                let h = (xs[k] - mean[ch]) * inv[ch];
                xhat[k] = h;
                out[k] = gs[ch] * h + bs[ch];
            }
        }
    }
    let value = Array::from_shape_vec(IxDyn(&shape), out).unwrap();
    sess.graph.custom(&[x, gamma, beta], value, move |grad, needs| {
        let dy = grad.as_slice().unwrap();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                for k in off..off + inner {
                    dbeta[ch] += dy[k];
                    dgamma[ch] += dy[k] * xhat[k];
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; dy.len()];
            for i in 0..n {
                for ch in 0..c {
                    let off = (i * c + ch) * inner;
                    let scale = gs[ch] * inv[ch];
                    if train {
                        let mf = m as f64;
                        for k in off..off + inner {
                            dx[k] = scale * (dy[k] - dbeta[ch] / mf - xhat[k] * dgamma[ch] / mf);
                        }
                    } else {
                        for k in off..off + inner {
                            dx[k] = scale * dy[k];
                        }
                    }
                }
            }
            Array::from_shape_vec(IxDyn(&shape), dx).unwrap()
        });
        vec![
            dx,
            Some(Array::from_shape_vec(IxDyn(&[c]), dgamma).unwrap()),
            Some(Array::from_shape_vec(IxDyn(&[c]), dbeta).unwrap()),
        ]
    })
}

/// Bottleneck residual unit: 1³ reduce, 3³ spatial, 1³ expand (x4), with a
/// projected shortcut when the channel count changes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bottleneck {
    pub name: String,
    pub in_channels: usize,
    pub width: usize,
    pub project: bool,
}

pub const EXPANSION: usize = 4;

impl Bottleneck {
    pub fn new(name: impl Into<String>, in_channels: usize, width: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            width,
            project: in_channels != width * EXPANSION,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.width * EXPANSION
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let n = &self.name;
        init_conv(
            store,
            rng,
            &format!("{n}.conv1"),
            self.width,
            self.in_channels,
            1,
            false,
        );
        init_bn(store, &format!("{n}.bn1"), self.width);
        init_conv(store, rng, &format!("{n}.conv2"), self.width, self.width, 3, false);
        init_bn(store, &format!("{n}.bn2"), self.width);
        init_conv(
            store,
            rng,
            &format!("{n}.conv3"),
            self.out_channels(),
            self.width,
            1,
            false,
        );
        init_bn(store, &format!("{n}.bn3"), self.out_channels());
        if self.project {
            init_conv(
                store,
                rng,
                &format!("{n}.downsample.conv"),
                self.out_channels(),
                self.in_channels,
                1,
                false,
            );
            init_bn(store, &format!("{n}.downsample.bn"), self.out_channels());
        }
    }

    pub fn forward<'a>(&self, sess: &Session<'a>, x: Var<'a>) -> Var<'a> {
        let n = &self.name;
        let one = Conv3dSpec::default();
        let h = conv(sess, &format!("{n}.conv1"), x, one);
        let h = batch_norm(sess, &format!("{n}.bn1"), h).relu();
        let h = conv(sess, &format!("{n}.conv2"), h, Conv3dSpec::new(1, 1));
        let h = batch_norm(sess, &format!("{n}.bn2"), h).relu();
        let h = conv(sess, &format!("{n}.conv3"), h, one);
        let h = batch_norm(sess, &format!("{n}.bn3"), h);
        let shortcut = if self.project {
            let s = conv(sess, &format!("{n}.downsample.conv"), x, one);
            batch_norm(sess, &format!("{n}.downsample.bn"), s)
        } else {
            x
        };
        h.add(shortcut).relu()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{apply_stat_updates, Trainable};
    use maprotonet_tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn training_batch_norm_standardises_each_channel() {
        let mut store = ParamStore::new();
        init_bn(&mut store, "bn", 3);
        let g = Graph::new();
        let sess = Session::new(&g, &store, true, Trainable::All);
        let x = g.constant(random(&[2, 3, 2, 2, 2], 1));
        let y = batch_norm(&sess, "bn", x).value();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|i| {
                    y.index_axis(ndarray::Axis(0), i)
                        .index_axis(ndarray::Axis(0), ch)
                        .iter()
                        .copied()
                        .collect::<Vec<_>>()
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        let updates = sess.take_stat_updates();
        assert_eq!(updates.len(), 1);
        apply_stat_updates(&mut store, &updates);
        let rm = store.buffer("bn.running_mean").unwrap();
        assert!(rm.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn eval_batch_norm_with_fresh_stats_is_near_identity() {
        let mut store = ParamStore::new();
        init_bn(&mut store, "bn", 2);
        let g = Graph::new();
        let sess = Session::eval(&g, &store);
        let xa = random(&[1, 2, 3, 3, 3], 2);
        let y = batch_norm(&sess, "bn", g.constant(xa.clone())).value();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in xa.iter().zip(y.iter()) {
            assert!((a * scale - b).abs() < 1e-15);
        }
        assert!(sess.take_stat_updates().is_empty());
    }

    #[test]
    fn bottleneck_expands_channels_and_keeps_extents() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = Bottleneck::new("b", 8, 4);
        block.init(&mut store, &mut rng);
        assert!(block.project);
        let g = Graph::new();
        let sess = Session::new(&g, &store, true, Trainable::All);
        let y = block.forward(&sess, g.constant(random(&[2, 8, 4, 4, 3], 4)));
        assert_eq!(y.shape(), vec![2, 16, 4, 4, 3]);
        assert!(y.value().iter().all(|v| *v >= 0.0));
    }
}
