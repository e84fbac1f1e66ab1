//! Layers that read their weights from a [`ParamStore`] and record onto a tape.

use nt_tensor::{Graph, NodeId, RunningStats, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{BnUpdate, Forward, ParamId, ParamKind, ParamStore};

pub const BN_EPS: f64 = 1e-5;

/// Kaiming-uniform initialization for a ReLU fan-in of `fan_in`.
pub(crate) fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: store.add(
                format!("{prefix}.gamma"),
                Tensor::filled(&[channels], 1.0),
                ParamKind::Weight,
            ),
            beta: store.add(
                format!("{prefix}.beta"),
                Tensor::zeros(&[channels]),
                ParamKind::Weight,
            ),
            running_mean: store.add(
                format!("{prefix}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{prefix}.running_var"),
                Tensor::filled(&[channels], 1.0),
                ParamKind::Buffer,
            ),
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.gamma, self.beta, self.running_mean, self.running_var]
    }

    pub fn forward(&self, g: &mut Graph, f: &mut Forward<'_>, x: NodeId) -> Result<NodeId> {
        let gamma = f.bind(g, self.gamma);
        let beta = f.bind(g, self.beta);
        if f.trains(self.gamma) {
            let y = g.batchnorm2d(x, gamma, beta, BN_EPS, None)?;
            f.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                node: y,
            });
            Ok(y)
        } else {
            let running = RunningStats {
                mean: f.store.value(self.running_mean).data().to_vec(),
                var: f.store.value(self.running_var).data().to_vec(),
            };
            Ok(g.batchnorm2d(x, gamma, beta, BN_EPS, Some(running))?)
        }
    }
}

/// 3x3 convolution, batch norm and ReLU applied to the raw image.
#[derive(Debug, Clone)]
pub struct Stem {
    pub conv: ParamId,
    pub bn: BatchNorm,
    pub padding: usize,
}

impl Stem {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        padding: usize,
    ) -> Self {
        let conv = store.add(
            "stem.conv",
            kaiming_uniform(rng, &[c_out, c_in, 3, 3], c_in * 9),
            ParamKind::Weight,
        );
        Self {
            conv,
            bn: BatchNorm::new(store, "stem.bn", c_out),
            padding,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.conv];
        p.extend(self.bn.params());
        p
    }

    pub fn forward(&self, g: &mut Graph, f: &mut Forward<'_>, x: NodeId) -> Result<NodeId> {
        let w = f.bind(g, self.conv);
        let c = g.conv2d(x, w, None, 1, self.padding)?;
        let n = self.bn.forward(g, f, c)?;
        Ok(g.relu(n)?)
    }
}

/// Two 3x3 convolutions with a residual connection. Blocks that widen the
/// channel count also halve the resolution; their shortcut subsamples and
/// zero-pads channels without parameters.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub conv1: ParamId,
    pub bn1: BatchNorm,
    pub conv2: ParamId,
    pub bn2: BatchNorm,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let stride = if c_out > c_in { 2 } else { 1 };
        let conv1 = store.add(
            format!("{prefix}.conv1"),
            kaiming_uniform(rng, &[c_out, c_in, 3, 3], c_in * 9),
            ParamKind::Weight,
        );
        let bn1 = BatchNorm::new(store, &format!("{prefix}.bn1"), c_out);
        let conv2 = store.add(
            format!("{prefix}.conv2"),
            kaiming_uniform(rng, &[c_out, c_out, 3, 3], c_out * 9),
            ParamKind::Weight,
        );
        let bn2 = BatchNorm::new(store, &format!("{prefix}.bn2"), c_out);
        Self {
            c_in,
            c_out,
            stride,
            conv1,
            bn1,
            conv2,
            bn2,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.conv1, self.conv2];
        p.extend(self.bn1.params());
        p.extend(self.bn2.params());
        p
    }

    fn shortcut_kernel(&self) -> Tensor {
        let mut k = Tensor::zeros(&[self.c_out, self.c_in, 1, 1]);
        for c in 0..self.c_in.min(self.c_out) {
            k.data_mut()[c * self.c_in + c] = 1.0;
        }
        k
    }

    pub fn forward(&self, g: &mut Graph, f: &mut Forward<'_>, x: NodeId) -> Result<NodeId> {
        let w1 = f.bind(g, self.conv1);
        let h = g.conv2d(x, w1, None, self.stride, 1)?;
        let h = self.bn1.forward(g, f, h)?;
        let h = g.relu(h)?;
        let w2 = f.bind(g, self.conv2);
        let h = g.conv2d(h, w2, None, 1, 1)?;
        let h = self.bn2.forward(g, f, h)?;
        let skip = if self.stride == 1 && self.c_in == self.c_out {
            x
        } else {
            let k = g.constant(self.shortcut_kernel());
            g.conv2d(x, k, None, self.stride, 0)?
        };
        let s = g.add(h, skip)?;
        Ok(g.relu(s)?)
    }
}

/// Max-pool to the target resolution, then a 1x1 convolution and batch norm.
#[derive(Debug, Clone)]
pub struct Proxy {
    pub c_in: usize,
    pub c_out: usize,
    pub pool: usize,
    pub conv: ParamId,
    pub bn: BatchNorm,
}

impl Proxy {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        pool: usize,
    ) -> Self {
        let conv = store.add(
            format!("{prefix}.conv"),
            kaiming_uniform(rng, &[c_out, c_in, 1, 1], c_in),
            ParamKind::Weight,
        );
        Self {
            c_in,
            c_out,
            pool,
            conv,
            bn: BatchNorm::new(store, &format!("{prefix}.bn"), c_out),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.conv];
        p.extend(self.bn.params());
        p
    }

    pub fn forward(&self, g: &mut Graph, f: &mut Forward<'_>, x: NodeId) -> Result<NodeId> {
        let x = if self.pool > 1 {
            g.maxpool2d(x, self.pool)?
        } else {
            x
        };
        let w = f.bind(g, self.conv);
        let c = g.conv2d(x, w, None, 1, 0)?;
        self.bn.forward(g, f, c)
    }
}

/// Global average pooling followed by a linear layer.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub c_in: usize,
    pub num_classes: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Classifier {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        c_in: usize,
        num_classes: usize,
    ) -> Self {
        let weight = store.add(
            "classifier.weight",
            Self::init_weight(rng, c_in, num_classes),
            ParamKind::Weight,
        );
        let bias = store.add(
            "classifier.bias",
            Tensor::zeros(&[num_classes]),
            ParamKind::Weight,
        );
        Self {
            c_in,
            num_classes,
            weight,
            bias,
        }
    }

    fn init_weight(rng: &mut ChaCha8Rng, c_in: usize, num_classes: usize) -> Tensor {
        let bound = (1.0 / c_in as f64).sqrt();
        let data = (0..c_in * num_classes)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Tensor::new(vec![num_classes, c_in], data).expect("shape and data agree")
    }

    /// Fresh weights for `num_classes` outputs, reusing the same store slots.
    pub fn reinit(&mut self, store: &mut ParamStore, rng: &mut ChaCha8Rng, num_classes: usize) {
        self.num_classes = num_classes;
        store.replace(self.weight, Self::init_weight(rng, self.c_in, num_classes));
        store.replace(self.bias, Tensor::zeros(&[num_classes]));
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    pub fn forward(&self, g: &mut Graph, f: &mut Forward<'_>, x: NodeId) -> Result<NodeId> {
        let p = g.global_avg_pool(x)?;
        let w = f.bind(g, self.weight);
        let b = f.bind(g, self.bias);
        Ok(g.linear(p, w, Some(b))?)
    }
}
