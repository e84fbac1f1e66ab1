//! The pre-trained network: a stem followed by `L` residual blocks and a
//! pooled linear classifier, `f(x) = (G_L ∘ … ∘ G_1)(x)`.

use nt_tensor::{Graph, NodeId, Precision, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::BlockSpec;
use crate::error::{Error, Result};
use crate::layers::{Classifier, ResidualBlock, Stem};
use crate::params::{Forward, ParamStore, PassRecord};

/// Channel width per residual block and input geometry. A block whose
/// width exceeds its predecessor's halves the resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackbonePlan {
    pub channels: Vec<usize>,
    pub input_size: usize,
    pub input_channels: usize,
}

impl Default for BackbonePlan {
    fn default() -> Self {
        Self {
            channels: vec![8, 8, 16, 16, 32, 32, 64, 64],
            input_size: 28,
            input_channels: 1,
        }
    }
}

impl BackbonePlan {
    pub fn new(channels: Vec<usize>, input_size: usize) -> Result<Self> {
        let plan = Self {
            channels,
            input_size,
            input_channels: 1,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn num_blocks(&self) -> usize {
        self.channels.len()
    }

    fn downsamples(&self) -> u32 {
        self.channels.windows(2).filter(|w| w[1] > w[0]).count() as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 4 {
            return Err(Error::InvalidPlan(format!(
                "need at least 4 blocks, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.input_size == 0 || self.input_channels == 0 {
            return Err(Error::InvalidPlan("zero-sized dimension".into()));
        }
        if let Some(w) = self.channels.windows(2).find(|w| w[1] < w[0]) {
            return Err(Error::InvalidPlan(format!(
                "channel plan decreases from {} to {}",
                w[0], w[1]
            )));
        }
        let s = self.stem_size();
        if !(s - self.input_size).is_multiple_of(2) {
            return Err(Error::InvalidPlan(format!(
                "input {} cannot be padded symmetrically to {}",
                self.input_size, s
            )));
        }
        Ok(())
    }

    /// Side length of the stem output: the input size rounded up so every
    /// downsampling stage halves it exactly.
    pub fn stem_size(&self) -> usize {
        let m = 1usize << self.downsamples();
        self.input_size.div_ceil(m) * m
    }

    pub fn stem_padding(&self) -> usize {
        1 + (self.stem_size() - self.input_size) / 2
    }

    /// `(channels, side)` of merge node `l`; node 0 is the stem output.
    pub fn node_shape(&self, l: usize) -> (usize, usize) {
        let mut side = self.stem_size();
        let mut c = self.channels[0];
        for b in 0..l {
            if self.channels[b] > c {
                side /= 2;
            }
            c = self.channels[b];
        }
        (c, side)
    }

    pub fn block_spec(&self, l: usize) -> BlockSpec {
        let (ci, si) = self.node_shape(l - 1);
        let (co, so) = self.node_shape(l);
        BlockSpec::residual(ci, co, si, so)
    }

    pub fn stem_spec(&self) -> BlockSpec {
        let (c, s) = self.node_shape(0);
        BlockSpec::stem(self.input_channels, c, self.input_size, s)
    }

    pub fn classifier_spec(&self, num_classes: usize) -> BlockSpec {
        let (c, s) = self.node_shape(self.num_blocks());
        BlockSpec::classifier(c, num_classes, s)
    }
}

/// Output of a forward pass: logits and merge-node activations `x_1..x_L`.
#[derive(Debug, Clone)]
pub struct Activations {
    pub logits: NodeId,
    pub nodes: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub plan: BackbonePlan,
    pub store: ParamStore,
    pub stem: Stem,
    pub blocks: Vec<ResidualBlock>,
    pub classifier: Classifier,
}

/// Deterministic Kaiming-initialized backbone.
pub fn build_backbone(plan: &BackbonePlan, num_classes: usize, seed: u64) -> Result<Backbone> {
    plan.validate()?;
    if num_classes < 2 {
        return Err(Error::InvalidPlan(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let stem = Stem::new(
        &mut store,
        &mut rng,
        plan.input_channels,
        plan.channels[0],
        plan.stem_padding(),
    );
    let mut blocks = Vec::with_capacity(plan.num_blocks());
    for l in 1..=plan.num_blocks() {
        let (ci, _) = plan.node_shape(l - 1);
        let (co, _) = plan.node_shape(l);
        blocks.push(ResidualBlock::new(
            &mut store,
            &mut rng,
            &format!("blocks.{l}"),
            ci,
            co,
        ));
    }
    let classifier = Classifier::new(
        &mut store,
        &mut rng,
        plan.channels[plan.num_blocks() - 1],
        num_classes,
    );
    // start at checkpoint precision so untrained and reloaded nets agree
    store.round_to_f32();
    Ok(Backbone {
        plan: plan.clone(),
        store,
        stem,
        blocks,
        classifier,
    })
}

impl Backbone {
    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Records `x -> stem -> G_1 … G_L -> classifier` on `g`.
    pub fn forward(&self, g: &mut Graph, f: &mut Forward<'_>, x: NodeId) -> Result<Activations> {
        let mut h = self.stem.forward(g, f, x)?;
        let mut nodes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.forward(g, f, h)?;
            nodes.push(h);
        }
        let logits = self.classifier.forward(g, f, h)?;
        Ok(Activations { logits, nodes })
    }

    /// Inference-mode evaluation returning logits and node activations.
    pub fn evaluate(&self, images: &Tensor, precision: Precision) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::with_precision(precision);
        let x = g.constant(images.clone());
        let mut f = Forward::new(&self.store, false);
        let acts = self.forward(&mut g, &mut f, x)?;
        Ok((
            g.value(acts.logits).clone(),
            acts.nodes.iter().map(|&n| g.value(n).clone()).collect(),
        ))
    }

    /// Training-mode pass; returns the tape, activations and bound params.
    pub fn forward_train(
        &self,
        images: &Tensor,
        precision: Precision,
    ) -> Result<(Graph, Activations, PassRecord)> {
        let mut g = Graph::with_precision(precision);
        let x = g.constant(images.clone());
        let mut f = Forward::new(&self.store, true);
        let acts = self.forward(&mut g, &mut f, x)?;
        let pass = f.finish();
        Ok((g, acts, pass))
    }

    pub fn total_params(&self) -> usize {
        self.plan.stem_spec().param_count
            + (1..=self.num_blocks())
                .map(|l| self.plan.block_spec(l).param_count)
                .sum::<usize>()
            + self.plan.classifier_spec(self.num_classes()).param_count
    }

    pub fn total_flops(&self) -> u64 {
        self.plan.stem_spec().flops
            + (1..=self.num_blocks())
                .map(|l| self.plan.block_spec(l).flops)
                .sum::<u64>()
            + self.plan.classifier_spec(self.num_classes()).flops
    }

    /// Swaps in a freshly initialized classifier for a new label space.
    pub fn reset_head(&mut self, num_classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.classifier
            .reinit(&mut self.store, &mut rng, num_classes);
        self.store.round_to_f32();
    }
}
