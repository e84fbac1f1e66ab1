use std::fmt;

use serde::{Deserialize, Serialize};

use crate::complexity::block_flops;

/// A path `src -> dst` between merge nodes. `src == dst` names the
/// pre-trained block producing node `dst` (its tensor input is node
/// `dst - 1`); `src < dst` names the proxy from node `src` to node `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PathId {
    pub src: usize,
    pub dst: usize,
}

impl PathId {
    pub fn pretrained(l: usize) -> Self {
        Self { src: l, dst: l }
    }

    pub fn proxy(src: usize, dst: usize) -> Self {
        Self { src, dst }
    }

    pub fn is_pretrained(&self) -> bool {
        self.src == self.dst
    }

    /// The node whose activation the block consumes.
    pub fn tensor_input(&self) -> usize {
        if self.is_pretrained() {
            self.dst - 1
        } else {
            self.src
        }
    }
}

impl fmt::Display for PathId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_pretrained() {
            write!(f, "G{}", self.dst)
        } else {
            write!(f, "A{}->{}", self.src, self.dst)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    PretrainedResidual,
    Proxy,
    Stem,
    Classifier,
}

/// Shape and cost summary of one computational block. Spatial sizes are the
/// side length of square maps; for the classifier `out_channels` is the
/// class count and `spatial_out` is 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub spatial_in: usize,
    pub spatial_out: usize,
    pub param_count: usize,
    pub flops: u64,
}

impl BlockSpec {
    fn finish(mut self) -> Self {
        self.flops = block_flops(&self);
        self
    }

    pub fn residual(c_in: usize, c_out: usize, spatial_in: usize, spatial_out: usize) -> Self {
        Self {
            kind: BlockKind::PretrainedResidual,
            in_channels: c_in,
            out_channels: c_out,
            spatial_in,
            spatial_out,
            param_count: 9 * c_in * c_out + 9 * c_out * c_out + 4 * c_out,
            flops: 0,
        }
        .finish()
    }

    pub fn proxy(c_in: usize, c_out: usize, spatial_in: usize, spatial_out: usize) -> Self {
        Self {
            kind: BlockKind::Proxy,
            in_channels: c_in,
            out_channels: c_out,
            spatial_in,
            spatial_out,
            param_count: c_in * c_out + 2 * c_out,
            flops: 0,
        }
        .finish()
    }

    pub fn stem(c_in: usize, c_out: usize, spatial_in: usize, spatial_out: usize) -> Self {
        Self {
            kind: BlockKind::Stem,
            in_channels: c_in,
            out_channels: c_out,
            spatial_in,
            spatial_out,
            param_count: 9 * c_in * c_out + 2 * c_out,
            flops: 0,
        }
        .finish()
    }

    pub fn classifier(c_in: usize, num_classes: usize, spatial_in: usize) -> Self {
        Self {
            kind: BlockKind::Classifier,
            in_channels: c_in,
            out_channels: num_classes,
            spatial_in,
            spatial_out: 1,
            param_count: c_in * num_classes + num_classes,
            flops: 0,
        }
        .finish()
    }

    /// Max-pool ratio a proxy needs; `None` when it is not integral.
    pub fn pool_ratio(spatial_in: usize, spatial_out: usize) -> Option<usize> {
        (spatial_out > 0 && spatial_in >= spatial_out && spatial_in.is_multiple_of(spatial_out))
            .then(|| spatial_in / spatial_out)
    }
}
