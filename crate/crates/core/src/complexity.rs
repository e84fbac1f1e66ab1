//! FLOP accounting, exclusion probabilities and the differentiable expected
//! complexity of a gated student.
//!
//! For a path `B_i^j` with exclusion probability `r_i^j = 1 - α_i^j`,
//!
//! ```text
//! E[C_i^j] = C_i^j (1 - r_i^j - P(R_inp^i) - P(R_out^j))
//! P(R_inp^i) = Π_{k→i} r_k^i             (0 at node 0)
//! P(R_out^j) = r_{j+1}^{j+1} Π_{j→k} r_j^k  (0 at node L)
//! ```
//!
//! The same formula is evaluated over plain numbers and over tape nodes so
//! the penalty used in training and the value reported agree exactly.

use std::collections::BTreeMap;

use nt_tensor::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, BlockSpec, PathId};
use crate::error::{Error, Result};
use crate::student::StudentGraph;

/// Largest relevant-path count the exact union oracle will enumerate.
pub const MAX_ENUMERATED_PATHS: usize = 20;

/// One primitive layer for FLOP counting. A multiply-accumulate is 2 FLOPs;
/// pooling, normalization, activation and addition cost one op per output
/// element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        h_out: usize,
        w_out: usize,
    },
    Linear {
        c_in: usize,
        c_out: usize,
    },
    Elementwise {
        outputs: usize,
    },
}

impl LayerOp {
    pub fn flops(&self) -> u64 {
        match *self {
            LayerOp::Conv {
                c_in,
                c_out,
                kernel,
                h_out,
                w_out,
            } => 2 * (h_out * w_out * c_out * c_in * kernel * kernel) as u64,
            LayerOp::Linear { c_in, c_out } => 2 * (c_in * c_out) as u64,
            LayerOp::Elementwise { outputs } => outputs as u64,
        }
    }
}

/// The primitive layers a block executes. The parameter-free shortcut of a
/// downsampling residual block is a strided copy and costs nothing.
pub fn layer_ops(spec: &BlockSpec) -> Vec<LayerOp> {
    let (ci, co, si, so) = (
        spec.in_channels,
        spec.out_channels,
        spec.spatial_in,
        spec.spatial_out,
    );
    let conv = |c_in, c_out, kernel| LayerOp::Conv {
        c_in,
        c_out,
        kernel,
        h_out: so,
        w_out: so,
    };
    let out_map = LayerOp::Elementwise {
        outputs: so * so * co,
    };
    match spec.kind {
        BlockKind::PretrainedResidual => vec![
            conv(ci, co, 3),
            out_map,
            out_map,
            conv(co, co, 3),
            out_map,
            out_map,
            out_map,
        ],
        BlockKind::Proxy => {
            let mut ops = Vec::with_capacity(3);
            if si != so {
                ops.push(LayerOp::Elementwise {
                    outputs: so * so * ci,
                });
            }
            ops.push(conv(ci, co, 1));
            ops.push(out_map);
            ops
        }
        BlockKind::Stem => vec![conv(ci, co, 3), out_map, out_map],
        BlockKind::Classifier => vec![
            LayerOp::Elementwise { outputs: ci },
            LayerOp::Linear {
                c_in: ci,
                c_out: co,
            },
        ],
    }
}

pub fn block_flops(spec: &BlockSpec) -> u64 {
    layer_ops(spec).iter().map(LayerOp::flops).sum()
}

/// Normalized complexity `C_i^j` of every path: block FLOPs over the summed
/// FLOPs of the pre-trained blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityTable {
    pub c: BTreeMap<PathId, f64>,
    pub total_flops: u64,
}

impl ComplexityTable {
    /// Normalizes so the pre-trained entries, summed in path order, give
    /// exactly 1; rounding residue is absorbed by the last pre-trained entry.
    pub fn new(specs: &BTreeMap<PathId, BlockSpec>) -> Result<Self> {
        let total: u64 = specs
            .iter()
            .filter(|(p, _)| p.is_pretrained())
            .map(|(_, s)| s.flops)
            .sum();
        if total == 0 {
            return Err(Error::InvalidGraph(
                "no pre-trained FLOPs to normalize by".into(),
            ));
        }
        let mut c: BTreeMap<PathId, f64> = specs
            .iter()
            .map(|(&p, s)| (p, s.flops as f64 / total as f64))
            .collect();
        let last = *c.keys().rfind(|p| p.is_pretrained()).expect("total > 0");
        for _ in 0..64 {
            let sum = pretrained_sum(&c);
            if sum == 1.0 {
                break;
            }
            *c.get_mut(&last).expect("present") += 1.0 - sum;
        }
        if pretrained_sum(&c) != 1.0 {
            return Err(Error::InvalidGraph(
                "complexity normalization did not converge".into(),
            ));
        }
        Ok(Self {
            c,
            total_flops: total,
        })
    }

    pub fn for_student(graph: &StudentGraph) -> Result<Self> {
        Self::new(graph.specs())
    }

    /// A table with given entries and no normalization; for worked examples.
    pub fn from_values(c: BTreeMap<PathId, f64>) -> Self {
        Self { c, total_flops: 0 }
    }

    pub fn get(&self, path: PathId) -> Option<f64> {
        self.c.get(&path).copied()
    }
}

fn pretrained_sum(c: &BTreeMap<PathId, f64>) -> f64 {
    c.iter()
        .filter(|(p, _)| p.is_pretrained())
        .map(|(_, v)| v)
        .sum()
}

/// Which node stands in for "the input of `B_i^j`" in the input-exclusion
/// term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputNode {
    /// The path's label `i`, as the formula is printed. For `G_l` this is
    /// node `l`, the node the block itself feeds.
    #[default]
    Label,
    /// The node whose activation the block consumes (`l - 1` for `G_l`).
    TensorInput,
}

impl InputNode {
    pub fn of(self, path: PathId) -> usize {
        match self {
            InputNode::Label => path.src,
            InputNode::TensorInput => path.tensor_input(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ComplexityOptions {
    #[serde(default)]
    pub input_node: InputNode,
    /// Deliberately wrong sign on the output term, for harness self-checks.
    #[doc(hidden)]
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flip_output_sign: bool,
}

/// Self, input and output exclusion probabilities for every alive path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionProbs {
    pub r: BTreeMap<PathId, f64>,
    /// Indexed by node `0..=L`.
    pub p_inp: Vec<f64>,
    pub p_out: Vec<f64>,
}

impl ExclusionProbs {
    /// `r = 1 - α` for every path in `alphas` (the alive paths).
    pub fn from_alphas(alphas: &BTreeMap<PathId, f64>, num_nodes: usize) -> Self {
        let r: BTreeMap<PathId, f64> = alphas.iter().map(|(&p, &a)| (p, 1.0 - a)).collect();
        let p_inp = (0..=num_nodes)
            .map(|i| input_exclusion_prob(&r, i))
            .collect();
        let p_out = (0..=num_nodes)
            .map(|j| output_exclusion_prob(&r, j, num_nodes))
            .collect();
        Self { r, p_inp, p_out }
    }

    pub fn for_student(graph: &StudentGraph) -> Self {
        Self::from_alphas(&graph.alphas(), graph.num_nodes())
    }
}

/// Product of `r` over the alive paths merging into node `i`; 0 at node 0.
pub fn input_exclusion_prob(r: &BTreeMap<PathId, f64>, i: usize) -> f64 {
    input_term(&mut Values, r, i).expect("value algebra is infallible")
}

/// `r_{j+1}^{j+1}` times the product of `r` over alive proxies leaving node
/// `j`; 0 at the final node. A missing `G_{j+1}` counts as excluded.
pub fn output_exclusion_prob(r: &BTreeMap<PathId, f64>, j: usize, num_nodes: usize) -> f64 {
    output_term(&mut Values, r, j, num_nodes).expect("value algebra is infallible")
}

/// `E[C_i^j]` for one alive path.
pub fn expected_block_complexity(
    c: f64,
    r: &BTreeMap<PathId, f64>,
    path: PathId,
    num_nodes: usize,
    opts: ComplexityOptions,
) -> f64 {
    block_term(&mut Values, c, r, path, num_nodes, opts).expect("value algebra is infallible")
}

/// Per-path `E[C_i^j]` over every path in `r`.
pub fn expected_complexity_terms(
    table: &ComplexityTable,
    r: &BTreeMap<PathId, f64>,
    num_nodes: usize,
    opts: ComplexityOptions,
) -> Result<BTreeMap<PathId, f64>> {
    r.keys()
        .map(|&p| {
            let c = table.get(p).ok_or_else(|| missing(p))?;
            Ok((p, expected_block_complexity(c, r, p, num_nodes, opts)))
        })
        .collect()
}

/// `E[C]`: the sum of `E[C_i^j]` over alive paths, in path order.
pub fn expected_network_complexity(
    graph: &StudentGraph,
    table: &ComplexityTable,
    opts: ComplexityOptions,
) -> Result<f64> {
    let r = ExclusionProbs::for_student(graph).r;
    Ok(
        expected_complexity_terms(table, &r, graph.num_nodes(), opts)?
            .values()
            .sum(),
    )
}

/// Records `E[C]` on the tape from the gate nodes of a student forward pass.
pub fn expected_network_complexity_tape(
    g: &mut Graph,
    alphas: &BTreeMap<PathId, NodeId>,
    table: &ComplexityTable,
    num_nodes: usize,
    opts: ComplexityOptions,
) -> Result<NodeId> {
    let mut tape = Tape { g };
    let mut r = BTreeMap::new();
    for (&p, &a) in alphas {
        r.insert(p, tape.g.affine(a, -1.0, 1.0)?);
    }
    let mut terms = Vec::with_capacity(r.len());
    for &p in r.keys() {
        let c = table.get(p).ok_or_else(|| missing(p))?;
        terms.push(block_term(&mut tape, c, &r, p, num_nodes, opts)?);
    }
    Ok(tape.g.add_all(&terms)?)
}

fn missing(p: PathId) -> Error {
    Error::InvalidGraph(format!("complexity table has no entry for {p}"))
}

/// Arithmetic shared by the value and tape evaluations.
trait Algebra {
    type V: Copy;
    fn lit(&mut self, v: f64) -> Result<Self::V>;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: Self::V, c: f64) -> Result<Self::V>;
    fn add(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
}

struct Values;

impl Algebra for Values {
    type V = f64;
    fn lit(&mut self, v: f64) -> Result<f64> {
        Ok(v)
    }
    fn sub(&mut self, a: f64, b: f64) -> Result<f64> {
        Ok(a - b)
    }
    fn mul(&mut self, a: f64, b: f64) -> Result<f64> {
        Ok(a * b)
    }
    fn scale(&mut self, a: f64, c: f64) -> Result<f64> {
        Ok(a * c)
    }
    fn add(&mut self, a: f64, b: f64) -> Result<f64> {
        Ok(a + b)
    }
}

struct Tape<'g> {
    g: &'g mut Graph,
}

impl Algebra for Tape<'_> {
    type V = NodeId;
    fn lit(&mut self, v: f64) -> Result<NodeId> {
        Ok(self.g.constant(Tensor::scalar(v)))
    }
    fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        Ok(self.g.sub(a, b)?)
    }
    fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        Ok(self.g.mul(a, b)?)
    }
    fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        Ok(self.g.scale(a, c)?)
    }
    fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        Ok(self.g.add(a, b)?)
    }
}

fn product<A: Algebra>(alg: &mut A, factors: impl IntoIterator<Item = A::V>) -> Result<A::V> {
    let mut it = factors.into_iter();
    let Some(first) = it.next() else {
        return alg.lit(1.0);
    };
    it.try_fold(first, |acc, v| alg.mul(acc, v))
}

fn input_term<A: Algebra>(alg: &mut A, r: &BTreeMap<PathId, A::V>, i: usize) -> Result<A::V> {
    if i == 0 {
        return alg.lit(0.0);
    }
    product(alg, r.iter().filter(|(p, _)| p.dst == i).map(|(_, &v)| v))
}

fn output_term<A: Algebra>(
    alg: &mut A,
    r: &BTreeMap<PathId, A::V>,
    j: usize,
    num_nodes: usize,
) -> Result<A::V> {
    if j >= num_nodes {
        return alg.lit(0.0);
    }
    let next = match r.get(&PathId::pretrained(j + 1)) {
        Some(&v) => v,
        None => alg.lit(1.0)?,
    };
    let departing: Vec<A::V> = r
        .iter()
        .filter(|(p, _)| p.src == j && p.dst > j)
        .map(|(_, &v)| v)
        .collect();
    product(alg, std::iter::once(next).chain(departing))
}

fn block_term<A: Algebra>(
    alg: &mut A,
    c: f64,
    r: &BTreeMap<PathId, A::V>,
    path: PathId,
    num_nodes: usize,
    opts: ComplexityOptions,
) -> Result<A::V> {
    let r_self = *r.get(&path).ok_or_else(|| missing(path))?;
    let p_inp = input_term(alg, r, opts.input_node.of(path))?;
    let p_out = output_term(alg, r, path.dst, num_nodes)?;
    let one = alg.lit(1.0)?;
    let t = alg.sub(one, r_self)?;
    let t = alg.sub(t, p_inp)?;
    let t = if opts.flip_output_sign {
        alg.add(t, p_out)?
    } else {
        alg.sub(t, p_out)?
    };
    alg.scale(t, c)
}

/// True probability of `R_self ∪ R_inp ∪ R_out` for one path against the
/// disjoint-sum approximation `r + P(R_inp) + P(R_out)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnionReport {
    pub true_union: f64,
    pub approximation: f64,
    /// `approximation - true_union`; non-negative up to sampling error.
    pub gap: f64,
    /// `None` for exact enumeration.
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnionMethod {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

/// Treats each alive path as independently excluded with probability `r`
/// and measures the union of the three exclusion events of `path`. Exact
/// enumeration covers only the paths the events depend on and refuses more
/// than [`MAX_ENUMERATED_PATHS`] of them.
pub fn union_prob_oracle(
    r: &BTreeMap<PathId, f64>,
    path: PathId,
    num_nodes: usize,
    input_node: InputNode,
    method: UnionMethod,
) -> Result<UnionReport> {
    if !r.contains_key(&path) {
        return Err(missing(path));
    }
    let inp = input_node.of(path);
    let j = path.dst;
    let mut relevant: Vec<PathId> = vec![path];
    if inp > 0 {
        relevant.extend(r.keys().filter(|p| p.dst == inp));
    }
    if j < num_nodes {
        relevant.extend(
            r.keys()
                .filter(|p| **p == PathId::pretrained(j + 1) || (p.src == j && p.dst > j)),
        );
    }
    relevant.sort();
    relevant.dedup();
    let idx = |p: &PathId| relevant.binary_search(p).expect("relevant");
    let self_bit = idx(&path);
    let inp_bits: Vec<usize> = if inp > 0 {
        r.keys().filter(|p| p.dst == inp).map(idx).collect()
    } else {
        Vec::new()
    };
    // an absent G_{j+1} is always excluded
    let next_bit = (j < num_nodes).then(|| {
        r.contains_key(&PathId::pretrained(j + 1))
            .then(|| idx(&PathId::pretrained(j + 1)))
    });
    let out_bits: Vec<usize> = r
        .keys()
        .filter(|p| j < num_nodes && p.src == j && p.dst > j)
        .map(idx)
        .collect();

    let event = |excluded: &dyn Fn(usize) -> bool| -> bool {
        let s = excluded(self_bit);
        let i = inp > 0 && inp_bits.iter().all(|&b| excluded(b));
        let o = match next_bit {
            None => false,
            Some(next) => next.is_none_or(excluded) && out_bits.iter().all(|&b| excluded(b)),
        };
        s || i || o
    };
    let probs: Vec<f64> = relevant.iter().map(|p| r[p]).collect();

    let (true_union, samples) = match method {
        UnionMethod::Exact => {
            if relevant.len() > MAX_ENUMERATED_PATHS {
                return Err(Error::TooManyPaths(relevant.len()));
            }
            let mut total = 0.0;
            for mask in 0u32..(1 << relevant.len()) {
                let excluded = |b: usize| mask >> b & 1 == 1;
                if event(&excluded) {
                    total += probs
                        .iter()
                        .enumerate()
                        .map(|(b, &q)| if excluded(b) { q } else { 1.0 - q })
                        .product::<f64>();
                }
            }
            (total, None)
        }
        UnionMethod::MonteCarlo { samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bits = vec![false; probs.len()];
            let mut hits = 0usize;
            for _ in 0..samples {
                for (b, &q) in bits.iter_mut().zip(&probs) {
                    *b = rng.gen::<f64>() < q;
                }
                if event(&|b| bits[b]) {
                    hits += 1;
                }
            }
            (hits as f64 / samples.max(1) as f64, Some(samples))
        }
    };
    let approximation =
        r[&path] + input_exclusion_prob(r, inp) + output_exclusion_prob(r, j, num_nodes);
    Ok(UnionReport {
        true_union,
        approximation,
        gap: approximation - true_union,
        samples,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexityEntry {
    pub flops: u64,
    pub params: usize,
    pub c: f64,
    pub alpha: f64,
    pub expected: f64,
}

/// Per-path costs, gates and contributions to `E[C]`, keyed by path label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub flop_convention: String,
    pub total_pretrained_flops: u64,
    pub input_node: InputNode,
    pub expected_total: f64,
    pub paths: BTreeMap<String, ComplexityEntry>,
}

pub fn complexity_report(
    graph: &StudentGraph,
    opts: ComplexityOptions,
) -> Result<ComplexityReport> {
    let table = ComplexityTable::for_student(graph)?;
    let probs = ExclusionProbs::for_student(graph);
    let alphas = graph.alphas();
    let terms = expected_complexity_terms(&table, &probs.r, graph.num_nodes(), opts)?;
    let paths = terms
        .iter()
        .map(|(&p, &e)| {
            let spec = graph.spec(p).expect("alive paths have specs");
            (
                p.to_string(),
                ComplexityEntry {
                    flops: spec.flops,
                    params: spec.param_count,
                    c: table.c[&p],
                    alpha: alphas[&p],
                    expected: e,
                },
            )
        })
        .collect();
    Ok(ComplexityReport {
        flop_convention: "multiply-accumulate = 2 FLOPs; pool/norm/relu/add = 1 per output".into(),
        total_pretrained_flops: table.total_flops,
        input_node: opts.input_node,
        expected_total: terms.values().sum(),
        paths,
    })
}
