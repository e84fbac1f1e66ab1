//! Fast self-check suite: gradients, expected complexity, reachability and
//! gate softmax. Needs no data or checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nt_tensor::{grad_check, relative_error, Graph, NodeId, RunningStats, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{build_backbone, BackbonePlan};
use crate::blocks::PathId;
use crate::complexity::{
    expected_complexity_terms, expected_network_complexity, expected_network_complexity_tape,
    input_exclusion_prob, output_exclusion_prob, union_prob_oracle, ComplexityOptions,
    ComplexityTable, InputNode, UnionMethod,
};
use crate::error::Result;
use crate::params::{ParamId, ParamKind};
use crate::pruner::dead_paths;
use crate::student::{attach_proxies, SkipWindow, StudentGraph};
use crate::trainer::{omega, student_objective, TeacherOutputs, TrainConfig};

pub const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Random seeds per gradient check.
    pub grad_seeds: u64,
    /// Random graphs for the reachability oracle.
    pub reachability_graphs: usize,
    /// Random graphs for the softmax properties.
    pub softmax_graphs: usize,
    pub seed: u64,
    /// Evaluates the complexity group with a wrong-signed output term; the
    /// group must then fail.
    #[doc(hidden)]
    pub flip_output_sign: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            grad_seeds: 20,
            reachability_graphs: 1000,
            softmax_graphs: 500,
            seed: 0,
            flip_output_sign: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupResult {
    pub name: &'static str,
    pub checks: usize,
    pub failures: Vec<String>,
    /// Per-check numeric summaries, e.g. worst relative errors.
    pub notes: Vec<String>,
    pub seconds: f64,
}

impl GroupResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Default)]
struct Group {
    checks: usize,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Group {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures.push(what());
        }
    }

    fn result(&mut self, r: Result<()>, what: &str) {
        if let Err(e) = r {
            self.checks += 1;
            self.failures.push(format!("{what}: {e}"));
        }
    }
}

fn timed(name: &'static str, f: impl FnOnce(&mut Group)) -> GroupResult {
    let t = Instant::now();
    let mut g = Group::default();
    f(&mut g);
    GroupResult {
        name,
        checks: g.checks,
        failures: g.failures,
        notes: g.notes,
        seconds: t.elapsed().as_secs_f64(),
    }
}

pub fn run_verify(opts: &VerifyOptions) -> Vec<GroupResult> {
    vec![
        timed("gradients", |g| gradients_group(g, opts)),
        timed("complexity", |g| complexity_group(g, opts)),
        timed("reachability", |g| reachability_group(g, opts)),
        timed("softmax", |g| softmax_group(g, opts)),
    ]
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches data")
}

fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + 0.9 * v.abs());
    }
    t
}

fn rand_distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).expect("shape matches data")
}

type Build = fn(&mut Graph, &[NodeId]) -> nt_tensor::Result<NodeId>;
type Make = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

/// Every differentiable op with an input generator that avoids kinks and ties.
pub fn op_cases() -> Vec<(&'static str, Make, Build)> {
    vec![
        (
            "conv2d",
            |r| {
                vec![
                    rand_tensor(r, &[2, 2, 4, 4]),
                    rand_tensor(r, &[3, 2, 3, 3]),
                    rand_tensor(r, &[3]),
                ]
            },
            |g, x| g.conv2d(x[0], x[1], Some(x[2]), 2, 1),
        ),
        (
            "linear",
            |r| {
                vec![
                    rand_tensor(r, &[3, 4]),
                    rand_tensor(r, &[2, 4]),
                    rand_tensor(r, &[2]),
                ]
            },
            |g, x| g.linear(x[0], x[1], Some(x[2])),
        ),
        (
            "relu",
            |r| vec![rand_off_zero(r, &[3, 4])],
            |g, x| g.relu(x[0]),
        ),
        (
            "batchnorm2d",
            |r| {
                vec![
                    rand_tensor(r, &[3, 2, 2, 2]),
                    rand_tensor(r, &[2]),
                    rand_tensor(r, &[2]),
                ]
            },
            |g, x| g.batchnorm2d(x[0], x[1], x[2], 1e-5, None),
        ),
        (
            "batchnorm2d-eval",
            |r| {
                vec![
                    rand_tensor(r, &[2, 2, 2, 2]),
                    rand_tensor(r, &[2]),
                    rand_tensor(r, &[2]),
                ]
            },
            |g, x| {
                let running = RunningStats {
                    mean: vec![0.1, -0.2],
                    var: vec![0.5, 2.0],
                };
                g.batchnorm2d(x[0], x[1], x[2], 1e-5, Some(running))
            },
        ),
        (
            "maxpool2d",
            |r| vec![rand_distinct(r, &[2, 2, 4, 4])],
            |g, x| g.maxpool2d(x[0], 2),
        ),
        (
            "global_avg_pool",
            |r| vec![rand_tensor(r, &[2, 3, 3, 3])],
            |g, x| g.global_avg_pool(x[0]),
        ),
        (
            "add",
            |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])],
            |g, x| g.add(x[0], x[1]),
        ),
        (
            "sub",
            |r| vec![rand_tensor(r, &[4]), rand_tensor(r, &[4])],
            |g, x| g.sub(x[0], x[1]),
        ),
        (
            "mul",
            |r| vec![rand_tensor(r, &[4]), rand_tensor(r, &[4])],
            |g, x| g.mul(x[0], x[1]),
        ),
        (
            "scale_by",
            |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[1])],
            |g, x| g.scale_by(x[0], x[1]),
        ),
        (
            "scale",
            |r| vec![rand_tensor(r, &[3])],
            |g, x| g.scale(x[0], -2.5),
        ),
        (
            "affine",
            |r| vec![rand_tensor(r, &[3])],
            |g, x| g.affine(x[0], -1.0, 1.0),
        ),
        (
            "softmax",
            |r| vec![rand_tensor(r, &[3, 4])],
            |g, x| g.softmax(x[0]),
        ),
        (
            "log_softmax",
            |r| vec![rand_tensor(r, &[3, 4])],
            |g, x| g.log_softmax(x[0]),
        ),
        (
            "cross_entropy",
            |r| vec![rand_tensor(r, &[4, 3])],
            |g, x| g.cross_entropy(x[0], &[0, 2, 1, 2]),
        ),
        (
            "sum_of_squares",
            |r| vec![rand_tensor(r, &[2, 3])],
            |g, x| g.sum_of_squares(x[0]),
        ),
        ("sum", |r| vec![rand_tensor(r, &[2, 3])], |g, x| g.sum(x[0])),
        (
            "reshape",
            |r| vec![rand_tensor(r, &[2, 3])],
            |g, x| g.reshape(x[0], &[3, 2]),
        ),
        (
            "concat_select",
            |r| vec![rand_tensor(r, &[2]), rand_tensor(r, &[3])],
            |g, x| {
                let c = g.concat(&[x[0], x[1]])?;
                let a = g.select(c, 1)?;
                let b = g.select(c, 3)?;
                g.mul(a, b)
            },
        ),
        (
            "add_all_mul_all",
            |r| {
                vec![
                    rand_tensor(r, &[3]),
                    rand_tensor(r, &[3]),
                    rand_tensor(r, &[3]),
                ]
            },
            |g, x| {
                let s = g.add_all(x)?;
                let p = g.mul_all(x)?;
                g.mul(s, p)
            },
        ),
    ]
}

/// Every path of a student over `num_nodes` nodes with proxy reach `reach`.
pub fn window_paths(num_nodes: usize, reach: usize) -> Vec<PathId> {
    let mut paths = Vec::new();
    for l in 1..=num_nodes {
        for p in l.saturating_sub(reach).max(1)..l {
            paths.push(PathId::proxy(p, l));
        }
        paths.push(PathId::pretrained(l));
    }
    paths
}

/// Builds per-node softmax alphas on the tape from one leaf per path.
pub fn tape_alphas(
    g: &mut Graph,
    paths: &[PathId],
    logits: &[NodeId],
) -> nt_tensor::Result<BTreeMap<PathId, NodeId>> {
    let mut by_node: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in paths.iter().enumerate() {
        by_node.entry(p.dst).or_default().push(i);
    }
    let mut out = BTreeMap::new();
    for idx in by_node.values() {
        let cat = g.concat(&idx.iter().map(|&i| logits[i]).collect::<Vec<_>>())?;
        let sm = g.softmax(cat)?;
        for (k, &i) in idx.iter().enumerate() {
            out.insert(paths[i], g.select(sm, k)?);
        }
    }
    Ok(out)
}

/// Tiny plan for end-to-end checks.
pub fn tiny_plan() -> BackbonePlan {
    BackbonePlan::new(vec![2, 2, 4, 4], 8).expect("tiny plan is valid")
}

/// Central differences of the full student objective with respect to the
/// listed task-specific parameters; returns the worst relative error.
#[allow(clippy::too_many_arguments)]
pub fn objective_grad_error(
    graph: &StudentGraph,
    teacher: &TeacherOutputs,
    x: &Tensor,
    labels: &[usize],
    table: &ComplexityTable,
    cfg: &TrainConfig,
    params: &[ParamId],
    eps: f64,
) -> Result<f64> {
    let (mut g, _, loss, pass) = student_objective(graph, teacher, x, labels, table, cfg)?;
    let grads = g.backward(loss.total)?;
    let value = |gr: &StudentGraph| -> Result<f64> {
        let (g, _, loss, _) = student_objective(gr, teacher, x, labels, table, cfg)?;
        Ok(g.value(loss.total).data()[0])
    };
    let mut worst: f64 = 0.0;
    let mut probe = graph.clone();
    for &id in params {
        let node = pass.node(id).expect("parameter is on the tape");
        let analytic = grads
            .get(node)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; graph.store.value(id).numel()]);
        for (e, &a) in analytic.iter().enumerate() {
            let orig = graph.store.value(id).data()[e];
            probe.store.value_mut(id).data_mut()[e] = orig + eps;
            let fp = value(&probe)?;
            probe.store.value_mut(id).data_mut()[e] = orig - eps;
            let fm = value(&probe)?;
            probe.store.value_mut(id).data_mut()[e] = orig;
            worst = worst.max(relative_error(a, (fp - fm) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// A tiny student, a random batch and matching random teacher targets.
pub fn tiny_objective_fixture(
    seed: u64,
) -> Result<(StudentGraph, TeacherOutputs, Tensor, Vec<usize>)> {
    let plan = tiny_plan();
    let backbone = build_backbone(&plan, 3, seed)?;
    let mut graph = attach_proxies(&backbone, SkipWindow::Limited(2), 3, seed + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    for p in graph.paths().collect::<Vec<_>>() {
        graph.set_gate_logit(p, rng.gen_range(-1.0..1.0))?;
    }
    let x = rand_tensor(&mut rng, &[4, 1, 8, 8]);
    let labels = vec![0, 1, 2, 1];
    let (_, nodes) = backbone.evaluate(&x, nt_tensor::Precision::F64)?;
    let teacher = TeacherOutputs {
        logits: rand_tensor(&mut rng, &[4, 3]),
        nodes: nodes
            .iter()
            .map(|t| {
                let noise = rand_tensor(&mut rng, t.shape());
                Tensor::new(
                    t.shape().to_vec(),
                    t.data()
                        .iter()
                        .zip(noise.data())
                        .map(|(a, b)| a + 0.1 * b)
                        .collect(),
                )
                .expect("same shape")
            })
            .collect(),
    };
    Ok((graph, teacher, x, labels))
}

fn gradients_group(grp: &mut Group, opts: &VerifyOptions) {
    for (name, make, build) in op_cases() {
        let mut worst: f64 = 0.0;
        for s in 0..opts.grad_seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(s));
            match grad_check(build, &make(&mut rng), GRAD_EPS) {
                Ok(r) => worst = worst.max(r.max_rel_error),
                Err(e) => grp.check(false, || format!("{name}: {e}")),
            }
        }
        grp.check(worst < GRAD_TOL, || format!("{name}: rel err {worst:.2e}"));
        grp.notes.push(format!("{name} {worst:.1e}"));
    }

    // E[C] and Ω against central differences
    let mut worst_ec: f64 = 0.0;
    let mut worst_om: f64 = 0.0;
    for s in 0..opts.grad_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(100 + s));
        let num_nodes = rng.gen_range(3..=6);
        let paths = window_paths(num_nodes, rng.gen_range(1..num_nodes));
        let table = random_table(&mut rng, &paths);
        let input_node = if s % 2 == 0 {
            InputNode::Label
        } else {
            InputNode::TensorInput
        };
        let copts = ComplexityOptions {
            input_node,
            ..Default::default()
        };
        let inputs: Vec<Tensor> = paths
            .iter()
            .map(|_| Tensor::from_vec(vec![rng.gen_range(-2.0..2.0)]))
            .collect();
        let report = grad_check(
            |g, x| {
                let alphas = tape_alphas(g, &paths, x)?;
                expected_network_complexity_tape(g, &alphas, &table, num_nodes, copts)
                    .map_err(into_tensor_err)
            },
            &inputs,
            GRAD_EPS,
        );
        match report {
            Ok(r) => worst_ec = worst_ec.max(r.max_rel_error),
            Err(e) => grp.check(false, || format!("E[C]: {e}")),
        }
        let shapes = [vec![2, 3], vec![2, 2, 2]];
        let targets: Vec<Tensor> = shapes.iter().map(|sh| rand_tensor(&mut rng, sh)).collect();
        let t_logits = rand_tensor(&mut rng, &[2, 2]);
        let mut inputs: Vec<Tensor> = shapes.iter().map(|sh| rand_tensor(&mut rng, sh)).collect();
        inputs.push(rand_tensor(&mut rng, &[2, 2]));
        let report = grad_check(
            |g, x| {
                omega(g, &[Some(x[0]), Some(x[1])], &targets, x[2], &t_logits)
                    .map_err(into_tensor_err)
            },
            &inputs,
            GRAD_EPS,
        );
        match report {
            Ok(r) => worst_om = worst_om.max(r.max_rel_error),
            Err(e) => grp.check(false, || format!("omega: {e}")),
        }
    }
    grp.check(worst_ec < GRAD_TOL, || {
        format!("E[C] wrt gate logits: rel err {worst_ec:.2e}")
    });
    grp.check(worst_om < GRAD_TOL, || {
        format!("omega: rel err {worst_om:.2e}")
    });
    grp.notes
        .push(format!("expected_complexity {worst_ec:.1e}"));
    grp.notes.push(format!("omega {worst_om:.1e}"));

    // full objective on a tiny student
    let r = (|| -> Result<f64> {
        let (graph, teacher, x, labels) = tiny_objective_fixture(opts.seed)?;
        let table = ComplexityTable::for_student(&graph)?;
        let cfg = TrainConfig {
            gamma1: 0.7,
            gamma2: 3.0,
            ..TrainConfig::default()
        };
        let ids: Vec<ParamId> = graph
            .store
            .iter()
            .filter(|(_, p)| !p.frozen && p.kind == ParamKind::Weight)
            .map(|(id, _)| id)
            .collect();
        objective_grad_error(&graph, &teacher, &x, &labels, &table, &cfg, &ids, 1e-6)
    })();
    match r {
        Ok(worst) => {
            grp.check(worst < GRAD_TOL, || {
                format!("total objective: rel err {worst:.2e}")
            });
            grp.notes.push(format!("total_objective {worst:.1e}"));
        }
        Err(e) => grp.check(false, || format!("total objective: {e}")),
    }
}

fn into_tensor_err(e: crate::error::Error) -> nt_tensor::TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => nt_tensor::TensorError::ShapeMismatch {
            op: "student objective",
            detail: other.to_string(),
        },
    }
}

fn random_table(rng: &mut ChaCha8Rng, paths: &[PathId]) -> ComplexityTable {
    ComplexityTable::from_values(
        paths
            .iter()
            .map(|&p| {
                (
                    p,
                    if p.is_pretrained() {
                        rng.gen_range(0.05..0.3)
                    } else {
                        rng.gen_range(0.001..0.02)
                    },
                )
            })
            .collect(),
    )
}

/// The worked three-node configuration: gates and the expected terms,
/// evaluated by hand from the exclusion formula.
pub fn three_node_example() -> (
    BTreeMap<PathId, f64>,
    ComplexityTable,
    BTreeMap<PathId, f64>,
) {
    let g = PathId::pretrained;
    let a = PathId::proxy;
    let alphas = BTreeMap::from([
        (g(1), 1.0),
        (g(2), 0.7),
        (a(1, 2), 0.3),
        (g(3), 0.6),
        (a(2, 3), 0.4),
    ]);
    let c_g = 1.0 / 3.0;
    let c_a = 1.0 / 60.0;
    let table = ComplexityTable::from_values(BTreeMap::from([
        (g(1), c_g),
        (g(2), c_g),
        (g(3), c_g),
        (a(1, 2), c_a),
        (a(2, 3), c_a),
    ]));
    // r = 1 - α: r11 = 0, r22 = 0.3, r12 = 0.7, r33 = 0.4, r23 = 0.6
    // p_inp at the label node: node1 = r11, node2 = r22 r12, node3 = r33 r23
    // p_out at the destination: node1 = r22 r12, node2 = r33 r23, node3 = 0
    let expected = BTreeMap::from([
        (g(1), c_g * (1.0 - 0.0 - 0.0 - 0.3 * 0.7)),
        (g(2), c_g * (1.0 - 0.3 - 0.3 * 0.7 - 0.4 * 0.6)),
        (g(3), c_g * (1.0 - 0.4 - 0.4 * 0.6 - 0.0)),
        (a(1, 2), c_a * (1.0 - 0.7 - 0.0 - 0.4 * 0.6)),
        (a(2, 3), c_a * (1.0 - 0.6 - 0.3 * 0.7 - 0.0)),
    ]);
    (alphas, table, expected)
}

fn complexity_group(grp: &mut Group, opts: &VerifyOptions) {
    let copts = ComplexityOptions {
        flip_output_sign: opts.flip_output_sign,
        ..Default::default()
    };
    let (alphas, table, expected) = three_node_example();
    let r: BTreeMap<PathId, f64> = alphas.iter().map(|(&p, &a)| (p, 1.0 - a)).collect();
    match expected_complexity_terms(&table, &r, 3, copts) {
        Ok(terms) => {
            for (p, want) in &expected {
                let got = terms[p];
                grp.check((got - want).abs() < 1e-9, || {
                    format!("E[{p}] = {got}, oracle {want}")
                });
            }
        }
        Err(e) => grp.check(false, || format!("three-node example: {e}")),
    }

    // all pre-trained: every proxy dead, every α_l^l = 1
    let r = (|| -> Result<f64> {
        let backbone = build_backbone(&BackbonePlan::default(), 10, opts.seed)?;
        let mut s = attach_proxies(&backbone, SkipWindow::Limited(3), 10, opts.seed)?;
        let table = ComplexityTable::for_student(&s)?;
        s.set_alive((1..=s.num_nodes()).map(PathId::pretrained).collect())?;
        expected_network_complexity(&s, &table, copts)
    })();
    match r {
        Ok(e) => grp.check(e == 1.0, || {
            format!("all-pretrained E[C] = {e:.17}, expected exactly 1")
        }),
        Err(e) => grp.check(false, || format!("all-pretrained: {e}")),
    }

    // exclusion products against their closed forms, and tape vs value
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xC0FFEE);
    let mut worst_gap: f64 = 0.0;
    for _ in 0..200 {
        let num_nodes = rng.gen_range(2..=6);
        let paths = window_paths(num_nodes, rng.gen_range(1..=num_nodes));
        let alive: Vec<PathId> = paths
            .iter()
            .copied()
            .filter(|p| p.is_pretrained() || rng.gen_bool(0.7))
            .collect();
        let r: BTreeMap<PathId, f64> = alive
            .iter()
            .map(|&p| (p, rng.gen_range(0.0..1.0)))
            .collect();
        for i in 0..=num_nodes {
            let closed: f64 = if i == 0 {
                0.0
            } else {
                r.iter()
                    .filter(|(p, _)| p.dst == i)
                    .map(|(_, v)| v)
                    .product()
            };
            let got = input_exclusion_prob(&r, i);
            grp.check((got - closed).abs() < 1e-12, || {
                format!("input exclusion at node {i}: {got} vs {closed}")
            });
            let closed_out: f64 = if i == num_nodes {
                0.0
            } else {
                r.get(&PathId::pretrained(i + 1)).copied().unwrap_or(1.0)
                    * r.iter()
                        .filter(|(p, _)| !p.is_pretrained() && p.src == i)
                        .map(|(_, v)| v)
                        .product::<f64>()
            };
            let got = output_exclusion_prob(&r, i, num_nodes);
            grp.check((got - closed_out).abs() < 1e-12, || {
                format!("output exclusion at node {i}: {got} vs {closed_out}")
            });
        }
        if let Some(&p) = alive.iter().find(|p| !p.is_pretrained()) {
            if let Ok(u) = union_prob_oracle(&r, p, num_nodes, InputNode::Label, UnionMethod::Exact)
            {
                worst_gap = worst_gap.max(u.gap.abs());
            }
        }
    }
    grp.notes
        .push(format!("largest union-approximation gap {worst_gap:.3}"));
}

/// Independent oracle: a path is live iff some node-0 to node-L walk over
/// alive paths uses it.
pub fn live_paths_oracle(alive: &BTreeSet<PathId>, num_nodes: usize) -> BTreeSet<PathId> {
    fn walk(
        at: usize,
        end: usize,
        alive: &[PathId],
        stack: &mut Vec<PathId>,
        live: &mut BTreeSet<PathId>,
    ) {
        if at == end {
            live.extend(stack.iter().copied());
            return;
        }
        for &p in alive.iter().filter(|p| p.tensor_input() == at) {
            stack.push(p);
            walk(p.dst, end, alive, stack, live);
            stack.pop();
        }
    }
    let list: Vec<PathId> = alive.iter().copied().collect();
    let mut live = BTreeSet::new();
    walk(0, num_nodes, &list, &mut Vec::new(), &mut live);
    live
}

/// A random alive set over a random window.
pub fn random_alive_set(rng: &mut ChaCha8Rng) -> (BTreeSet<PathId>, usize) {
    let num_nodes = rng.gen_range(2..=8);
    let reach = rng.gen_range(1..=num_nodes);
    let keep = rng.gen_range(0.3..0.9);
    let alive = window_paths(num_nodes, reach)
        .into_iter()
        .filter(|_| rng.gen_bool(keep))
        .collect();
    (alive, num_nodes)
}

fn reachability_group(grp: &mut Group, opts: &VerifyOptions) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EAC);
    for i in 0..opts.reachability_graphs {
        let (alive, n) = random_alive_set(&mut rng);
        let dead: BTreeSet<PathId> = dead_paths(&alive, n).into_iter().map(|(p, _)| p).collect();
        let kept: BTreeSet<PathId> = alive.difference(&dead).copied().collect();
        let oracle = live_paths_oracle(&alive, n);
        grp.check(kept == oracle, || {
            format!("graph {i}: elimination kept {kept:?}, oracle {oracle:?}")
        });
        grp.check(dead_paths(&kept, n).is_empty(), || {
            format!("graph {i}: elimination is not idempotent")
        });
    }
}

fn softmax_group(grp: &mut Group, opts: &VerifyOptions) {
    let r = (|| -> Result<()> {
        let plan = tiny_plan();
        let backbone = build_backbone(&plan, 3, opts.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x50F7);
        let windows = [
            SkipWindow::Limited(1),
            SkipWindow::Limited(2),
            SkipWindow::Dense,
        ];
        let bases: Vec<StudentGraph> = windows
            .iter()
            .map(|&w| attach_proxies(&backbone, w, 3, opts.seed))
            .collect::<Result<_>>()?;
        for i in 0..opts.softmax_graphs {
            let mut s = bases[i % bases.len()].clone();
            let paths: Vec<PathId> = s.paths().collect();
            let alive = paths
                .iter()
                .copied()
                .filter(|_| rng.gen_bool(0.7))
                .collect();
            s.set_alive(alive)?;
            let symmetric = i % 5 == 0;
            for &p in &paths {
                let v = if symmetric {
                    0.37
                } else {
                    rng.gen_range(-30.0..30.0)
                };
                s.set_gate_logit(p, v)?;
            }
            for l in 1..=s.num_nodes() {
                let m = s.incoming(l).len();
                if m == 0 {
                    continue;
                }
                let alphas = s.merge_alphas(l)?;
                let sum: f64 = alphas.values().sum();
                grp.check((sum - 1.0).abs() < 1e-12, || {
                    format!("graph {i} node {l}: Σα = {sum}")
                });
                grp.check(alphas.values().all(|&a| (0.0..=1.0).contains(&a)), || {
                    format!("graph {i} node {l}: α outside [0, 1]")
                });
                if m == 1 {
                    let a = *alphas.values().next().expect("one path");
                    grp.check(a == 1.0, || {
                        format!("graph {i} node {l}: singleton α = {a}")
                    });
                }
                if symmetric {
                    let want = 1.0 / m as f64;
                    grp.check(alphas.values().all(|a| (a - want).abs() < 1e-12), || {
                        format!("graph {i} node {l}: symmetric α != 1/{m}")
                    });
                }
            }
        }
        Ok(())
    })();
    grp.result(r, "softmax");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_agrees_on_a_chain() {
        let alive: BTreeSet<PathId> = (1..=4).map(PathId::pretrained).collect();
        assert_eq!(live_paths_oracle(&alive, 4), alive);
        let mut cut = alive.clone();
        cut.remove(&PathId::pretrained(2));
        assert!(live_paths_oracle(&cut, 4).is_empty());
    }

    #[test]
    fn flipped_sign_fails_complexity_group() {
        let opts = VerifyOptions {
            flip_output_sign: true,
            ..VerifyOptions::default()
        };
        let r = timed("complexity", |g| complexity_group(g, &opts));
        assert!(!r.passed());
        let ok = timed("complexity", |g| {
            complexity_group(g, &VerifyOptions::default())
        });
        assert!(ok.passed(), "{:?}", ok.failures);
    }
}
