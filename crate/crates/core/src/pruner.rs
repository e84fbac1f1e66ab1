//! Discrete pruning of a trained student: proxy thresholding, ranked
//! removal of pre-trained blocks, dead-block elimination, fine-tuning, and
//! selection of the leanest model within the accuracy slack.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::PathId;
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::student::StudentGraph;
use crate::trainer::{student_accuracy, train_student, History, Teacher, TrainConfig};

/// Slack on accuracy comparisons so `k/N` fractions do not fail on the
/// last ulp of `acc_T - slack`.
const ACC_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemovalReason {
    BelowThreshold,
    RankedOut,
    InputDead,
    OutputDead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedPath {
    pub path: PathId,
    pub label: String,
    pub reason: RemovalReason,
}

impl RemovedPath {
    fn new(path: PathId, reason: RemovalReason) -> Self {
        Self {
            path,
            label: path.to_string(),
            reason,
        }
    }
}

/// Kills every alive proxy whose current gate is below `theta`.
pub fn prune_proxies(graph: &mut StudentGraph, theta: f64) -> Vec<RemovedPath> {
    let alphas = graph.alphas();
    let doomed: Vec<PathId> = alphas
        .iter()
        .filter(|(p, &a)| !p.is_pretrained() && a < theta)
        .map(|(&p, _)| p)
        .collect();
    for &p in &doomed {
        graph.kill(p);
    }
    doomed
        .into_iter()
        .map(|p| RemovedPath::new(p, RemovalReason::BelowThreshold))
        .collect()
}

/// The order in which pre-trained blocks are removed: smallest `α_l^l`
/// first, deeper block first on ties.
pub fn removal_ranking(graph: &StudentGraph) -> Vec<(PathId, f64)> {
    let alphas = graph.alphas();
    let mut ranked: Vec<(PathId, f64)> = alphas
        .into_iter()
        .filter(|(p, _)| p.is_pretrained())
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.0.dst.cmp(&a.0.dst)));
    ranked
}

/// Removes the `n` lowest-ranked pre-trained blocks and then everything
/// that becomes dead. If the classifier would lose its input the graph is
/// left untouched and the removal is infeasible.
pub fn prune_pretrained(graph: &mut StudentGraph, n: usize) -> Result<Vec<RemovedPath>> {
    let ranked = removal_ranking(graph);
    if n > 0 && n >= ranked.len() {
        return Err(Error::Infeasible { n });
    }
    let mut trial = graph.clone();
    let mut removed = Vec::with_capacity(n);
    for &(p, _) in ranked.iter().take(n) {
        trial.kill(p);
        removed.push(RemovedPath::new(p, RemovalReason::RankedOut));
    }
    match eliminate_dead_blocks(&mut trial) {
        Ok(more) => removed.extend(more),
        Err(Error::OverPruned) => return Err(Error::Infeasible { n }),
        Err(e) => return Err(e),
    }
    *graph = trial;
    Ok(removed)
}

/// Liveness of every alive path by reachability over alive paths: its
/// tensor-input node must be reachable from the stem output, and its output
/// node must reach the classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reachability {
    pub from_input: Vec<bool>,
    pub to_classifier: Vec<bool>,
}

pub fn reachability(alive: &BTreeSet<PathId>, num_nodes: usize) -> Reachability {
    let mut from_input = vec![false; num_nodes + 1];
    from_input[0] = true;
    for l in 1..=num_nodes {
        from_input[l] = alive
            .iter()
            .any(|p| p.dst == l && from_input[p.tensor_input()]);
    }
    let mut to_classifier = vec![false; num_nodes + 1];
    to_classifier[num_nodes] = true;
    for j in (0..num_nodes).rev() {
        to_classifier[j] = alive
            .iter()
            .any(|p| p.tensor_input() == j && to_classifier[p.dst]);
    }
    Reachability {
        from_input,
        to_classifier,
    }
}

/// Paths that lie on no alive input-to-classifier route, with the reason.
/// Input death is reported when both apply.
pub fn dead_paths(alive: &BTreeSet<PathId>, num_nodes: usize) -> Vec<(PathId, RemovalReason)> {
    let r = reachability(alive, num_nodes);
    alive
        .iter()
        .filter_map(|&p| {
            if !r.from_input[p.tensor_input()] {
                Some((p, RemovalReason::InputDead))
            } else if !r.to_classifier[p.dst] {
                Some((p, RemovalReason::OutputDead))
            } else {
                None
            }
        })
        .collect()
}

/// Removes every block that can no longer influence the output. Errors
/// without modifying the graph if the classifier input is unreachable.
pub fn eliminate_dead_blocks(graph: &mut StudentGraph) -> Result<Vec<RemovedPath>> {
    let n = graph.num_nodes();
    if !reachability(graph.alive(), n).from_input[n] {
        return Err(Error::OverPruned);
    }
    let dead = dead_paths(graph.alive(), n);
    for &(p, _) in &dead {
        graph.kill(p);
    }
    Ok(dead
        .into_iter()
        .map(|(p, r)| RemovedPath::new(p, r))
        .collect())
}

/// Retrains the surviving task-specific parameters without the complexity
/// penalty.
pub fn finetune_pruned(
    graph: &mut StudentGraph,
    teacher: &Teacher,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<History> {
    if cfg.gamma1 != 0.0 {
        return Err(Error::Config(format!(
            "fine-tuning requires γ1 = 0, got {}",
            cfg.gamma1
        )));
    }
    let n = graph.num_nodes();
    if !reachability(graph.alive(), n).from_input[n] {
        return Err(Error::OverPruned);
    }
    train_student(graph, teacher, data, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub n: usize,
    pub feasible: bool,
    pub removed_paths: Vec<RemovedPath>,
    pub n_removed_pretrained: usize,
    /// Unpruned student network (all proxies attached).
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    /// The backbone the student was built from, for "% removed" figures.
    pub backbone_params: usize,
    pub backbone_flops: u64,
    pub acc_teacher: f64,
    pub acc_pruned: f64,
    pub acc_finetuned: f64,
    /// Proxies whose gate fell below θ during fine-tuning; reported only.
    pub below_theta_after_finetune: Vec<String>,
    pub qualifies: bool,
}

impl PruneReport {
    pub fn params_removed_pct(&self) -> f64 {
        100.0 * (1.0 - self.params_after as f64 / self.backbone_params as f64)
    }

    pub fn flops_removed_pct(&self) -> f64 {
        100.0 * (1.0 - self.flops_after as f64 / self.backbone_flops as f64)
    }

    pub const CSV_HEADER: &'static str =
        "n,feasible,n_removed_pretrained,params_after,flops_after,params_removed_pct,flops_removed_pct,acc_teacher,acc_pruned,acc_finetuned,qualifies";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{:.3},{},{},{},{}",
            self.n,
            self.feasible,
            self.n_removed_pretrained,
            self.params_after,
            self.flops_after,
            self.params_removed_pct(),
            self.flops_removed_pct(),
            self.acc_teacher,
            self.acc_pruned,
            self.acc_finetuned,
            self.qualifies
        )
    }
}

pub fn reports_csv(reports: &[PruneReport]) -> String {
    let mut s = format!("{}\n", PruneReport::CSV_HEADER);
    for r in reports {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// One sweep candidate as seen by the selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub n: usize,
    pub params: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    /// Index of the leanest candidate within the slack.
    Qualified(usize),
    /// No candidate qualified; fall back to the `n = 0` model.
    Fallback,
}

pub fn qualifies(accuracy: f64, acc_teacher: f64, slack: f64) -> bool {
    accuracy + ACC_EPS >= acc_teacher - slack
}

/// Fewest parameters among candidates with `accuracy >= acc_T - slack`;
/// ties go to the earlier candidate.
pub fn select_leanest(candidates: &[Candidate], acc_teacher: f64, slack: f64) -> Selection {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| qualifies(c.accuracy, acc_teacher, slack))
        .min_by_key(|(i, c)| (c.params, *i))
        .map_or(Selection::Fallback, |(i, _)| Selection::Qualified(i))
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub selected: StudentGraph,
    pub selected_n: usize,
    /// True when nothing met the slack and the `n = 0` model was returned.
    pub fallback: bool,
    pub reports: Vec<PruneReport>,
    pub proxies_removed: Vec<RemovedPath>,
}

impl SweepOutcome {
    pub fn selected_report(&self) -> Option<&PruneReport> {
        self.reports
            .iter()
            .find(|r| r.n == self.selected_n && r.feasible)
    }
}

/// Thresholds proxies once, then for every `n` removes `n` pre-trained
/// blocks, eliminates dead blocks and fine-tunes (`γ1 = 0`). Returns the
/// leanest model within `cfg.accuracy_slack` of the teacher.
pub fn sweep_and_select(
    graph: &StudentGraph,
    teacher: &Teacher,
    data: &TaskData,
    cfg: &TrainConfig,
    n_values: &[usize],
) -> Result<SweepOutcome> {
    if n_values.is_empty() {
        return Err(Error::Config("n_values is empty".into()));
    }
    if n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "n_values {n_values:?} must be strictly ascending"
        )));
    }
    let finetune_cfg = TrainConfig {
        gamma1: 0.0,
        ..cfg.clone()
    };
    finetune_cfg.validate()?;
    let mut base = graph.clone();
    let proxies_removed = prune_proxies(&mut base, cfg.theta);

    let run = |n: usize| -> Result<(PruneReport, Option<StudentGraph>)> {
        run_one(
            graph,
            &base,
            teacher,
            data,
            &finetune_cfg,
            &proxies_removed,
            n,
        )
    };
    let results: Vec<(PruneReport, Option<StudentGraph>)> = n_values
        .par_iter()
        .map(|&n| run(n))
        .collect::<Result<_>>()?;

    let feasible: Vec<(usize, &PruneReport)> = results
        .iter()
        .enumerate()
        .filter(|(_, (r, _))| r.feasible)
        .map(|(i, (r, _))| (i, r))
        .collect();
    let candidates: Vec<Candidate> = feasible
        .iter()
        .map(|(_, r)| Candidate {
            n: r.n,
            params: r.params_after,
            accuracy: r.acc_finetuned,
        })
        .collect();
    let mut reports: Vec<PruneReport> = results.iter().map(|(r, _)| r.clone()).collect();
    match select_leanest(&candidates, teacher.accuracy, cfg.accuracy_slack) {
        Selection::Qualified(i) => {
            let idx = feasible[i].0;
            let selected = results[idx]
                .1
                .clone()
                .expect("feasible runs keep their graph");
            info!("selected n = {}", reports[idx].n);
            Ok(SweepOutcome {
                selected,
                selected_n: reports[idx].n,
                fallback: false,
                reports,
                proxies_removed,
            })
        }
        Selection::Fallback => {
            let existing = results.iter().find(|(r, _)| r.n == 0 && r.feasible);
            let selected = match existing {
                Some((_, g)) => g.clone().expect("feasible runs keep their graph"),
                None => {
                    let (r, g) = run(0)?;
                    reports.insert(0, r);
                    g.expect("n = 0 is always feasible")
                }
            };
            info!("no candidate within slack; falling back to n = 0");
            Ok(SweepOutcome {
                selected,
                selected_n: 0,
                fallback: true,
                reports,
                proxies_removed,
            })
        }
    }
}

/// A single sweep candidate: θ-prunes proxies, removes `n` pre-trained
/// blocks, eliminates dead blocks and fine-tunes with `γ1 = 0`. The graph
/// is `None` when `n` is infeasible. Same result as the matching entry of
/// [`sweep_and_select`].
pub fn prune_candidate(
    graph: &StudentGraph,
    teacher: &Teacher,
    data: &TaskData,
    cfg: &TrainConfig,
    n: usize,
) -> Result<(PruneReport, Option<StudentGraph>)> {
    let finetune_cfg = TrainConfig {
        gamma1: 0.0,
        ..cfg.clone()
    };
    finetune_cfg.validate()?;
    let mut base = graph.clone();
    let proxies_removed = prune_proxies(&mut base, cfg.theta);
    run_one(
        graph,
        &base,
        teacher,
        data,
        &finetune_cfg,
        &proxies_removed,
        n,
    )
}

fn run_one(
    original: &StudentGraph,
    base: &StudentGraph,
    teacher: &Teacher,
    data: &TaskData,
    cfg: &TrainConfig,
    proxies_removed: &[RemovedPath],
    n: usize,
) -> Result<(PruneReport, Option<StudentGraph>)> {
    let precision = cfg.precision();
    let backbone_params =
        original.frozen_backbone_params() + original.classifier_spec().param_count;
    let backbone_flops = original.plan.stem_spec().flops
        + (1..=original.num_nodes())
            .map(|l| original.plan.block_spec(l).flops)
            .sum::<u64>()
        + original.classifier_spec().flops;
    let mut report = PruneReport {
        n,
        feasible: false,
        removed_paths: proxies_removed.to_vec(),
        n_removed_pretrained: 0,
        params_before: original.network_params(),
        params_after: original.network_params(),
        flops_before: original.network_flops(),
        flops_after: original.network_flops(),
        backbone_params,
        backbone_flops,
        acc_teacher: teacher.accuracy,
        acc_pruned: f64::NAN,
        acc_finetuned: f64::NAN,
        below_theta_after_finetune: Vec::new(),
        qualifies: false,
    };
    let mut g = base.clone();
    let removed = match prune_pretrained(&mut g, n) {
        Ok(r) => r,
        Err(Error::Infeasible { .. }) => {
            info!("n = {n} infeasible");
            return Ok((report, None));
        }
        Err(e) => return Err(e),
    };
    report.removed_paths.extend(removed);
    report.feasible = true;
    report.n_removed_pretrained = report
        .removed_paths
        .iter()
        .filter(|r| r.path.is_pretrained())
        .count();
    report.acc_pruned = student_accuracy(&g, &data.test, precision)?;
    let history = finetune_pruned(&mut g, teacher, data, cfg)?;
    report.acc_finetuned = match history.final_test_acc() {
        Some(a) => a,
        None => student_accuracy(&g, &data.test, precision)?,
    };
    report.below_theta_after_finetune = g
        .alphas()
        .into_iter()
        .filter(|(p, a)| !p.is_pretrained() && *a < cfg.theta)
        .map(|(p, _)| p.to_string())
        .collect();
    report.params_after = g.network_params();
    report.flops_after = g.network_flops();
    report.qualifies = qualifies(report.acc_finetuned, teacher.accuracy, cfg.accuracy_slack);
    info!(
        "n = {n}: removed {} pre-trained, acc {:.4} -> {:.4} (teacher {:.4})",
        report.n_removed_pretrained, report.acc_pruned, report.acc_finetuned, teacher.accuracy
    );
    Ok((report, Some(g)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(n: usize, params: usize, accuracy: f64) -> Candidate {
        Candidate {
            n,
            params,
            accuracy,
        }
    }

    #[test]
    fn selects_leanest_within_slack() {
        let acc_t = 0.9;
        let cands = [
            c(2, 800, acc_t - 0.001),
            c(4, 600, acc_t - 0.003),
            c(6, 400, acc_t - 0.02),
        ];
        assert_eq!(
            select_leanest(&cands, acc_t, 0.005),
            Selection::Qualified(1)
        );
    }

    #[test]
    fn falls_back_when_nothing_qualifies() {
        let cands = [c(0, 1000, 0.5), c(2, 800, 0.4)];
        assert_eq!(select_leanest(&cands, 0.9, 0.005), Selection::Fallback);
        assert_eq!(select_leanest(&[], 0.9, 0.005), Selection::Fallback);
    }

    #[test]
    fn boundary_accuracy_qualifies() {
        assert!(qualifies(0.995, 1.0, 0.005));
        assert!(!qualifies(0.994, 1.0, 0.005));
    }
}
