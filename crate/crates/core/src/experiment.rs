//! Config-driven pipeline: generate data, pre-train, train teachers, tailor,
//! prune and report. Each phase owns a directory under the output root and
//! reads only what earlier phases wrote there.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! data/<task>/{train,test}-{images,labels}.idx, metrics.json
//! pretrain/weights.{nttn,json}, history.csv, metrics.json
//! teach/<task>/weights.{nttn,json}, history.csv, metrics.json
//! tailor/<task>/weights.{nttn,json}, layout.json, history.csv, alphas.json,
//!               complexity.json, student.dot, metrics.json
//! prune/<task>/n<k>/weights.{nttn,json}, layout.json, report.json
//! sweep/<task>/selection.json, reports.csv, selected.dot
//! report/summary.{csv,json}, <task>.dot
//! ```
//!
//! Every phase directory also holds `config.json`, the full experiment
//! config that produced it.
//!
//! Seeds: the phase seed is `phase_seed(root, label)` with labels
//! `data:<task>`, `pretrain`, `teach:<task>`, `tailor:<task>` and
//! `prune:<task>`. Seeds written inside the per-phase train configs are
//! ignored.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, Backbone, BackbonePlan};
use crate::complexity::{complexity_report, expected_network_complexity, ComplexityTable};
use crate::data::{gen_task, read_idx, write_idx, Dataset, Difficulty, Split, TaskData};
use crate::error::{Error, Result};
use crate::pruner::{
    prune_candidate, reports_csv, select_leanest, Candidate, PruneReport, Selection,
};
use crate::student::{attach_proxies, SkipWindow, StudentGraph, StudentLayout};
use crate::trainer::{
    pretrain_backbone, student_accuracy, train_student, train_teacher, History, Teacher,
    TrainConfig,
};

const WEIGHTS: &str = "weights";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskSource {
    Synthetic {
        difficulty: Difficulty,
        n_train: usize,
        n_test: usize,
    },
    /// External IDX files; pixels are scaled to `[0, 1]`.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Directory name for the task's artifacts: `[A-Za-z0-9_-]+`.
    pub name: String,
    #[serde(flatten)]
    pub source: TaskSource,
}

impl TaskSpec {
    pub fn synthetic(difficulty: Difficulty, n_train: usize, n_test: usize) -> Self {
        Self {
            name: difficulty.name().to_string(),
            source: TaskSource::Synthetic {
                difficulty,
                n_train,
                n_test,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub plan: BackbonePlan,
    pub source: TaskSpec,
    pub targets: Vec<TaskSpec>,
    pub window: SkipWindow,
    /// Proxy gate threshold; overrides `theta` in every phase config.
    pub theta: f64,
    /// Accuracy slack for selection; overrides `accuracy_slack` likewise.
    pub accuracy_slack: f64,
    /// Pre-trained block removal counts to sweep, strictly ascending.
    pub n_values: Vec<usize>,
    pub pretrain: TrainConfig,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    /// Post-pruning fine-tuning; `gamma1` is forced to 0.
    pub finetune: TrainConfig,
}

impl Default for ExperimentConfig {
    /// Desk-scale settings calibrated on the synthetic tasks.
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            plan: BackbonePlan::default(),
            source: TaskSpec::synthetic(Difficulty::Source, 1500, 400),
            targets: vec![
                TaskSpec::synthetic(Difficulty::Easy, 600, 400),
                TaskSpec::synthetic(Difficulty::Hard, 600, 400),
            ],
            window: SkipWindow::Limited(3),
            theta: 0.05,
            accuracy_slack: 0.005,
            n_values: vec![0, 2, 4, 6],
            pretrain: TrainConfig {
                lr: 0.05,
                epochs: 10,
                eval_every_epoch: false,
                ..TrainConfig::default()
            },
            teacher: TrainConfig {
                lr: 0.005,
                epochs: 15,
                eval_every_epoch: false,
                ..TrainConfig::default()
            },
            student: TrainConfig {
                gamma1: 3.0,
                gamma2: 10.0,
                lr: 0.3,
                epochs: 25,
                gate_lr_scale: 3.0,
                eval_every_epoch: false,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                gamma1: 0.0,
                gamma2: 10.0,
                lr: 0.01,
                epochs: 5,
                gate_lr_scale: 0.0,
                eval_every_epoch: false,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        let mut names = BTreeSet::new();
        for t in std::iter::once(&self.source).chain(&self.targets) {
            let ok = !t.name.is_empty()
                && t.name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if !ok {
                return Err(Error::Config(format!(
                    "task name {:?} is not a plain identifier",
                    t.name
                )));
            }
            if !names.insert(t.name.as_str()) {
                return Err(Error::Config(format!("duplicate task name {:?}", t.name)));
            }
        }
        if self.n_values.is_empty() || self.n_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "n_values {:?} must be non-empty and strictly ascending",
                self.n_values
            )));
        }
        for phase in ["pretrain", "teach", "tailor", "prune"] {
            self.phase_config(phase, "").validate()?;
        }
        Ok(())
    }

    /// The train config of `phase` with its derived seed and shared
    /// selection settings filled in.
    pub fn phase_config(&self, phase: &str, task: &str) -> TrainConfig {
        let (base, label) = match phase {
            "pretrain" => (&self.pretrain, "pretrain".to_string()),
            "teach" => (&self.teacher, format!("teach:{task}")),
            "tailor" => (&self.student, format!("tailor:{task}")),
            "prune" => (&self.finetune, format!("prune:{task}")),
            other => panic!("unknown phase {other}"),
        };
        let mut cfg = TrainConfig {
            seed: phase_seed(self.seed, &label),
            theta: self.theta,
            accuracy_slack: self.accuracy_slack,
            ..base.clone()
        };
        if phase == "prune" {
            cfg.gamma1 = 0.0;
        }
        cfg
    }

    /// Forces fp64 arithmetic in every phase.
    pub fn force_fp64(&mut self) {
        for c in [
            &mut self.pretrain,
            &mut self.teacher,
            &mut self.student,
            &mut self.finetune,
        ] {
            c.fp32 = false;
        }
    }
}

/// Seed for the phase named `label`, derived from the root seed.
pub fn phase_seed(root: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the root seed
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01B3);
    }
    let mut z = root ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMetrics {
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub train_digest: u64,
    pub test_digest: u64,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub num_classes: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub params: usize,
    pub flops: u64,
    pub loss_not_decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherMetrics {
    pub num_classes: usize,
    pub train_acc: f64,
    pub acc_teacher: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailorMetrics {
    pub train_acc: f64,
    pub test_acc: f64,
    pub expected_complexity: f64,
    pub task_specific_params: usize,
    pub frozen_backbone_params: usize,
    /// Task-specific parameters as a percentage of the frozen backbone.
    pub task_specific_pct: f64,
    pub loss_not_decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSelection {
    pub selected_n: usize,
    pub fallback: bool,
    pub acc_teacher: f64,
    pub report: PruneReport,
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub selected_n: usize,
    pub fallback: bool,
    pub blocks_removed: usize,
    pub params_removed_pct: f64,
    pub flops_removed_pct: f64,
    pub acc_teacher: f64,
    pub acc_selected: f64,
    pub acc_gap: f64,
    pub task_specific_pct: f64,
}

pub const REPORT_CSV_HEADER: &str = "task,selected_n,fallback,blocks_removed,params_removed_pct,flops_removed_pct,acc_teacher,acc_selected,acc_gap,task_specific_pct";

impl ReportRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{:.3},{:.4},{:.4},{:.4},{:.3}",
            self.task,
            self.selected_n,
            self.fallback,
            self.blocks_removed,
            self.params_removed_pct,
            self.flops_removed_pct,
            self.acc_teacher,
            self.acc_selected,
            self.acc_gap,
            self.task_specific_pct
        )
    }
}

/// An experiment rooted at `cfg.out_dir`.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn root(&self) -> &Path {
        &self.cfg.out_dir
    }

    pub fn data_dir(&self, task: &str) -> PathBuf {
        self.root().join("data").join(task)
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.root().join("pretrain")
    }

    pub fn teach_dir(&self, task: &str) -> PathBuf {
        self.root().join("teach").join(task)
    }

    pub fn tailor_dir(&self, task: &str) -> PathBuf {
        self.root().join("tailor").join(task)
    }

    pub fn prune_dir(&self, task: &str, n: usize) -> PathBuf {
        self.root().join("prune").join(task).join(format!("n{n}"))
    }

    pub fn sweep_dir(&self, task: &str) -> PathBuf {
        self.root().join("sweep").join(task)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root().join("report")
    }

    fn target(&self, task: &str) -> Result<&TaskSpec> {
        self.cfg
            .targets
            .iter()
            .find(|t| t.name == task)
            .ok_or_else(|| Error::Config(format!("no target task named {task:?}")))
    }

    fn all_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        std::iter::once(&self.cfg.source).chain(&self.cfg.targets)
    }

    fn echo_config(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), self.cfg.to_json()?)?;
        Ok(())
    }

    /// Renders or ingests every task and stores it as IDX.
    pub fn gen_data(&self) -> Result<Vec<DataMetrics>> {
        let mut out = Vec::new();
        for spec in self.all_tasks() {
            let data = match &spec.source {
                TaskSource::Synthetic {
                    difficulty,
                    n_train,
                    n_test,
                } => gen_task(
                    *difficulty,
                    *n_train,
                    *n_test,
                    phase_seed(self.cfg.seed, &format!("data:{}", spec.name)),
                )?,
                TaskSource::Idx {
                    train_images,
                    train_labels,
                    test_images,
                    test_labels,
                } => {
                    let train = read_idx(train_images, train_labels)?;
                    let mut test = read_idx(test_images, test_labels)?;
                    test.split = Split::Test;
                    test.num_classes = test.num_classes.max(train.num_classes);
                    let train = Dataset {
                        num_classes: test.num_classes,
                        ..train
                    };
                    TaskData { train, test }
                }
            };
            data.train.validate(10)?;
            data.test.validate(10)?;
            let dir = self.data_dir(&spec.name);
            fs::create_dir_all(&dir)?;
            write_idx(
                &data.train,
                &dir.join("train-images.idx"),
                &dir.join("train-labels.idx"),
            )?;
            write_idx(
                &data.test,
                &dir.join("test-images.idx"),
                &dir.join("test-labels.idx"),
            )?;
            // digests of what later phases will read back
            let stored =
                self.load_task(&spec.name, data.train.num_classes, &data.train.provenance)?;
            let m = DataMetrics {
                num_classes: data.train.num_classes,
                n_train: data.train.len(),
                n_test: data.test.len(),
                train_digest: stored.train.digest(),
                test_digest: stored.test.digest(),
                provenance: data.train.provenance.clone(),
            };
            write_json(&dir.join("metrics.json"), &m)?;
            self.echo_config(&dir)?;
            info!(
                "gen-data {}: {} train / {} test",
                spec.name, m.n_train, m.n_test
            );
            out.push(m);
        }
        Ok(out)
    }

    fn load_task(&self, task: &str, num_classes: usize, provenance: &str) -> Result<TaskData> {
        let dir = self.data_dir(task);
        let mut train = read_idx(&dir.join("train-images.idx"), &dir.join("train-labels.idx"))?;
        let mut test = read_idx(&dir.join("test-images.idx"), &dir.join("test-labels.idx"))?;
        test.split = Split::Test;
        for ds in [&mut train, &mut test] {
            ds.num_classes = num_classes;
            ds.provenance = format!("{provenance}; stored as IDX");
        }
        Ok(TaskData { train, test })
    }

    /// The stored dataset of `task`, as every training phase sees it.
    pub fn task_data(&self, task: &str) -> Result<TaskData> {
        let m: DataMetrics = read_json(&self.data_dir(task).join("metrics.json"), "gen-data")?;
        let data = self.load_task(task, m.num_classes, &m.provenance)?;
        if data.train.digest() != m.train_digest || data.test.digest() != m.test_digest {
            return Err(Error::Checkpoint(format!(
                "dataset {task} changed since gen-data"
            )));
        }
        Ok(data)
    }

    pub fn pretrain(&self) -> Result<PretrainMetrics> {
        let data = self.task_data(&self.cfg.source.name)?;
        let cfg = self.cfg.phase_config("pretrain", "");
        let (net, history) = pretrain_backbone(&self.cfg.plan, &data, &cfg)?;
        let m = PretrainMetrics {
            num_classes: net.num_classes(),
            train_acc: last_train_acc(&history),
            test_acc: crate::trainer::backbone_accuracy(&net, &data.test, cfg.precision())?,
            params: net.total_params(),
            flops: net.total_flops(),
            loss_not_decreasing: history.loss_not_decreasing,
        };
        let dir = self.pretrain_dir();
        self.echo_config(&dir)?;
        net.store.save(&dir, WEIGHTS)?;
        fs::write(dir.join("history.csv"), history.to_csv())?;
        write_json(&dir.join("metrics.json"), &m)?;
        info!("pretrain: test acc {:.4}", m.test_acc);
        Ok(m)
    }

    pub fn load_backbone(&self) -> Result<Backbone> {
        let dir = self.pretrain_dir();
        let m: PretrainMetrics = read_json(&dir.join("metrics.json"), "pretrain")?;
        let mut net = build_backbone(&self.cfg.plan, m.num_classes, 0)?;
        net.store.load_into(&dir, WEIGHTS)?;
        Ok(net)
    }

    pub fn teach(&self, task: &str) -> Result<TeacherMetrics> {
        self.target(task)?;
        let backbone = self.load_backbone()?;
        let data = self.task_data(task)?;
        let cfg = self.cfg.phase_config("teach", task);
        let (teacher, history) = train_teacher(&backbone, &data, &cfg)?;
        let m = TeacherMetrics {
            num_classes: teacher.net.num_classes(),
            train_acc: last_train_acc(&history),
            acc_teacher: teacher.accuracy,
        };
        let dir = self.teach_dir(task);
        self.echo_config(&dir)?;
        teacher.net.store.save(&dir, WEIGHTS)?;
        fs::write(dir.join("history.csv"), history.to_csv())?;
        write_json(&dir.join("metrics.json"), &m)?;
        info!("teach {task}: acc_T {:.4}", m.acc_teacher);
        Ok(m)
    }

    pub fn load_teacher(&self, task: &str) -> Result<Teacher> {
        let dir = self.teach_dir(task);
        let m: TeacherMetrics = read_json(&dir.join("metrics.json"), "teach")?;
        let mut net = build_backbone(&self.cfg.plan, m.num_classes, 0)?;
        net.store.load_into(&dir, WEIGHTS)?;
        Ok(Teacher {
            net,
            accuracy: m.acc_teacher,
        })
    }

    pub fn tailor(&self, task: &str) -> Result<TailorMetrics> {
        self.target(task)?;
        let backbone = self.load_backbone()?;
        let teacher = self.load_teacher(task)?;
        let data = self.task_data(task)?;
        let cfg = self.cfg.phase_config("tailor", task);
        let mut student =
            attach_proxies(&backbone, self.cfg.window, data.train.num_classes, cfg.seed)?;
        let history = train_student(&mut student, &teacher, &data, &cfg)?;
        let table = ComplexityTable::for_student(&student)?;
        let m = TailorMetrics {
            train_acc: last_train_acc(&history),
            test_acc: student_accuracy(&student, &data.test, cfg.precision())?,
            expected_complexity: expected_network_complexity(&student, &table, cfg.complexity)?,
            task_specific_params: student.task_specific_params(),
            frozen_backbone_params: student.frozen_backbone_params(),
            task_specific_pct: 100.0 * student.task_specific_params() as f64
                / student.frozen_backbone_params() as f64,
            loss_not_decreasing: history.loss_not_decreasing,
        };
        let dir = self.tailor_dir(task);
        self.echo_config(&dir)?;
        save_student(&student, &dir)?;
        fs::write(dir.join("history.csv"), history.to_csv())?;
        fs::write(dir.join("alphas.json"), history.alphas_json()?)?;
        write_json(
            &dir.join("complexity.json"),
            &complexity_report(&student, cfg.complexity)?,
        )?;
        fs::write(dir.join("student.dot"), student.to_dot())?;
        write_json(&dir.join("metrics.json"), &m)?;
        info!(
            "tailor {task}: test acc {:.4}, E[C] {:.4}",
            m.test_acc, m.expected_complexity
        );
        Ok(m)
    }

    pub fn load_student(&self, task: &str) -> Result<StudentGraph> {
        load_student(&self.tailor_dir(task), "tailor")
    }

    /// Prunes the tailored student of `task` with `n` removed blocks and
    /// stores the fine-tuned candidate.
    pub fn prune(&self, task: &str, n: usize) -> Result<PruneReport> {
        let student = self.load_student(task)?;
        let teacher = self.load_teacher(task)?;
        let data = self.task_data(task)?;
        self.prune_with(task, n, &student, &teacher, &data)
    }

    fn prune_with(
        &self,
        task: &str,
        n: usize,
        student: &StudentGraph,
        teacher: &Teacher,
        data: &TaskData,
    ) -> Result<PruneReport> {
        let cfg = self.cfg.phase_config("prune", task);
        let (report, graph) = prune_candidate(student, teacher, data, &cfg, n)?;
        let dir = self.prune_dir(task, n);
        self.echo_config(&dir)?;
        if let Some(g) = &graph {
            save_student(g, &dir)?;
        }
        write_json(&dir.join("report.json"), &report)?;
        Ok(report)
    }

    /// A stored candidate, if a previous run finished it.
    fn stored_candidate(&self, task: &str, n: usize) -> Option<PruneReport> {
        let dir = self.prune_dir(task, n);
        let report: PruneReport = read_json(&dir.join("report.json"), "prune").ok()?;
        let complete = !report.feasible || dir.join(format!("{WEIGHTS}.nttn")).exists();
        complete.then_some(report)
    }

    /// Runs every `n` not already on disk, then selects the leanest
    /// candidate within the slack, falling back to `n = 0`.
    pub fn sweep(&self, task: &str) -> Result<SweepSelection> {
        let student = self.load_student(task)?;
        let teacher = self.load_teacher(task)?;
        let data = self.task_data(task)?;
        let mut n_values = self.cfg.n_values.clone();
        let reports = |ns: &[usize]| -> Result<Vec<PruneReport>> {
            ns.par_iter()
                .map(|&n| match self.stored_candidate(task, n) {
                    Some(r) => Ok(r),
                    None => self.prune_with(task, n, &student, &teacher, &data),
                })
                .collect()
        };
        let mut all = reports(&n_values)?;
        let feasible: Vec<&PruneReport> = all.iter().filter(|r| r.feasible).collect();
        let candidates: Vec<Candidate> = feasible
            .iter()
            .map(|r| Candidate {
                n: r.n,
                params: r.params_after,
                accuracy: r.acc_finetuned,
            })
            .collect();
        let (selected_n, fallback) =
            match select_leanest(&candidates, teacher.accuracy, self.cfg.accuracy_slack) {
                Selection::Qualified(i) => (feasible[i].n, false),
                Selection::Fallback => (0, true),
            };
        if !n_values.contains(&selected_n) {
            all.insert(0, reports(&[selected_n])?.remove(0));
            n_values.insert(0, selected_n);
        }
        let report = all
            .iter()
            .find(|r| r.n == selected_n)
            .cloned()
            .expect("selected n was run");
        let selection = SweepSelection {
            selected_n,
            fallback,
            acc_teacher: teacher.accuracy,
            report,
        };
        let dir = self.sweep_dir(task);
        self.echo_config(&dir)?;
        fs::write(dir.join("reports.csv"), reports_csv(&all))?;
        write_json(&dir.join("selection.json"), &selection)?;
        let selected = load_student(&self.prune_dir(task, selected_n), "sweep")?;
        fs::write(dir.join("selected.dot"), selected.to_dot())?;
        info!("sweep {task}: selected n = {selected_n} (fallback {fallback})");
        Ok(selection)
    }

    /// Aggregates every task with a finished sweep. Tasks without one are
    /// skipped, so an empty run gives an empty table.
    pub fn report(&self) -> Result<Vec<ReportRow>> {
        let mut rows = Vec::new();
        let dir = self.report_dir();
        fs::create_dir_all(&dir)?;
        for spec in &self.cfg.targets {
            let path = self.sweep_dir(&spec.name).join("selection.json");
            if !path.exists() {
                continue;
            }
            let sel: SweepSelection = read_json(&path, "sweep")?;
            let graph = load_student(&self.prune_dir(&spec.name, sel.selected_n), "sweep")?;
            let r = &sel.report;
            rows.push(ReportRow {
                task: spec.name.clone(),
                selected_n: sel.selected_n,
                fallback: sel.fallback,
                blocks_removed: r.n_removed_pretrained,
                params_removed_pct: r.params_removed_pct(),
                flops_removed_pct: r.flops_removed_pct(),
                acc_teacher: sel.acc_teacher,
                acc_selected: r.acc_finetuned,
                acc_gap: sel.acc_teacher - r.acc_finetuned,
                task_specific_pct: 100.0 * graph.task_specific_params() as f64
                    / graph.frozen_backbone_params() as f64,
            });
            fs::write(dir.join(format!("{}.dot", spec.name)), graph.to_dot())?;
        }
        let mut csv = String::from(REPORT_CSV_HEADER);
        csv.push('\n');
        for r in &rows {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        fs::write(dir.join("summary.csv"), csv)?;
        write_json(&dir.join("summary.json"), &rows)?;
        Ok(rows)
    }

    /// Every phase in order, for every target task.
    pub fn run_all(&self) -> Result<Vec<ReportRow>> {
        self.gen_data()?;
        self.pretrain()?;
        for t in &self.cfg.targets {
            self.teach(&t.name)?;
            self.tailor(&t.name)?;
            self.sweep(&t.name)?;
        }
        self.report()
    }
}

fn last_train_acc(h: &History) -> f64 {
    h.records.last().map_or(f64::NAN, |r| r.train_acc)
}

fn save_student(g: &StudentGraph, dir: &Path) -> Result<()> {
    g.store.save(dir, WEIGHTS)?;
    write_json(&dir.join("layout.json"), &g.layout())
}

fn load_student(dir: &Path, command: &'static str) -> Result<StudentGraph> {
    let layout: StudentLayout = read_json(&dir.join("layout.json"), command)?;
    let mut g = layout.skeleton()?;
    g.store.load_into(dir, WEIGHTS)?;
    Ok(g)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Reads an artifact; a missing file names the command that writes it.
fn read_json<T: DeserializeOwned>(path: &Path, command: &'static str) -> Result<T> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(serde_json::from_str(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            command,
        }),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_seeds_differ_by_label() {
        let a = phase_seed(7, "teach:easy");
        assert_ne!(a, phase_seed(7, "teach:hard"));
        assert_ne!(a, phase_seed(8, "teach:easy"));
        assert_eq!(a, phase_seed(7, "teach:easy"));
    }

    #[test]
    fn default_config_is_valid_and_forces_finetune_gamma1() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let mut c = cfg.clone();
        c.finetune.gamma1 = 1.0;
        assert_eq!(c.phase_config("prune", "easy").gamma1, 0.0);
    }

    #[test]
    fn bad_task_names_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.targets[0].name = "../x".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.targets[1].name = "easy".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
