mod common;

use common::tiny_task;
use nettailor::complexity::ComplexityTable;
use nettailor::params::ParamKind;
use nettailor::trainer::*;
use nettailor::verify::{objective_grad_error, tiny_objective_fixture, tiny_plan};
use nettailor::{
    attach_proxies, build_backbone, Backbone, Error, PathId, SkipWindow, StudentGraph,
};
use nt_tensor::{Precision, Tensor};

fn tiny_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 0.05,
        epochs,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

fn weights(store: &nettailor::params::ParamStore, prefix: &str) -> Vec<(String, Tensor)> {
    store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight && p.name.starts_with(prefix))
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect()
}

fn all_values(store: &nettailor::params::ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

fn mean_diag(s: &StudentGraph) -> f64 {
    let a = s.alphas();
    let diag: Vec<f64> = a
        .iter()
        .filter(|(p, _)| p.is_pretrained())
        .map(|(_, v)| *v)
        .collect();
    diag.iter().sum::<f64>() / diag.len() as f64
}

/// Pretrained backbone and a teacher fine-tuned from it on the tiny task.
fn tiny_teacher(seed: u64) -> (Backbone, Teacher) {
    let data = tiny_task(seed);
    let (backbone, _) = pretrain_backbone(&tiny_plan(), &data, &tiny_cfg(3, seed)).unwrap();
    let (teacher, _) = train_teacher(&backbone, &data, &tiny_cfg(3, seed + 1)).unwrap();
    (backbone, teacher)
}

#[test]
fn objective_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let (graph, teacher, x, labels) = tiny_objective_fixture(seed).unwrap();
        let table = ComplexityTable::for_student(&graph).unwrap();
        for omega_scale in [OmegaScale::PerElement, OmegaScale::PerSample] {
            let cfg = TrainConfig {
                gamma1: 0.7,
                gamma2: 3.0,
                omega_scale,
                ..TrainConfig::default()
            };
            let params: Vec<_> = graph
                .store
                .iter()
                .filter(|(_, p)| p.kind == ParamKind::Weight && !p.frozen)
                .map(|(id, _)| id)
                .collect();
            let err =
                objective_grad_error(&graph, &teacher, &x, &labels, &table, &cfg, &params, 1e-6)
                    .unwrap();
            assert!(err < 1e-4, "seed {seed} {omega_scale:?}: {err:e}");
        }
    }
}

#[test]
fn every_trainable_class_gets_gradient() {
    let (graph, teacher, x, labels) = tiny_objective_fixture(4).unwrap();
    let table = ComplexityTable::for_student(&graph).unwrap();
    let cfg = TrainConfig::default();
    let (mut g, _, loss, pass) =
        student_objective(&graph, &teacher, &x, &labels, &table, &cfg).unwrap();
    let grads = g.backward(loss.total).unwrap();
    for class in ["proxy.", "gate.", "classifier."] {
        for suffix in ["", ".conv", ".bn.gamma", ".bn.beta"] {
            if class != "proxy." && !suffix.is_empty() {
                continue;
            }
            let mut nonzero = false;
            let mut seen = false;
            for (id, p) in graph.store.iter() {
                if p.frozen
                    || p.kind != ParamKind::Weight
                    || !p.name.starts_with(class)
                    || !p.name.ends_with(suffix)
                {
                    continue;
                }
                seen = true;
                let node = pass.node(id).expect("bound");
                nonzero |= grads
                    .get(node)
                    .is_some_and(|t| t.data().iter().any(|v| *v != 0.0));
            }
            assert!(seen, "no parameters match {class}*{suffix}");
            assert!(nonzero, "{class}*{suffix} has zero gradient");
        }
    }
}

#[test]
fn loss_reduces_to_cross_entropy_without_penalties() {
    let (graph, teacher, x, labels) = tiny_objective_fixture(5).unwrap();
    let table = ComplexityTable::for_student(&graph).unwrap();
    let cfg = TrainConfig {
        gamma1: 0.0,
        gamma2: 0.0,
        ..TrainConfig::default()
    };
    let (g, _, loss, _) = student_objective(&graph, &teacher, &x, &labels, &table, &cfg).unwrap();
    let (total, ce, ec, om) = loss.values(&g);
    assert_eq!(total, ce);
    assert!(ec > 0.0 && om > 0.0);
}

#[test]
fn matching_teacher_leaves_only_cross_entropy() {
    let (graph, _, x, labels) = tiny_objective_fixture(6).unwrap();
    let table = ComplexityTable::for_student(&graph).unwrap();
    let (g, acts, _) = graph.forward_train(&x, Precision::F64).unwrap();
    let mirror = TeacherOutputs {
        logits: g.value(acts.logits).clone(),
        nodes: acts
            .nodes
            .iter()
            .map(|n| g.value(n.unwrap()).clone())
            .collect(),
    };
    let cfg = TrainConfig {
        gamma1: 0.0,
        gamma2: 10.0,
        ..TrainConfig::default()
    };
    let (g2, _, loss, _) = student_objective(&graph, &mirror, &x, &labels, &table, &cfg).unwrap();
    let (total, ce, _, om) = loss.values(&g2);
    assert_eq!(om, 0.0);
    assert_eq!(total, ce);
    let mut check = nt_tensor::Graph::new();
    let z = check.constant(mirror.logits.clone());
    let want = check.cross_entropy(z, &labels).unwrap();
    assert!((check.value(want).data()[0] - ce).abs() < 1e-12);
}

#[test]
fn pretrain_zero_epochs_returns_initialization() {
    let data = tiny_task(0);
    let (net, history) = pretrain_backbone(&tiny_plan(), &data, &tiny_cfg(0, 9)).unwrap();
    let fresh = build_backbone(&tiny_plan(), 3, 9).unwrap();
    assert_eq!(all_values(&net.store), all_values(&fresh.store));
    assert!(history.records.is_empty());
}

#[test]
fn pretrain_is_deterministic_and_learns() {
    let data = tiny_task(1);
    let cfg = tiny_cfg(6, 2);
    let (a, ha) = pretrain_backbone(&tiny_plan(), &data, &cfg).unwrap();
    let (b, hb) = pretrain_backbone(&tiny_plan(), &data, &cfg).unwrap();
    assert_eq!(all_values(&a.store), all_values(&b.store));
    assert_eq!(ha, hb);
    assert!(
        !ha.loss_not_decreasing,
        "{:?}",
        ha.records.iter().map(|r| r.loss).collect::<Vec<_>>()
    );
    let init = build_backbone(&tiny_plan(), 3, 2).unwrap();
    let before = backbone_accuracy(&init, &data.train, Precision::F64).unwrap();
    let after = ha.records.last().unwrap().train_acc;
    assert!(after > before, "train acc {before} -> {after}");
}

#[test]
fn teacher_with_zero_lr_keeps_the_body() {
    let data = tiny_task(2);
    let (backbone, _) = pretrain_backbone(&tiny_plan(), &data, &tiny_cfg(1, 3)).unwrap();
    let cfg = TrainConfig {
        lr: 0.0,
        ..tiny_cfg(2, 4)
    };
    let (teacher, _) = train_teacher(&backbone, &data, &cfg).unwrap();
    for prefix in ["stem.", "blocks."] {
        assert_eq!(
            weights(&teacher.net.store, prefix),
            weights(&backbone.store, prefix)
        );
    }
    let h = &teacher.net.store.value(teacher.net.classifier.weight);
    assert_ne!(
        *h,
        backbone.store.value(backbone.classifier.weight),
        "head is reinitialized"
    );
}

#[test]
fn teacher_on_its_source_task_does_not_lose_accuracy() {
    let data = tiny_task(3);
    let (backbone, _) = pretrain_backbone(&tiny_plan(), &data, &tiny_cfg(4, 5)).unwrap();
    let base = backbone_accuracy(&backbone, &data.test, Precision::F64).unwrap();
    let (teacher, _) = train_teacher(&backbone, &data, &tiny_cfg(4, 6)).unwrap();
    assert!(
        teacher.accuracy >= base,
        "teacher {} < backbone {base}",
        teacher.accuracy
    );
}

#[test]
fn zero_epoch_student_is_unchanged() {
    let (backbone, teacher) = tiny_teacher(7);
    let mut s = attach_proxies(&backbone, SkipWindow::Limited(2), 3, 8).unwrap();
    let before = all_values(&s.store);
    let cfg = TrainConfig {
        gamma1: 0.0,
        gamma2: 0.0,
        ..tiny_cfg(0, 1)
    };
    let h = train_student(&mut s, &teacher, &tiny_task(7), &cfg).unwrap();
    assert!(h.records.is_empty());
    assert_eq!(all_values(&s.store), before);
}

#[test]
fn student_training_keeps_frozen_weights_bit_identical() {
    let (backbone, teacher) = tiny_teacher(8);
    let mut s = attach_proxies(&backbone, SkipWindow::Dense, 3, 9).unwrap();
    let digest = s.frozen_digest();
    let frozen: Vec<Tensor> = s
        .store
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(_, p)| p.value.clone())
        .collect();
    let trainable_before = weights(&s.store, "proxy.");
    train_student(&mut s, &teacher, &tiny_task(8), &tiny_cfg(2, 3)).unwrap();
    assert_eq!(s.frozen_digest(), digest);
    let after: Vec<Tensor> = s
        .store
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(_, p)| p.value.clone())
        .collect();
    assert_eq!(frozen, after);
    assert_ne!(weights(&s.store, "proxy."), trainable_before);
}

#[test]
fn heavy_complexity_pressure_shifts_mass_to_proxies() {
    let (backbone, teacher) = tiny_teacher(10);
    let data = tiny_task(10);
    let run = |gamma1: f64| {
        let mut s = attach_proxies(&backbone, SkipWindow::Limited(2), 3, 11).unwrap();
        let cfg = TrainConfig {
            gamma1,
            gamma2: 0.0,
            ..tiny_cfg(3, 12)
        };
        train_student(&mut s, &teacher, &data, &cfg).unwrap();
        mean_diag(&s)
    };
    let (free, pressed) = (run(0.0), run(100.0));
    assert!(
        pressed < free,
        "mean α_l^l {free} at γ1 = 0 vs {pressed} at γ1 = 100"
    );
}

#[test]
fn distillation_pulls_toward_the_teacher() {
    for seed in 0..3 {
        let (backbone, teacher) = tiny_teacher(20 + seed);
        let data = tiny_task(20 + seed);
        let mut s = attach_proxies(&backbone, SkipWindow::Limited(2), 3, seed).unwrap();
        let x = data.test.images.slice_outer(0, 24).unwrap();
        let labels = &data.test.labels[..24];
        let table = ComplexityTable::for_student(&s).unwrap();
        let cfg = TrainConfig {
            gamma1: 0.0,
            gamma2: 10.0,
            ..tiny_cfg(1, seed)
        };
        let omega_now = |s: &StudentGraph| {
            let t = teacher.outputs(&x, Precision::F64).unwrap();
            let (g, _, loss, _) = student_objective(s, &t, &x, labels, &table, &cfg).unwrap();
            loss.values(&g).3
        };
        let before = omega_now(&s);
        train_student(&mut s, &teacher, &data, &cfg).unwrap();
        let after = omega_now(&s);
        assert!(after < before, "seed {seed}: Ω {before} -> {after}");
    }
}

#[test]
fn divergence_is_reported_with_the_config() {
    let (backbone, teacher) = tiny_teacher(30);
    let mut s = attach_proxies(&backbone, SkipWindow::Limited(2), 3, 0).unwrap();
    let cfg = TrainConfig {
        lr: 1e12,
        ..tiny_cfg(2, 0)
    };
    match train_student(&mut s, &teacher, &tiny_task(30), &cfg) {
        Err(Error::Diverged { config, .. }) => {
            assert!(config.contains("\"lr\":1e12") || config.contains("1000000000000"))
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn history_exports() {
    let (backbone, teacher) = tiny_teacher(31);
    let mut s = attach_proxies(&backbone, SkipWindow::Limited(1), 3, 0).unwrap();
    let h = train_student(&mut s, &teacher, &tiny_task(31), &tiny_cfg(2, 0)).unwrap();
    let csv = h.to_csv();
    assert_eq!(csv.lines().count(), 3);
    let snaps: serde_json::Value = serde_json::from_str(&h.alphas_json().unwrap()).unwrap();
    let last = &snaps[1]["alphas"];
    let g2 = last[PathId::pretrained(2).to_string()].as_f64().unwrap();
    assert!((g2 - s.alphas()[&PathId::pretrained(2)]).abs() < 1e-6);
    assert_eq!(h.final_test_acc(), h.records[1].test_acc);
}

#[test]
fn pretraining_fits_the_source_task() {
    let cfg = nettailor::experiment::ExperimentConfig::default();
    let data =
        nettailor::data::gen_task(nettailor::data::Difficulty::Source, 1500, 400, 1).unwrap();
    let (_, h) = pretrain_backbone(&cfg.plan, &data, &cfg.pretrain).unwrap();
    let last = h.records.last().unwrap();
    assert_eq!(h.records.len(), 10);
    assert!(last.train_acc > 0.9, "train acc {}", last.train_acc);
    eprintln!(
        "source pretrain: train {:.4}, test {:?}",
        last.train_acc, last.test_acc
    );
}
