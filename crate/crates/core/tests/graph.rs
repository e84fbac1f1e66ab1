use std::collections::BTreeSet;

use nettailor::params::ParamKind;
use nettailor::student::softmax;
use nettailor::verify::{rand_tensor, tiny_plan};
use nettailor::{
    attach_proxies, build_backbone, Backbone, BackbonePlan, PathId, SkipWindow, StudentGraph,
};
use nt_tensor::{relative_error, Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(seed: u64, n: usize, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rand_tensor(&mut rng, &[n, 1, size, size]);
    Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|v| 0.5 + 0.5 * v).collect(),
    )
    .unwrap()
}

/// Student with every proxy dead, plus a backbone sharing its classifier.
fn masked_pair(plan: &BackbonePlan, window: SkipWindow) -> (Backbone, StudentGraph) {
    let mut backbone = build_backbone(plan, 5, 7).unwrap();
    // non-trivial running statistics so inference-mode norms are exercised
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ids: Vec<_> = backbone.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        if backbone.store.get(id).kind != ParamKind::Weight {
            for v in backbone.store.value_mut(id).data_mut() {
                *v += rng.gen_range(0.0..0.2);
            }
        }
    }
    let mut student = attach_proxies(&backbone, window, 5, 11).unwrap();
    let alive: BTreeSet<PathId> = student.paths().filter(|p| p.is_pretrained()).collect();
    student.set_alive(alive).unwrap();
    for id in student.classifier.params() {
        backbone.store.replace(id, student.store.value(id).clone());
    }
    (backbone, student)
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).expect("same shape")
}

#[test]
fn masked_student_reproduces_backbone() {
    let plan = BackbonePlan::default();
    let x = images(1, 4, 28);
    for window in [
        SkipWindow::Limited(1),
        SkipWindow::Limited(3),
        SkipWindow::Dense,
    ] {
        let (backbone, student) = masked_pair(&plan, window);
        for (precision, tol) in [(Precision::F64, 1e-10), (Precision::F32, 1e-5)] {
            let (bl, bn) = backbone.evaluate(&x, precision).unwrap();
            let (sl, sn) = student.evaluate(&x, precision).unwrap();
            let mut worst = max_diff(&bl, &sl);
            for (b, s) in bn.iter().zip(&sn) {
                worst = worst.max(max_diff(b, s.as_ref().expect("node alive")));
            }
            assert!(worst < tol, "{window:?} {precision:?}: {worst:e}");
        }
    }
}

#[test]
fn masked_student_matches_fp64_backbone_in_fp32() {
    let (backbone, student) = masked_pair(&BackbonePlan::default(), SkipWindow::Limited(3));
    let x = images(2, 4, 28);
    let (_, bn) = backbone.evaluate(&x, Precision::F64).unwrap();
    let (_, sn) = student.evaluate(&x, Precision::F32).unwrap();
    for (l, (b, s)) in bn.iter().zip(&sn).enumerate() {
        let scale = b.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let d = max_diff(b, s.as_ref().unwrap());
        assert!(d / scale < 1e-5, "node {}: {d:e} at scale {scale}", l + 1);
    }
}

#[test]
fn zero_weight_path_is_invisible() {
    let plan = tiny_plan();
    let backbone = build_backbone(&plan, 3, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut student = attach_proxies(&backbone, SkipWindow::Dense, 3, 4).unwrap();
    for p in student.paths().collect::<Vec<_>>() {
        student.set_gate_logit(p, rng.gen_range(-1.0..1.0)).unwrap();
    }
    let x = images(5, 3, 8);
    for path in student
        .paths()
        .filter(|p| !p.is_pretrained())
        .collect::<Vec<_>>()
    {
        let mut gated = student.clone();
        gated.set_gate_logit(path, f64::NEG_INFINITY).unwrap();
        assert_eq!(gated.merge_alphas(path.dst).unwrap()[&path], 0.0);
        let mut removed = student.clone();
        removed.kill(path);
        let (a, _) = gated.evaluate(&x, Precision::F64).unwrap();
        let (b, _) = removed.evaluate(&x, Precision::F64).unwrap();
        assert_eq!(a.data(), b.data(), "{path}");
    }
}

#[test]
fn gate_softmax_properties_on_random_graphs() {
    let plan = tiny_plan();
    let backbone = build_backbone(&plan, 3, 0).unwrap();
    let n = plan.num_blocks();
    let x = images(0, 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut singletons, mut symmetric) = (0, 0);
    for case in 0..500 {
        let window = SkipWindow::Limited(rng.gen_range(1..=n));
        let mut s = attach_proxies(&backbone, window, 3, case).unwrap();
        let mut alive = BTreeSet::new();
        for l in 1..=n {
            let inc: Vec<PathId> = s.paths().filter(|p| p.dst == l).collect();
            let keep = inc[rng.gen_range(0..inc.len())];
            alive.insert(keep);
            alive.extend(inc.into_iter().filter(|_| rng.gen_bool(0.5)));
        }
        s.set_alive(alive).unwrap();
        let sym_node = rng.gen_range(1..=n);
        let sym_value = rng.gen_range(-3.0..3.0);
        for p in s.paths().collect::<Vec<_>>() {
            let v = if p.dst == sym_node {
                sym_value
            } else {
                rng.gen_range(-6.0..6.0)
            };
            s.set_gate_logit(p, v).unwrap();
        }
        let (g, acts, _) = s.forward_train(&x, Precision::F64).unwrap();
        for l in 1..=n {
            let alphas = s.merge_alphas(l).unwrap();
            let sum: f64 = alphas.values().sum();
            assert!((sum - 1.0).abs() < 1e-12, "case {case} node {l}: {sum}");
            let tape_sum: f64 = alphas
                .keys()
                .map(|p| g.value(acts.alphas[p]).data()[0])
                .sum();
            assert!((tape_sum - 1.0).abs() < 1e-12);
            for (p, v) in &alphas {
                assert!((g.value(acts.alphas[p]).data()[0] - v).abs() < 1e-15);
            }
            if alphas.len() == 1 {
                assert_eq!(*alphas.values().next().unwrap(), 1.0);
                singletons += 1;
            }
            if l == sym_node {
                let m = alphas.len() as f64;
                for v in alphas.values() {
                    assert!((v - 1.0 / m).abs() < 1e-15);
                }
                symmetric += 1;
            }
        }
    }
    assert!(singletons > 500 && symmetric == 500);
}

#[test]
fn softmax_is_shift_invariant_and_stable() {
    let a = softmax(&[1000.0, 1000.0, 999.0]);
    assert!(a.iter().all(|v| v.is_finite()));
    let b = softmax(&[1.0, 1.0, 0.0]);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn proxy_counts_per_window() {
    let backbone = build_backbone(&BackbonePlan::default(), 10, 0).unwrap();
    for (window, proxies) in [
        (SkipWindow::Limited(1), 7),
        (SkipWindow::Limited(2), 13),
        (SkipWindow::Limited(3), 18),
        (SkipWindow::Dense, 28),
    ] {
        let s = attach_proxies(&backbone, window, 4, 0).unwrap();
        assert_eq!(
            s.paths().filter(|p| !p.is_pretrained()).count(),
            proxies,
            "{window:?}"
        );
        assert_eq!(s.paths().filter(|p| p.is_pretrained()).count(), 8);
        // no proxy leaves the stem output
        assert!(s.paths().all(|p| p.is_pretrained() || p.src >= 1));
    }
}

#[test]
fn logit_gradients_wrt_gates_match_finite_differences() {
    let plan = tiny_plan();
    let backbone = build_backbone(&plan, 3, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut s = attach_proxies(&backbone, SkipWindow::Dense, 3, 23).unwrap();
    for p in s.paths().collect::<Vec<_>>() {
        s.set_gate_logit(p, rng.gen_range(-1.5..1.5)).unwrap();
    }
    let x = images(24, 4, 8);
    let weights = rand_tensor(&mut rng, &[4, 3]);
    let objective = |s: &StudentGraph| -> (
        nt_tensor::Graph,
        nt_tensor::NodeId,
        nettailor::params::PassRecord,
    ) {
        let (mut g, acts, pass) = s.forward_train(&x, Precision::F64).unwrap();
        let w = g.constant(weights.clone());
        let prod = g.mul(acts.logits, w).unwrap();
        let out = g.sum(prod).unwrap();
        (g, out, pass)
    };
    let (mut g, out, pass) = objective(&s);
    let grads = g.backward(out).unwrap();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for p in s.paths().collect::<Vec<_>>() {
        let id = s.gate_param(p).unwrap();
        let analytic = grads
            .get(pass.node(id).unwrap())
            .map_or(0.0, |t| t.data()[0]);
        let orig = s.gate_logit(p).unwrap();
        let mut probe = s.clone();
        probe.set_gate_logit(p, orig + eps).unwrap();
        let (g1, o1, _) = objective(&probe);
        probe.set_gate_logit(p, orig - eps).unwrap();
        let (g2, o2, _) = objective(&probe);
        let numeric = (g1.value(o1).data()[0] - g2.value(o2).data()[0]) / (2.0 * eps);
        worst = worst.max(relative_error(analytic, numeric));
    }
    assert!(worst < 1e-4, "worst rel err {worst:e}");
}

#[test]
fn backbone_weights_are_frozen_in_the_student() {
    let backbone = build_backbone(&tiny_plan(), 3, 0).unwrap();
    let s = attach_proxies(&backbone, SkipWindow::Limited(2), 3, 0).unwrap();
    let x = images(1, 4, 8);
    let (mut g, acts, pass) = s.forward_train(&x, Precision::F64).unwrap();
    let loss = g.cross_entropy(acts.logits, &[0, 1, 2, 0]).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut frozen = 0;
    for (id, param) in s.store.iter() {
        if param.frozen {
            frozen += 1;
            if let Some(node) = pass.node(id) {
                assert!(!g.requires_grad(node), "{} is trainable", param.name);
                assert!(grads.get(node).is_none());
            }
        }
    }
    assert!(frozen > 0);
}
