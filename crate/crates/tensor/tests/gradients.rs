use nt_tensor::{grad_check, Graph, NodeId, Result, RunningStats, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, for probing piecewise-linear ops off their kinks.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values per pooling window so the max is never tied.
fn rand_distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn check<F>(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, build: F)
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + Copy,
{
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let report = grad_check(build, &inputs, EPS).unwrap();
        worst = worst.max(report.max_rel_error);
        assert!(
            report.max_rel_error < TOL,
            "{name} seed {seed}: rel err {}",
            report.max_rel_error
        );
    }
    eprintln!("{name}: worst rel err over {SEEDS} seeds = {worst:.2e}");
}

#[test]
fn conv2d_gradients() {
    check(
        "conv2d",
        |r| {
            vec![
                rand_tensor(r, &[2, 2, 5, 5]),
                rand_tensor(r, &[3, 2, 3, 3]),
                rand_tensor(r, &[3]),
            ]
        },
        |g, x| g.conv2d(x[0], x[1], Some(x[2]), 2, 1),
    );
    check(
        "conv2d-1x1",
        |r| vec![rand_tensor(r, &[2, 3, 4, 4]), rand_tensor(r, &[2, 3, 1, 1])],
        |g, x| g.conv2d(x[0], x[1], None, 1, 0),
    );
}

#[test]
fn linear_gradients() {
    check(
        "linear",
        |r| {
            vec![
                rand_tensor(r, &[3, 4]),
                rand_tensor(r, &[5, 4]),
                rand_tensor(r, &[5]),
            ]
        },
        |g, x| g.linear(x[0], x[1], Some(x[2])),
    );
}

#[test]
fn relu_gradients_off_kink() {
    check(
        "relu",
        |r| vec![rand_away_from_zero(r, &[2, 3, 2, 2])],
        |g, x| g.relu(x[0]),
    );
}

#[test]
fn batchnorm_gradients() {
    check(
        "batchnorm2d-train",
        |r| {
            vec![
                rand_tensor(r, &[3, 2, 2, 2]),
                rand_tensor(r, &[2]),
                rand_tensor(r, &[2]),
            ]
        },
        |g, x| g.batchnorm2d(x[0], x[1], x[2], 1e-5, None),
    );
    check(
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
    );
}

#[test]
fn maxpool_gradients_without_ties() {
    check(
        "maxpool2d",
        |r| vec![rand_distinct(r, &[2, 2, 4, 4])],
        |g, x| g.maxpool2d(x[0], 2),
    );
}

#[test]
fn pooling_and_elementwise_gradients() {
    check(
        "global-avg-pool",
        |r| vec![rand_tensor(r, &[2, 3, 3, 3])],
        |g, x| g.global_avg_pool(x[0]),
    );
    check(
        "add",
        |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])],
        |g, x| g.add(x[0], x[1]),
    );
    check(
        "sub",
        |r| vec![rand_tensor(r, &[4]), rand_tensor(r, &[4])],
        |g, x| g.sub(x[0], x[1]),
    );
    check(
        "mul",
        |r| vec![rand_tensor(r, &[4]), rand_tensor(r, &[4])],
        |g, x| g.mul(x[0], x[1]),
    );
    check(
        "scale-by-scalar",
        |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[1])],
        |g, x| g.scale_by(x[0], x[1]),
    );
    check(
        "affine",
        |r| vec![rand_tensor(r, &[3])],
        |g, x| g.affine(x[0], -1.0, 1.0),
    );
    check(
        "reshape",
        |r| vec![rand_tensor(r, &[2, 3])],
        |g, x| g.reshape(x[0], &[3, 2]),
    );
    check(
        "concat-select",
        |r| vec![rand_tensor(r, &[2]), rand_tensor(r, &[3])],
        |g, x| {
            let c = g.concat(&[x[0], x[1]])?;
            let a = g.select(c, 1)?;
            let b = g.select(c, 3)?;
            g.mul(a, b)
        },
    );
}

#[test]
fn softmax_family_gradients() {
    check(
        "softmax-1d",
        |r| vec![rand_tensor(r, &[5])],
        |g, x| g.softmax(x[0]),
    );
    check(
        "softmax-rows",
        |r| vec![rand_tensor(r, &[3, 4])],
        |g, x| g.softmax(x[0]),
    );
    check(
        "log-softmax",
        |r| vec![rand_tensor(r, &[3, 4])],
        |g, x| g.log_softmax(x[0]),
    );
    check(
        "cross-entropy",
        |r| vec![rand_tensor(r, &[4, 3])],
        |g, x| g.cross_entropy(x[0], &[0, 2, 1, 2]),
    );
    check(
        "sum-of-squares",
        |r| vec![rand_tensor(r, &[2, 3])],
        |g, x| g.sum_of_squares(x[0]),
    );
}

#[test]
fn composite_conv_relu_sum() {
    // None of the fixed seeds place a pre-activation within eps of the relu kink.
    check(
        "conv-relu-sum",
        |r| vec![rand_tensor(r, &[1, 2, 4, 4]), rand_tensor(r, &[2, 2, 3, 3])],
        |g, x| {
            let c = g.conv2d(x[0], x[1], None, 1, 1)?;
            let a = g.relu(c)?;
            g.sum(a)
        },
    );
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
    let w = rand_tensor(&mut rng, &[2, 2, 3, 3]);

    let run = |which: u8| {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone(), true);
        let wi = g.leaf(w.clone(), true);
        let c = g.conv2d(xi, wi, None, 1, 1).unwrap();
        let f = g.sum_of_squares(c).unwrap();
        let p = g.global_avg_pool(c).unwrap();
        let h = g.sum(p).unwrap();
        let loss = match which {
            0 => f,
            1 => h,
            _ => g.add(f, h).unwrap(),
        };
        let grads = g.backward(loss).unwrap();
        (
            grads.get(xi).unwrap().clone(),
            grads.get(wi).unwrap().clone(),
        )
    };
    let (fx, fw) = run(0);
    let (hx, hw) = run(1);
    let (sx, sw) = run(2);
    for ((a, b), s) in fx.data().iter().zip(hx.data()).zip(sx.data()) {
        assert!((a + b - s).abs() <= 1e-12 * (1.0 + s.abs()));
    }
    for ((a, b), s) in fw.data().iter().zip(hw.data()).zip(sw.data()) {
        assert!((a + b - s).abs() <= 1e-12 * (1.0 + s.abs()));
    }
}

#[test]
fn apply_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[4, 3, 6, 6]);
    let w = rand_tensor(&mut rng, &[5, 3, 3, 3]);
    let gamma = rand_tensor(&mut rng, &[5]);
    let beta = rand_tensor(&mut rng, &[5]);
    let run = || {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone(), true);
        let wi = g.leaf(w.clone(), true);
        let gi = g.leaf(gamma.clone(), true);
        let bi = g.leaf(beta.clone(), true);
        let c = g.conv2d(xi, wi, None, 1, 1).unwrap();
        let n = g.batchnorm2d(c, gi, bi, 1e-5, None).unwrap();
        let r = g.relu(n).unwrap();
        let p = g.maxpool2d(r, 2).unwrap();
        let l = g.sum_of_squares(p).unwrap();
        let grads = g.backward(l).unwrap();
        (
            g.value(p)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            grads
                .get(wi)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn nttn_round_trip_is_f32_exact(
            shape in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e3..1e3) as f32 as f64).collect();
            let t = Tensor::new(shape.clone(), data).unwrap();
            let mut buf = Vec::new();
            t.write_nttn(&mut buf).unwrap();
            prop_assert_eq!(buf.len(), 12 + 4 * shape.len() + 4 * n);
            prop_assert_eq!(Tensor::read_nttn(&buf[..]).unwrap(), t);
        }

        #[test]
        fn softmax_sums_to_one(xs in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_vec(xs));
            let s = g.softmax(x).unwrap();
            let total: f64 = g.value(s).data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
