use nettailor::data::{Dataset, Split, TaskData};
use nettailor::verify::rand_tensor;
use nt_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Three classes of 8x8 images told apart by mean brightness.
pub fn tiny_task(seed: u64) -> TaskData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |n: usize, split: Split| {
        let t = rand_tensor(&mut rng, &[n, 1, 8, 8]);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        // class-dependent brightness so there is something to learn
        let data = t
            .data()
            .chunks(64)
            .zip(&labels)
            .flat_map(|(px, &y)| {
                px.iter()
                    .map(move |v| (0.25 * y as f64 + 0.2 * (v + 1.0)).min(1.0))
            })
            .collect();
        Dataset {
            images: Tensor::new(vec![n, 1, 8, 8], data).unwrap(),
            labels,
            num_classes: 3,
            split,
            provenance: "tiny".into(),
        }
    };
    TaskData {
        train: split(48, Split::Train),
        test: split(30, Split::Test),
    }
}
