//! Non-IID client splits of a synthetic dataset.

use pmsfl::data::{dirichlet_partition, personalized_partition, synthetic_dataset, DatasetKind, DatasetSpec};
use pmsfl::rng::seeded;

fn histogram(idx: &[usize], labels: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    idx.iter().for_each(|&i| h[labels[i]] += 1);
    h
}

fn main() -> pmsfl::Result<()> {
    for kind in [DatasetKind::GaussianBlobs, DatasetKind::TwoMoonsLike, DatasetKind::TinyGridImages] {
        let d = synthetic_dataset(&DatasetSpec { kind, classes: 4, samples: 5, ..DatasetSpec::default() })?;
        println!("{kind:?}: {} samples of dimension {}", d.len(), d.dim());
    }

    let data = synthetic_dataset(&DatasetSpec { classes: 8, samples: 40, ..DatasetSpec::default() })?;
    for alpha in [0.1, 1.0, 100.0] {
        println!("dirichlet alpha = {alpha}");
        for (k, idx) in dirichlet_partition(&data.labels, 4, alpha, &mut seeded(3))?.iter().enumerate() {
            println!("  client {k}: {:?}", histogram(idx, &data.labels, 8));
        }
    }
    println!("two classes per client");
    for (k, cd) in personalized_partition(&data.labels, 4, 2, &mut seeded(3))?.iter().enumerate() {
        println!("  client {k}: train {:?} test {}", histogram(&cd.train, &data.labels, 8), cd.test.len());
    }
    Ok(())
}
