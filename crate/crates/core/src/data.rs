//! Synthetic labeled datasets and non-IID client partitions.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    GaussianBlobs,
    TwoMoonsLike,
    /// Square single-channel images; `dim` must be a perfect square.
    TinyGridImages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub classes: usize,
    pub dim: usize,
    /// Samples per class.
    pub samples: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianBlobs,
            classes: 10,
            dim: 16,
            samples: 60,
            noise: 0.3,
            seed: 0,
        }
    }
}

/// Features are clamped to `[-1, 1]` for every kind; samples are ordered
/// class-major.
pub fn synthetic_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.dim == 0 || spec.samples == 0 {
        return Err(Error::InvalidConfig("dataset sizes must be positive".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise {} must be nonnegative", spec.noise)));
    }
    let mut rng = seeded(spec.seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let prototypes: Vec<Vec<f64>> = match spec.kind {
        DatasetKind::GaussianBlobs => (0..spec.classes)
            .map(|_| {
                // distinct points on a sphere are separable by their own direction
                let v: Vec<f64> = (0..spec.dim).map(|_| noise.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| 0.8 * x / norm).collect()
            })
            .collect(),
        DatasetKind::TinyGridImages => {
            let side = (spec.dim as f64).sqrt().round() as usize;
            if side * side != spec.dim {
                return Err(Error::InvalidConfig(format!("image dim {} is not a square", spec.dim)));
            }
            (0..spec.classes)
                .map(|_| (0..spec.dim).map(|_| if rng.random_bool(0.5) { 0.8 } else { -0.8 }).collect())
                .collect()
        }
        DatasetKind::TwoMoonsLike => Vec::new(),
    };
    let projection: Vec<Vec<f64>> = (0..spec.dim)
        .map(|_| (0..2).map(|_| noise.sample(&mut rng) / (spec.dim as f64).sqrt()).collect())
        .collect();

    let mut features = Vec::with_capacity(spec.classes * spec.samples);
    let mut labels = Vec::with_capacity(spec.classes * spec.samples);
    for class in 0..spec.classes {
        for _ in 0..spec.samples {
            let base = match spec.kind {
                DatasetKind::TwoMoonsLike => {
                    let t = rng.random_range(0.0..std::f64::consts::PI);
                    let rot = 2.0 * std::f64::consts::PI * class as f64 / spec.classes as f64;
                    let (a, b) = (t.cos() + 0.5, t.sin() - 0.25);
                    let (u, v) = (a * rot.cos() - b * rot.sin(), a * rot.sin() + b * rot.cos());
                    projection.iter().map(|p| 2.0 * (p[0] * u + p[1] * v)).collect()
                }
                _ => prototypes[class].clone(),
            };
            let sample = base
                .into_iter()
                .map(|v: f64| (v + spec.noise * noise.sample(&mut rng)).clamp(-1.0, 1.0))
                .collect();
            features.push(sample);
            labels.push(class);
        }
    }
    Ok(Dataset {
        features,
        labels,
        classes: spec.classes,
    })
}

/// Train and test indices of one client.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClientData {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientData {
    pub fn all(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.train.iter().chain(&self.test).copied().collect();
        v.sort_unstable();
        v
    }
}

const DIRICHLET_ATTEMPTS: usize = 100;

/// Per-class client proportions from `Dir(alpha * 1_N)`. Draws that leave a
/// client empty are redrawn; if that keeps happening, single samples are
/// moved from the largest clients.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    labels: &[usize],
    clients: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::InvalidConfig("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} must be positive")));
    }
    if labels.len() < clients {
        return Err(Error::InvalidConfig(format!(
            "{} samples for {clients} clients",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let by_class: Vec<Vec<usize>> = (0..classes)
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();

    let mut parts = vec![Vec::new(); clients];
    for _ in 0..DIRICHLET_ATTEMPTS {
        parts = vec![Vec::new(); clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(rng);
            let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            let props: Vec<f64> = if total > 0.0 {
                draws.iter().map(|d| d / total).collect()
            } else {
                let mut p = vec![0.0; clients];
                p[rng.random_range(0..clients)] = 1.0;
                p
            };
            let n = members.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (k, p) in props.iter().enumerate() {
                cum += p;
                let end = if k + 1 == clients { n } else { ((cum * n as f64).round() as usize).min(n) };
                parts[k].extend_from_slice(&members[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if parts.iter().all(|p| !p.is_empty()) {
            break;
        }
    }
    while let Some(empty) = parts.iter().position(Vec::is_empty) {
        let donor = (0..clients).max_by_key(|&k| (parts[k].len(), std::cmp::Reverse(k))).expect("clients");
        let moved = parts[donor].pop().expect("donor has samples");
        parts[empty].push(moved);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Shuffle and split off `round(test_fraction * n)` test samples, keeping at
/// least one training sample.
pub fn split_train_test<R: Rng + ?Sized>(indices: &[usize], test_fraction: f64, rng: &mut R) -> ClientData {
    let mut v = indices.to_vec();
    v.shuffle(rng);
    let n_test = ((test_fraction * v.len() as f64).round() as usize).min(v.len().saturating_sub(1));
    let mut test = v.split_off(v.len() - n_test);
    v.sort_unstable();
    test.sort_unstable();
    ClientData { train: v, test }
}

/// Classes of client `k` under the round-robin assignment.
pub fn client_classes(client: usize, classes_per_client: usize, classes: usize) -> Vec<usize> {
    (0..classes_per_client)
        .map(|j| (client * classes_per_client + j) % classes)
        .collect()
}

/// Each client receives `classes_per_client` classes round-robin; a class
/// shared by several clients is split evenly between them. Every client's
/// samples are then split 90/10 into train and test.
pub fn personalized_partition<R: Rng + ?Sized>(
    labels: &[usize],
    clients: usize,
    classes_per_client: usize,
    rng: &mut R,
) -> Result<Vec<ClientData>> {
    if clients == 0 || classes_per_client == 0 {
        return Err(Error::InvalidConfig("clients and classes per client must be positive".into()));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    if classes_per_client > classes {
        return Err(Error::InvalidConfig(format!(
            "{classes_per_client} classes per client but only {classes} classes"
        )));
    }
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for k in 0..clients {
        for c in client_classes(k, classes_per_client, classes) {
            holders[c].push(k);
        }
    }
    let mut owned = vec![Vec::new(); clients];
    for (c, hs) in holders.iter().enumerate() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            return Err(Error::InvalidConfig(format!("class {c} has no samples")));
        }
        if hs.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let n = members.len();
        for (j, &k) in hs.iter().enumerate() {
            owned[k].extend_from_slice(&members[j * n / hs.len()..(j + 1) * n / hs.len()]);
        }
    }
    Ok(owned.iter().map(|idx| split_train_test(idx, 0.1, rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn blobs(noise: f64, seed: u64) -> Dataset {
        synthetic_dataset(&DatasetSpec {
            kind: DatasetKind::GaussianBlobs,
            classes: 8,
            dim: 16,
            samples: 120,
            noise,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn noiseless_blobs_are_linearly_separable() {
        let d = blobs(0.0, 3);
        // class means as a linear probe
        let mut means = vec![vec![0.0; 16]; 8];
        for (x, &y) in d.features.iter().zip(&d.labels) {
            for (m, v) in means[y].iter_mut().zip(x) {
                *m += v / 120.0;
            }
        }
        let correct = d
            .features
            .iter()
            .zip(&d.labels)
            .filter(|(x, &y)| {
                let scores: Vec<f64> = means.iter().map(|m| m.iter().zip(*x).map(|(a, b)| a * b).sum()).collect();
                scores.iter().enumerate().all(|(c, &s)| c == y || s < scores[y])
            })
            .count();
        assert_eq!(correct, d.len());
    }

    #[test]
    fn datasets_are_reproducible_and_counted() {
        for kind in [DatasetKind::GaussianBlobs, DatasetKind::TwoMoonsLike, DatasetKind::TinyGridImages] {
            let spec = DatasetSpec { kind, classes: 8, dim: 16, samples: 120, noise: 0.2, seed: 9 };
            let a = synthetic_dataset(&spec).unwrap();
            assert_eq!(a, synthetic_dataset(&spec).unwrap());
            for c in 0..8 {
                assert_eq!(a.labels.iter().filter(|&&y| y == c).count(), 120);
            }
            assert!(a.features.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        }
        let bad = DatasetSpec { kind: DatasetKind::TinyGridImages, dim: 10, ..DatasetSpec::default() };
        assert!(synthetic_dataset(&bad).is_err());
    }

    fn assert_partition(parts: &[Vec<usize>], n: usize) {
        let mut seen = BTreeSet::new();
        for p in parts {
            for &i in p {
                assert!(seen.insert(i), "index {i} assigned twice");
            }
        }
        assert_eq!(seen.len(), n);
    }

    #[test]
    fn dirichlet_examples() {
        let d = blobs(0.3, 1);
        let one = dirichlet_partition(&d.labels, 1, 0.3, &mut seeded(0)).unwrap();
        assert_eq!(one[0], (0..d.len()).collect::<Vec<_>>());

        let a = dirichlet_partition(&d.labels, 10, 0.3, &mut seeded(4)).unwrap();
        assert_eq!(a, dirichlet_partition(&d.labels, 10, 0.3, &mut seeded(4)).unwrap());
        assert_partition(&a, d.len());
        assert!(a.iter().all(|p| !p.is_empty()));

        let flat = dirichlet_partition(&d.labels, 4, 1000.0, &mut seeded(5)).unwrap();
        for p in &flat {
            for c in 0..8 {
                let count = p.iter().filter(|&&i| d.labels[i] == c).count() as f64;
                assert!((count / 30.0 - 1.0).abs() < 0.2, "class {c}: {count}");
            }
        }
        assert!(dirichlet_partition(&[0, 1], 3, 0.3, &mut seeded(0)).is_err());
    }

    #[test]
    fn tiny_alpha_still_fills_every_client() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let parts = dirichlet_partition(&labels, 20, 0.01, &mut seeded(2)).unwrap();
        assert!(parts.iter().all(|p| !p.is_empty()));
        assert_partition(&parts, 40);
    }

    #[test]
    fn personalized_examples() {
        let d = blobs(0.3, 2);
        let full = personalized_partition(&d.labels, 1, 8, &mut seeded(0)).unwrap();
        assert_eq!(full[0].all(), (0..d.len()).collect::<Vec<_>>());

        let parts = personalized_partition(&d.labels, 4, 2, &mut seeded(1)).unwrap();
        let class_sets: Vec<BTreeSet<usize>> = parts
            .iter()
            .map(|p| p.all().iter().map(|&i| d.labels[i]).collect())
            .collect();
        assert_eq!(class_sets[0], [0, 1].into());
        assert_eq!(class_sets[3], [6, 7].into());
        for p in &parts {
            assert_eq!(p.test.len(), 24);
            assert_eq!(p.train.len(), 216);
        }
        assert!(personalized_partition(&d.labels, 4, 0, &mut seeded(0)).is_err());
        assert!(personalized_partition(&[0, 0, 2], 1, 1, &mut seeded(0)).is_err());
    }

    #[test]
    fn shared_classes_are_split() {
        let d = blobs(0.3, 2);
        let parts = personalized_partition(&d.labels, 20, 2, &mut seeded(3)).unwrap();
        let all: Vec<Vec<usize>> = parts.iter().map(ClientData::all).collect();
        assert_partition(&all, d.len());
        for (k, p) in all.iter().enumerate() {
            let cs: BTreeSet<usize> = p.iter().map(|&i| d.labels[i]).collect();
            assert_eq!(cs, client_classes(k, 2, 8).into_iter().collect());
        }
    }
}
