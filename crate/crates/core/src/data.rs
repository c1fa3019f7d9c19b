//! Datasets, the blob generator, IDX decoding, Dirichlet partitioning and
//! mislabel injection.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IdxError, Result};
use crate::numerics::Tensor;
use crate::rng::{self, Rng};

/// `n x d` features in `[0, 1]` with labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, provenance: impl Into<String>) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::shape("dataset", features.shape(), &[labels.len()]));
        }
        if classes < 2 {
            return Err(Error::invalid("classes", "need at least 2"));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if features.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("features", "must lie in [0, 1]"));
        }
        Ok(Self {
            features,
            labels,
            classes,
            provenance: provenance.into(),
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    /// Positions of the class-`c` rows, ascending.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Same features, new labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.features.clone(), labels, self.classes, self.provenance.clone())
    }

    /// Deterministic split into `(first, second)` with `fraction` of the
    /// rows (rounded) going to `second`.
    pub fn split(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, &[rng::EVAL]));
        let k = libm::round(fraction * self.len() as f64) as usize;
        let (b, a) = idx.split_at(k.min(self.len()));
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_unstable();
        b.sort_unstable();
        (self.subset(&a), self.subset(&b))
    }
}

/// Gaussian class clusters. Class means sit evenly on a circle of radius
/// 0.3 around the cube centre in the first two coordinates (0.5 elsewhere);
/// each coordinate gets noise with std `0.2 * spread`, then is clipped
/// into `[0, 1]`. Rows are grouped by class.
pub fn gen_blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("classes", "need at least 2"));
    }
    if per_class == 0 {
        return Err(Error::invalid("per_class", "must be positive"));
    }
    if dim < 2 {
        return Err(Error::invalid("dim", "need at least 2"));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::invalid("spread", "must be finite and non-negative"));
    }
    let mut r = rng::stream(seed, &[rng::BLOBS]);
    let std = 0.2 * spread;
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let angle = 2.0 * core::f64::consts::PI * c as f64 / classes as f64;
        let mut mean = vec![0.5; dim];
        mean[0] += 0.3 * libm::cos(angle);
        mean[1] += 0.3 * libm::sin(angle);
        for _ in 0..per_class {
            for &m in &mean {
                let z: f64 = StandardNormal.sample(&mut r);
                data.push((m + std * z).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    let features = Tensor::matrix(classes * per_class, dim, data)?;
    Dataset::new(features, labels, classes, "blobs")
}

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> core::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Decodes an IDX image file (`0x00000803`, count, rows, cols, pixels) and
/// an IDX label file (`0x00000801`, count, labels). Pixels are scaled by
/// 1/255. The class count is one past the largest label (at least 2).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> core::result::Result<Dataset, IdxError> {
    let magic = be_u32(images, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(IdxError::BadMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = be_u32(labels, 0)?;
    if magic != LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n != n_labels {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let d = rows * cols;
    let need = 16 + n * d;
    if images.len() < need {
        return Err(IdxError::Truncated {
            expected: need,
            actual: images.len(),
        });
    }
    if labels.len() < 8 + n {
        return Err(IdxError::Truncated {
            expected: 8 + n,
            actual: labels.len(),
        });
    }
    let pixels: Vec<f64> = images[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    let ys: Vec<usize> = labels[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = ys.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    let features = Tensor::from_parts(vec![n, d], pixels);
    Ok(Dataset {
        features,
        labels: ys,
        classes,
        provenance: "idx".into(),
    })
}

/// Client shards as ascending index lists into a parent dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    shards: Vec<Vec<usize>>,
    alpha: f64,
}

impl Partition {
    /// Checks disjointness, exact cover of `0..n` and non-empty shards.
    pub fn new(mut shards: Vec<Vec<usize>>, alpha: f64, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for s in &mut shards {
            if s.is_empty() {
                return Err(Error::invalid("partition", "empty client shard"));
            }
            s.sort_unstable();
            for &i in s.iter() {
                if i >= n || seen[i] {
                    return Err(Error::invalid("partition", "shards overlap or exceed the dataset"));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("partition", "shards do not cover the dataset"));
        }
        Ok(Self { shards, alpha })
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn client_datasets(&self, ds: &Dataset) -> Vec<Dataset> {
        self.shards.iter().map(|s| ds.subset(s)).collect()
    }
}

fn dirichlet(r: &mut Rng, clients: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(r)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        // Every gamma draw underflowed; the limit is a vertex of the simplex.
        let mut p = vec![0.0; clients];
        p[rand::Rng::random_range(r, 0..clients)] = 1.0;
        p
    }
}

/// Largest-remainder rounding of `p * n`; ties go to the lower index.
fn multinomial_counts(p: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|q| q * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| libm::floor(*v) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - counts[a] as f64;
        let fb = raw[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per class, draws client shares from `Dir(alpha * 1)` and deals the
/// shuffled class indices out in those proportions. Afterwards every empty
/// client takes one sample from the currently largest shard.
pub fn partition_dirichlet(ds: &Dataset, clients: usize, alpha: f64, seed: u64) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::invalid("clients", "must be positive"));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid("alpha", "must be positive and finite"));
    }
    if clients > ds.len() {
        return Err(Error::TooManyClients {
            clients,
            samples: ds.len(),
        });
    }
    let mut r = rng::stream(seed, &[rng::PARTITION]);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for c in 0..ds.classes() {
        let mut idx = ds.class_indices(c);
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut r);
        let p = if clients == 1 { vec![1.0] } else { dirichlet(&mut r, clients, alpha) };
        let counts = multinomial_counts(&p, idx.len());
        let mut start = 0;
        for (shard, k) in shards.iter_mut().zip(counts) {
            shard.extend_from_slice(&idx[start..start + k]);
            start += k;
        }
    }
    for i in 0..clients {
        if shards[i].is_empty() {
            let donor = (0..clients)
                .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
                .expect("clients > 0");
            let moved = shards[donor].pop().expect("donor holds at least two samples");
            shards[i].push(moved);
        }
    }
    Partition::new(shards, alpha, ds.len())
}

/// Result of [`inject_mislabels`]: the relabelled data and which clients
/// were corrupted.
#[derive(Clone, Debug, PartialEq)]
pub struct Mislabeled {
    pub dataset: Dataset,
    pub bad_clients: Vec<usize>,
}

/// Picks `round(rho * M)` clients by seeded shuffle and maps the labels of
/// `round(sample_rate * n_i)` of each one's samples to `(y + 1) mod C`.
/// Features are untouched.
pub fn inject_mislabels(
    ds: &Dataset,
    rho: f64,
    partition: &Partition,
    sample_rate: f64,
    seed: u64,
) -> Result<Mislabeled> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid("rho", "must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&sample_rate) {
        return Err(Error::invalid("sample_rate", "must lie in [0, 1]"));
    }
    let m = partition.clients();
    let k = libm::round(rho * m as f64) as usize;
    let mut r = rng::stream(seed, &[rng::MISLABEL]);
    let mut ids: Vec<usize> = (0..m).collect();
    ids.shuffle(&mut r);
    let mut bad = ids[..k].to_vec();
    bad.sort_unstable();
    let mut labels = ds.labels().to_vec();
    for &client in &bad {
        let shard = &partition.shards()[client];
        let take = libm::round(sample_rate * shard.len() as f64) as usize;
        let chosen: Vec<usize> = if take >= shard.len() {
            shard.clone()
        } else {
            let mut s = shard.clone();
            s.shuffle(&mut r);
            s.truncate(take);
            s
        };
        for i in chosen {
            labels[i] = (labels[i] + 1) % ds.classes();
        }
    }
    Ok(Mislabeled {
        dataset: ds.with_labels(labels)?,
        bad_clients: bad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> Dataset {
        gen_blobs(3, 100, 2, 0.5, 1).unwrap()
    }

    #[test]
    fn blob_counts() {
        let ds = blobs();
        assert_eq!(ds.len(), 300);
        assert_eq!(ds.class_histogram(), vec![100, 100, 100]);
        assert!(ds.features().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(ds, blobs());
    }

    #[test]
    fn blob_argument_errors() {
        assert!(gen_blobs(1, 10, 2, 0.5, 0).is_err());
        assert!(gen_blobs(3, 0, 2, 0.5, 0).is_err());
        assert!(gen_blobs(3, 10, 1, 0.5, 0).is_err());
    }

    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        images.extend_from_slice(&[0, 255, 51, 102, 255, 0, 0, 204]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 1];
        (images, labels)
    }

    #[test]
    fn idx_fixture_decodes() {
        let (im, lb) = idx_fixture();
        let ds = parse_idx(&im, &lb).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.labels(), &[7, 1]);
        assert_eq!(ds.classes(), 8);
        assert_eq!(ds.features().data()[1], 1.0);
        assert_eq!(ds.features().data()[2], 0.2);
        assert_eq!(ds.features().row(1), &[1.0, 0.0, 0.0, 0.8]);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let (im, mut lb) = idx_fixture();
        let mut wrong = lb.clone();
        wrong[3] = 3;
        assert_eq!(
            parse_idx(&im, &wrong),
            Err(IdxError::BadMagic {
                expected: 0x801,
                found: 0x803
            })
        );
        assert!(matches!(parse_idx(&im[..20], &lb), Err(IdxError::Truncated { .. })));
        lb[7] = 3;
        lb.push(0);
        assert_eq!(
            parse_idx(&im, &lb),
            Err(IdxError::CountMismatch { images: 2, labels: 3 })
        );
    }

    #[test]
    fn single_client_owns_everything() {
        let ds = blobs();
        let p = partition_dirichlet(&ds, 1, 0.5, 3).unwrap();
        assert_eq!(p.shards()[0], (0..300).collect::<Vec<_>>());
    }

    #[test]
    fn partition_is_reproducible_cover() {
        let ds = blobs();
        let a = partition_dirichlet(&ds, 10, 0.1, 9).unwrap();
        let b = partition_dirichlet(&ds, 10, 0.1, 9).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.shards().concat();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
        assert!(a.shards().iter().all(|s| !s.is_empty()));
    }

    #[test]
    fn empty_clients_are_repaired() {
        // 60 clients over 60 samples with extreme skew forces repairs.
        let ds = gen_blobs(3, 20, 2, 0.5, 0).unwrap();
        let p = partition_dirichlet(&ds, 60, 0.01, 4).unwrap();
        assert!(p.shards().iter().all(|s| s.len() == 1));
    }

    #[test]
    fn too_many_clients_is_an_error() {
        let ds = gen_blobs(2, 2, 2, 0.5, 0).unwrap();
        assert_eq!(
            partition_dirichlet(&ds, 5, 1.0, 0),
            Err(Error::TooManyClients { clients: 5, samples: 4 })
        );
    }

    #[test]
    fn invalid_partitions_are_rejected() {
        assert!(Partition::new(vec![vec![0, 1], vec![1, 2]], 1.0, 3).is_err());
        assert!(Partition::new(vec![vec![0], vec![2]], 1.0, 3).is_err());
        assert!(Partition::new(vec![vec![0, 1, 2], vec![]], 1.0, 3).is_err());
    }

    fn tv_to_global(ds: &Dataset, p: &Partition) -> f64 {
        let global: Vec<f64> = ds.class_histogram().iter().map(|&h| h as f64 / ds.len() as f64).collect();
        let mut total = 0.0;
        for s in p.shards() {
            let mut h = vec![0.0; ds.classes()];
            for &i in s {
                h[ds.labels()[i]] += 1.0 / s.len() as f64;
            }
            total += 0.5 * h.iter().zip(&global).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
        total / p.clients() as f64
    }

    #[test]
    fn huge_alpha_is_near_iid() {
        // 1000 samples per class keeps shard sampling noise out of the way.
        let ds = gen_blobs(3, 1000, 2, 0.5, 2).unwrap();
        let mean_tv: f64 = (0..20)
            .map(|seed| tv_to_global(&ds, &partition_dirichlet(&ds, 10, 1e6, seed).unwrap()))
            .sum::<f64>()
            / 20.0;
        assert!(mean_tv < 0.05, "mean tv {mean_tv}");
    }

    fn mean_max_share(ds: &Dataset, alpha: f64) -> f64 {
        let mut total = 0.0;
        for seed in 0..20 {
            let p = partition_dirichlet(ds, 10, alpha, seed).unwrap();
            for s in p.shards() {
                let mut h = vec![0usize; ds.classes()];
                for &i in s {
                    h[ds.labels()[i]] += 1;
                }
                total += *h.iter().max().unwrap() as f64 / s.len() as f64;
            }
        }
        total / 200.0
    }

    #[test]
    fn small_alpha_is_more_skewed() {
        let ds = gen_blobs(5, 100, 2, 0.5, 2).unwrap();
        assert!(mean_max_share(&ds, 0.1) > mean_max_share(&ds, 1.0));
    }

    #[test]
    fn mislabel_extremes_and_counts() {
        let ds = gen_blobs(3, 40, 2, 0.5, 0).unwrap();
        let p = partition_dirichlet(&ds, 20, 1.0, 0).unwrap();
        let none = inject_mislabels(&ds, 0.0, &p, 1.0, 5).unwrap();
        assert_eq!(none.dataset, ds);
        let all = inject_mislabels(&ds, 1.0, &p, 1.0, 5).unwrap();
        for (a, b) in all.dataset.labels().iter().zip(ds.labels()) {
            assert_eq!(*a, (b + 1) % 3);
        }
        let half = inject_mislabels(&ds, 0.5, &p, 1.0, 5).unwrap();
        assert_eq!(half.bad_clients.len(), 10);
        assert_eq!(half.dataset.features(), ds.features());
        let partial = inject_mislabels(&ds, 1.0, &p, 0.5, 5).unwrap();
        let flipped = partial
            .dataset
            .labels()
            .iter()
            .zip(ds.labels())
            .filter(|(a, b)| a != b)
            .count();
        let expect: usize = p
            .shards()
            .iter()
            .map(|s| libm::round(0.5 * s.len() as f64) as usize)
            .sum();
        assert_eq!(flipped, expect);
    }
}
