//! Datasets, synthetic data and client partitioning.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::models::Batch;
use crate::rng::{stream, Purpose, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes { ids: Vec<usize>, class_count: usize },
    Values { values: Vec<f64>, dim: usize },
}

/// Row-major feature matrix with per-row labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    input_dim: usize,
    labels: Labels,
}

impl Dataset {
    pub fn classification(
        features: Vec<f64>,
        input_dim: usize,
        ids: Vec<usize>,
        class_count: usize,
    ) -> Result<Dataset> {
        if class_count == 0 {
            return Err(Error::InvalidConfig("class_count must be positive".into()));
        }
        if ids.iter().any(|&y| y >= class_count) {
            return Err(Error::InvalidConfig("label out of range".into()));
        }
        Self::build(features, input_dim, Labels::Classes { ids, class_count })
    }

    pub fn regression(features: Vec<f64>, input_dim: usize, values: Vec<f64>, dim: usize) -> Result<Dataset> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(Error::InvalidConfig("regression target width".into()));
        }
        Self::build(features, input_dim, Labels::Values { values, dim })
    }

    fn build(features: Vec<f64>, input_dim: usize, labels: Labels) -> Result<Dataset> {
        if input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if features.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if !features.len().is_multiple_of(input_dim) {
            return Err(Error::DimensionMismatch { expected: input_dim, found: features.len() % input_dim });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        let n = features.len() / input_dim;
        let labelled = match &labels {
            Labels::Classes { ids, .. } => ids.len(),
            Labels::Values { values, dim } => values.len() / dim,
        };
        if labelled != n {
            return Err(Error::DimensionMismatch { expected: n, found: labelled });
        }
        Ok(Dataset { features, input_dim, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn class_count(&self) -> Option<usize> {
        match self.labels {
            Labels::Classes { class_count, .. } => Some(class_count),
            Labels::Values { .. } => None,
        }
    }

    pub fn class_ids(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Classes { ids, .. } => Some(ids),
            Labels::Values { .. } => None,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Copies the rows at `indices` into a new dataset with the same label space.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Empty("subset"));
        }
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let labels = match &self.labels {
            Labels::Classes { ids, class_count } => {
                Labels::Classes { ids: indices.iter().map(|&i| ids[i]).collect(), class_count: *class_count }
            }
            Labels::Values { values, dim } => {
                let mut out = Vec::with_capacity(indices.len() * dim);
                for &i in indices {
                    out.extend_from_slice(&values[i * dim..(i + 1) * dim]);
                }
                Labels::Values { values: out, dim: *dim }
            }
        };
        Ok(Dataset { features, input_dim: self.input_dim, labels })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        self.subset(indices)?.into_batch()
    }

    pub fn to_batch(&self) -> Result<Batch> {
        self.clone().into_batch()
    }

    pub fn into_batch(self) -> Result<Batch> {
        match self.labels {
            Labels::Classes { ids, .. } => Batch::classification(self.features, self.input_dim, ids),
            Labels::Values { values, dim } => Batch::regression(self.features, self.input_dim, values, dim),
        }
    }

    /// Per-class example counts.
    pub fn class_histogram(&self) -> Option<Vec<usize>> {
        let Labels::Classes { ids, class_count } = &self.labels else { return None };
        let mut hist = vec![0; *class_count];
        for &y in ids {
            hist[y] += 1;
        }
        Some(hist)
    }

    /// Randomly holds out `test_count` rows, returning `(train, test)`.
    pub fn split(&self, test_count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if test_count == 0 || test_count >= self.len() {
            return Err(Error::InvalidConfig("test split must leave both sides nonempty".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream(seed, Purpose::Split, 0, 0));
        let (test, train) = order.split_at(test_count);
        let (mut train, mut test) = (train.to_vec(), test.to_vec());
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

/// Gaussian-mixture classification data with one mean per class.
///
/// Class means are drawn from `N(0, I / input_dim)` and each example is its
/// class mean plus noise from `N(0, spread^2 I / input_dim)`, so the expected
/// squared row norm is `1 + spread^2` whatever the dimension. Rows are ordered
/// by class.
pub fn generate_synthetic(
    seed: u64,
    clusters: usize,
    per_class: usize,
    input_dim: usize,
    spread: f64,
) -> Result<Dataset> {
    if clusters == 0 || per_class == 0 || input_dim == 0 {
        return Err(Error::InvalidConfig("synthetic data sizes must be positive".into()));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::InvalidConfig("spread must be positive".into()));
    }
    let mut rng = stream(seed, Purpose::Synthetic, 0, 0);
    let unit = 1.0 / libm::sqrt(input_dim as f64);
    let means: Vec<f64> = (0..clusters * input_dim).map(|_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        unit * z
    }).collect();
    let mut features = Vec::with_capacity(clusters * per_class * input_dim);
    let mut ids = Vec::with_capacity(clusters * per_class);
    for c in 0..clusters {
        let mean = &means[c * input_dim..(c + 1) * input_dim];
        for _ in 0..per_class {
            features.extend(mean.iter().map(|&m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + unit * spread * z
            }));
            ids.push(c);
        }
    }
    Dataset::classification(features, input_dim, ids, clusters)
}

/// Assignment of dataset rows to clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn from_assignments(assignments: Vec<Vec<usize>>) -> Partition {
        Partition { assignments }
    }

    pub fn client_count(&self) -> usize {
        self.assignments.len()
    }

    pub fn client(&self, i: usize) -> &[usize] {
        &self.assignments[i]
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    /// Checks that the shards are disjoint, cover `0..n` and have sizes
    /// `floor(n/N)` or `ceil(n/N)`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let clients = self.assignments.len();
        if clients == 0 {
            return Err(Error::Empty("partition"));
        }
        let (lo, hi) = (n / clients, n.div_ceil(clients));
        let mut seen = vec![false; n];
        for shard in &self.assignments {
            if shard.len() < lo || shard.len() > hi {
                return Err(Error::InvalidConfig(alloc::format!(
                    "shard size {} outside [{lo}, {hi}]",
                    shard.len()
                )));
            }
            for &i in shard {
                if i >= n || core::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidConfig(alloc::format!("index {i} duplicated or out of range")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidConfig("partition does not cover the dataset".into()));
        }
        Ok(())
    }

    /// Per-client label histograms.
    pub fn label_histograms(&self, dataset: &Dataset) -> Option<Vec<Vec<usize>>> {
        let ids = dataset.class_ids()?;
        let k = dataset.class_count()?;
        Some(
            self.assignments
                .iter()
                .map(|shard| {
                    let mut h = vec![0; k];
                    for &i in shard {
                        h[ids[i]] += 1;
                    }
                    h
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionSpec {
    Iid,
    Dirichlet { concentration: f64 },
}

impl PartitionSpec {
    pub fn apply(&self, dataset: &Dataset, clients: usize, seed: u64) -> Result<Partition> {
        match *self {
            PartitionSpec::Iid => partition_iid(dataset, clients, seed),
            PartitionSpec::Dirichlet { concentration } => partition_dirichlet(dataset, clients, concentration, seed),
        }
    }
}

fn target_sizes(n: usize, clients: usize) -> Vec<usize> {
    (0..clients).map(|i| n / clients + usize::from(i < n % clients)).collect()
}

fn check_counts(n: usize, clients: usize) -> Result<()> {
    if clients == 0 {
        return Err(Error::InvalidConfig("client count must be positive".into()));
    }
    if clients > n {
        return Err(Error::InvalidConfig(alloc::format!("{clients} clients for {n} examples")));
    }
    Ok(())
}

/// Shuffles all rows and deals them out in contiguous, equal-size chunks.
pub fn partition_iid(dataset: &Dataset, clients: usize, seed: u64) -> Result<Partition> {
    let n = dataset.len();
    check_counts(n, clients)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Purpose::Partition, 0, 0));
    let mut rest = order.as_slice();
    let assignments = target_sizes(n, clients)
        .into_iter()
        .map(|size| {
            let (head, tail) = rest.split_at(size);
            rest = tail;
            head.to_vec()
        })
        .collect();
    Ok(Partition { assignments })
}

fn dirichlet_ratios(rng: &mut StreamRng, classes: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut ratios: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let total: f64 = ratios.iter().sum();
    if total > 0.0 && total.is_finite() {
        ratios.iter_mut().for_each(|r| *r /= total);
    } else {
        // Every draw underflowed: the limit of a tiny concentration is a one-hot vector.
        ratios.iter_mut().for_each(|r| *r = 0.0);
        ratios[rng.random_range(0..classes)] = 1.0;
    }
    ratios
}

/// Largest-remainder rounding of `total * weights / sum(weights)`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let shares: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = shares.iter().map(|s| libm::floor(*s) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (shares[a] - counts[a] as f64, shares[b] - counts[b] as f64);
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Label-skewed partition with equal shard sizes.
///
/// Each client draws class ratios `p_i ~ Dirichlet(concentration * 1)`. The
/// examples of class `k` are dealt to clients in proportion to
/// `p_ik * size_i`. Shard sizes are then balanced greedily: one example at a
/// time moves from the client with the largest surplus to the client with the
/// largest deficit, choosing the class the receiving client weights highest.
pub fn partition_dirichlet(dataset: &Dataset, clients: usize, concentration: f64, seed: u64) -> Result<Partition> {
    let n = dataset.len();
    check_counts(n, clients)?;
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::InvalidConfig("concentration must be positive".into()));
    }
    let (Some(ids), Some(k)) = (dataset.class_ids(), dataset.class_count()) else {
        return Err(Error::Unsupported("dirichlet partition of unlabelled data"));
    };
    let mut rng = stream(seed, Purpose::Partition, 0, 0);
    let sizes = target_sizes(n, clients);
    let ratios: Vec<Vec<f64>> = (0..clients).map(|_| dirichlet_ratios(&mut rng, k, concentration)).collect();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in ids.iter().enumerate() {
        by_class[y].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }

    // holdings[i][c]: indices of class c currently assigned to client i
    let mut holdings: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); k]; clients];
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut weights: Vec<f64> = (0..clients).map(|i| ratios[i][c] * sizes[i] as f64).collect();
        if !(weights.iter().sum::<f64>() > 0.0) {
            weights = sizes.iter().map(|&s| s as f64).collect();
        }
        let mut rest = members.as_slice();
        for (i, count) in apportion(members.len(), &weights).into_iter().enumerate() {
            let (head, tail) = rest.split_at(count);
            holdings[i][c].extend_from_slice(head);
            rest = tail;
        }
    }

    let mut held: Vec<usize> = holdings.iter().map(|h| h.iter().map(Vec::len).sum()).collect();
    loop {
        let surplus = (0..clients).filter(|&i| held[i] > sizes[i]).max_by_key(|&i| (held[i] - sizes[i], clients - i));
        let deficit = (0..clients).filter(|&i| held[i] < sizes[i]).max_by_key(|&i| (sizes[i] - held[i], clients - i));
        let (Some(from), Some(to)) = (surplus, deficit) else { break };
        let class = (0..k)
            .filter(|&c| !holdings[from][c].is_empty())
            .max_by(|&a, &b| ratios[to][a].total_cmp(&ratios[to][b]).then(b.cmp(&a)))
            .expect("a client with surplus holds examples");
        let idx = holdings[from][class].pop().expect("nonempty class");
        holdings[to][class].push(idx);
        held[from] -= 1;
        held[to] += 1;
    }

    let assignments = holdings
        .into_iter()
        .map(|h| {
            let mut shard: Vec<usize> = h.into_iter().flatten().collect();
            shard.sort_unstable();
            shard
        })
        .collect();
    Ok(Partition { assignments })
}

/// Shannon entropy (nats) of a count histogram.
pub fn label_entropy(histogram: &[usize]) -> f64 {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * libm::log(p)
        })
        .sum()
}
