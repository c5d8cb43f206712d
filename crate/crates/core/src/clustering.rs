//! FINCH first-neighbor clustering under cosine similarity, partition
//! selection, and a spherical k-means baseline.
//!
//! FINCH links every point to its most cosine-similar neighbor and takes
//! connected components as clusters. Repeating the step on cluster means
//! yields a hierarchy whose cluster count strictly shrinks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_dims, cosine_slices, mean_of, normalize_slice, DenseVector, RngStream};

/// Assignment of points to dense cluster ids `0..num_clusters`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignments: Vec<usize>,
    num_clusters: usize,
}

impl Partition {
    /// Relabels arbitrary ids densely in order of first appearance.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let assignments = labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Partition {
            assignments,
            num_clusters: map.len(),
        }
    }

    pub fn single(n: usize) -> Self {
        Partition {
            assignments: vec![0; n],
            num_clusters: usize::from(n > 0),
        }
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Member indices of each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, &c) in self.assignments.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

/// FINCH levels from finest (0) to coarsest, each over the original points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinchHierarchy {
    levels: Vec<Partition>,
}

impl FinchHierarchy {
    pub fn levels(&self) -> &[Partition] {
        &self.levels
    }

    pub fn cluster_counts(&self) -> Vec<usize> {
        self.levels.iter().map(Partition::num_clusters).collect()
    }

    #[cfg(test)]
    pub(crate) fn from_levels(levels: Vec<Partition>) -> Self {
        FinchHierarchy { levels }
    }
}

/// Undirected first-neighbor graph as sorted adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    pub neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }
}

fn check_points(points: &[&[f64]]) -> Result<()> {
    let first = points.first().ok_or(Error::EmptyInput("points"))?;
    for p in points {
        check_dims(first.len(), p.len())?;
    }
    Ok(())
}

/// Index of the most cosine-similar other point; ties go to the lowest index.
fn first_neighbors(points: &[&[f64]]) -> Vec<usize> {
    let n = points.len();
    let units: Vec<Vec<f64>> = points.iter().map(|p| normalize_slice(p)).collect();
    (0..n)
        .map(|i| {
            let mut best = usize::MAX;
            let mut best_sim = f64::NEG_INFINITY;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let s = crate::numerics::dot(&units[i], &units[j]);
                if s > best_sim {
                    best_sim = s;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Edge `(i, j)` iff `nn(i) = j`, `nn(j) = i`, or `nn(i) = nn(j)`.
pub fn first_neighbor_graph(points: &[DenseVector]) -> Result<Adjacency> {
    let slices: Vec<&[f64]> = points.iter().map(DenseVector::as_slice).collect();
    check_points(&slices)?;
    let n = slices.len();
    if n == 1 {
        return Ok(Adjacency {
            neighbors: vec![Vec::new()],
        });
    }
    let nn = first_neighbors(&slices);
    let neighbors = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && (nn[i] == j || nn[j] == i || nn[i] == nn[j]))
                .collect()
        })
        .collect();
    Ok(Adjacency { neighbors })
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so labels are order-stable
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Connected components of the first-neighbor graph.
///
/// Edges `(i, nn(i))` alone give the same components as the full rule, since
/// `nn(i) = nn(j)` already joins `i` and `j` through their shared neighbor.
fn first_neighbor_components(points: &[&[f64]]) -> Partition {
    let n = points.len();
    if n <= 1 {
        return Partition::single(n);
    }
    let nn = first_neighbors(points);
    let mut uf = UnionFind::new(n);
    for (i, &j) in nn.iter().enumerate() {
        uf.union(i, j);
    }
    let roots: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
    Partition::from_labels(&roots)
}

pub fn finch(points: &[DenseVector]) -> Result<FinchHierarchy> {
    let slices: Vec<&[f64]> = points.iter().map(DenseVector::as_slice).collect();
    finch_slices(&slices)
}

pub(crate) fn finch_slices(points: &[&[f64]]) -> Result<FinchHierarchy> {
    check_points(points)?;
    let mut levels = vec![first_neighbor_components(points)];
    loop {
        let current = levels.last().unwrap();
        if current.num_clusters() <= 1 {
            break;
        }
        let means = centers_of(current, points);
        let mean_refs: Vec<&[f64]> = means.iter().map(Vec::as_slice).collect();
        let merged = first_neighbor_components(&mean_refs);
        if merged.num_clusters() >= current.num_clusters() {
            break;
        }
        let composed: Vec<usize> = current
            .assignments()
            .iter()
            .map(|&c| merged.assignments()[c])
            .collect();
        levels.push(Partition::from_labels(&composed));
    }
    Ok(FinchHierarchy { levels })
}

/// Coarsest level that still has more than one cluster, else the single
/// cluster level.
pub fn select_partition(h: &FinchHierarchy) -> Partition {
    h.levels
        .iter()
        .filter(|p| p.num_clusters() > 1)
        .min_by_key(|p| p.num_clusters())
        .or_else(|| h.levels.last())
        .cloned()
        .unwrap_or_else(|| Partition::single(0))
}

fn centers_of(p: &Partition, points: &[&[f64]]) -> Vec<Vec<f64>> {
    p.members()
        .iter()
        .map(|m| mean_of(m.iter().map(|&i| points[i])).expect("clusters are non-empty"))
        .collect()
}

/// Arithmetic mean of each cluster's members.
pub fn cluster_centers(p: &Partition, points: &[DenseVector]) -> Result<Vec<DenseVector>> {
    check_dims(p.len(), points.len())?;
    let slices: Vec<&[f64]> = points.iter().map(DenseVector::as_slice).collect();
    Ok(centers_of(p, &slices)
        .into_iter()
        .map(DenseVector::from_vec_unchecked)
        .collect())
}

const KMEANS_MAX_ITERS: usize = 100;

/// Spherical k-means objective: Σ (1 − cos(point, assigned center)).
pub fn kmeans_objective(p: &Partition, points: &[DenseVector]) -> f64 {
    let units: Vec<Vec<f64>> = points.iter().map(|x| normalize_slice(x.as_slice())).collect();
    let refs: Vec<&[f64]> = units.iter().map(Vec::as_slice).collect();
    let centers = centers_of(p, &refs);
    p.assignments()
        .iter()
        .zip(&refs)
        .map(|(&c, x)| 1.0 - cosine_slices(x, &centers[c]))
        .sum()
}

/// Lloyd iterations on unit-normalized points with distance `1 − cos`,
/// k-means++ seeding, and empty clusters refilled from the largest cluster.
pub fn kmeans(points: &[DenseVector], k: usize, rng: &mut RngStream) -> Result<Partition> {
    let slices: Vec<&[f64]> = points.iter().map(DenseVector::as_slice).collect();
    check_points(&slices)?;
    kmeans_slices(&slices, k, rng).map(|(p, _)| p)
}

/// Returns the partition and the objective after every Lloyd iteration.
pub(crate) fn kmeans_slices(points: &[&[f64]], k: usize, rng: &mut RngStream) -> Result<(Partition, Vec<f64>)> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={n} for k-means"
        )));
    }
    let units: Vec<Vec<f64>> = points.iter().map(|p| normalize_slice(p)).collect();
    let dist = |a: &[f64], b: &[f64]| (1.0 - cosine_slices(a, b)).max(0.0);

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![units[rng.below(n)].clone()];
    while centers.len() < k {
        let weights: Vec<f64> = units
            .iter()
            .map(|u| {
                let d = centers.iter().map(|c| dist(u, c)).fold(f64::INFINITY, f64::min);
                d * d
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total <= 0.0 {
            // all remaining points coincide with a center; take the first unused index
            (0..n).find(|i| !centers.iter().any(|c| c == &units[*i])).unwrap_or(0)
        } else {
            let mut target = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centers.push(units[pick].clone());
    }

    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, u) in units.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = dist(u, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        repair_empty(&mut assignments, &units, &centers, k);
        for (c, center) in centers.iter_mut().enumerate() {
            let members = units
                .iter()
                .zip(&assignments)
                .filter(|(_, &a)| a == c)
                .map(|(u, _)| u.as_slice());
            if let Some(m) = mean_of(members) {
                *center = m;
            }
        }
        history.push(
            units
                .iter()
                .zip(&assignments)
                .map(|(u, &a)| dist(u, &centers[a]))
                .sum(),
        );
        if !changed {
            break;
        }
    }
    Ok((Partition::from_labels(&assignments), history))
}

/// Moves the point farthest from its center in the largest cluster into each
/// empty cluster.
fn repair_empty(assignments: &mut [usize], units: &[Vec<f64>], centers: &[Vec<f64>], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap();
        let victim = (0..units.len())
            .filter(|&i| assignments[i] == largest)
            .max_by(|&a, &b| {
                let da = 1.0 - cosine_slices(&units[a], &centers[largest]);
                let db = 1.0 - cosine_slices(&units[b], &centers[largest]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .unwrap();
        assignments[victim] = empty;
    }
}

/// Which algorithm produces clustered prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringBackend {
    Finch,
    /// K-means with a fixed k (clamped to the number of points).
    Kmeans,
    /// K-means with k taken from the selected FINCH partition.
    KmeansAdaptive,
}

/// Cluster `points` with the chosen backend and return the partition.
pub(crate) fn cluster_with(
    backend: ClusteringBackend,
    kmeans_k: usize,
    points: &[&[f64]],
    rng: &mut RngStream,
) -> Result<Partition> {
    check_points(points)?;
    match backend {
        ClusteringBackend::Finch => Ok(select_partition(&finch_slices(points)?)),
        ClusteringBackend::Kmeans => {
            let k = kmeans_k.clamp(1, points.len());
            kmeans_slices(points, k, rng).map(|(p, _)| p)
        }
        ClusteringBackend::KmeansAdaptive => {
            let k = select_partition(&finch_slices(points)?).num_clusters();
            kmeans_slices(points, k, rng).map(|(p, _)| p)
        }
    }
}
