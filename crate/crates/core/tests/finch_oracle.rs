mod common;

use common::{brute_components, brute_first_neighbors, same_partition};
use fedplvm::clustering::{finch, first_neighbor_graph, select_partition};
use fedplvm::numerics::{DenseVector, RngStream};

fn point_set(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = RngStream::new(seed);
    let n = 2 + rng.below(9);
    let dim = 2 + rng.below(4);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.uniform_range(0.01, 1.0)).collect())
        .collect()
}

fn dense(points: &[Vec<f64>]) -> Vec<DenseVector> {
    points.iter().map(|p| DenseVector::new(p.clone()).unwrap()).collect()
}

/// Full hierarchy by brute force: components, then components of the
/// member means, until one cluster remains or the count stops falling.
fn brute_hierarchy(points: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let mut levels = vec![brute_components(points)];
    loop {
        let current = levels.last().unwrap().clone();
        let mut roots: Vec<usize> = current.clone();
        roots.sort_unstable();
        roots.dedup();
        if roots.len() <= 1 {
            break;
        }
        let means: Vec<Vec<f64>> = roots
            .iter()
            .map(|r| {
                let members: Vec<&Vec<f64>> = points.iter().zip(&current).filter(|(_, l)| *l == r).map(|(p, _)| p).collect();
                (0..points[0].len())
                    .map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64)
                    .collect()
            })
            .collect();
        let merged = brute_components(&means);
        let merged_count = {
            let mut m = merged.clone();
            m.sort_unstable();
            m.dedup();
            m.len()
        };
        if merged_count >= roots.len() {
            break;
        }
        let composed = current
            .iter()
            .map(|l| merged[roots.binary_search(l).unwrap()])
            .collect();
        levels.push(composed);
    }
    levels
}

#[test]
fn first_neighbors_match_exhaustive_search() {
    for seed in 0..50 {
        let pts = point_set(seed);
        let graph = first_neighbor_graph(&dense(&pts)).unwrap();
        let nn = brute_first_neighbors(&pts);
        for (i, &j) in nn.iter().enumerate() {
            assert!(graph.has_edge(i, j) && graph.has_edge(j, i), "seed {seed}: missing edge {i}-{j}");
        }
    }
}

#[test]
fn hierarchy_matches_brute_force() {
    for seed in 0..50 {
        let pts = point_set(seed);
        let h = finch(&dense(&pts)).unwrap();
        let oracle = brute_hierarchy(&pts);
        assert_eq!(h.levels().len(), oracle.len(), "seed {seed}");
        for (lvl, (got, want)) in h.levels().iter().zip(&oracle).enumerate() {
            assert!(same_partition(got.assignments(), want), "seed {seed} level {lvl}");
        }
        let counts = h.cluster_counts();
        assert!(counts.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {counts:?}");
        let chosen = select_partition(&h).num_clusters();
        let expected = counts.iter().copied().filter(|&c| c > 1).min().unwrap_or(*counts.last().unwrap());
        assert_eq!(chosen, expected);
    }
}

#[test]
fn duplicate_points_tie_to_lowest_index() {
    let pts = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
    let h = finch(&dense(&pts)).unwrap();
    assert!(same_partition(h.levels()[0].assignments(), &brute_components(&pts)));
    assert_eq!(h.levels()[0].num_clusters(), 2);
}
