//! Local and global prototype generation and prototype perturbation.
//!
//! A client summarizes each class's feature vectors either by their mean or
//! by cluster centers; the server pools what it receives per class and
//! either averages, clusters, or forwards everything untouched.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_with, ClusteringBackend};
use crate::error::{Error, Result};
use crate::numerics::{mean_of, DenseVector, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: DenseVector,
    /// Number of feature vectors (or pooled prototypes' members) summarized.
    pub member_count: usize,
}

impl Prototype {
    pub fn new(class_id: usize, vector: DenseVector, member_count: usize) -> Self {
        Prototype {
            class_id,
            vector,
            member_count,
        }
    }
}

/// Per-class prototypes uploaded by one client.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalPrototypeSet {
    pub client_id: usize,
    classes: BTreeMap<usize, Vec<Prototype>>,
}

impl LocalPrototypeSet {
    pub fn new(client_id: usize) -> Self {
        LocalPrototypeSet {
            client_id,
            classes: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, proto: Prototype) {
        self.classes.entry(proto.class_id).or_default().push(proto);
    }

    pub fn classes(&self) -> &BTreeMap<usize, Vec<Prototype>> {
        &self.classes
    }

    /// `J_{k,m}`, 0 for an absent class.
    pub fn count(&self, class: usize) -> usize {
        self.classes.get(&class).map_or(0, Vec::len)
    }

    pub fn total(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prototype> {
        self.classes.values().flatten()
    }
}

/// Per-class prototypes broadcast by the server.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlobalPrototypeSet {
    pub round_index: usize,
    classes: BTreeMap<usize, Vec<Prototype>>,
}

impl GlobalPrototypeSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_prototypes(protos: Vec<Prototype>, round_index: usize) -> Self {
        let mut classes: BTreeMap<usize, Vec<Prototype>> = BTreeMap::new();
        for p in protos {
            classes.entry(p.class_id).or_default().push(p);
        }
        GlobalPrototypeSet {
            round_index,
            classes,
        }
    }

    pub fn classes(&self) -> &BTreeMap<usize, Vec<Prototype>> {
        &self.classes
    }

    /// `C_m`, 0 for an absent class.
    pub fn count(&self, class: usize) -> usize {
        self.classes.get(&class).map_or(0, Vec::len)
    }

    /// `Σ_m C_m`.
    pub fn total(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn dim(&self) -> Option<usize> {
        self.classes.values().flatten().next().map(|p| p.vector.dim())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prototype> {
        self.classes.values().flatten()
    }
}

/// How one level of prototypes is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMode {
    Average,
    Cluster,
}

/// Clustering settings shared by both prototype levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterSettings {
    pub backend: ClusteringBackend,
    pub kmeans_k: usize,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        ClusterSettings {
            backend: ClusteringBackend::Finch,
            kmeans_k: 2,
        }
    }
}

/// Gaussian prototype perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacyConfig {
    pub enabled: bool,
    /// Noise standard deviation `s`.
    pub scale: f64,
    /// Per-coordinate probability `p` that noise is added.
    pub perturbation_coefficient: f64,
    /// Model-parameter DP-SGD; accepted in config files only to be rejected.
    pub dp_sgd: bool,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        PrivacyConfig {
            enabled: false,
            scale: 0.05,
            perturbation_coefficient: 0.1,
            dp_sgd: false,
        }
    }
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dp_sgd {
            return Err(Error::Unsupported {
                key: "privacy.dp_sgd".into(),
                message: "DP-SGD on model parameters is not implemented; only prototype perturbation is available".into(),
            });
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::config("privacy.scale", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.perturbation_coefficient) {
            return Err(Error::config("privacy.perturbation_coefficient", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn summarize_class(
    class: usize,
    vectors: &[&[f64]],
    counts: &[usize],
    mode: PrototypeMode,
    weighted: bool,
    settings: ClusterSettings,
    rng: &mut RngStream,
) -> Result<Vec<Prototype>> {
    let group = |members: &[usize]| -> Prototype {
        let member_count = members.iter().map(|&i| counts[i]).sum();
        let mean = if weighted {
            let mut acc = vec![0.0; vectors[0].len()];
            for &i in members {
                for (a, x) in acc.iter_mut().zip(vectors[i]) {
                    *a += counts[i] as f64 * x;
                }
            }
            acc.iter_mut().for_each(|a| *a /= member_count as f64);
            acc
        } else {
            mean_of(members.iter().map(|&i| vectors[i])).expect("non-empty group")
        };
        Prototype::new(class, DenseVector::from_vec_unchecked(mean), member_count)
    };
    match mode {
        PrototypeMode::Average => {
            let all: Vec<usize> = (0..vectors.len()).collect();
            Ok(vec![group(&all)])
        }
        PrototypeMode::Cluster => {
            let partition = cluster_with(settings.backend, settings.kmeans_k, vectors, rng)?;
            Ok(partition.members().iter().map(|m| group(m)).collect())
        }
    }
}

/// Per-class prototypes for one client. Classes with no features are omitted.
pub fn compute_local_prototypes(
    client_id: usize,
    features_by_class: &BTreeMap<usize, Vec<DenseVector>>,
    mode: PrototypeMode,
    settings: ClusterSettings,
    rng: &mut RngStream,
) -> Result<LocalPrototypeSet> {
    let mut out = LocalPrototypeSet::new(client_id);
    for (&class, feats) in features_by_class {
        if feats.is_empty() {
            continue;
        }
        let slices: Vec<&[f64]> = feats.iter().map(DenseVector::as_slice).collect();
        let ones = vec![1; slices.len()];
        for p in summarize_class(class, &slices, &ones, mode, false, settings, rng)? {
            out.insert(p);
        }
    }
    Ok(out)
}

/// Pool received prototypes per class and average or cluster them.
///
/// `member_weighted` switches average mode from an unweighted mean over
/// prototypes to a mean weighted by `member_count`.
pub fn compute_global_prototypes(
    locals: &[LocalPrototypeSet],
    mode: PrototypeMode,
    settings: ClusterSettings,
    member_weighted: bool,
    round_index: usize,
    rng: &mut RngStream,
) -> Result<GlobalPrototypeSet> {
    if locals.is_empty() {
        return Err(Error::EmptyInput("local prototype sets"));
    }
    let mut out = Vec::new();
    for (class, pooled) in pool_by_class(locals) {
        let slices: Vec<&[f64]> = pooled.iter().map(|p| p.vector.as_slice()).collect();
        let counts: Vec<usize> = pooled.iter().map(|p| p.member_count).collect();
        out.extend(summarize_class(class, &slices, &counts, mode, member_weighted, settings, rng)?);
    }
    Ok(GlobalPrototypeSet::from_prototypes(out, round_index))
}

/// Every received prototype forwarded unchanged (no global aggregation).
pub fn broadcast_local_prototypes(locals: &[LocalPrototypeSet], round_index: usize) -> GlobalPrototypeSet {
    let all = pool_by_class(locals)
        .into_values()
        .flatten()
        .cloned()
        .collect();
    GlobalPrototypeSet::from_prototypes(all, round_index)
}

fn pool_by_class(locals: &[LocalPrototypeSet]) -> BTreeMap<usize, Vec<&Prototype>> {
    let mut pooled: BTreeMap<usize, Vec<&Prototype>> = BTreeMap::new();
    for set in locals {
        for (&class, protos) in set.classes() {
            pooled.entry(class).or_default().extend(protos);
        }
    }
    pooled
}

/// Adds `N(0, s²)` noise to each coordinate independently with probability `p`.
pub fn perturb_prototypes(set: &LocalPrototypeSet, cfg: &PrivacyConfig, rng: &mut RngStream) -> LocalPrototypeSet {
    let mut out = set.clone();
    if !cfg.enabled || cfg.scale == 0.0 || cfg.perturbation_coefficient == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, cfg.scale).expect("scale validated as finite and >= 0");
    for protos in out.classes.values_mut() {
        for p in protos.iter_mut() {
            for x in p.vector.as_mut_slice() {
                if rng.bernoulli(cfg.perturbation_coefficient) {
                    *x += normal.sample(rng.inner());
                }
            }
        }
    }
    out
}
