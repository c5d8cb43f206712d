//! Multi-seed driver and ablation presets.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::clustering::ClusteringBackend;
use crate::config::ExperimentConfig;
use crate::datagen::{DomainSpec, PartitionKind};
use crate::error::{Error, Result};
use crate::federation::run_training;
use crate::metrics::{emit_csv, emit_summary_csv, emit_timing_csv, MetricsLog, VariantSummary};
use crate::prototypes::PrototypeMode;

pub const PRESETS: &[&str] = &[
    "table3", "table4", "table5", "fig4", "fig5", "appendixC", "appendixD", "appendixE", "appendixF",
];

/// One labelled configuration of a preset.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: ExperimentConfig,
}

fn variant(label: impl Into<String>, base: &ExperimentConfig, edit: impl FnOnce(&mut ExperimentConfig)) -> Variant {
    let mut config = base.clone();
    edit(&mut config);
    Variant {
        label: label.into(),
        config,
    }
}

fn mode_name(m: PrototypeMode) -> &'static str {
    match m {
        PrototypeMode::Average => "avg",
        PrototypeMode::Cluster => "cluster",
    }
}

/// Expands a preset name into its variants over `base`.
pub fn preset_variants(name: &str, base: &ExperimentConfig) -> Result<Vec<Variant>> {
    use PrototypeMode::{Average, Cluster};
    let out = match name {
        "table3" => [(Average, Average), (Average, Cluster), (Cluster, Average), (Cluster, Cluster)]
            .into_iter()
            .map(|(l, g)| {
                variant(format!("{}_{}", mode_name(l), mode_name(g)), base, |c| {
                    c.prototypes.local_mode = l;
                    c.prototypes.global_mode = g;
                })
            })
            .collect(),
        "table4" => [("broadcast", true), ("global_cluster", false)]
            .into_iter()
            .map(|(label, b)| {
                variant(label, base, |c| {
                    c.prototypes.local_mode = Cluster;
                    c.prototypes.global_mode = Cluster;
                    c.prototypes.broadcast_local = b;
                })
            })
            .collect(),
        "table5" => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(contrast, correction)| {
                let label = match (contrast, correction) {
                    (false, false) => "neither",
                    (true, false) => "contrast",
                    (false, true) => "correction",
                    (true, true) => "both",
                };
                variant(label, base, |c| {
                    c.loss.contrast_enabled = contrast;
                    c.loss.correction_enabled = correction;
                })
            })
            .collect(),
        "fig4" => [0.125, 0.25, 0.5, 0.75, 1.0]
            .into_iter()
            .map(|a| variant(format!("alpha_{a}"), base, |c| c.loss.alpha = a))
            .collect(),
        "fig5" => [0.03, 0.05, 0.07, 0.1, 0.2]
            .into_iter()
            .map(|t| variant(format!("tau_{t}"), base, |c| c.loss.tau = t))
            .collect(),
        "appendixC" => vec![
            variant("iid", base, |c| c.partition.kind = PartitionKind::Iid),
            variant("dirichlet_0.5", base, |c| {
                c.partition.kind = PartitionKind::Dirichlet;
                c.partition.dirichlet_alpha = 0.5;
            }),
        ],
        "appendixD" => vec![
            variant("finch", base, |c| c.prototypes.backend = ClusteringBackend::Finch),
            variant("kmeans_adaptive", base, |c| c.prototypes.backend = ClusteringBackend::KmeansAdaptive),
            variant("kmeans_2", base, |c| {
                c.prototypes.backend = ClusteringBackend::Kmeans;
                c.prototypes.kmeans_k = 2;
            }),
            variant("kmeans_5", base, |c| {
                c.prototypes.backend = ClusteringBackend::Kmeans;
                c.prototypes.kmeans_k = 5;
            }),
        ],
        "appendixE" => vec![variant("unbalanced_1_4_2_2_1", base, |c| {
            c.domains = [("d0", 0.1), ("d1", 0.3), ("d2", 0.5), ("d3", 0.8), ("d4", 0.4)]
                .iter()
                .enumerate()
                .map(|(i, (n, s))| DomainSpec::new(n, *s, 1000 + i as u64))
                .collect();
            c.clients_per_domain = vec![1, 4, 2, 2, 1];
        })],
        "appendixF" => vec![
            variant("no_perturbation", base, |c| c.privacy.enabled = false),
            variant("perturbed", base, |c| c.privacy.enabled = true),
        ],
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    for v in &out {
        v.config.validate()?;
    }
    Ok(out)
}

/// Logs of every seed of one configuration, in seed-list order.
pub fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<MetricsLog>> {
    cfg.validate()?;
    cfg.seed_list()
        .par_iter()
        .map(|&seed| {
            let mut c = cfg.clone();
            c.seed = seed;
            run_training(&c)
        })
        .collect()
}

/// Result of one variant: logs by seed and the cross-seed summary.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub label: String,
    pub logs: Vec<MetricsLog>,
    pub summary: VariantSummary,
}

fn write_variant(out_dir: &Path, label: &str, logs: &[MetricsLog]) -> Result<()> {
    for (i, log) in logs.iter().enumerate() {
        let stem = format!("{label}_run{i}_seed{}", log.seed);
        emit_csv(log, &out_dir.join(format!("{stem}.csv")))?;
        emit_timing_csv(log, &out_dir.join(format!("{stem}_timing.csv")))?;
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs every seed of `cfg`; with `out_dir`, writes per-round CSVs and
/// `<label>_summary.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, label: &str, out_dir: Option<&Path>) -> Result<VariantResult> {
    let logs = run_seeds(cfg)?;
    let summary = VariantSummary::from_logs(label, &logs)?;
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        write_variant(dir, label, &logs)?;
        emit_summary_csv(&logs[0].domain_names, std::slice::from_ref(&summary), &dir.join(format!("{label}_summary.csv")))?;
    }
    Ok(VariantResult {
        label: label.to_string(),
        logs,
        summary,
    })
}

/// Runs every variant of a preset; with `out_dir`, writes per-round CSVs and
/// `<preset>_comparison.csv`.
pub fn run_preset(name: &str, base: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<VariantResult>> {
    let variants = preset_variants(name, base)?;
    let results = variants
        .iter()
        .map(|v| run_experiment(&v.config, &v.label, None))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        for r in &results {
            write_variant(dir, &format!("{name}_{}", r.label), &r.logs)?;
        }
        let summaries: Vec<VariantSummary> = results.iter().map(|r| r.summary.clone()).collect();
        let path: PathBuf = dir.join(format!("{name}_comparison.csv"));
        emit_summary_csv(&results[0].logs[0].domain_names, &summaries, &path)?;
    }
    Ok(results)
}
