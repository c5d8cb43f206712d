//! Evaluation metrics, the per-round log, and CSV emission.

use std::path::Path;

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::federation::{CommLedger, LedgerRecord};
use crate::model::{argmax, forward_features_slice, forward_logits_slice, ModelParams};
use crate::numerics::DenseVector;

/// Fraction of `samples` whose predicted class equals the label.
pub fn accuracy(model: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation samples"));
    }
    let mut hits = 0usize;
    for s in samples {
        let z = forward_features_slice(model, s.x.as_slice())?;
        let logits = forward_logits_slice(model, &z)?;
        hits += usize::from(argmax(&logits) == s.y);
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Mean distance from each normalized feature to the mean of its group.
///
/// Each group holds the normalized features of one class; empty groups are
/// skipped.
pub fn compute_variance_metric(groups: &[Vec<DenseVector>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for group in groups.iter().filter(|g| !g.is_empty()) {
        let center = crate::numerics::mean_of(group.iter().map(DenseVector::as_slice)).expect("non-empty group");
        for u in group {
            if u.dim() != center.len() {
                return Err(Error::DimensionMismatch {
                    expected: center.len(),
                    found: u.dim(),
                });
            }
            let d2: f64 = u.as_slice().iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
            total += d2.sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("feature groups"));
    }
    Ok(total / count as f64)
}

/// One client's evaluation on its domain's test set.
#[derive(Debug, Clone)]
pub struct DomainEvaluation {
    pub client_id: usize,
    pub domain_id: usize,
    pub accuracy: f64,
    /// Normalized test features grouped by class.
    pub normalized_features: Vec<Vec<DenseVector>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    /// Mean local-model accuracy of the clients of each domain.
    pub domain_accuracy: Vec<f64>,
    /// Mean of `domain_accuracy`.
    pub average_accuracy: f64,
    pub global_domain_accuracy: Vec<f64>,
    pub global_average_accuracy: f64,
    pub variance_metric: f64,
    /// Mean local prototypes per class over the uploading clients of each
    /// domain; 0 when no client of the domain uploaded.
    pub domain_prototype_count: Vec<f64>,
    pub prototypes_uploaded: usize,
    /// Per client.
    pub prototypes_downloaded: usize,
    pub model_scalars_exchanged: usize,
    /// Not written to the per-round CSV.
    pub wall_clock_secs: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

impl RoundMetrics {
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        round: usize,
        evals: &[DomainEvaluation],
        num_domains: usize,
        global_domain_accuracy: Vec<f64>,
        variance_metric: f64,
        prototype_counts: Vec<Vec<f64>>,
        record: &LedgerRecord,
        wall_clock_secs: f64,
    ) -> Self {
        let mut per_domain = vec![Vec::new(); num_domains];
        for e in evals {
            per_domain[e.domain_id].push(e.accuracy);
        }
        let domain_accuracy: Vec<f64> = per_domain.iter().map(|a| mean(a)).collect();
        RoundMetrics {
            round,
            average_accuracy: mean(&domain_accuracy),
            domain_accuracy,
            global_average_accuracy: mean(&global_domain_accuracy),
            global_domain_accuracy,
            variance_metric,
            domain_prototype_count: prototype_counts.iter().map(|c| mean(c)).collect(),
            prototypes_uploaded: record.uploaded_total(),
            prototypes_downloaded: record.downloaded_per_client,
            model_scalars_exchanged: record.model_scalars_exchanged,
            wall_clock_secs,
        }
    }
}

/// Everything recorded by one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub seed: u64,
    pub domain_names: Vec<String>,
    /// Accuracy of the initial global model on each domain.
    pub initial_domain_accuracy: Vec<f64>,
    pub rounds: Vec<RoundMetrics>,
    pub ledger: CommLedger,
}

impl MetricsLog {
    pub fn new(seed: u64, domain_names: Vec<String>, initial_domain_accuracy: Vec<f64>) -> Self {
        MetricsLog {
            seed,
            domain_names,
            initial_domain_accuracy,
            rounds: Vec::new(),
            ledger: CommLedger::default(),
        }
    }

    pub fn push(&mut self, row: RoundMetrics) {
        self.rounds.push(row);
    }

    pub fn last(&self) -> Option<&RoundMetrics> {
        self.rounds.last()
    }
}

/// `%g`-style rendering with six significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mantissa), sign, exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    }
}

/// Header of the per-round CSV for the given domain names.
pub fn round_csv_header(domains: &[String]) -> Vec<String> {
    let mut h = vec!["round".to_string()];
    h.extend(domains.iter().map(|d| format!("acc_{d}")));
    h.push("avg_acc".into());
    h.extend(domains.iter().map(|d| format!("global_acc_{d}")));
    h.push("global_avg_acc".into());
    h.push("variance".into());
    h.extend(domains.iter().map(|d| format!("protos_{d}")));
    h.extend(["uploaded".into(), "downloaded".into(), "model_scalars".into()]);
    h
}

fn round_csv_row(r: &RoundMetrics) -> Vec<String> {
    let mut row = vec![r.round.to_string()];
    row.extend(r.domain_accuracy.iter().map(|&a| format_sig6(a)));
    row.push(format_sig6(r.average_accuracy));
    row.extend(r.global_domain_accuracy.iter().map(|&a| format_sig6(a)));
    row.push(format_sig6(r.global_average_accuracy));
    row.push(format_sig6(r.variance_metric));
    row.extend(r.domain_prototype_count.iter().map(|&a| format_sig6(a)));
    row.push(r.prototypes_uploaded.to_string());
    row.push(r.prototypes_downloaded.to_string());
    row.push(r.model_scalars_exchanged.to_string());
    row
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(file))
}

/// Writes one row per round; wall-clock time is excluded so output is
/// byte-stable.
pub fn emit_csv(log: &MetricsLog, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(round_csv_header(&log.domain_names))?;
    for r in &log.rounds {
        w.write_record(round_csv_row(r))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `round,wall_clock_secs`.
pub fn emit_timing_csv(log: &MetricsLog, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["round", "wall_clock_secs"])?;
    for r in &log.rounds {
        w.write_record([r.round.to_string(), format_sig6(r.wall_clock_secs)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sample mean and sample standard deviation (`n - 1`); std is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, var.sqrt())
}

/// Per-domain accuracy, average accuracy, variance metric.
type FinalRow = (Vec<f64>, f64, f64);

/// Final-round statistics of one variant across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub label: String,
    pub seeds: usize,
    /// `(mean, std)` per domain.
    pub domain_accuracy: Vec<(f64, f64)>,
    pub average_accuracy: (f64, f64),
    pub variance_metric: (f64, f64),
    /// Mean over seeds and rounds of per-client downloaded prototypes.
    pub mean_downloaded: f64,
    pub mean_uploaded: f64,
}

impl VariantSummary {
    /// Summarizes the last round of each log. Logs without rounds fall back
    /// to the initial evaluation.
    pub fn from_logs(label: &str, logs: &[MetricsLog]) -> Result<Self> {
        let first = logs.first().ok_or(Error::EmptyInput("metrics logs"))?;
        let nd = first.domain_names.len();
        let finals: Vec<FinalRow> = logs
            .iter()
            .map(|l| match l.last() {
                Some(r) => (r.domain_accuracy.clone(), r.average_accuracy, r.variance_metric),
                None => (l.initial_domain_accuracy.clone(), mean(&l.initial_domain_accuracy), 0.0),
            })
            .collect();
        if finals.iter().any(|f| f.0.len() != nd) {
            return Err(Error::ShapeMismatch("logs disagree on the number of domains".into()));
        }
        let column = |f: fn(&FinalRow) -> f64| mean_std(&finals.iter().map(f).collect::<Vec<_>>());
        let rounds: Vec<&RoundMetrics> = logs.iter().flat_map(|l| &l.rounds).collect();
        Ok(VariantSummary {
            label: label.to_string(),
            seeds: logs.len(),
            domain_accuracy: (0..nd)
                .map(|d| mean_std(&finals.iter().map(|f| f.0[d]).collect::<Vec<_>>()))
                .collect(),
            average_accuracy: column(|f| f.1),
            variance_metric: column(|f| f.2),
            mean_downloaded: mean(&rounds.iter().map(|r| r.prototypes_downloaded as f64).collect::<Vec<_>>()),
            mean_uploaded: mean(&rounds.iter().map(|r| r.prototypes_uploaded as f64).collect::<Vec<_>>()),
        })
    }
}

/// One row per variant; `delta_avg` is relative to the first row.
pub fn emit_summary_csv(domains: &[String], rows: &[VariantSummary], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["variant".to_string(), "seeds".to_string()];
    for d in domains {
        header.push(format!("acc_{d}_mean"));
        header.push(format!("acc_{d}_std"));
    }
    header.extend(
        ["avg_acc_mean", "avg_acc_std", "delta_avg", "variance_mean", "variance_std", "downloaded_mean", "uploaded_mean"]
            .map(String::from),
    );
    w.write_record(&header)?;
    let base = rows.first().map(|r| r.average_accuracy.0);
    for r in rows {
        let mut rec = vec![r.label.clone(), r.seeds.to_string()];
        for (m, s) in &r.domain_accuracy {
            rec.push(format_sig6(*m));
            rec.push(format_sig6(*s));
        }
        rec.push(format_sig6(r.average_accuracy.0));
        rec.push(format_sig6(r.average_accuracy.1));
        rec.push(format_sig6(r.average_accuracy.0 - base.unwrap_or(0.0)));
        rec.push(format_sig6(r.variance_metric.0));
        rec.push(format_sig6(r.variance_metric.1));
        rec.push(format_sig6(r.mean_downloaded));
        rec.push(format_sig6(r.mean_uploaded));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
