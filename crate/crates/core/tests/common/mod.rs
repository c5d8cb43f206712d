//! Reference computations shared by the integration tests and the
//! acceptance runner. Loss, gradient and clustering oracles are written
//! from scratch; the SGD reference reuses only the single-step primitives.

#![allow(dead_code)]

use fedplvm::config::ExperimentConfig;
use fedplvm::datagen::Sample;
use fedplvm::federation::setup;
use fedplvm::losses::LossHyper;
use fedplvm::model::{backward, sgd_step, ModelParams, ModelShape, OptimizerState};
use fedplvm::numerics::{DenseVector, RngStream};
use fedplvm::prototypes::{GlobalPrototypeSet, Prototype};

/// Loss plus the distance of every non-smooth quantity from its kink.
pub struct OracleLoss {
    pub value: f64,
    /// Smallest |pre-activation|, |cos| and |Σ s − C| seen.
    pub kink_margin: f64,
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, bias)| bias + (0..cols).map(|c| w[r * cols + c] * x[c]).sum::<f64>())
        .collect()
}

/// `λ·(contrast + correction) + CE`, batch mean, from first principles.
pub fn oracle_local_loss(params: &ModelParams, batch: &[Sample], protos: &[(usize, Vec<f64>)], hyper: &LossHyper) -> OracleLoss {
    let mut margin = f64::INFINITY;
    let mut total = 0.0;
    for s in batch {
        let mut h = s.x.as_slice().to_vec();
        for layer in &params.extractor {
            let pre = affine(layer.weights.as_slice(), layer.bias.as_slice(), &h);
            margin = pre.iter().fold(margin, |m, u| m.min(u.abs()));
            h = pre.into_iter().map(|u| u.max(0.0)).collect();
        }
        let z = h;
        let logits = affine(params.classifier.weights.as_slice(), params.classifier.bias.as_slice(), &z);
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let ce = -((logits[s.y] - mx).exp() / denom).ln();

        let zn = z.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut all = 0.0;
        let mut own = 0.0;
        let mut own_sum = 0.0;
        let mut own_count = 0usize;
        for (c, g) in protos {
            let gn = g.iter().map(|a| a * a).sum::<f64>().sqrt();
            let cos = z.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (zn * gn);
            margin = margin.min(cos.abs());
            let sim = if cos > 0.0 { cos.min(1.0).powf(hyper.alpha) } else { 0.0 };
            let e = (sim / hyper.tau).exp();
            all += e;
            if *c == s.y {
                own += e;
                own_sum += sim;
                own_count += 1;
            }
        }
        let mut proto_term = 0.0;
        if own_count > 0 {
            if hyper.contrast_enabled {
                proto_term += all.ln() - own.ln();
            }
            if hyper.correction_enabled {
                let gap = own_sum - own_count as f64;
                margin = margin.min(gap.abs());
                proto_term += gap.abs();
            }
        }
        total += hyper.lambda * proto_term + ce;
    }
    OracleLoss {
        value: total / batch.len() as f64,
        kink_margin: margin,
    }
}

/// Central differences of `f` over the flattened parameters.
pub fn finite_difference(params: &ModelParams, step: f64, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let base = params.flatten();
    let mut probe = params.clone();
    (0..base.len())
        .map(|i| {
            let mut x = base.clone();
            x[i] = base[i] + step;
            probe.assign_flat(&x).unwrap();
            let up = f(&probe);
            x[i] = base[i] - step;
            probe.assign_flat(&x).unwrap();
            let down = f(&probe);
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Denominator floor of the per-component relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Random gradient-check instance: `V=6, D=5, M=3` with two prototypes
/// per class and all kinks at least `margin` away.
pub struct GradientCase {
    pub params: ModelParams,
    pub batch: Vec<Sample>,
    pub protos: Vec<(usize, Vec<f64>)>,
    pub hyper: LossHyper,
}

impl GradientCase {
    pub fn global_set(&self) -> GlobalPrototypeSet {
        GlobalPrototypeSet::from_prototypes(
            self.protos
                .iter()
                .map(|(c, g)| Prototype::new(*c, DenseVector::new(g.clone()).unwrap(), 1))
                .collect(),
            1,
        )
    }
}

pub fn gradient_case(seed: u64, lambda: f64, margin: f64) -> GradientCase {
    let shape = ModelShape {
        input_dim: 6,
        hidden: vec![8],
        feature_dim: 5,
        num_classes: 3,
    };
    let hyper = LossHyper {
        tau: 0.07,
        alpha: 0.25,
        lambda,
        contrast_enabled: true,
        correction_enabled: true,
    };
    let mut rng = RngStream::new(seed);
    loop {
        let mut params = ModelParams::init(&shape, &mut rng);
        // non-zero biases keep pre-activations off the origin
        let mut flat = params.flatten();
        for v in flat.iter_mut() {
            *v += 0.1 * rng.standard_normal();
        }
        params.assign_flat(&flat).unwrap();
        let batch: Vec<Sample> = (0..4)
            .map(|i| Sample {
                x: DenseVector::new((0..6).map(|_| rng.standard_normal()).collect()).unwrap(),
                y: i % 3,
            })
            .collect();
        let protos: Vec<(usize, Vec<f64>)> = (0..3)
            .flat_map(|c| std::iter::repeat_n(c, 2))
            .map(|c| (c, (0..5).map(|_| rng.uniform_range(-0.3, 1.0)).collect()))
            .collect();
        let case = GradientCase {
            params,
            batch,
            protos,
            hyper,
        };
        if oracle_local_loss(&case.params, &case.batch, &case.protos, &case.hyper).kink_margin > margin {
            return case;
        }
    }
}

/// Nearest neighbour of each point by cosine similarity, ties to the
/// lowest index, by exhaustive search.
pub fn brute_first_neighbors(points: &[Vec<f64>]) -> Vec<usize> {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    };
    (0..points.len())
        .map(|i| {
            let mut best = usize::MAX;
            let mut best_sim = f64::NEG_INFINITY;
            for j in 0..points.len() {
                if j != i {
                    let s = cos(&points[i], &points[j]);
                    if s > best_sim {
                        best_sim = s;
                        best = j;
                    }
                }
            }
            best
        })
        .collect()
}

/// Connected components of the first-neighbour rule, labelled by the
/// smallest member index, via depth-first search over the dense adjacency.
pub fn brute_components(points: &[Vec<f64>]) -> Vec<usize> {
    let n = points.len();
    if n == 1 {
        return vec![0];
    }
    let k = brute_first_neighbors(points);
    let linked = |i: usize, j: usize| i != j && (k[i] == j || k[j] == i || k[i] == k[j]);
    let mut label = vec![usize::MAX; n];
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        label[start] = start;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if label[j] == usize::MAX && linked(i, j) {
                    label[j] = start;
                    stack.push(j);
                }
            }
        }
    }
    label
}

/// Whether two labelings induce the same equivalence relation.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len() && (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

/// Prototype InfoNCE written out directly: `−log(Σ_own e^{cos/τ} / Σ_all e^{cos/τ})`.
pub fn direct_info_nce(z: &[f64], y: usize, protos: &[(usize, Vec<f64>)], tau: f64) -> f64 {
    let zn = z.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, g) in protos {
        let gn = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        let cos = z.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (zn * gn);
        let e = (cos.max(0.0) / tau).exp();
        den += e;
        if *c == y {
            num += e;
        }
    }
    -(num / den).ln()
}

/// Plain minibatch SGD on one client's data, driven by the same shuffle
/// stream, without any federation machinery.
pub fn standalone_sgd(cfg: &ExperimentConfig) -> ModelParams {
    let (_, clients, server) = setup(cfg).unwrap();
    let client = &clients[0];
    let mut rng = client.rng.clone();
    let mut params = server.global_model.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, &params);
    let mut order: Vec<usize> = (0..client.train.len()).collect();
    let empty = GlobalPrototypeSet::empty();
    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| client.train[i].clone()).collect();
            let (_, g) = backward(&params, &batch, &empty, &cfg.loss).unwrap();
            params = sgd_step(&params, &mut opt, &g).unwrap();
        }
    }
    params
}

