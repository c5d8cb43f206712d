//! The α-sparsity prototype loss, cross-entropy, and their gradients with
//! respect to the feature vector.
//!
//! Similarities are `s_α(z, g) = cos(z, g)^α` with the cosine clamped to
//! `[0, 1]`. The contrastive term is a prototype InfoNCE over `s_α / τ`; the
//! correction term is `|Σ_{g ∈ G^y} s_α(z, g) − C_y|`. Prototypes are constants
//! under differentiation.

use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::model::{forward_features_slice, forward_logits_slice, ModelParams};
use crate::numerics::{check_dims, cosine_slices, dot, lse, norm, normalize_slice, softmax, DenseVector, EPS_ZERO};
use crate::prototypes::GlobalPrototypeSet;

/// Hyper-parameters of the local objective `λ·L_α + L_CE`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossHyper {
    /// Temperature τ.
    pub tau: f64,
    /// Sparsity exponent α; 1 disables sparsification.
    pub alpha: f64,
    /// Weight λ of the prototype loss.
    pub lambda: f64,
    #[serde(rename = "contrast")]
    pub contrast_enabled: bool,
    #[serde(rename = "correction")]
    pub correction_enabled: bool,
}

impl Default for LossHyper {
    fn default() -> Self {
        LossHyper {
            tau: 0.07,
            alpha: 0.25,
            lambda: 100.0,
            contrast_enabled: true,
            correction_enabled: true,
        }
    }
}

impl LossHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("loss.tau", format!("must be > 0, got {}", self.tau)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(
                "loss.alpha",
                format!("must lie in (0, 1], got {}", self.alpha),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(
                "loss.lambda",
                format!("must be >= 0, got {}", self.lambda),
            ));
        }
        Ok(())
    }

    fn prototype_term_active(&self) -> bool {
        self.lambda != 0.0 && (self.contrast_enabled || self.correction_enabled)
    }
}

/// `cos(z, g)^α`, with non-positive cosines mapped to 0.
pub fn s_alpha(z: &DenseVector, g: &DenseVector, alpha: f64) -> Result<f64> {
    check_dims(z.dim(), g.dim())?;
    Ok(sparsify(cosine_slices(z.as_slice(), g.as_slice()), alpha))
}

fn sparsify(cos: f64, alpha: f64) -> f64 {
    let c = cos.min(1.0);
    if c <= 0.0 {
        0.0
    } else {
        c.powf(alpha)
    }
}

/// Global prototypes flattened to unit vectors, in class order.
pub(crate) struct PreparedPrototypes {
    dim: usize,
    classes: Vec<usize>,
    units: Vec<Vec<f64>>,
}

impl PreparedPrototypes {
    pub(crate) fn new(set: &GlobalPrototypeSet) -> Self {
        let mut classes = Vec::new();
        let mut units = Vec::new();
        let mut dim = 0;
        for (&class, protos) in set.classes() {
            for p in protos {
                dim = p.vector.dim();
                classes.push(class);
                units.push(normalize_slice(p.vector.as_slice()));
            }
        }
        PreparedPrototypes { dim, classes, units }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub(crate) fn has_class(&self, y: usize) -> bool {
        self.classes.contains(&y)
    }

    fn check(&self, z: &[f64], y: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyInput("global prototype set"));
        }
        check_dims(self.dim, z.len())?;
        if !self.has_class(y) {
            return Err(Error::MissingClass(y));
        }
        Ok(())
    }
}

/// Per-sample values of the two prototype terms plus, optionally, `∂(λL_α)/∂z`.
pub(crate) struct AlphaTerms {
    pub contrast: f64,
    pub correction: f64,
    pub grad: Option<Vec<f64>>,
}

pub(crate) fn alpha_terms(
    z: &[f64],
    y: usize,
    protos: &PreparedPrototypes,
    hyper: &LossHyper,
    with_grad: bool,
) -> Result<AlphaTerms> {
    protos.check(z, y)?;
    let zn = norm(z);
    let n = protos.units.len();

    let mut cos = vec![0.0; n];
    let mut sim = vec![0.0; n];
    if zn >= EPS_ZERO {
        for (j, g) in protos.units.iter().enumerate() {
            cos[j] = (dot(z, g) / zn).min(1.0);
            sim[j] = sparsify(cos[j], hyper.alpha);
        }
    }

    // dL/ds_j for the enabled terms (λ applied at the end)
    let mut d_sim = vec![0.0; n];

    let mut contrast = 0.0;
    if hyper.contrast_enabled {
        let scaled: Vec<f64> = sim.iter().map(|s| s / hyper.tau).collect();
        let own: Vec<f64> = scaled
            .iter()
            .zip(&protos.classes)
            .filter(|(_, &c)| c == y)
            .map(|(s, _)| *s)
            .collect();
        let all_lse = lse(&scaled);
        let own_lse = lse(&own);
        contrast = (all_lse - own_lse).max(0.0);
        if with_grad {
            for j in 0..n {
                let p_all = (scaled[j] - all_lse).exp();
                let p_own = if protos.classes[j] == y {
                    (scaled[j] - own_lse).exp()
                } else {
                    0.0
                };
                d_sim[j] += (p_all - p_own) / hyper.tau;
            }
        }
    }

    let mut correction = 0.0;
    if hyper.correction_enabled {
        let mut total = 0.0;
        let mut count = 0usize;
        for (s, &c) in sim.iter().zip(&protos.classes) {
            if c == y {
                total += s;
                count += 1;
            }
        }
        let residual = total - count as f64;
        correction = residual.abs();
        if with_grad && residual != 0.0 {
            let sign = residual.signum();
            for (d, &c) in d_sim.iter_mut().zip(&protos.classes) {
                if c == y {
                    *d += sign;
                }
            }
        }
    }

    let grad = with_grad.then(|| {
        let mut g = vec![0.0; z.len()];
        if zn < EPS_ZERO {
            return g;
        }
        let inv = 1.0 / zn;
        for j in 0..n {
            if d_sim[j] == 0.0 || cos[j] <= 0.0 {
                continue;
            }
            // ds/dz = α c^{α-1} (ĝ/|z| − c z/|z|²)
            let ds_dc = hyper.alpha * cos[j].powf(hyper.alpha - 1.0);
            let coef = hyper.lambda * d_sim[j] * ds_dc;
            let unit = &protos.units[j];
            for i in 0..z.len() {
                g[i] += coef * (unit[i] * inv - cos[j] * z[i] * inv * inv);
            }
        }
        g
    });

    Ok(AlphaTerms {
        contrast,
        correction,
        grad,
    })
}

/// `−log( Σ_{g∈G^y} exp(s_α/τ) / Σ_{g∈G} exp(s_α/τ) )`.
pub fn contrastive_loss(
    z: &DenseVector,
    y: usize,
    set: &GlobalPrototypeSet,
    hyper: &LossHyper,
) -> Result<f64> {
    let h = LossHyper {
        contrast_enabled: true,
        correction_enabled: false,
        ..*hyper
    };
    Ok(alpha_terms(z.as_slice(), y, &PreparedPrototypes::new(set), &h, false)?.contrast)
}

/// `|Σ_{g∈G^y} s_α(z, g) − C_y|`.
pub fn correction_loss(
    z: &DenseVector,
    y: usize,
    set: &GlobalPrototypeSet,
    hyper: &LossHyper,
) -> Result<f64> {
    let h = LossHyper {
        contrast_enabled: false,
        correction_enabled: true,
        ..*hyper
    };
    Ok(alpha_terms(z.as_slice(), y, &PreparedPrototypes::new(set), &h, false)?.correction)
}

/// Sum of the enabled prototype terms (λ not applied).
pub fn alpha_sparsity_loss(
    z: &DenseVector,
    y: usize,
    set: &GlobalPrototypeSet,
    hyper: &LossHyper,
) -> Result<f64> {
    if !hyper.contrast_enabled && !hyper.correction_enabled {
        return Ok(0.0);
    }
    let t = alpha_terms(z.as_slice(), y, &PreparedPrototypes::new(set), hyper, false)?;
    Ok(t.contrast + t.correction)
}

/// `−log softmax(logits)[y]`.
pub fn cross_entropy(logits: &DenseVector, y: usize) -> Result<f64> {
    cross_entropy_slice(logits.as_slice(), y)
}

pub(crate) fn cross_entropy_slice(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            num_classes: logits.len(),
        });
    }
    Ok((lse(logits) - logits[y]).max(0.0))
}

/// `∂CE/∂logits = softmax(logits) − onehot(y)`.
pub(crate) fn cross_entropy_grad(logits: &[f64], y: usize) -> Vec<f64> {
    let mut p = softmax(logits);
    p[y] -= 1.0;
    p
}

/// `∂(λ·L_α)/∂z`, zero when both terms are disabled.
pub fn loss_grad_z(
    z: &DenseVector,
    y: usize,
    set: &GlobalPrototypeSet,
    hyper: &LossHyper,
) -> Result<DenseVector> {
    if !hyper.contrast_enabled && !hyper.correction_enabled {
        return Ok(DenseVector::zeros(z.dim()));
    }
    let t = alpha_terms(z.as_slice(), y, &PreparedPrototypes::new(set), hyper, true)?;
    Ok(DenseVector::from_vec_unchecked(t.grad.unwrap_or_default()))
}

/// Whether sample class `y` takes part in the prototype term under `protos`.
///
/// An empty set (first round) or a set lacking class `y` contributes nothing.
pub(crate) fn prototype_term_applies(protos: &PreparedPrototypes, y: usize, hyper: &LossHyper) -> bool {
    hyper.prototype_term_active() && !protos.is_empty() && protos.has_class(y)
}

/// Batch mean of `λ·L_α + L_CE`.
pub fn local_loss(
    batch: &[Sample],
    params: &ModelParams,
    set: &GlobalPrototypeSet,
    hyper: &LossHyper,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let protos = PreparedPrototypes::new(set);
    if !protos.is_empty() {
        check_dims(params.feature_dim(), protos.dim)?;
    }
    let mut total = 0.0;
    for sample in batch {
        let z = forward_features_slice(params, sample.x.as_slice())?;
        let logits = forward_logits_slice(params, &z)?;
        let mut loss = cross_entropy_slice(&logits, sample.y)?;
        if prototype_term_applies(&protos, sample.y, hyper) {
            let t = alpha_terms(&z, sample.y, &protos, hyper, false)?;
            loss += hyper.lambda * (t.contrast + t.correction);
        }
        total += loss;
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::prototypes::{GlobalPrototypeSet, Prototype};

    fn v(xs: &[f64]) -> DenseVector {
        DenseVector::new(xs.to_vec()).unwrap()
    }

    fn set(entries: &[(usize, &[f64])]) -> GlobalPrototypeSet {
        GlobalPrototypeSet::from_prototypes(
            entries
                .iter()
                .map(|(c, x)| Prototype::new(*c, v(x), 1))
                .collect(),
            0,
        )
    }

    fn hyper(alpha: f64, contrast: bool, correction: bool) -> LossHyper {
        LossHyper {
            tau: 0.07,
            alpha,
            lambda: 1.0,
            contrast_enabled: contrast,
            correction_enabled: correction,
        }
    }

    #[test]
    fn s_alpha_examples() {
        assert_eq!(s_alpha(&v(&[1.0, 0.0]), &v(&[2.0, 0.0]), 0.3).unwrap(), 1.0);
        assert_eq!(s_alpha(&v(&[1.0, 0.0]), &v(&[0.0, 2.0]), 0.3).unwrap(), 0.0);
        // cos = 0.25 via z=(1,0), g=(0.25, sqrt(1-1/16)); 0.25^0.25 = 1/sqrt(2)
        let g = v(&[0.25, (1.0f64 - 0.0625).sqrt()]);
        let s = s_alpha(&v(&[1.0, 0.0]), &g, 0.25).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn contrastive_examples() {
        let h = hyper(0.25, true, true);
        let only_y = set(&[(0, &[1.0, 0.0]), (0, &[0.5, 0.5])]);
        assert_eq!(contrastive_loss(&v(&[1.0, 0.2]), 0, &only_y, &h).unwrap(), 0.0);

        let sym = set(&[(0, &[1.0, 1.0]), (1, &[1.0, 1.0])]);
        let l = contrastive_loss(&v(&[0.3, 0.7]), 0, &sym, &h).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);

        // closed form: log(1 + exp((s1 - 1)/τ)), s1 = (1/√2)^0.25
        let g = set(&[(0, &[1.0, 0.0]), (1, &[1.0, 1.0])]);
        let s1 = std::f64::consts::FRAC_1_SQRT_2.powf(0.25);
        let expected = (1.0 + ((s1 - 1.0) / 0.07).exp()).ln();
        let l = contrastive_loss(&v(&[1.0, 0.0]), 0, &g, &h).unwrap();
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
    }

    #[test]
    fn contrastive_errors() {
        let h = hyper(0.25, true, true);
        let g = set(&[(1, &[1.0, 0.0])]);
        assert!(matches!(
            contrastive_loss(&v(&[1.0, 0.0]), 0, &g, &h),
            Err(Error::MissingClass(0))
        ));
        assert!(matches!(
            contrastive_loss(&v(&[1.0, 0.0]), 0, &GlobalPrototypeSet::empty(), &h),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn correction_examples() {
        let h = hyper(0.25, true, true);
        let aligned = set(&[(0, &[1.0, 0.0]), (0, &[3.0, 0.0]), (1, &[0.0, 1.0])]);
        assert_eq!(correction_loss(&v(&[2.0, 0.0]), 0, &aligned, &h).unwrap(), 0.0);

        // cos = 0.8: z=(1,0), g=(0.8,0.6); |0.8^0.25 − 1|
        let g = set(&[(0, &[0.8, 0.6])]);
        let l = correction_loss(&v(&[1.0, 0.0]), 0, &g, &h).unwrap();
        assert!((l - (1.0 - 0.8f64.powf(0.25))).abs() < 1e-12);
        assert!((l - 0.05426).abs() < 1e-5);

        // two prototypes each with s = 0.9 under α = 1 → |1.8 − 2|
        let h1 = hyper(1.0, true, true);
        let two = set(&[(0, &[0.9, 0.19f64.sqrt()]), (0, &[0.9, -(0.19f64.sqrt())])]);
        let l = correction_loss(&v(&[1.0, 0.0]), 0, &two, &h1).unwrap();
        assert!((l - 0.2).abs() < 1e-12);
    }

    #[test]
    fn alpha_loss_composition() {
        let z = v(&[1.0, 0.0]);
        let g = set(&[(0, &[0.8, 0.6]), (1, &[1.0, 1.0])]);
        assert_eq!(alpha_sparsity_loss(&z, 0, &g, &hyper(0.25, false, false)).unwrap(), 0.0);
        let c = contrastive_loss(&z, 0, &g, &hyper(0.25, true, true)).unwrap();
        let r = correction_loss(&z, 0, &g, &hyper(0.25, true, true)).unwrap();
        assert_eq!(alpha_sparsity_loss(&z, 0, &g, &hyper(0.25, true, false)).unwrap(), c);
        let both = alpha_sparsity_loss(&z, 0, &g, &hyper(0.25, true, true)).unwrap();
        assert!((both - (c + r)).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy(&v(&[0.0; 10]), 3).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&v(&[1000.0, 0.0, 0.0]), 0).unwrap() < 1e-12);
        // direct softmax: p0 = e/(e + e²), p1 = e²/(e + e²)
        let (e1, e2) = (1f64.exp(), 2f64.exp());
        let l0 = cross_entropy(&v(&[1.0, 2.0]), 0).unwrap();
        assert!((l0 - -(e1 / (e1 + e2)).ln()).abs() < 1e-12);
        assert!((l0 - (1.0 + std::f64::consts::E).ln()).abs() < 1e-12);
        let l1 = cross_entropy(&v(&[1.0, 2.0]), 1).unwrap();
        assert!((l1 - -(e2 / (e1 + e2)).ln()).abs() < 1e-12);
        assert!((l1 - 0.3133).abs() < 1e-4);
        assert!(matches!(
            cross_entropy(&v(&[1.0, 2.0]), 2),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn grad_is_zero_when_terms_disabled_or_at_correction_kink() {
        let z = v(&[0.4, 0.9]);
        let g = set(&[(0, &[0.8, 0.6]), (1, &[1.0, 0.0])]);
        let grad = loss_grad_z(&z, 0, &g, &hyper(0.25, false, false)).unwrap();
        assert!(grad.as_slice().iter().all(|&x| x == 0.0));

        // z parallel to the only class-0 prototype: Σ s_α = C_y exactly
        let kink = set(&[(0, &[2.0, 1.0]), (1, &[0.0, 1.0])]);
        let grad = loss_grad_z(&v(&[4.0, 2.0]), 0, &kink, &hyper(0.25, false, true)).unwrap();
        assert!(grad.as_slice().iter().all(|&x| x == 0.0));
    }

    fn random_instance(rng: &mut RngStream, dim: usize, classes: usize, per_class: usize) -> (Vec<f64>, GlobalPrototypeSet) {
        let z: Vec<f64> = (0..dim).map(|_| rng.uniform_range(0.1, 1.0)).collect();
        let mut protos = Vec::new();
        for c in 0..classes {
            for _ in 0..per_class {
                let x: Vec<f64> = (0..dim).map(|_| rng.uniform_range(0.05, 1.0)).collect();
                protos.push(Prototype::new(c, v(&x), 1));
            }
        }
        (z, GlobalPrototypeSet::from_prototypes(protos, 0))
    }

    #[test]
    fn loss_grad_z_matches_central_differences() {
        let mut rng = RngStream::new(11);
        for trial in 0..30 {
            let (z, g) = random_instance(&mut rng, 5, 3, 2);
            let y = trial % 3;
            let h = LossHyper {
                lambda: 3.0,
                ..LossHyper::default()
            };
            let analytic = loss_grad_z(&v(&z), y, &g, &h).unwrap();
            let step = 1e-5;
            for i in 0..z.len() {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += step;
                zm[i] -= step;
                let lp = h.lambda * alpha_sparsity_loss(&v(&zp), y, &g, &h).unwrap();
                let lm = h.lambda * alpha_sparsity_loss(&v(&zm), y, &g, &h).unwrap();
                let fd = (lp - lm) / (2.0 * step);
                let a = analytic[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "trial {trial} coord {i}: analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn alpha_one_without_correction_is_prototype_infonce() {
        let mut rng = RngStream::new(5);
        for _ in 0..50 {
            let (z, g) = random_instance(&mut rng, 4, 3, 2);
            let h = LossHyper {
                alpha: 1.0,
                correction_enabled: false,
                ..LossHyper::default()
            };
            let mut num = 0.0;
            let mut den = 0.0;
            for (&c, protos) in g.classes() {
                for p in protos {
                    let e = (cosine_slices(&z, p.vector.as_slice()) / h.tau).exp();
                    den += e;
                    if c == 1 {
                        num += e;
                    }
                }
            }
            let direct = -(num / den).ln();
            let ours = alpha_sparsity_loss(&v(&z), 1, &g, &h).unwrap();
            assert!((ours - direct).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sparsity_dominates_cosine(c in 1e-6f64..(1.0 - 1e-9), alpha in 0.05f64..0.95) {
                prop_assert!(sparsify(c, alpha) > c);
            }

            #[test]
            fn s_alpha_is_monotone(a in 1e-6f64..1.0, b in 1e-6f64..1.0, alpha in 0.05f64..1.0) {
                prop_assume!(a < b);
                prop_assert!(sparsify(a, alpha) <= sparsify(b, alpha));
            }

            #[test]
            fn losses_are_finite_and_non_negative(seed in 0u64..1000, y in 0usize..3) {
                let mut rng = RngStream::new(seed);
                let (z, g) = random_instance(&mut rng, 4, 3, 2);
                let h = LossHyper::default();
                let c = contrastive_loss(&v(&z), y, &g, &h).unwrap();
                let r = correction_loss(&v(&z), y, &g, &h).unwrap();
                prop_assert!(c.is_finite() && c >= 0.0);
                prop_assert!(r.is_finite() && r >= 0.0);
                let grad = loss_grad_z(&v(&z), y, &g, &h).unwrap();
                prop_assert!(grad.as_slice().iter().all(|x| x.is_finite()));
            }
        }
    }
}
