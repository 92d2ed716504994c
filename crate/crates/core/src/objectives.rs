//! Adversarial objective: hinge loss over real, fake and mismatched pairs,
//! the matching-aware gradient penalty, and the generator loss with its
//! image/text similarity reward.

use galip_autograd::nn::{cosine_rows, flatten_rows};
use galip_autograd::{grad, is_grad_enabled, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{to_backbone_space, Backbone, FeaturePyramid};
use crate::error::{shape_err, Error, Result};

/// How feature gradients of several pyramid levels are combined into one norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// One norm over all levels flattened together.
    #[default]
    Joint,
    /// Sum of one norm per level.
    PerLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Penalty coefficient.
    pub k: f64,
    /// Penalty exponent.
    pub p: f64,
    /// Weight of the similarity reward in the generator loss.
    pub lambda: f64,
    #[serde(default)]
    pub norm_mode: NormMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { k: 2.0, p: 6.0, lambda: 4.0, norm_mode: NormMode::Joint }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 0.0 && self.p >= 1.0 && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "objective needs k >= 0, p >= 1, lambda >= 0 (got {}, {}, {})",
                self.k, self.p, self.lambda
            )));
        }
        Ok(())
    }
}

fn check_logits(op: &'static str, v: &Var) -> Result<usize> {
    match v.shape() {
        [n] if *n > 0 => Ok(*n),
        [0] => Err(Error::InvalidArgument(format!("{op}: empty batch"))),
        other => Err(shape_err(op, format!("logits must be [B], got {other:?}"))),
    }
}

/// `E[relu(1 - real)] + ½ E[relu(1 + fake)] + ½ E[relu(1 + mismatched)]`.
pub fn hinge_d_loss(real: &Var, fake: &Var, mismatched: &Var) -> Result<Var> {
    let n = check_logits("hinge_d_loss", real)?;
    for v in [fake, mismatched] {
        if check_logits("hinge_d_loss", v)? != n {
            return Err(shape_err(
                "hinge_d_loss",
                format!("batch lengths {n}, {}, {} differ", fake.shape()[0], mismatched.shape()[0]),
            ));
        }
    }
    let real_term = real.neg().add_scalar(1.0).relu().mean();
    let fake_term = fake.add_scalar(1.0).relu().mean().scale(0.5);
    let mis_term = mismatched.add_scalar(1.0).relu().mean().scale(0.5);
    Ok(real_term.add(&fake_term).add(&mis_term))
}

#[derive(Debug, Clone)]
pub struct MagpOutput {
    /// `k · E[(‖g_c‖ + ‖g_e‖)^p]`, differentiable with respect to the logit function's parameters.
    pub penalty: Var,
    /// Logits of the penalized pairs, with their graph.
    pub logits: Var,
    /// `E[‖g_c‖ + ‖g_e‖]`, for monitoring.
    pub grad_norm_mean: f64,
}

/// Matching-aware gradient penalty at (feature pyramid, sentence) pairs.
///
/// Constant pyramid levels and the text are re-rooted as fresh leaves, so
/// the penalty's gradient reaches only the parameters used inside
/// `logit_fn`; levels that already carry a graph (a learned stem) are used
/// as they are. Fails when gradient recording is disabled, since no
/// second-order path could be built.
pub fn magp(
    pyramid: &FeaturePyramid,
    text: &Var,
    cfg: &ObjectiveConfig,
    logit_fn: impl Fn(&FeaturePyramid, &Var) -> Result<Var>,
) -> Result<MagpOutput> {
    if !is_grad_enabled() {
        return Err(Error::NotDifferentiable("gradient recording is disabled".into()));
    }
    let levels: Vec<(usize, Var)> = pyramid
        .levels
        .iter()
        .map(|(l, v)| (*l, if v.requires_grad() { v.clone() } else { Var::leaf(v.value().clone()) }))
        .collect();
    let text_leaf = Var::leaf(text.value().clone());
    let leaf_pyramid = FeaturePyramid { levels: levels.clone(), source_resolution: pyramid.source_resolution };
    let logits = logit_fn(&leaf_pyramid, &text_leaf)?;
    let b = check_logits("magp", &logits)?;
    if text.shape()[0] != b {
        return Err(shape_err("magp", format!("{b} logits for {} sentences", text.shape()[0])));
    }

    let mut inputs: Vec<&Var> = levels.iter().map(|(_, v)| v).collect();
    inputs.push(&text_leaf);
    let grads = grad(&logits.sum(), &inputs, true)?;
    let (level_grads, text_grad) = grads.split_at(levels.len());

    let zeros = || Var::constant(galip_autograd::Tensor::zeros(vec![b]));
    let sq_norm = |g: &Option<Var>| match g {
        Some(g) => flatten_rows(g).square().sum_axis(1, false),
        None => zeros(),
    };
    let feature_norm = match cfg.norm_mode {
        NormMode::Joint => level_grads
            .iter()
            .map(sq_norm)
            .reduce(|a, c| a.add(&c))
            .unwrap_or_else(zeros)
            .sqrt_safe(),
        NormMode::PerLevel => level_grads
            .iter()
            .map(|g| sq_norm(g).sqrt_safe())
            .reduce(|a, c| a.add(&c))
            .unwrap_or_else(zeros),
    };
    let text_norm = sq_norm(&text_grad[0]).sqrt_safe();
    let total = feature_norm.add(&text_norm);
    let grad_norm_mean = total.value().mean();
    let penalty = total.powf(cfg.p).mean().scale(cfg.k);
    Ok(MagpOutput { penalty, logits, grad_norm_mean })
}

/// Mean cosine similarity between rows of two `[B, D]` embeddings.
pub fn mean_cosine(a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() || a.shape().len() != 2 || a.shape()[0] == 0 {
        return Err(shape_err("similarity", format!("embeddings {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(cosine_rows(a, b).mean())
}

/// Mean cosine similarity between the image embeddings of `images` (in
/// `[-1, 1]`) and the sentence vectors `text`. Differentiable in the images.
pub fn clip_similarity(images: &Var, text: &Var, backbone: &Backbone) -> Result<Var> {
    let emb = backbone.encode_image(&to_backbone_space(images))?;
    mean_cosine(&emb, text)
}

/// `-E[fake] - λ · similarity`.
pub fn generator_loss(fake_logits: &Var, similarity: &Var, cfg: &ObjectiveConfig) -> Result<Var> {
    check_logits("generator_loss", fake_logits)?;
    Ok(fake_logits.mean().neg().sub(&similarity.scale(cfg.lambda)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use galip_autograd::{no_grad, Tensor};

    fn v(x: &[f64]) -> Var {
        Var::constant(Tensor::new(vec![x.len()], x.to_vec()))
    }

    #[test]
    fn hinge_cases() {
        let l = hinge_d_loss(&v(&[1.0, 3.0]), &v(&[-1.0, -5.0]), &v(&[-2.0, -1.0])).unwrap();
        assert_eq!(l.item(), 0.0);
        let l = hinge_d_loss(&v(&[0.0]), &v(&[0.0]), &v(&[0.0])).unwrap();
        assert!((l.item() - 2.0).abs() < 1e-12);
        let l = hinge_d_loss(&v(&[0.5]), &v(&[-0.3]), &v(&[-2.0])).unwrap();
        assert!((l.item() - 0.85).abs() < 1e-12);
    }

    #[test]
    fn hinge_rejects_bad_batches() {
        assert!(hinge_d_loss(&v(&[]), &v(&[]), &v(&[])).is_err());
        assert!(hinge_d_loss(&v(&[0.0]), &v(&[0.0, 1.0]), &v(&[0.0])).is_err());
    }

    #[test]
    fn generator_loss_substitution() {
        let cfg = ObjectiveConfig::default();
        assert_eq!(cfg.lambda, 4.0);
        let l = generator_loss(&v(&[0.1, 0.3]), &Var::scalar(0.3), &cfg).unwrap();
        assert!((l.item() + 1.4).abs() < 1e-12);
        let l = generator_loss(&v(&[0.0]), &Var::scalar(0.0), &cfg).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    fn pyramid(batch: usize) -> FeaturePyramid {
        let lv = |l| (l, Var::constant(Tensor::full(vec![batch, 2, 1, 1], 0.5)));
        FeaturePyramid { levels: vec![lv(1), lv(2)], source_resolution: 1 }
    }

    #[test]
    fn constant_logit_gives_zero_penalty() {
        let out = magp(&pyramid(2), &Var::constant(Tensor::ones(vec![2, 3])), &ObjectiveConfig::default(), |_, _| {
            Ok(Var::constant(Tensor::full(vec![2], 0.7)))
        })
        .unwrap();
        assert_eq!(out.penalty.item(), 0.0);
    }

    #[test]
    fn disabled_recording_is_an_error() {
        let r = no_grad(|| {
            magp(&pyramid(1), &Var::constant(Tensor::ones(vec![1, 3])), &ObjectiveConfig::default(), |p, t| {
                Ok(p.levels[0].1.sum_axis(1, false).reshape(&[1]).add(&t.sum_axis(1, false)))
            })
        });
        assert!(matches!(r, Err(Error::NotDifferentiable(_))));
    }

    #[test]
    fn norm_modes_differ_on_two_levels() {
        // logit = sum of both levels: each level gradient is all ones (norm √2).
        let f = |p: &FeaturePyramid, t: &Var| -> Result<Var> {
            let s = p.levels.iter().map(|(_, v)| flatten_rows(v).sum_axis(1, false)).reduce(|a, b| a.add(&b)).unwrap();
            Ok(s.add(&t.mul(&Var::constant(Tensor::zeros(vec![1, 3]))).sum_axis(1, false)))
        };
        let text = Var::constant(Tensor::ones(vec![1, 3]));
        let joint = magp(&pyramid(1), &text, &ObjectiveConfig { p: 1.0, k: 1.0, ..Default::default() }, f).unwrap();
        let per = magp(
            &pyramid(1),
            &text,
            &ObjectiveConfig { p: 1.0, k: 1.0, norm_mode: NormMode::PerLevel, ..Default::default() },
            f,
        )
        .unwrap();
        assert!((joint.penalty.item() - 2.0).abs() < 1e-12);
        assert!((per.penalty.item() - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    }
}
