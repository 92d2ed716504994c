//! The learnable discriminator: fuses the collected backbone feature
//! pyramid through extraction blocks, then scores (feature, sentence) pairs
//! with a single conditional logit.

use std::collections::BTreeMap;
use std::sync::Arc;

use galip_autograd::{Param, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{to_backbone_space, Backbone, BackboneConfig, FeaturePyramid};
use crate::error::{shape_err, Error, Result};
use crate::generator::group_by_component;
use crate::layers::{Builder, Conv, Linear, LEAKY_SLOPE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Backbone layers (1-based, increasing) whose outputs are consumed.
    pub collected_layers: Vec<usize>,
    pub extraction_channels: usize,
    pub assessor_channels: usize,
    /// Use backbone features; when off, a learned patch embedding replaces them.
    pub enable_clip_features: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { collected_layers: vec![2, 5, 9], extraction_channels: 512, assessor_channels: 512, enable_clip_features: true }
    }
}

impl DiscriminatorConfig {
    /// Companion of [`BackboneConfig::tiny`].
    pub fn tiny() -> Self {
        Self { collected_layers: vec![1, 2, 3], extraction_channels: 32, assessor_channels: 32, enable_clip_features: true }
    }

    /// Number of pyramid levels the extractor consumes.
    pub fn levels(&self) -> usize {
        if self.enable_clip_features {
            self.collected_layers.len()
        } else {
            1
        }
    }

    pub fn validate(&self, bb: &BackboneConfig) -> Result<()> {
        if self.enable_clip_features {
            let l = &self.collected_layers;
            if l.is_empty() || l[0] == 0 || !l.windows(2).all(|w| w[0] < w[1]) || *l.last().unwrap() > bb.depth {
                return Err(Error::Config(format!("collected layers {l:?} must increase within 1..={}", bb.depth)));
            }
        }
        if self.extraction_channels == 0 || self.assessor_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Conv, rectify, conv, rectify, added to the block input.
struct ExtractionBlock {
    conv1: Conv,
    conv2: Conv,
}

pub struct Discriminator {
    config: DiscriminatorConfig,
    backbone: BackboneConfig,
    store: ParamStore,
    stem: Option<Linear>,
    projections: Vec<Conv>,
    blocks: Vec<ExtractionBlock>,
    tail: (Conv, Conv),
    joint: Conv,
    out: Conv,
}

impl std::fmt::Debug for Discriminator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Discriminator")
            .field("config", &self.config)
            .field("parameters", &self.store.numel())
            .finish()
    }
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate(backbone)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, &mut rng);
        let (c, w, g, e) = (config.extraction_channels, backbone.width, backbone.grid_side(), backbone.text_embed_dim);
        let n = config.levels();
        let p = backbone.patch_size;
        let stem = (!config.enable_clip_features).then(|| b.linear("stem", 3 * p * p, w));
        let projections = (0..n).map(|i| b.conv(&format!("proj.{i}"), w, c, 1, true)).collect();
        let blocks = (0..n - 1)
            .map(|i| {
                b.scope(&format!("blocks.{i}"), |b| ExtractionBlock {
                    conv1: b.conv("conv1", c, c, 3, true),
                    conv2: b.conv("conv2", c, c, 3, true),
                })
            })
            .collect();
        let tail = b.scope("tail", |b| (b.conv("conv1", c, c, 3, true), b.conv("conv2", c, c, 3, true)));
        let a = config.assessor_channels;
        let (joint, out) = b.scope("assessor", |b| (b.conv("conv", c + e, a, 3, true), b.conv_valid("out", a, 1, g, true)));
        Ok(Self { config, backbone: backbone.clone(), store, stem, projections, blocks, tail, joint, out })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    /// Parameters grouped by top-level component (`proj`, `blocks`, `tail`, `assessor`, ...).
    pub fn param_groups(&self) -> BTreeMap<String, Vec<Arc<Param>>> {
        group_by_component(&self.store)
    }

    pub fn extraction_block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Input features for images in `[-1, 1]`: the collected backbone
    /// layers, or the learned patch embedding when backbone features are off.
    pub fn features(&self, images: &Var, backbone: &Backbone) -> Result<FeaturePyramid> {
        let x = to_backbone_space(images);
        match &self.stem {
            None => backbone.forward_collect(&x, &self.config.collected_layers),
            Some(stem) => {
                let bb = &self.backbone;
                let (g, p, w) = (bb.grid_side(), bb.patch_size, bb.width);
                let b = match x.shape() {
                    [b, 3, h, wd] if *h == bb.image_size && *wd == bb.image_size => *b,
                    other => return Err(shape_err("features", format!("images {other:?}"))),
                };
                let patches = x
                    .reshape(&[b, 3, g, p, g, p])
                    .permute(&[0, 2, 4, 1, 3, 5])
                    .reshape(&[b, g * g, 3 * p * p]);
                let grid = stem.forward(&patches).reshape(&[b, g, g, w]).permute(&[0, 3, 1, 2]);
                Ok(FeaturePyramid { levels: vec![(0, grid)], source_resolution: bb.image_size })
            }
        }
    }

    /// Fuses the pyramid into a `[B, extraction_channels, grid, grid]` feature.
    pub fn extract_features(&self, pyramid: &FeaturePyramid) -> Result<Var> {
        let n = self.config.levels();
        if pyramid.levels.len() != n {
            return Err(shape_err("extract_features", format!("{} levels, expected {n}", pyramid.levels.len())));
        }
        if self.config.enable_clip_features && pyramid.layer_ids() != self.config.collected_layers {
            return Err(shape_err(
                "extract_features",
                format!("layers {:?}, expected {:?}", pyramid.layer_ids(), self.config.collected_layers),
            ));
        }
        let (g, w) = (self.backbone.grid_side(), self.backbone.width);
        for (_, level) in &pyramid.levels {
            match level.shape() {
                [_, c, h, wd] if *c == w && *h == g && *wd == g => {}
                other => return Err(shape_err("extract_features", format!("level {other:?}, expected [B, {w}, {g}, {g}]"))),
            }
        }
        let levels = pyramid.vars();
        let mut x = self.projections[0].forward(&levels[0]);
        for (i, blk) in self.blocks.iter().enumerate() {
            let h = blk.conv2.forward(&blk.conv1.forward(&x).relu()).relu();
            x = x.add(&h).add(&self.projections[i + 1].forward(&levels[i + 1]));
        }
        let h = self.tail.1.forward(&self.tail.0.forward(&x).relu());
        Ok(x.add(&h))
    }

    /// One logit per sample from a fused feature and `[B, text_embed_dim]` sentence vectors.
    pub fn assess_quality(&self, feature: &Var, text: &Var) -> Result<Var> {
        let (b, g) = (feature.shape()[0], self.backbone.grid_side());
        let e = self.backbone.text_embed_dim;
        if text.shape() != [b, e] {
            return Err(shape_err("assess_quality", format!("text {:?}, expected [{b}, {e}]", text.shape())));
        }
        let tiled = text.reshape(&[b, e, 1, 1]).broadcast_to(&[b, e, g, g]);
        let h = self.joint.forward(&Var::concat(&[feature.clone(), tiled], 1)).leaky_relu(LEAKY_SLOPE);
        Ok(self.out.forward(&h).reshape(&[b]))
    }

    pub fn logits(&self, pyramid: &FeaturePyramid, text: &Var) -> Result<Var> {
        self.assess_quality(&self.extract_features(pyramid)?, text)
    }

    /// Images in `[-1, 1]` and sentence vectors to `[B]` logits.
    pub fn discriminate(&self, images: &Var, text: &Var, backbone: &Backbone) -> Result<Var> {
        self.logits(&self.features(images, backbone)?, text)
    }

    /// Zeroes every extraction-block and tail convolution weight.
    pub fn zero_extraction_convs(&self) {
        let convs = self.blocks.iter().flat_map(|b| [&b.conv1, &b.conv2]).chain([&self.tail.0, &self.tail.1]);
        for c in convs {
            c.weight.set(Tensor::zeros(c.weight.shape()));
            if let Some(bias) = &c.bias {
                bias.set(Tensor::zeros(bias.shape()));
            }
        }
    }

    /// The learned level projections, for checking the shortcut structure.
    pub fn project_level(&self, i: usize, level: &Var) -> Var {
        self.projections[i].forward(level)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use galip_autograd::grad;

    fn tiny_backbone() -> Backbone {
        Backbone::load("tiny-random:2", BackboneConfig::tiny()).unwrap()
    }

    fn randomize(store: &ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in store.params() {
            p.set(Tensor::randn(p.shape(), 0.3, &mut rng));
        }
    }

    fn images(batch: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Var::constant(Tensor::uniform(vec![batch, 3, 32, 32], -1.0, 1.0, &mut rng))
    }

    fn text(batch: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Var::constant(Tensor::randn(vec![batch, 32], 1.0, &mut rng))
    }

    #[test]
    fn shapes_and_determinism() {
        let bb = tiny_backbone();
        let d = Discriminator::new(DiscriminatorConfig::tiny(), bb.config(), 0).unwrap();
        let x = images(4, 1);
        let p = d.features(&x, &bb).unwrap();
        assert_eq!(d.extract_features(&p).unwrap().shape(), &[4, 32, 4, 4]);
        let l1 = d.discriminate(&x, &text(4, 2), &bb).unwrap();
        let l2 = d.discriminate(&x, &text(4, 2), &bb).unwrap();
        assert_eq!(l1.shape(), &[4]);
        assert!(l1.value().all_finite());
        assert!(l1.value().bit_eq(l2.value()));
    }

    #[test]
    fn block_count_follows_levels() {
        let cfg = DiscriminatorConfig { collected_layers: vec![2, 4], ..DiscriminatorConfig::tiny() };
        let d = Discriminator::new(cfg, &BackboneConfig::tiny(), 0).unwrap();
        assert_eq!(d.extraction_block_count(), 1);
        let d = Discriminator::new(DiscriminatorConfig::tiny(), &BackboneConfig::tiny(), 0).unwrap();
        assert_eq!(d.extraction_block_count(), 2);
    }

    #[test]
    fn level_mismatch_is_rejected() {
        let bb = tiny_backbone();
        let d = Discriminator::new(DiscriminatorConfig::tiny(), bb.config(), 0).unwrap();
        let p = bb.forward_collect(&images(1, 0), &[1, 2]).unwrap();
        assert!(d.extract_features(&p).is_err());
    }

    #[test]
    fn zero_pyramid_without_biases_is_zero() {
        let d = Discriminator::new(DiscriminatorConfig::tiny(), &BackboneConfig::tiny(), 0).unwrap();
        for p in d.params().params() {
            if p.name().ends_with("bias") {
                p.set(Tensor::zeros(p.shape()));
            }
        }
        let zero = Var::constant(Tensor::zeros(vec![2, 32, 4, 4]));
        let pyr = FeaturePyramid { levels: vec![(1, zero.clone()), (2, zero.clone()), (3, zero)], source_resolution: 32 };
        assert!(d.extract_features(&pyr).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_extraction_reduces_to_sum_of_projections() {
        let bb = tiny_backbone();
        let d = Discriminator::new(DiscriminatorConfig::tiny(), bb.config(), 0).unwrap();
        randomize(d.params(), 3);
        d.zero_extraction_convs();
        let p = d.features(&images(2, 1), &bb).unwrap();
        let f = d.extract_features(&p).unwrap();
        let sum = p.vars().iter().enumerate().map(|(i, v)| d.project_level(i, v)).reduce(|a, b| a.add(&b)).unwrap();
        assert!(f.value().max_abs_diff(sum.value()) < 1e-12);
    }

    #[test]
    fn text_changes_the_logit_and_zero_weights_give_zero() {
        let bb = tiny_backbone();
        let d = Discriminator::new(DiscriminatorConfig::tiny(), bb.config(), 0).unwrap();
        randomize(d.params(), 4);
        let f = d.extract_features(&d.features(&images(1, 1), &bb).unwrap()).unwrap();
        let a = d.assess_quality(&f, &text(1, 5)).unwrap().item();
        let b = d.assess_quality(&f, &text(1, 6)).unwrap().item();
        assert!((a - b).abs() > 1e-9);
        for p in d.params().params().iter().filter(|p| p.name().starts_with("assessor")) {
            p.set(Tensor::zeros(p.shape()));
        }
        assert_eq!(d.assess_quality(&f, &text(1, 5)).unwrap().item(), 0.0);
    }

    #[test]
    fn every_level_receives_gradient() {
        let bb = tiny_backbone();
        let d = Discriminator::new(DiscriminatorConfig::tiny(), bb.config(), 0).unwrap();
        randomize(d.params(), 5);
        let p = d.features(&images(2, 1), &bb).unwrap();
        let leaves: Vec<Var> = p.vars().iter().map(|v| Var::leaf(v.value().clone())).collect();
        let pyr = FeaturePyramid { levels: p.layer_ids().into_iter().zip(leaves.clone()).collect(), source_resolution: 32 };
        let logit = d.logits(&pyr, &text(2, 2)).unwrap().sum();
        let refs: Vec<&Var> = leaves.iter().collect();
        for g in grad(&logit, &refs, false).unwrap() {
            assert!(g.unwrap().value().norm() > 0.0);
        }
    }

    #[test]
    fn patch_stem_replaces_backbone_features() {
        let bb = tiny_backbone();
        let cfg = DiscriminatorConfig { enable_clip_features: false, ..DiscriminatorConfig::tiny() };
        let d = Discriminator::new(cfg, bb.config(), 0).unwrap();
        assert_eq!(d.extraction_block_count(), 0);
        assert!(d.param_groups().contains_key("stem"));
        assert_eq!(d.discriminate(&images(3, 0), &text(3, 1), &bb).unwrap().shape(), &[3]);
    }
}
