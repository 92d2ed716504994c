//! The learnable generator: predicts bridge features and per-layer prompts
//! from (noise, text), runs them through the frozen image tower to obtain
//! visual concepts, and upsamples concepts plus bridge into an image.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use galip_autograd::nn::upsample_nearest2x;
use galip_autograd::{Param, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, PromptStack};
use crate::error::{shape_err, Error, Result};
use crate::layers::{Builder, Conv, DfBlock, Linear, LEAKY_SLOPE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub bridge_channels: usize,
    /// Fusion blocks after the bridge projection (M).
    pub fusion_blocks: usize,
    /// Image generation blocks (K).
    pub generation_blocks: usize,
    /// First and last prompted backbone layers, 1-based and inclusive.
    pub prompt_layers: (usize, usize),
    pub prompts_per_layer: usize,
    /// Output channels of the first generation block; halved per block down to `min_channels`.
    pub base_channels: usize,
    pub min_channels: usize,
    pub enable_prompt_predictor: bool,
    pub enable_bridge_path: bool,
    /// Route through the frozen image tower at all.
    pub enable_clip_generator: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            noise_dim: 100,
            bridge_channels: 64,
            fusion_blocks: 4,
            generation_blocks: 6,
            prompt_layers: (1, 9),
            prompts_per_layer: 8,
            base_channels: 512,
            min_channels: 32,
            enable_prompt_predictor: true,
            enable_bridge_path: true,
            enable_clip_generator: true,
        }
    }
}

impl GeneratorConfig {
    /// Companion of [`BackboneConfig::tiny`].
    pub fn tiny() -> Self {
        Self {
            noise_dim: 16,
            bridge_channels: 16,
            fusion_blocks: 2,
            generation_blocks: 4,
            prompt_layers: (1, 3),
            prompts_per_layer: 8,
            base_channels: 64,
            min_channels: 16,
            ..Self::default()
        }
    }

    pub fn prompted_layer_count(&self) -> usize {
        self.prompt_layers.1 + 1 - self.prompt_layers.0
    }

    /// Number of 2× upsamplings from the backbone grid to the image side.
    pub fn doublings(bb: &BackboneConfig) -> Result<usize> {
        let ratio = bb.image_size / bb.grid_side();
        if !ratio.is_power_of_two() {
            return Err(Error::Config(format!("image/grid ratio {ratio} is not a power of two")));
        }
        Ok(ratio.trailing_zeros() as usize)
    }

    pub fn validate(&self, bb: &BackboneConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let doublings = Self::doublings(bb)?;
        if self.generation_blocks < 1 + doublings {
            return fail(format!(
                "{} generation blocks cannot reach {} from grid {} (need {})",
                self.generation_blocks,
                bb.image_size,
                bb.grid_side(),
                1 + doublings
            ));
        }
        if self.fusion_blocks == 0 {
            return fail("at least one fusion block is required".into());
        }
        let (a, b) = self.prompt_layers;
        if self.enable_prompt_predictor && self.enable_clip_generator && (a == 0 || a > b || b > bb.depth) {
            return fail(format!("prompt layers {a}..={b} outside 1..={}", bb.depth));
        }
        if self.noise_dim == 0 || self.bridge_channels == 0 || self.min_channels == 0 || self.prompts_per_layer == 0 {
            return fail("channel counts must be positive".into());
        }
        Ok(())
    }

    /// Output channels of generation block `i`.
    pub fn block_channels(&self, i: usize) -> usize {
        (self.base_channels >> i.min(63)).max(self.min_channels)
    }
}

/// Counts stage invocations, for checking that generation is single-pass.
#[derive(Debug, Default)]
pub struct StageCounters {
    bridge: AtomicUsize,
    prompts: AtomicUsize,
    tokens: AtomicUsize,
    backbone: AtomicUsize,
    synthesis: AtomicUsize,
}

impl StageCounters {
    /// (predict_bridge, predict_prompts, project_to_tokens, forward_prompted, synthesize_image)
    pub fn snapshot(&self) -> [usize; 5] {
        [&self.bridge, &self.prompts, &self.tokens, &self.backbone, &self.synthesis].map(|c| c.load(Ordering::Relaxed))
    }

    pub fn reset(&self) {
        for c in [&self.bridge, &self.prompts, &self.tokens, &self.backbone, &self.synthesis] {
            c.store(0, Ordering::Relaxed);
        }
    }

    fn hit(c: &AtomicUsize) {
        c.fetch_add(1, Ordering::Relaxed);
    }
}

/// Conv, DFBlock, conv, DFBlock with an additive shortcut.
struct FusionBlock {
    conv1: Conv,
    df1: DfBlock,
    conv2: Conv,
    df2: DfBlock,
}

impl FusionBlock {
    fn forward(&self, x: &Var, cond: &Var) -> Result<Var> {
        let h = self.df1.forward(&self.conv1.forward(x), cond)?;
        let h = self.df2.forward(&self.conv2.forward(&h), cond)?;
        Ok(x.add(&h))
    }
}

/// Optional upsampling, a convolution and two DFBlocks, with a shortcut.
struct GenBlock {
    upsample: bool,
    conv: Conv,
    df1: DfBlock,
    df2: DfBlock,
    shortcut: Option<Conv>,
}

impl GenBlock {
    fn forward(&self, x: &Var, cond: &Var) -> Result<Var> {
        let x = if self.upsample { upsample_nearest2x(x) } else { x.clone() };
        let h = self.df1.forward(&self.conv.forward(&x), cond)?;
        let h = self.df2.forward(&h, cond)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(&x),
            None => x,
        };
        Ok(skip.add(&h))
    }
}

struct BridgePredictor {
    fc: Linear,
    fusion: Vec<FusionBlock>,
}

pub struct Generator {
    config: GeneratorConfig,
    backbone: BackboneConfig,
    store: ParamStore,
    bridge: Option<BridgePredictor>,
    prompt_fc: Option<Linear>,
    token_proj: Option<Conv>,
    /// Learned token grid that stands in for the bridge when the bridge path is off.
    const_tokens: Option<Arc<Param>>,
    /// Learned starting grid when neither the bridge nor the backbone is used.
    const_grid: Option<Arc<Param>>,
    concept_proj: Option<Conv>,
    blocks: Vec<GenBlock>,
    head: Conv,
    counters: StageCounters,
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator")
            .field("config", &self.config)
            .field("parameters", &self.store.numel())
            .finish()
    }
}

impl Generator {
    pub fn new(config: GeneratorConfig, backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate(backbone)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, &mut rng);
        let cfg = &config;
        let cond_dim = backbone.text_embed_dim + cfg.noise_dim;
        let (g, w, c0) = (backbone.grid_side(), backbone.width, cfg.bridge_channels);

        let bridge = cfg.enable_bridge_path.then(|| {
            b.scope("bridge", |b| BridgePredictor {
                fc: b.linear("fc", cfg.noise_dim, c0 * g * g),
                fusion: (0..cfg.fusion_blocks)
                    .map(|i| {
                        b.scope(&format!("fusion.{i}"), |b| FusionBlock {
                            conv1: b.conv("conv1", c0, c0, 3, true),
                            df1: b.scope("df1", |b| DfBlock::new(b, cond_dim, c0, c0)),
                            conv2: b.conv("conv2", c0, c0, 3, true),
                            df2: b.scope("df2", |b| DfBlock::new(b, cond_dim, c0, c0)),
                        })
                    })
                    .collect(),
            })
        });
        let clip = cfg.enable_clip_generator;
        let prompt_fc = (clip && cfg.enable_prompt_predictor)
            .then(|| b.linear("prompt_fc", cond_dim, cfg.prompted_layer_count() * cfg.prompts_per_layer * w));
        let token_proj = (clip && cfg.enable_bridge_path).then(|| b.conv("token_proj", c0, w, 1, true));
        let const_tokens = (clip && !cfg.enable_bridge_path).then(|| {
            let t = Tensor::randn(vec![1, g * g, w], 1.0, b.rng());
            b.param("const_tokens", t)
        });
        let const_grid = (!clip && !cfg.enable_bridge_path).then(|| {
            let t = Tensor::randn(vec![1, c0, g, g], 1.0, b.rng());
            b.param("const_grid", t)
        });
        let concept_proj = clip.then(|| b.conv("concept_proj", w, c0, 1, true));

        let doublings = GeneratorConfig::doublings(backbone)?;
        let k = cfg.generation_blocks;
        let mut in_ch = c0;
        let mut blocks = Vec::with_capacity(k);
        for i in 0..k {
            let out = cfg.block_channels(i);
            blocks.push(b.scope(&format!("blocks.{i}"), |b| GenBlock {
                upsample: i >= k - doublings,
                conv: b.conv("conv", in_ch, out, 3, true),
                df1: b.scope("df1", |b| DfBlock::new(b, cond_dim, out, out)),
                df2: b.scope("df2", |b| DfBlock::new(b, cond_dim, out, out)),
                shortcut: (in_ch != out).then(|| b.conv("shortcut", in_ch, out, 1, false)),
            }));
            in_ch = out;
        }
        let head = b.conv("head", in_ch, 3, 3, true);
        Ok(Self {
            config,
            backbone: backbone.clone(),
            store,
            bridge,
            prompt_fc,
            token_proj,
            const_tokens,
            const_grid,
            concept_proj,
            blocks,
            head,
            counters: StageCounters::default(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        &self.backbone
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    pub fn counters(&self) -> &StageCounters {
        &self.counters
    }

    /// Parameters grouped by top-level component
    /// (`bridge`, `prompt_fc`, `token_proj`, `concept_proj`, `blocks`, `head`, ...).
    pub fn param_groups(&self) -> BTreeMap<String, Vec<Arc<Param>>> {
        group_by_component(&self.store)
    }

    pub fn sample_noise(&self, batch: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::randn(vec![batch, self.config.noise_dim], 1.0, rng)
    }

    /// `[text, noise]` along the channel axis.
    pub fn condition(&self, noise: &Var, text: &Var) -> Result<Var> {
        let (nd, td) = (self.config.noise_dim, self.backbone.text_embed_dim);
        match (noise.shape(), text.shape()) {
            ([b, n], [bt, t]) if b == bt && *n == nd && *t == td => Ok(Var::concat(&[text.clone(), noise.clone()], 1)),
            (n, t) => Err(shape_err("condition", format!("noise {n:?} and text {t:?}, expected [B, {nd}] and [B, {td}]"))),
        }
    }

    /// Bridge features `[B, bridge_channels, grid, grid]`.
    pub fn predict_bridge(&self, noise: &Var, cond: &Var) -> Result<Var> {
        StageCounters::hit(&self.counters.bridge);
        let bp = self
            .bridge
            .as_ref()
            .ok_or_else(|| Error::Config("bridge path is disabled".into()))?;
        let (b, g, c) = (noise.shape()[0], self.backbone.grid_side(), self.config.bridge_channels);
        let mut x = bp.fc.forward(noise).reshape(&[b, c, g, g]);
        for blk in &bp.fusion {
            x = blk.forward(&x, cond)?;
        }
        Ok(x)
    }

    /// Per-layer prompts; empty when the predictor is disabled.
    pub fn predict_prompts(&self, cond: &Var) -> PromptStack {
        StageCounters::hit(&self.counters.prompts);
        let Some(fc) = &self.prompt_fc else { return PromptStack::empty() };
        let (b, w) = (cond.shape()[0], self.backbone.width);
        let (l, p) = (self.config.prompted_layer_count(), self.config.prompts_per_layer);
        let all = fc.forward(cond).reshape(&[b, l, p, w]);
        PromptStack {
            start_layer: self.config.prompt_layers.0,
            layers: (0..l).map(|i| all.narrow(1, i, 1).reshape(&[b, p, w])).collect(),
        }
    }

    /// 1×1 projection into token space, grid flattened row-major: position
    /// `(r, c)` becomes token `r * grid + c`.
    pub fn project_to_tokens(&self, bridge: &Var) -> Result<Var> {
        StageCounters::hit(&self.counters.tokens);
        let proj = self
            .token_proj
            .as_ref()
            .ok_or_else(|| Error::Config("token projection needs the bridge path and the backbone".into()))?;
        let (b, g, w) = (bridge.shape()[0], self.backbone.grid_side(), self.backbone.width);
        Ok(proj.forward(bridge).reshape(&[b, w, g * g]).permute(&[0, 2, 1]))
    }

    /// Decodes visual concepts and/or bridge features into `[B, 3, S, S]` images in `[-1, 1]`.
    pub fn synthesize_image(&self, concepts: Option<&Var>, bridge: Option<&Var>, cond: &Var) -> Result<Var> {
        StageCounters::hit(&self.counters.synthesis);
        let b = cond.shape()[0];
        let (g, c0) = (self.backbone.grid_side(), self.config.bridge_channels);
        let projected = match (concepts, &self.concept_proj) {
            (Some(v), Some(proj)) => {
                let expected = [b, self.backbone.width, g, g];
                if v.shape() != expected {
                    return Err(shape_err("synthesize_image", format!("concepts {:?}, expected {expected:?}", v.shape())));
                }
                Some(proj.forward(v))
            }
            (Some(_), None) => return Err(Error::Config("concepts given but the backbone path is disabled".into())),
            (None, _) => None,
        };
        if let Some(br) = bridge {
            if br.shape() != [b, c0, g, g] {
                return Err(shape_err("synthesize_image", format!("bridge {:?}, expected [{b}, {c0}, {g}, {g}]", br.shape())));
            }
        }
        let mut x = match (projected, bridge) {
            (Some(p), Some(br)) => p.add(br),
            (Some(p), None) => p,
            (None, Some(br)) => br.clone(),
            (None, None) => match &self.const_grid {
                Some(p) => p.var().broadcast_to(&[b, c0, g, g]),
                None => return Err(Error::Config("no input to the image generator".into())),
            },
        };
        for blk in &self.blocks {
            x = blk.forward(&x, cond)?;
        }
        Ok(self.head.forward(&x.leaky_relu(LEAKY_SLOPE)).tanh())
    }

    /// Single-pass generation of `[B, 3, S, S]` images. `backbone` may be
    /// `None` only when the backbone path is disabled.
    pub fn generate(&self, noise: &Var, text: &Var, backbone: Option<&Backbone>) -> Result<Var> {
        let cond = self.condition(noise, text)?;
        let bridge = match self.bridge {
            Some(_) => Some(self.predict_bridge(noise, &cond)?),
            None => None,
        };
        if !self.config.enable_clip_generator {
            return self.synthesize_image(None, bridge.as_ref(), &cond);
        }
        let backbone = backbone.ok_or_else(|| Error::Config("generator needs the backbone".into()))?;
        if backbone.config().width != self.backbone.width || backbone.config().grid_side() != self.backbone.grid_side() {
            return Err(Error::Config("backbone shape differs from the one the generator was built for".into()));
        }
        let prompts = self.predict_prompts(&cond);
        let b = noise.shape()[0];
        let tokens = match &bridge {
            Some(br) => self.project_to_tokens(br)?,
            None => {
                let p = self.const_tokens.as_ref().expect("constant tokens exist without the bridge path");
                let shape = p.shape();
                p.var().broadcast_to(&[b, shape[1], shape[2]])
            }
        };
        StageCounters::hit(&self.counters.backbone);
        let concepts = backbone.forward_prompted(&tokens, &prompts)?;
        self.synthesize_image(Some(&concepts), bridge.as_ref(), &cond)
    }
}

/// Parameters keyed by the first component of their dotted name.
pub(crate) fn group_by_component(store: &ParamStore) -> BTreeMap<String, Vec<Arc<Param>>> {
    let mut groups: BTreeMap<String, Vec<Arc<Param>>> = BTreeMap::new();
    for p in store.params() {
        let key = p.name().split('.').next().unwrap_or("").to_string();
        groups.entry(key).or_default().push(p.clone());
    }
    groups
}
