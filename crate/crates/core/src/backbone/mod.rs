//! The frozen contrastive image/text encoder pair.
//!
//! Parameter names follow the publicly released checkpoint layout
//! (`visual.transformer.resblocks.3.attn.in_proj_weight`, ...), listed by
//! [`parameter_manifest`]. Every parameter is held as a constant graph
//! value: gradients flow through the backbone to its inputs but are never
//! accumulated for its weights.

mod tokenizer;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use galip_autograd::nn::{layer_norm, linear, quick_gelu, softmax};
use galip_autograd::{no_grad, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor_file::{write_tensor_file, Dtype, TensorFile};

pub use tokenizer::{BpeTokenizer, HashTokenizer, TokenIds, Tokenizer, TokenizerSpec};

const LN_EPS: f64 = 1e-5;
const PIXEL_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const PIXEL_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Transformer blocks in the image tower.
    pub depth: usize,
    /// Token channels of the image tower.
    pub width: usize,
    pub heads: usize,
    /// Dimension of the shared image/text embedding space.
    pub text_embed_dim: usize,
    pub text_width: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    /// Apply the final layer norm to the patch tokens returned by [`Backbone::forward_prompted`].
    pub final_norm_on_concepts: bool,
    pub tokenizer: TokenizerSpec,
}

impl BackboneConfig {
    /// The ViT-B/32 image tower with its 512-wide text tower.
    pub fn vit_b32() -> Self {
        Self {
            image_size: 224,
            patch_size: 32,
            depth: 12,
            width: 768,
            heads: 12,
            text_embed_dim: 512,
            text_width: 512,
            text_depth: 12,
            text_heads: 8,
            vocab_size: 49_408,
            context_length: 77,
            final_norm_on_concepts: true,
            tokenizer: TokenizerSpec::Bpe { vocab_path: "bpe_simple_vocab_16e6.txt.gz".into() },
        }
    }

    /// A miniature configuration for tests and desk-scale experiments.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            depth: 4,
            width: 32,
            heads: 2,
            text_embed_dim: 32,
            text_width: 32,
            text_depth: 2,
            text_heads: 2,
            vocab_size: 512,
            context_length: 16,
            final_norm_on_concepts: true,
            tokenizer: TokenizerSpec::Hash { seed: 0 },
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.text_heads == 0 || self.text_width % self.text_heads != 0 {
            return fail(format!(
                "text_width {} is not divisible by {} heads",
                self.text_width, self.text_heads
            ));
        }
        if self.depth == 0 || self.text_depth == 0 || self.context_length < 2 {
            return fail("depths must be positive and context_length at least 2".into());
        }
        Ok(())
    }
}

/// Where backbone weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightsSource {
    /// Seeded pseudo-random initialization of the configured shape.
    Random { seed: u64 },
    File(PathBuf),
}

impl WeightsSource {
    /// Parses `tiny-random`, `tiny-random:<seed>`, `random:<seed>` or a file path.
    pub fn parse(s: &str) -> Result<Self> {
        for prefix in ["tiny-random", "random"] {
            if let Some(rest) = s.strip_prefix(prefix) {
                let seed = match rest.strip_prefix(':') {
                    Some(n) => n
                        .parse()
                        .map_err(|_| Error::Config(format!("bad seed in weights source `{s}`")))?,
                    None if rest.is_empty() => 0,
                    None => break,
                };
                return Ok(WeightsSource::Random { seed });
            }
        }
        Ok(WeightsSource::File(PathBuf::from(s)))
    }

    pub fn id(&self) -> String {
        match self {
            WeightsSource::Random { seed } => format!("random:{seed}"),
            WeightsSource::File(p) => p.display().to_string(),
        }
    }
}

/// Names and shapes of every backbone parameter, image tower first.
pub fn parameter_manifest(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
    let mut m = Vec::new();
    let w = cfg.width;
    m.push(("visual.conv1.weight".to_string(), vec![w, 3, cfg.patch_size, cfg.patch_size]));
    m.push(("visual.class_embedding".to_string(), vec![w]));
    m.push(("visual.positional_embedding".to_string(), vec![cfg.num_patches() + 1, w]));
    m.push(("visual.ln_pre.weight".to_string(), vec![w]));
    m.push(("visual.ln_pre.bias".to_string(), vec![w]));
    push_blocks(&mut m, "visual.transformer", cfg.depth, w);
    m.push(("visual.ln_post.weight".to_string(), vec![w]));
    m.push(("visual.ln_post.bias".to_string(), vec![w]));
    m.push(("visual.proj".to_string(), vec![w, cfg.text_embed_dim]));
    let tw = cfg.text_width;
    m.push(("token_embedding.weight".to_string(), vec![cfg.vocab_size, tw]));
    m.push(("positional_embedding".to_string(), vec![cfg.context_length, tw]));
    push_blocks(&mut m, "transformer", cfg.text_depth, tw);
    m.push(("ln_final.weight".to_string(), vec![tw]));
    m.push(("ln_final.bias".to_string(), vec![tw]));
    m.push(("text_projection".to_string(), vec![tw, cfg.text_embed_dim]));
    m
}

fn push_blocks(m: &mut Vec<(String, Vec<usize>)>, prefix: &str, depth: usize, w: usize) {
    for i in 0..depth {
        let p = format!("{prefix}.resblocks.{i}");
        m.push((format!("{p}.ln_1.weight"), vec![w]));
        m.push((format!("{p}.ln_1.bias"), vec![w]));
        m.push((format!("{p}.attn.in_proj_weight"), vec![3 * w, w]));
        m.push((format!("{p}.attn.in_proj_bias"), vec![3 * w]));
        m.push((format!("{p}.attn.out_proj.weight"), vec![w, w]));
        m.push((format!("{p}.attn.out_proj.bias"), vec![w]));
        m.push((format!("{p}.ln_2.weight"), vec![w]));
        m.push((format!("{p}.ln_2.bias"), vec![w]));
        m.push((format!("{p}.mlp.c_fc.weight"), vec![4 * w, w]));
        m.push((format!("{p}.mlp.c_fc.bias"), vec![4 * w]));
        m.push((format!("{p}.mlp.c_proj.weight"), vec![w, 4 * w]));
        m.push((format!("{p}.mlp.c_proj.bias"), vec![w]));
    }
}

/// Seeded initialization of one named parameter, independent of the order
/// in which parameters are created.
fn random_parameter(cfg: &BackboneConfig, seed: u64, name: &str, shape: &[usize]) -> Tensor {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let (width, depth) = if name.starts_with("visual.") {
        (cfg.width, cfg.depth)
    } else {
        (cfg.text_width, cfg.text_depth)
    };
    let attn_std = (width as f64).powf(-0.5);
    let proj_std = attn_std * ((2 * depth) as f64).powf(-0.5);
    let fc_std = ((2 * width) as f64).powf(-0.5);
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let is_norm = name.contains(".ln_") || name.starts_with("ln_");
    match () {
        _ if is_norm && leaf == "weight" => Tensor::ones(shape.to_vec()),
        _ if leaf == "bias" || leaf == "in_proj_bias" => Tensor::zeros(shape.to_vec()),
        _ if name == "positional_embedding" => Tensor::randn(shape.to_vec(), 0.01, &mut rng),
        _ if name == "token_embedding.weight" || name == "visual.conv1.weight" => {
            Tensor::randn(shape.to_vec(), 0.02, &mut rng)
        }
        _ if name.ends_with("out_proj.weight") || name.ends_with("c_proj.weight") => {
            Tensor::randn(shape.to_vec(), proj_std, &mut rng)
        }
        _ if name.ends_with("c_fc.weight") => Tensor::randn(shape.to_vec(), fc_std, &mut rng),
        _ => Tensor::randn(shape.to_vec(), attn_std, &mut rng),
    }
}

struct Block {
    ln_1: (Var, Var),
    in_proj: (Var, Var),
    out_proj: (Var, Var),
    ln_2: (Var, Var),
    c_fc: (Var, Var),
    c_proj: (Var, Var),
    heads: usize,
}

impl Block {
    fn load(get: &mut impl FnMut(&str) -> Result<Var>, prefix: &str, heads: usize) -> Result<Self> {
        let mut pair = |a: &str, b: &str| -> Result<(Var, Var)> {
            Ok((get(&format!("{prefix}.{a}"))?, get(&format!("{prefix}.{b}"))?))
        };
        Ok(Self {
            ln_1: pair("ln_1.weight", "ln_1.bias")?,
            in_proj: pair("attn.in_proj_weight", "attn.in_proj_bias")?,
            out_proj: pair("attn.out_proj.weight", "attn.out_proj.bias")?,
            ln_2: pair("ln_2.weight", "ln_2.bias")?,
            c_fc: pair("mlp.c_fc.weight", "mlp.c_fc.bias")?,
            c_proj: pair("mlp.c_proj.weight", "mlp.c_proj.bias")?,
            heads,
        })
    }

    fn attention(&self, x: &Var, mask: Option<&Var>) -> Var {
        let (b, t, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let h = self.heads;
        let dh = w / h;
        let qkv = linear(x, &self.in_proj.0, Some(&self.in_proj.1))
            .reshape(&[b, t, 3, h, dh])
            .permute(&[2, 0, 3, 1, 4]);
        let part = |i: usize| qkv.narrow(0, i, 1).reshape(&[b * h, t, dh]);
        let (q, k, v) = (part(0), part(1), part(2));
        let mut scores = q.matmul_ex(&k, false, true).scale((dh as f64).powf(-0.5));
        if let Some(m) = mask {
            scores = scores.add(m);
        }
        let attn = softmax(&scores, 2);
        let out = attn.matmul(&v).reshape(&[b, h, t, dh]).permute(&[0, 2, 1, 3]).reshape(&[b, t, w]);
        linear(&out, &self.out_proj.0, Some(&self.out_proj.1))
    }

    fn forward(&self, x: &Var, mask: Option<&Var>) -> Var {
        let a = self.attention(&layer_norm(x, &self.ln_1.0, &self.ln_1.1, LN_EPS), mask);
        let x = x.add(&a);
        let hidden = quick_gelu(&linear(
            &layer_norm(&x, &self.ln_2.0, &self.ln_2.1, LN_EPS),
            &self.c_fc.0,
            Some(&self.c_fc.1),
        ));
        x.add(&linear(&hidden, &self.c_proj.0, Some(&self.c_proj.1)))
    }
}

struct VisionTower {
    conv1: Var,
    class_embedding: Var,
    positional_embedding: Var,
    ln_pre: (Var, Var),
    blocks: Vec<Block>,
    ln_post: (Var, Var),
    proj: Var,
}

struct TextTower {
    token_embedding: Tensor,
    positional_embedding: Var,
    blocks: Vec<Block>,
    ln_final: (Var, Var),
    projection: Var,
}

/// Intermediate image-tower features: one `[B, width, grid, grid]` value per
/// collected layer, class token removed.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<(usize, Var)>,
    pub source_resolution: usize,
}

impl FeaturePyramid {
    pub fn vars(&self) -> Vec<Var> {
        self.levels.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        self.levels.iter().map(|(l, _)| *l).collect()
    }
}

/// Per-layer prompt tokens for deep prompting. `layers[i]` is the
/// `[B, prompts, width]` block injected before layer `start_layer + i`.
#[derive(Debug, Clone, Default)]
pub struct PromptStack {
    pub start_layer: usize,
    pub layers: Vec<Var>,
}

impl PromptStack {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Last prompted layer (1-based), if any.
    pub fn end_layer(&self) -> Option<usize> {
        (!self.is_empty()).then(|| self.start_layer + self.layers.len() - 1)
    }

    pub fn for_layer(&self, layer: usize) -> Option<&Var> {
        if layer < self.start_layer {
            return None;
        }
        self.layers.get(layer - self.start_layer)
    }
}

/// Maps images from the generator range `[-1, 1]` into the backbone's
/// normalized color space. Differentiable.
pub fn to_backbone_space(images: &Var) -> Var {
    let scale = Tensor::new(vec![1, 3, 1, 1], PIXEL_STD.iter().map(|s| 0.5 / s).collect());
    let shift = Tensor::new(
        vec![1, 3, 1, 1],
        PIXEL_MEAN.iter().zip(PIXEL_STD).map(|(m, s)| (0.5 - m) / s).collect(),
    );
    images.mul(&Var::constant(scale)).add(&Var::constant(shift))
}

/// The frozen encoder pair plus its tokenizer.
pub struct Backbone {
    config: BackboneConfig,
    source: WeightsSource,
    vision: VisionTower,
    text: OnceLock<TextTower>,
    tokenizer: Box<dyn Tokenizer>,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone").field("source", &self.source).field("config", &self.config).finish()
    }
}

impl Backbone {
    /// Loads weights from `source` (a path, `tiny-random[:seed]` or `random:<seed>`).
    pub fn load(source: &str, config: BackboneConfig) -> Result<Self> {
        Self::load_from(WeightsSource::parse(source)?, config)
    }

    pub fn load_from(source: WeightsSource, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        match &source {
            WeightsSource::Random { seed } => {
                let seed = *seed;
                let tokenizer = build_tokenizer(&config, None)?;
                let cfg = config.clone();
                let mut get = |name: &str| -> Result<Tensor> {
                    let shape = manifest_shape(&cfg, name)?;
                    Ok(random_parameter(&cfg, seed, name, &shape))
                };
                let vision = build_vision(&config, &mut get)?;
                Ok(Self { config, source, vision, text: OnceLock::new(), tokenizer })
            }
            WeightsSource::File(path) => {
                let file = TensorFile::open(path)?;
                let manifest = parameter_manifest(&config);
                // Report the first mismatching parameter before decoding anything.
                for (name, shape) in &manifest {
                    match file.shape(name) {
                        None => return Err(Error::MissingTensor(name.clone())),
                        Some(found) if found != shape.as_slice() => {
                            return Err(Error::ParamShape {
                                name: name.clone(),
                                expected: shape.clone(),
                                found: found.to_vec(),
                            })
                        }
                        Some(_) => {}
                    }
                }
                let mut get = |name: &str| file.tensor(name);
                let vision = build_vision(&config, &mut get)?;
                let text = build_text(&config, &mut get)?;
                let tokenizer = build_tokenizer(&config, path.parent())?;
                let cell = OnceLock::new();
                let _ = cell.set(text);
                Ok(Self { config, source, vision, text: cell, tokenizer })
            }
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn source(&self) -> &WeightsSource {
        &self.source
    }

    pub fn id(&self) -> String {
        self.source.id()
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    /// Count of parameters that an optimizer could update: always zero.
    pub fn trainable_parameter_count(&self) -> usize {
        self.named_parameters().iter().filter(|(_, v)| v.requires_grad()).count()
    }

    fn text_tower(&self) -> &TextTower {
        self.text.get_or_init(|| {
            let WeightsSource::Random { seed } = self.source else {
                unreachable!("file-backed text tower is built at load time")
            };
            let cfg = &self.config;
            let mut get = |name: &str| -> Result<Tensor> {
                Ok(random_parameter(cfg, seed, name, &manifest_shape(cfg, name)?))
            };
            build_text(cfg, &mut get).expect("manifest names are consistent")
        })
    }

    fn named_parameters(&self) -> Vec<(String, Var)> {
        let v = &self.vision;
        let t = self.text_tower();
        let mut out = vec![
            ("visual.conv1.weight".to_string(), v.conv1.clone()),
            ("visual.class_embedding".to_string(), v.class_embedding.clone()),
            ("visual.positional_embedding".to_string(), v.positional_embedding.clone()),
            ("visual.ln_pre.weight".to_string(), v.ln_pre.0.clone()),
            ("visual.ln_pre.bias".to_string(), v.ln_pre.1.clone()),
        ];
        push_block_params(&mut out, "visual.transformer", &v.blocks);
        out.push(("visual.ln_post.weight".into(), v.ln_post.0.clone()));
        out.push(("visual.ln_post.bias".into(), v.ln_post.1.clone()));
        out.push(("visual.proj".into(), v.proj.clone()));
        out.push(("token_embedding.weight".into(), Var::constant(t.token_embedding.clone())));
        out.push(("positional_embedding".into(), t.positional_embedding.clone()));
        push_block_params(&mut out, "transformer", &t.blocks);
        out.push(("ln_final.weight".into(), t.ln_final.0.clone()));
        out.push(("ln_final.bias".into(), t.ln_final.1.clone()));
        out.push(("text_projection".into(), t.projection.clone()));
        out
    }

    /// Every parameter by manifest name.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        self.named_parameters().into_iter().map(|(n, v)| (n, v.value().clone())).collect()
    }

    /// Writes the weights in manifest order.
    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        write_tensor_file(path, &self.parameters(), &meta, dtype)
    }

    pub fn tokenize(&self, text: &str) -> TokenIds {
        self.tokenizer.encode(text)
    }

    /// Sentence embeddings `[B, text_embed_dim]`. Never tracked by autodiff.
    pub fn encode_text(&self, tokens: &[TokenIds]) -> Result<Var> {
        let cfg = &self.config;
        for t in tokens {
            if t.ids.len() != cfg.context_length {
                return Err(shape_err(
                    "encode_text",
                    format!("{} token ids, context length is {}", t.ids.len(), cfg.context_length),
                ));
            }
            if let Some(bad) = t.ids.iter().find(|&&i| i >= cfg.vocab_size) {
                return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
            }
        }
        let tower = self.text_tower();
        Ok(no_grad(|| {
            let (b, t, w) = (tokens.len(), cfg.context_length, cfg.text_width);
            let ids: Vec<usize> = tokens.iter().flat_map(|t| t.ids.iter().copied()).collect();
            let emb = Var::constant(tower.token_embedding.gather_rows(&ids).reshape(vec![b, t, w]));
            let mut x = emb.add(&tower.positional_embedding);
            let mask = Var::constant(causal_mask(t));
            for block in &tower.blocks {
                x = block.forward(&x, Some(&mask));
            }
            let x = layer_norm(&x, &tower.ln_final.0, &tower.ln_final.1, LN_EPS);
            let rows: Vec<Var> = tokens
                .iter()
                .enumerate()
                .map(|(i, tk)| x.narrow(0, i, 1).narrow(1, tk.end_position(), 1).reshape(&[1, w]))
                .collect();
            Var::concat(&rows, 0).matmul(&tower.projection)
        }))
    }

    /// Convenience: tokenize then encode.
    pub fn encode_captions(&self, captions: &[&str]) -> Result<Var> {
        let tokens: Vec<TokenIds> = captions.iter().map(|c| self.tokenize(c)).collect();
        self.encode_text(&tokens)
    }

    fn check_image(&self, image: &Var, op: &'static str) -> Result<()> {
        let s = self.config.image_size;
        match image.shape() {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            other => Err(shape_err(op, format!("expected [B, 3, {s}, {s}], got {other:?}"))),
        }
    }

    /// Patch tokens `[B, grid², width]` of a normalized image batch.
    fn patch_tokens(&self, image: &Var) -> Var {
        let cfg = &self.config;
        let (b, g, p) = (image.shape()[0], cfg.grid_side(), cfg.patch_size);
        let patches = image
            .reshape(&[b, 3, g, p, g, p])
            .permute(&[0, 2, 4, 1, 3, 5])
            .reshape(&[b, g * g, 3 * p * p]);
        linear(&patches, &self.vision.conv1.reshape(&[cfg.width, 3 * p * p]), None)
    }

    /// Class token, positions and the pre-norm, applied to `[B, grid², width]` tokens.
    fn embed_tokens(&self, tokens: &Var) -> Var {
        let (b, w) = (tokens.shape()[0], self.config.width);
        let class = self.vision.class_embedding.reshape(&[1, 1, w]).broadcast_to(&[b, 1, w]);
        let x = Var::concat(&[class, tokens.clone()], 1).add(&self.vision.positional_embedding);
        layer_norm(&x, &self.vision.ln_pre.0, &self.vision.ln_pre.1, LN_EPS)
    }

    /// `[B, grid², width]` token rows to a `[B, width, grid, grid]` grid.
    fn tokens_to_grid(&self, tokens: &Var) -> Var {
        let (b, g, w) = (tokens.shape()[0], self.config.grid_side(), self.config.width);
        tokens.reshape(&[b, g, g, w]).permute(&[0, 3, 1, 2])
    }

    /// Image embeddings `[B, text_embed_dim]` of normalized images.
    pub fn encode_image(&self, image: &Var) -> Result<Var> {
        self.check_image(image, "encode_image")?;
        let mut x = self.embed_tokens(&self.patch_tokens(image));
        for block in &self.vision.blocks {
            x = block.forward(&x, None);
        }
        let w = self.config.width;
        let class = x.narrow(1, 0, 1).reshape(&[image.shape()[0], w]);
        let class = layer_norm(&class, &self.vision.ln_post.0, &self.vision.ln_post.1, LN_EPS);
        Ok(class.matmul(&self.vision.proj))
    }

    /// Outputs of the given (1-based, strictly increasing) layers for normalized images.
    pub fn forward_collect(&self, image: &Var, layer_ids: &[usize]) -> Result<FeaturePyramid> {
        self.check_image(image, "forward_collect")?;
        self.check_layers(layer_ids)?;
        let n = self.config.num_patches();
        let mut x = self.embed_tokens(&self.patch_tokens(image));
        let mut levels = Vec::with_capacity(layer_ids.len());
        let last = *layer_ids.last().unwrap();
        for (i, block) in self.vision.blocks.iter().take(last).enumerate() {
            x = block.forward(&x, None);
            if layer_ids.contains(&(i + 1)) {
                levels.push((i + 1, self.tokens_to_grid(&x.narrow(1, 1, n))));
            }
        }
        Ok(FeaturePyramid { levels, source_resolution: self.config.image_size })
    }

    pub fn check_layers(&self, layer_ids: &[usize]) -> Result<()> {
        if layer_ids.is_empty() {
            return Err(Error::InvalidArgument("no layers requested".into()));
        }
        if !layer_ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(format!("layers {layer_ids:?} are not strictly increasing")));
        }
        let depth = self.config.depth;
        if layer_ids[0] == 0 || *layer_ids.last().unwrap() > depth {
            return Err(Error::InvalidArgument(format!("layers {layer_ids:?} outside 1..={depth}")));
        }
        Ok(())
    }

    /// Runs the image tower on tokens already in token space (bypassing the
    /// patch embedding), refreshing prompt slots before each prompted layer
    /// and dropping them after the last. Returns the final patch tokens as
    /// `[B, width, grid, grid]`.
    pub fn forward_prompted(&self, bridge_tokens: &Var, prompts: &PromptStack) -> Result<Var> {
        let cfg = &self.config;
        let n = cfg.num_patches();
        match bridge_tokens.shape() {
            [_, t, w] if *t == n && *w == cfg.width => {}
            other => {
                return Err(shape_err(
                    "forward_prompted",
                    format!("tokens {other:?}, expected [B, {n}, {}]", cfg.width),
                ))
            }
        }
        let b = bridge_tokens.shape()[0];
        if let Some(end) = prompts.end_layer() {
            if prompts.start_layer == 0 || end > cfg.depth {
                return Err(Error::InvalidArgument(format!(
                    "prompted layers {}..={end} outside 1..={}",
                    prompts.start_layer, cfg.depth
                )));
            }
            for p in &prompts.layers {
                match p.shape() {
                    [pb, _, w] if *pb == b && *w == cfg.width => {}
                    other => {
                        return Err(shape_err(
                            "forward_prompted",
                            format!("prompt block {other:?} for width {} and batch {b}", cfg.width),
                        ))
                    }
                }
            }
        }
        let mut x = self.embed_tokens(bridge_tokens);
        for (i, block) in self.vision.blocks.iter().enumerate() {
            let base = x.narrow(1, 0, n + 1);
            x = match prompts.for_layer(i + 1) {
                Some(p) => Var::concat(&[base, p.clone()], 1),
                None => base,
            };
            x = block.forward(&x, None);
        }
        let mut patches = x.narrow(1, 1, n);
        if cfg.final_norm_on_concepts {
            patches = layer_norm(&patches, &self.vision.ln_post.0, &self.vision.ln_post.1, LN_EPS);
        }
        Ok(self.tokens_to_grid(&patches))
    }
}

fn push_block_params(out: &mut Vec<(String, Var)>, prefix: &str, blocks: &[Block]) {
    for (i, b) in blocks.iter().enumerate() {
        let p = format!("{prefix}.resblocks.{i}");
        for (name, pair) in [
            ("ln_1", &b.ln_1),
            ("ln_2", &b.ln_2),
            ("mlp.c_fc", &b.c_fc),
            ("mlp.c_proj", &b.c_proj),
            ("attn.out_proj", &b.out_proj),
        ] {
            out.push((format!("{p}.{name}.weight"), pair.0.clone()));
            out.push((format!("{p}.{name}.bias"), pair.1.clone()));
        }
        out.push((format!("{p}.attn.in_proj_weight"), b.in_proj.0.clone()));
        out.push((format!("{p}.attn.in_proj_bias"), b.in_proj.1.clone()));
    }
}

fn manifest_shape(cfg: &BackboneConfig, name: &str) -> Result<Vec<usize>> {
    parameter_manifest(cfg)
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, s)| s)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))
}

fn build_vision(cfg: &BackboneConfig, get: &mut impl FnMut(&str) -> Result<Tensor>) -> Result<VisionTower> {
    let mut var = |n: &str| get(n).map(Var::constant);
    let conv1 = var("visual.conv1.weight")?;
    let class_embedding = var("visual.class_embedding")?;
    let positional_embedding = var("visual.positional_embedding")?;
    let ln_pre = (var("visual.ln_pre.weight")?, var("visual.ln_pre.bias")?);
    let blocks = (0..cfg.depth)
        .map(|i| Block::load(&mut var, &format!("visual.transformer.resblocks.{i}"), cfg.heads))
        .collect::<Result<_>>()?;
    let ln_post = (var("visual.ln_post.weight")?, var("visual.ln_post.bias")?);
    let proj = var("visual.proj")?;
    Ok(VisionTower { conv1, class_embedding, positional_embedding, ln_pre, blocks, ln_post, proj })
}

fn build_text(cfg: &BackboneConfig, get: &mut impl FnMut(&str) -> Result<Tensor>) -> Result<TextTower> {
    let token_embedding = get("token_embedding.weight")?;
    let mut var = |n: &str| get(n).map(Var::constant);
    let positional_embedding = var("positional_embedding")?;
    let blocks = (0..cfg.text_depth)
        .map(|i| Block::load(&mut var, &format!("transformer.resblocks.{i}"), cfg.text_heads))
        .collect::<Result<_>>()?;
    let ln_final = (var("ln_final.weight")?, var("ln_final.bias")?);
    let projection = var("text_projection")?;
    Ok(TextTower { token_embedding, positional_embedding, blocks, ln_final, projection })
}

fn build_tokenizer(cfg: &BackboneConfig, weights_dir: Option<&Path>) -> Result<Box<dyn Tokenizer>> {
    match &cfg.tokenizer {
        TokenizerSpec::Hash { seed } => Ok(Box::new(HashTokenizer::new(*seed, cfg.vocab_size, cfg.context_length)?)),
        TokenizerSpec::Bpe { vocab_path } => {
            let mut path = PathBuf::from(vocab_path);
            if path.is_relative() {
                if let Some(dir) = weights_dir {
                    path = dir.join(path);
                }
            }
            let merges = cfg.vocab_size.checked_sub(512 + 2);
            let tok = BpeTokenizer::from_file(&path, merges, cfg.context_length)?;
            if tok.vocab_size() != cfg.vocab_size {
                return Err(Error::Config(format!(
                    "vocabulary file yields {} entries, config expects {}",
                    tok.vocab_size(),
                    cfg.vocab_size
                )));
            }
            Ok(Box::new(tok))
        }
    }
}

fn causal_mask(t: usize) -> Tensor {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = -1e30;
        }
    }
    Tensor::new(vec![t, t], m)
}
