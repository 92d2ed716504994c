//! Alternating adversarial optimization: one discriminator update then one
//! generator update per step, Adam at two timescales, checkpoints and a
//! per-step metrics stream.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use galip_autograd::{grad, no_grad, Adam, AdamConfig, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig, FeaturePyramid};
use crate::data::{BatchIter, Dataset};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{shape_err, Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::objectives::{clip_similarity, generator_loss, hinge_d_loss, magp, NormMode, ObjectiveConfig};
use crate::tensor_file::{write_tensor_file, Dtype, TensorFile};

const STATE_FORMAT: &str = "galip-train-state/1";

/// Model scale the remaining fields are applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Tiny,
    VitB32,
}

/// Everything a training run depends on, as one flat record.
///
/// `None` fields take the preset's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    /// `tiny-random[:seed]`, `random:<seed>` or a weight file path.
    pub backbone_weights: String,
    pub batch_size: Option<usize>,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub k: f64,
    pub p: f64,
    pub lambda: f64,
    pub norm_mode: NormMode,
    /// Discriminator reads backbone features.
    pub enable_cd: bool,
    /// Generator routes through the backbone.
    pub enable_cg: bool,
    /// Generator bridge feature path.
    pub enable_bfp: bool,
    /// Generator prompt predictor.
    pub enable_pp: bool,
    pub collected_layers: Option<Vec<usize>>,
    /// First and last prompted layer, inclusive.
    pub prompt_layers: Option<[usize; 2]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl TrainConfig {
    pub fn tiny() -> Self {
        let obj = ObjectiveConfig::default();
        Self {
            preset: Preset::Tiny,
            backbone_weights: "tiny-random:0".into(),
            batch_size: None,
            lr_generator: 1e-4,
            lr_discriminator: 4e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            max_steps: 2000,
            seed: 0,
            checkpoint_every: 500,
            k: obj.k,
            p: obj.p,
            lambda: obj.lambda,
            norm_mode: obj.norm_mode,
            enable_cd: true,
            enable_cg: true,
            enable_bfp: true,
            enable_pp: true,
            collected_layers: None,
            prompt_layers: None,
        }
    }

    pub fn full(backbone_weights: impl Into<String>) -> Self {
        Self { preset: Preset::VitB32, backbone_weights: backbone_weights.into(), ..Self::tiny() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn effective_batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.preset {
            Preset::Tiny => 8,
            Preset::VitB32 => 64,
        })
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        match self.preset {
            Preset::Tiny => BackboneConfig::tiny(),
            Preset::VitB32 => BackboneConfig::vit_b32(),
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let base = match self.preset {
            Preset::Tiny => GeneratorConfig::tiny(),
            Preset::VitB32 => GeneratorConfig::default(),
        };
        GeneratorConfig {
            prompt_layers: self.prompt_layers.map(|[a, b]| (a, b)).unwrap_or(base.prompt_layers),
            enable_prompt_predictor: self.enable_pp,
            enable_bridge_path: self.enable_bfp,
            enable_clip_generator: self.enable_cg,
            ..base
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        let base = match self.preset {
            Preset::Tiny => DiscriminatorConfig::tiny(),
            Preset::VitB32 => DiscriminatorConfig::default(),
        };
        DiscriminatorConfig {
            collected_layers: self.collected_layers.clone().unwrap_or(base.collected_layers.clone()),
            enable_clip_features: self.enable_cd,
            ..base
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig { k: self.k, p: self.p, lambda: self.lambda, norm_mode: self.norm_mode }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.effective_batch_size() < 2 {
            return Err(Error::Config("batch size must be at least 2 to build mismatched pairs".into()));
        }
        self.objective().validate()?;
        let bb = self.backbone_config();
        self.generator_config().validate(&bb)?;
        self.discriminator_config().validate(&bb)
    }
}

/// Pairs every sentence with the next one in the batch: `[e1, e2, e3]` → `[e2, e3, e1]`.
pub fn make_mismatch(texts: &Tensor) -> Result<Tensor> {
    let b = match texts.shape() {
        [b, _] => *b,
        other => return Err(shape_err("make_mismatch", format!("texts must be [B, D], got {other:?}"))),
    };
    if b < 2 {
        return Err(Error::InvalidArgument(format!("mismatched pairs need a batch of at least 2, got {b}")));
    }
    let ids: Vec<usize> = (0..b).map(|i| (i + 1) % b).collect();
    Ok(texts.gather_rows(&ids))
}

/// Scalars reported by one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Step count after the update.
    pub step: u64,
    pub loss_d: f64,
    pub hinge: f64,
    pub magp: f64,
    pub loss_g: f64,
    pub similarity: f64,
    pub real_logit: f64,
    pub fake_logit: f64,
    pub mismatch_logit: f64,
    /// `E[‖g_c‖ + ‖g_e‖]` at the real pairs.
    pub grad_norm: f64,
}

fn param_vars(store: &ParamStore) -> Vec<Var> {
    store.params().iter().map(|p| p.var()).collect()
}

fn finite(term: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { term })
    }
}

fn grads_of(loss: &Var, store: &ParamStore, term: &'static str) -> Result<Vec<Option<Tensor>>> {
    let vars = param_vars(store);
    let refs: Vec<&Var> = vars.iter().collect();
    let grads: Vec<Option<Tensor>> = grad(loss, &refs, false)?.into_iter().map(|g| g.map(|g| g.value().clone())).collect();
    if grads.iter().flatten().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite { term });
    }
    Ok(grads)
}

/// Training state: both networks, their optimizers, the noise stream and
/// the step counter. The backbone is shared and never updated.
pub struct Trainer {
    config: TrainConfig,
    backbone: Arc<Backbone>,
    generator: Generator,
    discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    step: u64,
    text_cache: HashMap<String, Tensor>,
}

impl Trainer {
    pub fn new(config: TrainConfig, backbone: Arc<Backbone>) -> Result<Self> {
        config.validate()?;
        if backbone.config() != &config.backbone_config() {
            return Err(Error::Config("backbone configuration differs from the preset".into()));
        }
        let bb = config.backbone_config();
        let generator = Generator::new(config.generator_config(), &bb, config.seed)?;
        let discriminator = Discriminator::new(config.discriminator_config(), &bb, config.seed.wrapping_add(1))?;
        let opt_g = Adam::new(
            AdamConfig::new(config.lr_generator, config.adam_beta1, config.adam_beta2),
            generator.params(),
        );
        let opt_d = Adam::new(
            AdamConfig::new(config.lr_discriminator, config.adam_beta1, config.adam_beta2),
            discriminator.params(),
        );
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
        Ok(Self {
            config,
            backbone,
            generator,
            discriminator,
            opt_g,
            opt_d,
            rng,
            step: 0,
            text_cache: HashMap::new(),
        })
    }

    /// Loads the backbone named in the config and builds a fresh state.
    pub fn from_config(config: TrainConfig) -> Result<Self> {
        let backbone = Backbone::load(&config.backbone_weights, config.backbone_config())?;
        Self::new(config, Arc::new(backbone))
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Moves the stopping point of a resumed run.
    pub fn set_max_steps(&mut self, max_steps: u64) {
        self.config.max_steps = max_steps;
    }

    /// Update counts of the (generator, discriminator) optimizers.
    pub fn optimizer_steps(&self) -> (u64, u64) {
        (self.opt_g.step_count(), self.opt_d.step_count())
    }

    /// Sentence embeddings `[B, E]`, memoized per caption.
    pub fn embed_captions(&mut self, captions: &[String]) -> Result<Tensor> {
        let missing: Vec<&str> =
            captions.iter().filter(|c| !self.text_cache.contains_key(*c)).map(String::as_str).collect();
        if !missing.is_empty() {
            let emb = self.backbone.encode_captions(&missing)?;
            let d = emb.shape()[1];
            for (i, c) in missing.iter().enumerate() {
                self.text_cache.insert(c.to_string(), emb.value().narrow(0, i, 1).reshape(vec![d]));
            }
        }
        let rows: Vec<Tensor> = captions.iter().map(|c| self.text_cache[c].reshape(vec![1, self.text_cache[c].numel()])).collect();
        let refs: Vec<&Tensor> = rows.iter().collect();
        Ok(Tensor::concat(&refs, 0))
    }

    fn features(&self, images: &Var) -> Result<FeaturePyramid> {
        self.discriminator.features(images, &self.backbone)
    }

    /// One discriminator update followed by one generator update on
    /// `images` (`[B, 3, S, S]` in `[-1, 1]`) paired with `text` (`[B, E]`).
    ///
    /// On a non-finite loss or gradient nothing is changed and the
    /// offending term is reported.
    pub fn train_step(&mut self, images: &Tensor, text: &Tensor) -> Result<StepMetrics> {
        let b = images.shape()[0];
        if text.shape().len() != 2 || text.shape()[0] != b {
            return Err(shape_err("train_step", format!("{b} images for texts {:?}", text.shape())));
        }
        let mismatched = Var::constant(make_mismatch(text)?);
        let text_var = Var::constant(text.clone());
        let obj = self.config.objective();
        let cd = self.config.enable_cd;

        let rng_before = self.rng.clone();
        let d_before = (self.discriminator.params().snapshot(), self.opt_d.clone());
        let outcome = self.try_step(images, &text_var, &mismatched, &obj, cd);
        if outcome.is_err() {
            self.rng = rng_before;
            let (values, opt) = d_before;
            let map: HashMap<String, Tensor> = values.into_iter().collect();
            self.discriminator.params().restore(&map).map_err(Error::Config)?;
            self.opt_d = opt;
        }
        outcome
    }

    fn try_step(
        &mut self,
        images: &Tensor,
        text: &Var,
        mismatched: &Var,
        obj: &ObjectiveConfig,
        cd: bool,
    ) -> Result<StepMetrics> {
        let b = images.shape()[0];
        let noise = Var::constant(self.generator.sample_noise(b, &mut self.rng));
        let fake = self.generator.generate(&noise, text, Some(&self.backbone))?;
        let d = self.update_discriminator(images, &fake, text, mismatched, obj, cd)?;
        let (loss_g, similarity) = self.update_generator(&fake, text, obj)?;
        self.step += 1;
        Ok(StepMetrics { step: self.step, loss_g, similarity, ..d })
    }

    /// Applies one discriminator update; the generator-side fields of the
    /// result are zero.
    fn update_discriminator(
        &mut self,
        images: &Tensor,
        fake: &Var,
        text: &Var,
        mismatched: &Var,
        obj: &ObjectiveConfig,
        cd: bool,
    ) -> Result<StepMetrics> {
        // Backbone features carry no parameters, so they are computed
        // without recording unless the learned stem replaces them.
        let real = Var::constant(images.clone());
        let (real_pyr, fake_pyr) = if cd {
            no_grad(|| Ok::<_, Error>((self.features(&real)?, self.features(&fake.detach())?)))?
        } else {
            (self.features(&real)?, self.features(&fake.detach())?)
        };
        let d = &self.discriminator;
        let penalty = magp(&real_pyr, text, obj, |p, t| d.logits(p, t))?;
        let fake_logits = d.logits(&fake_pyr, text)?;
        let mis_logits = d.logits(&real_pyr, mismatched)?;
        let hinge = hinge_d_loss(&penalty.logits, &fake_logits, &mis_logits)?;
        finite("hinge", hinge.item())?;
        finite("magp", penalty.penalty.item())?;
        let loss_d = hinge.add(&penalty.penalty);
        let grads = grads_of(&loss_d, d.params(), "discriminator gradient")?;
        self.opt_d.step(self.discriminator.params(), &grads);
        Ok(StepMetrics {
            step: self.step,
            loss_d: loss_d.item(),
            hinge: hinge.item(),
            magp: penalty.penalty.item(),
            loss_g: 0.0,
            similarity: 0.0,
            real_logit: penalty.logits.value().mean(),
            fake_logit: fake_logits.value().mean(),
            mismatch_logit: mis_logits.value().mean(),
            grad_norm: penalty.grad_norm_mean,
        })
    }

    /// Applies one generator update against the current discriminator;
    /// returns the loss and the similarity term.
    fn update_generator(&mut self, fake: &Var, text: &Var, obj: &ObjectiveConfig) -> Result<(f64, f64)> {
        let logits = self.discriminator.logits(&self.features(fake)?, text)?;
        let similarity = if obj.lambda > 0.0 {
            clip_similarity(fake, text, &self.backbone)?
        } else {
            no_grad(|| clip_similarity(&fake.detach(), text, &self.backbone))?
        };
        let loss = generator_loss(&logits, &similarity, obj)?;
        finite("generator", loss.item())?;
        let grads = grads_of(&loss, self.generator.params(), "generator gradient")?;
        self.opt_g.step(self.generator.params(), &grads);
        Ok((loss.item(), similarity.item()))
    }

    /// Images for `text` (`[N, E]`) from noise seeded by `seed`, in chunks of `chunk`.
    pub fn sample(&self, text: &Tensor, seed: u64, chunk: usize) -> Result<Tensor> {
        sample_images(&self.generator, Some(&self.backbone), text, seed, chunk)
    }

    /// Writes the full state. `extra` entries land in the file metadata.
    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut tensors = Vec::new();
        let mut put = |prefix: &str, store: &ParamStore, opt: &Adam| {
            let (m, v) = opt.moments();
            for (i, p) in store.params().iter().enumerate() {
                tensors.push((format!("{prefix}.{}", p.name()), p.value()));
                tensors.push((format!("opt_{prefix}.m.{}", p.name()), m[i].clone()));
                tensors.push((format!("opt_{prefix}.v.{}", p.name()), v[i].clone()));
            }
        };
        put("g", self.generator.params(), &self.opt_g);
        put("d", self.discriminator.params(), &self.opt_d);

        let mut meta = extra.clone();
        meta.insert("format".into(), STATE_FORMAT.into());
        meta.insert("train_config".into(), serde_json::to_string(&self.config)?);
        meta.insert("generator_config".into(), serde_json::to_string(self.generator.config())?);
        meta.insert("discriminator_config".into(), serde_json::to_string(self.discriminator.config())?);
        meta.insert("backbone_config".into(), serde_json::to_string(self.backbone.config())?);
        meta.insert("backbone_id".into(), self.backbone.id());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("opt_g_step".into(), self.opt_g.step_count().to_string());
        meta.insert("opt_d_step".into(), self.opt_d.step_count().to_string());
        meta.insert("rng".into(), serde_json::to_string(&self.rng)?);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_tensor_file(path, &tensors, &meta, Dtype::F64)
    }

    /// Restores a state written by [`Trainer::save`], returning its metadata
    /// as well. Without `backbone`, the one named in the stored config is loaded.
    pub fn load(path: &Path, backbone: Option<Arc<Backbone>>) -> Result<(Self, BTreeMap<String, String>)> {
        let file = TensorFile::open(path)?;
        let config: TrainConfig = serde_json::from_str(file.meta("train_config")?)?;
        let backbone = match backbone {
            Some(b) => b,
            None => Arc::new(Backbone::load(&config.backbone_weights, config.backbone_config())?),
        };
        let mut t = Self::new(config, backbone)?;
        let parse = |key: &str| -> Result<u64> {
            file.meta(key)?.parse().map_err(|_| Error::TensorFile {
                path: path.to_path_buf(),
                reason: format!("metadata `{key}` is not an integer"),
            })
        };
        t.step = parse("step")?;
        t.rng = serde_json::from_str(file.meta("rng")?)?;
        let fill = |prefix: &str, store: &ParamStore, opt: &mut Adam, steps: u64| -> Result<()> {
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for p in store.params() {
                let shape = p.shape();
                p.set(file.tensor_shaped(&format!("{prefix}.{}", p.name()), &shape)?);
                m.push(file.tensor_shaped(&format!("opt_{prefix}.m.{}", p.name()), &shape)?);
                v.push(file.tensor_shaped(&format!("opt_{prefix}.v.{}", p.name()), &shape)?);
            }
            opt.set_state(steps, m, v);
            Ok(())
        };
        fill("g", t.generator.params(), &mut t.opt_g, parse("opt_g_step")?)?;
        fill("d", t.discriminator.params(), &mut t.opt_d, parse("opt_d_step")?)?;
        Ok((t, file.metadata().clone()))
    }
}

/// Seeded, unrecorded generation in chunks; noise rows are drawn in order
/// from one stream, so results do not depend on `chunk`.
pub fn sample_images(
    generator: &Generator,
    backbone: Option<&Backbone>,
    text: &Tensor,
    seed: u64,
    chunk: usize,
) -> Result<Tensor> {
    let n = text.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = generator.sample_noise(n, &mut rng);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = chunk.max(1).min(n - start);
        let z = Var::constant(noise.narrow(0, start, len));
        let t = Var::constant(text.narrow(0, start, len));
        parts.push(no_grad(|| generator.generate(&z, &t, backbone))?.value().clone());
        start += len;
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::concat(&refs, 0))
}

/// The generator half of a saved state, for inference.
pub struct GeneratorCheckpoint {
    pub generator: Generator,
    pub config: TrainConfig,
    pub step: u64,
    /// Content hash prefix of the file.
    pub id: String,
}

impl GeneratorCheckpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::WeightsNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let id: String = Sha256::digest(&bytes).iter().take(6).map(|b| format!("{b:02x}")).collect();
        let file = TensorFile::open(path)?;
        let config: TrainConfig = serde_json::from_str(file.meta("train_config")?)?;
        let gcfg: GeneratorConfig = serde_json::from_str(file.meta("generator_config")?)?;
        let bb: BackboneConfig = serde_json::from_str(file.meta("backbone_config")?)?;
        let generator = Generator::new(gcfg, &bb, config.seed)?;
        for p in generator.params().params() {
            p.set(file.tensor_shaped(&format!("g.{}", p.name()), &p.shape())?);
        }
        let step = file.meta("step")?.parse().unwrap_or(0);
        Ok(Self { generator, config, step, id })
    }

    /// Loads the backbone named in the stored config.
    pub fn load_backbone(&self) -> Result<Backbone> {
        Backbone::load(&self.config.backbone_weights, self.generator.backbone_config().clone())
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    #[serde(flatten)]
    pub metrics: StepMetrics,
    pub unix_ms: u128,
    pub elapsed_s: f64,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("step_{step:07}.safetensors"))
}

/// Runs `trainer` until `config.max_steps`, writing `config.toml`,
/// `metrics.jsonl` (appended) and step-named checkpoints under `out_dir`.
/// Returns the path of the final checkpoint.
pub fn run_training(
    trainer: &mut Trainer,
    data: &Dataset,
    batches: &mut BatchIter,
    out_dir: &Path,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), trainer.config().to_toml())?;
    let mut log = OpenOptions::new().create(true).append(true).open(out_dir.join("metrics.jsonl"))?;
    let started = Instant::now();
    let every = trainer.config().checkpoint_every;
    let max = trainer.config().max_steps;
    let save = |t: &Trainer, it: &BatchIter| -> Result<PathBuf> {
        let path = checkpoint_path(out_dir, t.step());
        let extra = BTreeMap::from([("batch_iter".to_string(), serde_json::to_string(it)?)]);
        t.save(&path, &extra)?;
        Ok(path)
    };
    while trainer.step() < max {
        let batch = batches.next_batch(data);
        let text = trainer.embed_captions(&batch.captions)?;
        let m = trainer.train_step(&batch.images, &text)?;
        let unix_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        let rec = MetricRecord { metrics: m.clone(), unix_ms, elapsed_s: started.elapsed().as_secs_f64() };
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        on_step(&m);
        if every > 0 && m.step % every == 0 && m.step < max {
            save(trainer, batches)?;
        }
    }
    save(trainer, batches)
}

/// Restores a run from a checkpoint written by [`run_training`].
pub fn resume_training(path: &Path, data_len: usize) -> Result<(Trainer, BatchIter)> {
    let (trainer, meta) = Trainer::load(path, None)?;
    let batches = match meta.get("batch_iter") {
        Some(s) => serde_json::from_str(s)?,
        None => BatchIter::new(data_len, trainer.config().effective_batch_size(), trainer.config().seed)?,
    };
    Ok((trainer, batches))
}

#[cfg(test)]
mod tests;
