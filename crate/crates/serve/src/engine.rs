//! Seeded inference on one loaded generator snapshot.

use std::path::Path;
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use galip_autograd::nn::cosine_rows;
use galip_autograd::{no_grad, Tensor, Var};
use galip_core::backbone::to_backbone_space;
use galip_core::data::to_rgb8;
use galip_core::trainer::GeneratorCheckpoint;
use galip_core::{Backbone, Generator};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::AnchorCache;
use crate::api::*;
use crate::error::{ServeError, ServeResult};
use crate::interp::{axis_coord, interp_embedding};
use crate::sheet::png_bytes;

/// Largest seed the server draws itself; it survives a round trip through
/// clients that store numbers as doubles.
const MAX_DRAWN_SEED: u64 = (1 << 53) - 1;

pub struct Engine {
    generator: Generator,
    backbone: Backbone,
    checkpoint_id: String,
    anchors: AnchorCache,
    /// Serializes inference; responses do not depend on arrival order.
    queue: Mutex<()>,
}

impl Engine {
    pub fn new(generator: Generator, backbone: Backbone, checkpoint_id: String, anchor_capacity: usize) -> Self {
        Self { generator, backbone, checkpoint_id, anchors: AnchorCache::new(anchor_capacity), queue: Mutex::new(()) }
    }

    /// Loads a training checkpoint and the backbone it names.
    pub fn load(path: &Path, anchor_capacity: usize) -> ServeResult<Self> {
        let ck = GeneratorCheckpoint::load(path)?;
        let backbone = ck.load_backbone()?;
        let id = format!("{}@{}", ck.id, ck.step);
        Ok(Self::new(ck.generator, backbone, id, anchor_capacity))
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    pub fn backbone_id(&self) -> String {
        self.backbone.id()
    }

    pub fn anchors(&self) -> &AnchorCache {
        &self.anchors
    }

    pub fn embed(&self, prompt: &str) -> ServeResult<Vec<f64>> {
        Ok(self.backbone.encode_captions(&[prompt])?.value().to_vec())
    }

    /// `n` noise rows drawn in order from the stream seeded by `seed`.
    pub fn noise(&self, seed: u64, n: usize) -> Tensor {
        self.generator.sample_noise(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// One image per (embedding, noise row), each generated on its own so
    /// results do not depend on how requests group them.
    pub fn render(&self, embeddings: &[Vec<f64>], noise: &Tensor) -> ServeResult<Vec<Tensor>> {
        let _turn = self.queue.lock().map_err(|_| ServeError::Worker("inference queue poisoned".into()))?;
        let nd = noise.shape()[1];
        embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let z = Var::constant(noise.narrow(0, i, 1).reshape(vec![1, nd]));
                let t = Var::constant(Tensor::new(vec![1, e.len()], e.clone()));
                let img = no_grad(|| self.generator.generate(&z, &t, Some(&self.backbone)))?;
                let s = img.shape().to_vec();
                Ok(img.value().reshape(vec![s[1], s[2], s[3]]))
            })
            .collect()
    }

    /// Cosine similarity between the image embedding of `image` (`[3, S, S]`) and `text`.
    pub fn similarity(&self, image: &Tensor, text: &[f64]) -> ServeResult<f64> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let x = Var::constant(image.reshape(shape));
        let emb = no_grad(|| self.backbone.encode_image(&to_backbone_space(&x)))?;
        let t = Var::constant(Tensor::new(vec![1, text.len()], text.to_vec()));
        Ok(no_grad(|| cosine_rows(&emb, &t)).item())
    }

    fn seed(requested: Option<u64>) -> u64 {
        requested.unwrap_or_else(|| rand::thread_rng().gen_range(0..=MAX_DRAWN_SEED))
    }

    pub fn generate(&self, req: &GenerateRequest) -> ServeResult<GenerateResponse> {
        if req.count == 0 || req.count > MAX_COUNT {
            return Err(ServeError::BadRequest(format!("count must be between 1 and {MAX_COUNT}, got {}", req.count)));
        }
        let seed = Self::seed(req.seed);
        let emb = self.embed(&req.prompt)?;
        let anchor_id = self.anchors.insert(emb.clone());
        let images = self.render(&vec![emb.clone(); req.count], &self.noise(seed, req.count))?;
        let similarities = images.iter().map(|img| self.similarity(img, &emb)).collect::<ServeResult<_>>()?;
        Ok(GenerateResponse {
            checkpoint_id: self.checkpoint_id.clone(),
            seed,
            anchor_id,
            images: images.iter().map(encode_png).collect::<ServeResult<_>>()?,
            similarities,
        })
    }

    fn resolve(&self, corner: &Corner) -> ServeResult<(String, Vec<f64>)> {
        match corner {
            Corner::Prompt { prompt } => {
                let e = self.embed(prompt)?;
                Ok((self.anchors.insert(e.clone()), e))
            }
            Corner::Anchor { anchor } => {
                let h = self.anchors.get(anchor).ok_or_else(|| ServeError::UnknownAnchor(anchor.clone()))?;
                Ok((h.id.clone(), h.embedding.clone()))
            }
        }
    }

    pub fn grid(&self, req: &GridRequest) -> ServeResult<GridResponse> {
        for (name, n) in [("rows", req.rows), ("cols", req.cols)] {
            if !GRID_SIDE.contains(&n) {
                return Err(ServeError::BadRequest(format!(
                    "{name} must be between {} and {}, got {n}",
                    GRID_SIDE.start(),
                    GRID_SIDE.end()
                )));
            }
        }
        let seed = Self::seed(req.seed);
        let resolved = req.corners.iter().map(|c| self.resolve(c)).collect::<ServeResult<Vec<_>>>()?;
        let c: [&[f64]; 4] = [&resolved[0].1, &resolved[1].1, &resolved[2].1, &resolved[3].1];
        let n = req.rows * req.cols;
        let mut cells = Vec::with_capacity(n);
        let mut embeddings = Vec::with_capacity(n);
        for row in 0..req.rows {
            for col in 0..req.cols {
                let (u, v) = (axis_coord(col, req.cols), axis_coord(row, req.rows));
                let e = interp_embedding(c, u, v)?;
                cells.push((row, col, u, v, self.anchors.insert(e.clone())));
                embeddings.push(e);
            }
        }
        let noise = if req.share_noise {
            let z = self.noise(seed, 1);
            let nd = z.shape()[1];
            z.broadcast_to(&[n, nd])
        } else {
            self.noise(seed, n)
        };
        let images = self.render(&embeddings, &noise)?;
        Ok(GridResponse {
            checkpoint_id: self.checkpoint_id.clone(),
            seed,
            rows: req.rows,
            cols: req.cols,
            corner_anchor_ids: [0, 1, 2, 3].map(|i| resolved[i].0.clone()),
            cells: cells
                .into_iter()
                .zip(&images)
                .map(|((row, col, u, v, anchor_id), img)| {
                    Ok(GridCell { row, col, u, v, anchor_id, image: encode_png(img)? })
                })
                .collect::<ServeResult<_>>()?,
        })
    }

    pub fn interpolate(&self, req: &InterpolateRequest) -> ServeResult<InterpolateResponse> {
        if !(2..=MAX_STEPS).contains(&req.steps) {
            return Err(ServeError::BadRequest(format!("steps must be between 2 and {MAX_STEPS}, got {}", req.steps)));
        }
        let seed = Self::seed(req.seed);
        let (a, b) = (self.embed(&req.prompt_a)?, self.embed(&req.prompt_b)?);
        let mut ts = Vec::with_capacity(req.steps);
        let mut embeddings = Vec::with_capacity(req.steps);
        for i in 0..req.steps {
            let t = axis_coord(i, req.steps);
            embeddings.push(interp_embedding([&a, &b, &a, &b], t, 0.0)?);
            ts.push(t);
        }
        let z = self.noise(seed, 1);
        let nd = z.shape()[1];
        let images = self.render(&embeddings, &z.broadcast_to(&[req.steps, nd]))?;
        let frames = ts
            .into_iter()
            .zip(embeddings)
            .zip(&images)
            .map(|((t, e), img)| Ok(Frame { t, anchor_id: self.anchors.insert(e), image: encode_png(img)? }))
            .collect::<ServeResult<_>>()?;
        Ok(InterpolateResponse { checkpoint_id: self.checkpoint_id.clone(), seed, frames })
    }
}

pub fn encode_png(t: &Tensor) -> ServeResult<String> {
    Ok(B64.encode(png_bytes(&to_rgb8(t))?))
}

pub fn decode_png(b64: &str) -> ServeResult<RgbImage> {
    let bytes = B64.decode(b64).map_err(|e| ServeError::BadRequest(format!("invalid base-64 image: {e}")))?;
    Ok(image::load_from_memory(&bytes)?.to_rgb8())
}
