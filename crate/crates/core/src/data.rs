//! Caption/image datasets: line-delimited manifests, deterministic image
//! preprocessing, seeded batch iteration, and manifest converters.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use galip_autograd::Tensor;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{TokenIds, Tokenizer};
use crate::error::{Error, Result};

pub mod toy;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Image path, relative to the manifest's directory unless absolute.
    pub image: String,
    pub captions: Vec<String>,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: &str) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Writes one JSON record per line.
    pub fn write(path: &Path, records: &[ManifestRecord]) -> Result<()> {
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Parses and validates a manifest. Errors carry the 1-based line number.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut manifest = DatasetManifest { root, records: Vec::new() };
    let mut split_of: HashMap<PathBuf, (String, usize)> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| Error::Manifest { path: path.to_path_buf(), line: line_no, reason };
        let record: ManifestRecord = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        if record.captions.is_empty() {
            return Err(fail("caption list is empty".into()));
        }
        if record.captions.iter().any(|c| c.trim().is_empty()) {
            return Err(fail("blank caption".into()));
        }
        let resolved = manifest.resolve(&record);
        if !resolved.is_file() {
            return Err(fail(format!("image {} does not exist", resolved.display())));
        }
        if let Some((other, at)) = split_of.get(&resolved) {
            if *other != record.split {
                return Err(fail(format!("image also listed in split `{other}` at line {at}")));
            }
        }
        split_of.insert(resolved, (record.split.clone(), line_no));
        manifest.records.push(record);
    }
    Ok(manifest)
}

/// Pixel value range of a preprocessed image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelRange {
    /// `[-1, 1]`, the generator's output range.
    Symmetric,
    /// The backbone's normalized color space.
    Backbone,
}

/// Decodes an image file and preprocesses it to `[3, size, size]`.
pub fn preprocess(path: &Path, size: usize, range: PixelRange) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(preprocess_rgb(&img.to_rgb8(), size, range))
}

/// Center-crops to a square on the shorter side, resizes bilinearly to
/// `size` and maps `[0, 255]` onto the requested range.
pub fn preprocess_rgb(img: &RgbImage, size: usize, range: PixelRange) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let side = w.min(h);
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    let scale = side as f64 / size as f64;
    let sample = |c: usize, y: f64, x: f64| -> f64 {
        // Half-pixel centers, clamped at the crop border.
        let fy = ((y + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let fx = ((x + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let (iy1, ix1) = ((iy + 1).min(side - 1), (ix + 1).min(side - 1));
        let (ty, tx) = (fy - iy as f64, fx - ix as f64);
        let px = |yy: usize, xx: usize| img.get_pixel((x0 + xx) as u32, (y0 + yy) as u32).0[c] as f64;
        let top = px(iy, ix) * (1.0 - tx) + px(iy, ix1) * tx;
        let bottom = px(iy1, ix) * (1.0 - tx) + px(iy1, ix1) * tx;
        top * (1.0 - ty) + bottom * ty
    };
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                data.push(sample(c, y as f64, x as f64) / 127.5 - 1.0);
            }
        }
    }
    let t = Tensor::new(vec![3, size, size], data);
    match range {
        PixelRange::Symmetric => t,
        PixelRange::Backbone => crate::backbone::to_backbone_space(&galip_autograd::Var::constant(t.reshape(vec![1, 3, size, size])))
            .value()
            .reshape(vec![3, size, size]),
    }
}

/// Converts a `[3, S, S]` image in `[-1, 1]` to 8-bit RGB.
pub fn to_rgb8(t: &Tensor) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| {
            let v = d[c * h * w + y as usize * w + x as usize];
            ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    })
}

/// Preprocessed images with their caption lists, held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub captions: Vec<Vec<String>>,
}

impl Dataset {
    pub fn from_manifest(manifest: &DatasetManifest, split: &str, size: usize) -> Result<Self> {
        let mut ds = Dataset { images: Vec::new(), captions: Vec::new() };
        for r in manifest.split(split) {
            ds.images.push(preprocess(&manifest.resolve(r), size, PixelRange::Symmetric)?);
            ds.captions.push(r.captions.clone());
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks images `indices` into `[B, 3, S, S]`.
    pub fn stack(&self, indices: &[usize]) -> Tensor {
        let parts: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                let mut shape = vec![1];
                shape.extend_from_slice(self.images[i].shape());
                self.images[i].reshape(shape)
            })
            .collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat(&refs, 0)
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[B, 3, S, S]` in `[-1, 1]`.
    pub images: Tensor,
    /// One caption per image, drawn uniformly from its list.
    pub captions: Vec<String>,
}

impl Batch {
    pub fn tokens(&self, tokenizer: &dyn Tokenizer) -> Vec<TokenIds> {
        self.captions.iter().map(|c| tokenizer.encode(c)).collect()
    }
}

/// Infinite seeded batch stream: a fresh permutation per epoch, the tail
/// that does not fill a batch dropped, one caption drawn per image from the
/// same random stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchIter {
    len: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl BatchIter {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > len {
            return Err(Error::InvalidArgument(format!("batch size {batch_size} for a split of {len} records")));
        }
        Ok(Self { len, batch_size, rng: ChaCha8Rng::seed_from_u64(seed), order: Vec::new(), cursor: len, epoch: 0 })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Indices of the next batch plus the caption index drawn for each.
    pub fn next_indices(&mut self, caption_counts: impl Fn(usize) -> usize) -> Vec<(usize, usize)> {
        if self.cursor + self.batch_size > self.order.len() {
            self.order = (0..self.len).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let picked = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        picked.into_iter().map(|i| (i, self.rng.gen_range(0..caption_counts(i)))).collect()
    }

    pub fn next_batch(&mut self, ds: &Dataset) -> Batch {
        let picks = self.next_indices(|i| ds.captions[i].len());
        let indices: Vec<usize> = picks.iter().map(|p| p.0).collect();
        Batch {
            images: ds.stack(&indices),
            captions: picks.iter().map(|&(i, c)| ds.captions[i][c].clone()).collect(),
            indices,
        }
    }
}

/// Builds manifest records from a COCO-style caption annotation file
/// (`images[].{id, file_name}`, `annotations[].{image_id, caption}`).
/// Image paths are joined onto `image_dir`.
pub fn convert_coco(annotations: &Path, image_dir: &str, split: &str) -> Result<Vec<ManifestRecord>> {
    #[derive(Deserialize)]
    struct Img {
        id: u64,
        file_name: String,
    }
    #[derive(Deserialize)]
    struct Ann {
        image_id: u64,
        caption: String,
    }
    #[derive(Deserialize)]
    struct Coco {
        images: Vec<Img>,
        annotations: Vec<Ann>,
    }
    let coco: Coco = serde_json::from_str(&fs::read_to_string(annotations)?)?;
    let mut caps: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for a in coco.annotations {
        caps.entry(a.image_id).or_default().push(a.caption.trim().to_string());
    }
    Ok(coco
        .images
        .into_iter()
        .filter_map(|img| {
            let captions = caps.remove(&img.id)?;
            let image = if image_dir.is_empty() { img.file_name } else { format!("{image_dir}/{}", img.file_name) };
            Some(ManifestRecord { image, captions, split: split.to_string() })
        })
        .collect())
}

/// Builds manifest records from a folder where each image `name.ext` sits
/// next to `name.txt` holding one caption per line. Paths are relative to `dir`.
pub fn convert_folder(dir: &Path, split: &str) -> Result<Vec<ManifestRecord>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    let mut out = Vec::new();
    for p in entries {
        let is_image = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"));
        if !is_image {
            continue;
        }
        let Ok(text) = fs::read_to_string(p.with_extension("txt")) else { continue };
        let captions: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        if captions.is_empty() {
            continue;
        }
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        out.push(ManifestRecord { image: name, captions, split: split.to_string() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
