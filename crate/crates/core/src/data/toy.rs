//! Synthetic caption/image set: one solid shape per image on a dark
//! background, captioned from templates.

use galip_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;

pub const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.85, -0.7, -0.7]),
    ("green", [-0.7, 0.75, -0.6]),
    ("blue", [-0.7, -0.4, 0.85]),
    ("yellow", [0.85, 0.7, -0.75]),
];

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];

const BACKGROUND: f64 = -0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub count: usize,
    /// Number of colors used, from the front of [`COLORS`].
    pub colors: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { count: 256, colors: 4, image_size: 32, seed: 0 }
    }
}

fn inside(shape: &str, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        // Apex up; base at dy = r.
        "triangle" => dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5,
        "cross" => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
        _ => false,
    }
}

/// Image `i` cycles through colors first, then shapes; size and position
/// are drawn from the seeded stream.
pub fn dataset(cfg: ToyConfig) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.image_size as f64;
    let mut ds = Dataset { images: Vec::with_capacity(cfg.count), captions: Vec::with_capacity(cfg.count) };
    for i in 0..cfg.count {
        let (color, rgb) = COLORS[i % cfg.colors];
        let shape = SHAPES[(i / cfg.colors) % SHAPES.len()];
        let r = s * rng.gen_range(0.2..0.34);
        let cx = rng.gen_range(r..s - r);
        let cy = rng.gen_range(r..s - r);
        let n = cfg.image_size;
        let mut data = vec![BACKGROUND; 3 * n * n];
        for y in 0..n {
            for x in 0..n {
                if inside(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                    for c in 0..3 {
                        data[c * n * n + y * n + x] = rgb[c];
                    }
                }
            }
        }
        let size = if r < s * 0.27 { "small" } else { "large" };
        ds.images.push(Tensor::new(vec![3, n, n], data));
        ds.captions.push(vec![
            format!("a {color} {shape}"),
            format!("a {size} {color} {shape}"),
            format!("a {color} {shape} on a dark background"),
        ]);
    }
    ds
}
