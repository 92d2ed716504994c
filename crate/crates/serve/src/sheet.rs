use image::{ImageEncoder, Rgb, RgbImage};

use crate::error::ServeResult;

/// Tiles equally sized images row-major into one sheet with `gap` white
/// pixels between cells.
pub fn tile(images: &[RgbImage], rows: usize, cols: usize, gap: u32) -> RgbImage {
    assert_eq!(images.len(), rows * cols, "one image per cell");
    let (w, h) = images[0].dimensions();
    let (rows, cols) = (rows as u32, cols as u32);
    let mut sheet = RgbImage::from_pixel(cols * w + (cols - 1) * gap, rows * h + (rows - 1) * gap, Rgb([255, 255, 255]));
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i as u32 / cols, i as u32 % cols);
        image::imageops::replace(&mut sheet, img, (c * (w + gap)) as i64, (r * (h + gap)) as i64);
    }
    sheet
}

pub fn png_bytes(img: &RgbImage) -> ServeResult<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(out)
}
