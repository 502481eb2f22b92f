//! Binary PPM (P6) and PGM (P5) conversion for image and mask tensors.

use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(path: &Path, bytes: &[u8], w: usize, h: usize, subtype: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(f))
        .with_subtype(subtype)
        .write_image(bytes, w as u32, h as u32, color)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

/// Writes `[3 × H × W]` in `[0, 1]` as P6.
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    if img.rank() != 3 || img.dims()[0] != 3 {
        return Err(Error::Shape(format!("expected [3, H, W], got {:?}", img.dims())));
    }
    let (h, w) = (img.dims()[1], img.dims()[2]);
    let d = img.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push(quantize(d[c * h * w + i] as f64));
        }
    }
    encode(path, &bytes, w, h, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}

/// Writes `[H × W]` in `[0, 1]` as P5.
pub fn write_pgm(path: &Path, mask: &Tensor<f64>) -> Result<()> {
    let (h, w) = mask.shape2()?;
    let bytes: Vec<u8> = mask.data().iter().map(|&v| quantize(v)).collect();
    encode(path, &bytes, w, h, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

/// Reads any PNM as `[3 × H × W]` in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Tensor::new([3, h, w], (0..3 * h * w).map(|k| raw[(k % (h * w)) * 3 + k / (h * w)] as f32 / 255.0).collect())
}

/// Reads any PNM as a grayscale `[H × W]` in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor<f64>> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new([h, w], img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
}
