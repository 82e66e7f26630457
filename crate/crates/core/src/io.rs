//! Image and template-bundle files.
//!
//! Grayscale PNG (8 or 16 bit) and PGM are read with intensities scaled to
//! `[0, 1]`. PNG output is 8-bit with intensities min-max rescaled to
//! `[0, 255]`.

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, Luma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{SubWindow, Template};

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let reader = ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let dynamic = reader.decode().map_err(|e| Error::decode(path, e))?;
    Ok(from_dynamic(&dynamic))
}

fn from_dynamic(img: &DynamicImage) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => {
            Image::new(h, w, g.as_raw().iter().map(|&v| v as f32 / 255.0).collect())
        }
        _ => {
            let g16 = img.to_luma16();
            Image::new(h, w, g16.as_raw().iter().map(|&v| v as f32 / 65535.0).collect())
        }
    }
    .expect("decoded image has consistent dimensions")
}

/// 8-bit rendering with intensities min-max rescaled to `[0, 255]`.
pub fn to_gray8(img: &Image) -> GrayImage {
    let (lo, hi) = img.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    GrayImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let v = (img.get(y as usize, x as usize) - lo) / span;
        Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    to_gray8(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::decode(path, e))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TemplateMeta {
    f: f64,
    red: [f64; 4],
    green: [f64; 4],
}

/// Reads `dir/patch.png` and `dir/template.json`.
pub fn load_template(dir: impl AsRef<Path>) -> Result<Template> {
    let dir = dir.as_ref();
    let patch_path = dir.join("patch.png");
    let meta_path = dir.join("template.json");
    if !patch_path.exists() {
        return Err(Error::io(
            &patch_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing template patch"),
        ));
    }
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: TemplateMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::decode(&meta_path, e))?;
    let patch = load_image(&patch_path)?;
    let t = Template::new(
        patch,
        SubWindow::from_array(meta.red),
        SubWindow::from_array(meta.green),
    )?;
    if (t.f() - meta.f).abs() > 1e-6 {
        return Err(Error::decode(
            &meta_path,
            format!("aspect {} does not match patch aspect {}", meta.f, t.f()),
        ));
    }
    Ok(t)
}

pub fn save_template(t: &Template, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_png(t.patch(), dir.join("patch.png"))?;
    let meta = TemplateMeta {
        f: t.f(),
        red: t.red().to_array(),
        green: t.green().to_array(),
    };
    let path = dir.join("template.json");
    let text = serde_json::to_string_pretty(&meta).expect("template metadata serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Hex SHA-256 over the template's shape, sub-windows and intensities.
pub fn template_hash(t: &Template) -> String {
    let mut h = Sha256::new();
    h.update((t.height() as u64).to_le_bytes());
    h.update((t.width() as u64).to_le_bytes());
    for v in t.red().to_array().iter().chain(t.green().to_array().iter()) {
        h.update(v.to_le_bytes());
    }
    for v in t.patch().data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes a JSON value with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::decode(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::decode(path, e))
}
