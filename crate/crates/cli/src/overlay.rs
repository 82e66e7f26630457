//! Rotated-rectangle overlays on grayscale images.

use image::{Rgb, RgbImage};
use jointmatch::detection::PixelQuad;
use jointmatch::io::to_gray8;
use jointmatch::Image;

pub const LEFT_COLOR: [u8; 3] = [255, 40, 40];
pub const RIGHT_COLOR: [u8; 3] = [40, 255, 40];

fn plot(img: &mut RgbImage, x: f64, y: f64, color: [u8; 3]) {
    let (xi, yi) = (x.round(), y.round());
    if xi >= 0.0 && yi >= 0.0 && (xi as u32) < img.width() && (yi as u32) < img.height() {
        img.put_pixel(xi as u32, yi as u32, Rgb(color));
    }
}

fn line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], color: [u8; 3]) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        plot(img, a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), color);
    }
}

/// Renders `img` in gray and outlines each quad (pixel `[x, y]` corners) in
/// its color.
pub fn draw_quads(img: &Image, quads: &[(PixelQuad, [u8; 3])]) -> RgbImage {
    let gray = to_gray8(img);
    let mut out = RgbImage::from_fn(gray.width(), gray.height(), |x, y| {
        let v = gray.get_pixel(x, y)[0];
        Rgb([v, v, v])
    });
    for (quad, color) in quads {
        for k in 0..4 {
            line(&mut out, quad[k], quad[(k + 1) % 4], *color);
        }
    }
    out
}
