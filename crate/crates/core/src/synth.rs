//! Seeded toy RGB-D scenes: a textured background with one elliptical
//! object that differs in colour and sits closer to the camera.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    /// `(height, width)` of each scene.
    pub size: (usize, usize),
    pub seed: u64,
}

/// One generated scene, before encoding.
pub struct Scene {
    pub rgb: RgbImage,
    /// 16-bit depth; larger means nearer.
    pub depth: ImageBuffer<Luma<u16>, Vec<u16>>,
    pub gt: GrayImage,
}

pub fn scene(size: (usize, usize), seed: u64) -> Scene {
    let (h, w) = (size.0 as u32, size.1 as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cy = rng.random_range(0.3..0.7) * h as f64;
    let cx = rng.random_range(0.3..0.7) * w as f64;
    let ry = rng.random_range(0.15..0.3) * h as f64;
    let rx = rng.random_range(0.15..0.3) * w as f64;
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let bg = [rng.random_range(20.0..90.0), rng.random_range(60.0..140.0), rng.random_range(120.0..220.0)];
    let fg = [rng.random_range(190.0..250.0), rng.random_range(60.0..160.0), rng.random_range(10.0..60.0)];
    let stripes = rng.random_range(4.0..10.0);
    let far = rng.random_range(0.1..0.3);
    let near = rng.random_range(0.7..0.9);
    let (sin, cos) = angle.sin_cos();

    let inside = |x: u32, y: u32| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let u = (dx * cos + dy * sin) / rx;
        let v = (-dx * sin + dy * cos) / ry;
        u * u + v * v <= 1.0
    };
    let noise: Vec<f64> = (0..(h * w)).map(|_| rng.random_range(-12.0..12.0)).collect();
    let px = |c: f64| c.clamp(0.0, 255.0) as u8;

    let rgb = RgbImage::from_fn(w, h, |x, y| {
        let n = noise[(y * w + x) as usize];
        if inside(x, y) {
            Rgb([px(fg[0] + n), px(fg[1] + n), px(fg[2] + n)])
        } else {
            let t = ((x as f64 / w as f64) * stripes * std::f64::consts::TAU).sin() * 20.0;
            Rgb([px(bg[0] + t + n), px(bg[1] + n), px(bg[2] - t + n)])
        }
    });
    let depth = ImageBuffer::from_fn(w, h, |x, y| {
        let ramp = y as f64 / h as f64 * 0.1;
        let d = if inside(x, y) { near } else { far + ramp };
        Luma([(d * 65535.0) as u16])
    });
    let gt = GrayImage::from_fn(w, h, |x, y| Luma([if inside(x, y) { 255 } else { 0 }]));
    Scene { rgb, depth, gt }
}

/// Writes `spec.count` scenes as `<root>/{rgb,depth,gt}/sample_NNN.png` and
/// returns the ids.
pub fn write_dataset(root: &Path, spec: SynthSpec) -> Result<Vec<String>> {
    for d in ["rgb", "depth", "gt"] {
        let dir = root.join(d);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut ids = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let id = format!("sample_{i:03}");
        let s = scene(spec.size, spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let file = format!("{id}.png");
        let p = root.join("rgb").join(&file);
        s.rgb.save(&p).map_err(|e| Error::image(&p, e))?;
        let p = root.join("depth").join(&file);
        s.depth.save(&p).map_err(|e| Error::image(&p, e))?;
        let p = root.join("gt").join(&file);
        s.gt.save(&p).map_err(|e| Error::image(&p, e))?;
        ids.push(id);
    }
    Ok(ids)
}
