//! Procedurally rendered vehicle images with controlled attributes.
//!
//! Render rules, per image of identity `i` captured by camera `c`:
//! - grey background;
//! - a silhouette whose outline is fixed by `type_id`, filled with a hue fixed by `color_id`;
//! - a 4 × 4 binary glyph in the middle of the silhouette, unique per `vehicle_id`;
//! - a brightness offset of `CAMERA_OFFSET · c` added to every channel;
//! - optional Gaussian pixel noise.
//!
//! Every identity has one colour and one type, assigned cyclically so each
//! attribute value is used, and its images cycle through the cameras.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{save_manifest, Dataset, VehicleRecord};
use crate::error::{Error, Result};

/// Per-camera brightness step, in 8-bit levels.
pub const CAMERA_OFFSET: u8 = 6;
pub const BACKGROUND: u8 = 110;
const GLYPH_ON: u8 = 220;
const GLYPH_OFF: u8 = 25;
const GLYPH_CELLS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub num_colors: usize,
    pub num_types: usize,
    pub num_cameras: usize,
    pub image_side: usize,
    /// Standard deviation of the pixel noise, as a fraction of full scale.
    pub noise_std: f64,
    pub seed: u64,
    /// Identity ids start here; lets separate calls produce disjoint ids.
    pub first_identity: u32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_identities: 8,
            images_per_identity: 4,
            num_colors: 3,
            num_types: 2,
            num_cameras: 4,
            image_side: 32,
            noise_std: 0.0,
            seed: 0,
            first_identity: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("synth.num_identities", self.num_identities),
            ("synth.images_per_identity", self.images_per_identity),
            ("synth.num_colors", self.num_colors),
            ("synth.num_types", self.num_types),
            ("synth.num_cameras", self.num_cameras),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.image_side < 2 * GLYPH_CELLS {
            return Err(Error::Config(format!("synth.image_side must be at least {}", 2 * GLYPH_CELLS)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("synth.noise_std must be >= 0".into()));
        }
        if self.num_identities as u64 + self.first_identity as u64 > 1 << 16 {
            return Err(Error::Config("synthetic glyphs support at most 65536 identities".into()));
        }
        Ok(())
    }

    pub fn color_of(&self, identity: u32) -> u32 {
        identity % self.num_colors as u32
    }

    pub fn type_of(&self, identity: u32) -> u32 {
        (identity / self.num_colors as u32) % self.num_types as u32
    }

    pub fn camera_of(&self, identity: u32, image_index: usize) -> u32 {
        ((identity as usize + image_index) % self.num_cameras) as u32
    }
}

pub struct SyntheticData {
    pub dataset: Dataset,
    pub images: Vec<RgbImage>,
}

impl SyntheticData {
    /// Writes one PNG per record plus `manifest.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (r, img) in self.dataset.records().iter().zip(&self.images) {
            let path = dir.join(&r.image_path);
            img.save(&path).map_err(|source| Error::Image { path, source })?;
        }
        save_manifest(&dir.join("manifest.csv"), self.dataset.records())
    }
}

/// Body colour of attribute `color` among `num_colors` evenly spaced hues.
pub fn palette(color: u32, num_colors: usize) -> [u8; 3] {
    let hue = color as f64 / num_colors as f64 * 6.0;
    let (s, v) = (0.8, 0.75);
    let c = v * s;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r, g, b) = match hue as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to8 = |u: f64| ((u + m) * 255.0).round() as u8;
    [to8(r), to8(g), to8(b)]
}

/// 16-bit glyph code of an identity. Multiplication by an odd constant is a
/// bijection modulo 2^16, so distinct identities get distinct glyphs.
pub fn glyph_code(identity: u32) -> u16 {
    (identity as u16).wrapping_mul(0x9E37) ^ 0x5A5A
}

/// Whether normalized coordinates `(u, v)` in [0, 1)² fall inside the
/// silhouette of `vehicle_type`. Every outline covers the central glyph area.
pub fn silhouette(vehicle_type: u32, u: f64, v: f64) -> bool {
    let stretch = 0.04 * (vehicle_type / 4) as f64;
    match vehicle_type % 4 {
        // sedan: long low body plus a cabin
        0 => {
            let body = (0.08..0.92).contains(&u) && (0.36 - stretch..0.74).contains(&v);
            let cabin = (0.28..0.72).contains(&u) && (0.2 - stretch..0.36).contains(&v);
            body || cabin
        }
        // van: tall box
        1 => (0.2..0.8).contains(&u) && (0.12 - stretch..0.86).contains(&v),
        // hatchback: trapezoid narrowing towards the roof
        2 => {
            let top = 0.22 - stretch;
            if !(top..0.8).contains(&v) {
                return false;
            }
            let inset = 0.3 * (0.8 - v) / (0.8 - top);
            (0.1 + inset..0.9 - inset * 0.3).contains(&u)
        }
        // compact: ellipse
        _ => {
            let du = (u - 0.5) / (0.4 + stretch);
            let dv = (v - 0.5) / 0.3;
            du * du + dv * dv <= 1.0
        }
    }
}

/// Noise-free rendering of one image.
pub fn render(spec: &SyntheticSpec, identity: u32, camera: u32) -> RgbImage {
    let side = spec.image_side;
    let body = palette(spec.color_of(identity), spec.num_colors);
    let vtype = spec.type_of(identity);
    let code = glyph_code(identity);
    let cell = (side / (4 * GLYPH_CELLS)).max(1);
    let glyph_side = cell * GLYPH_CELLS;
    let g0 = (side - glyph_side) / 2;
    let offset = CAMERA_OFFSET.saturating_mul(camera.min(u8::MAX as u32) as u8);

    RgbImage::from_fn(side as u32, side as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let u = (x as f64 + 0.5) / side as f64;
        let v = (y as f64 + 0.5) / side as f64;
        let base = if (g0..g0 + glyph_side).contains(&x) && (g0..g0 + glyph_side).contains(&y) {
            let bit = ((y - g0) / cell) * GLYPH_CELLS + (x - g0) / cell;
            let level = if code >> bit & 1 == 1 { GLYPH_ON } else { GLYPH_OFF };
            [level; 3]
        } else if silhouette(vtype, u, v) {
            body
        } else {
            [BACKGROUND; 3]
        };
        Rgb(base.map(|b| b.saturating_add(offset)))
    })
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std * 255.0).expect("validated");
    let mut records = Vec::with_capacity(spec.num_identities * spec.images_per_identity);
    let mut images = Vec::with_capacity(records.capacity());
    for k in 0..spec.num_identities as u32 {
        let identity = spec.first_identity + k;
        for j in 0..spec.images_per_identity {
            let camera = spec.camera_of(identity, j);
            let mut img = render(spec, identity, camera);
            if spec.noise_std > 0.0 {
                for px in img.pixels_mut() {
                    for ch in px.0.iter_mut() {
                        let v = *ch as f64 + noise.sample(&mut rng);
                        *ch = v.round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
            records.push(VehicleRecord {
                image_path: format!("img_{identity:05}_{j:03}.png"),
                vehicle_id: identity,
                camera_id: camera,
                color_id: Some(spec.color_of(identity)),
                type_id: Some(spec.type_of(identity)),
            });
            images.push(img);
        }
    }
    Ok(SyntheticData {
        dataset: Dataset::new(records)?,
        images,
    })
}
