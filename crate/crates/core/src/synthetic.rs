//! Two-class synthetic image task for CPU-scale experiments.
//!
//! Class `blob` is a bright centred Gaussian spot; class `ring` has a dark
//! centre surrounded by a bright annulus. Both carry per-pixel noise and a
//! jittered centre, so the task is easy but not trivial.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image;

pub const CLASS_NAMES: [&str; 2] = ["blob", "ring"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub size: usize,
    /// Standard deviation of the additive pixel noise, in 0..=255 units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            per_class: 500,
            size: 32,
            noise: 20.0,
            seed: 0,
        }
    }
}

/// One `size x size` RGB raster for `class` (0 = blob, 1 = ring).
pub fn render<R: Rng>(class: usize, size: usize, noise: f64, rng: &mut R) -> Vec<u8> {
    let s = size as f64;
    let jitter = s / 10.0;
    let cy = s / 2.0 + rng.random_range(-jitter..=jitter);
    let cx = s / 2.0 + rng.random_range(-jitter..=jitter);
    let background = rng.random_range(40.0..80.0);
    let noise = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let (sigma, radius) = (s * rng.random_range(0.12..0.18), s * rng.random_range(0.25..0.32));
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
            let base = match class {
                0 => background + 160.0 * (-(d * d) / (2.0 * sigma * sigma)).exp(),
                _ => {
                    let ring = 160.0 * (-((d - radius).powi(2)) / (2.0 * (s * 0.06).powi(2))).exp();
                    let hole = if d < radius * 0.6 { -30.0 } else { 0.0 };
                    background + ring + hole
                }
            };
            for _ in 0..3 {
                out.push((base + noise.sample(rng)).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// [`render`] driven by its own seed, for callers without an RNG of their own.
pub fn render_seeded(class: usize, size: usize, noise: f64, seed: u64) -> Vec<u8> {
    render(class, size, noise, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Writes `<root>/blob/*.ppm` and `<root>/ring/*.ppm`.
pub fn write_dataset(root: &Path, spec: &SyntheticSpec) -> Result<()> {
    if spec.size == 0 || spec.per_class == 0 {
        return Err(Error::config("synthetic size and per_class must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for (class, name) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..spec.per_class {
            let rgb = render(class, spec.size, spec.noise, &mut rng);
            image::write_ppm(&dir.join(format!("{name}_{i:04}.ppm")), spec.size, spec.size, &rgb)?;
        }
    }
    Ok(())
}
