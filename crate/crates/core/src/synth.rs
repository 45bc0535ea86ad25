//! Seeded synthetic textures standing in for real microscopy data.
//!
//! Every class is shifted to the same mean intensity (128) over its region, so
//! classes differ in structure rather than brightness.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::imaging::GrayImage;

pub const MEAN_INTENSITY: f64 = 128.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TextureKind {
    /// Square-wave bands. At 0° the intensity varies along y, so rows form bands
    /// of `period / 2` pixels.
    Stripes { angle_deg: f64, period: f64 },
    Checker { cell: usize },
    /// Bright discs whose centers are scattered with `density` centers per pixel.
    Blobs { density: f64 },
    /// Independent per-pixel noise, uniformly distributed with standard deviation `sigma`.
    UniformNoise { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureSpec {
    pub kind: TextureKind,
    pub seed: u64,
    /// Peak deviation from the mean for the structured classes.
    pub amplitude: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
}

impl TextureSpec {
    pub fn new(kind: TextureKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            amplitude: 60.0,
            noise: 0.0,
        }
    }

    pub fn amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    pub fn noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: f64| v.is_finite();
        let ok = match self.kind {
            TextureKind::Stripes { angle_deg, period } => finite(angle_deg) && finite(period) && period >= 2.0,
            TextureKind::Checker { cell } => cell >= 2,
            TextureKind::Blobs { density } => finite(density) && (0.0..=1.0).contains(&density),
            TextureKind::UniformNoise { sigma } => finite(sigma) && sigma >= 0.0,
        };
        if !ok || !self.amplitude.is_finite() || !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Argument(format!("invalid texture {self:?}")));
        }
        Ok(())
    }

    /// The four reference classes: horizontal stripes, checkerboard, blobs and noise.
    /// Amplitudes differ so that even intensity histograms carry some signal.
    pub fn default_classes(seed: u64) -> [TextureSpec; 4] {
        [
            TextureSpec::new(TextureKind::Stripes { angle_deg: 0.0, period: 8.0 }, seed).noise(8.0),
            TextureSpec::new(TextureKind::Checker { cell: 8 }, seed.wrapping_add(1))
                .amplitude(40.0)
                .noise(8.0),
            TextureSpec::new(TextureKind::Blobs { density: 0.02 }, seed.wrapping_add(2))
                .amplitude(90.0)
                .noise(8.0),
            TextureSpec::new(TextureKind::UniformNoise { sigma: 40.0 }, seed.wrapping_add(3)),
        ]
    }

    /// Raw (un-normalized) intensity field over `rect`, in image coordinates.
    fn field(&self, rect: &Rect) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let a = self.amplitude;
        let mut out = vec![0.0; rect.w * rect.h];
        match self.kind {
            TextureKind::Stripes { angle_deg, period } => {
                let (s, c) = angle_deg.to_radians().sin_cos();
                for (i, v) in out.iter_mut().enumerate() {
                    let (x, y) = ((rect.x + i % rect.w) as f64, (rect.y + i / rect.w) as f64);
                    let t = (x * s + y * c).rem_euclid(period);
                    *v = if t < period / 2.0 { a } else { -a };
                }
            }
            TextureKind::Checker { cell } => {
                for (i, v) in out.iter_mut().enumerate() {
                    let (x, y) = (rect.x + i % rect.w, rect.y + i / rect.w);
                    *v = if (x / cell + y / cell) % 2 == 0 { a } else { -a };
                }
            }
            TextureKind::Blobs { density } => {
                const RADIUS: f64 = 3.0;
                let margin = RADIUS.ceil() as usize;
                let (cw, ch) = (rect.w + 2 * margin, rect.h + 2 * margin);
                let count = (density * (cw * ch) as f64).round() as usize;
                let mut mask = vec![false; rect.w * rect.h];
                for _ in 0..count {
                    let cx = rng.random_range(0.0..cw as f64) - margin as f64;
                    let cy = rng.random_range(0.0..ch as f64) - margin as f64;
                    let (x0, x1) = ((cx - RADIUS).floor().max(0.0) as usize, (cx + RADIUS).ceil().max(0.0) as usize);
                    let (y0, y1) = ((cy - RADIUS).floor().max(0.0) as usize, (cy + RADIUS).ceil().max(0.0) as usize);
                    for y in y0..y1.min(rect.h) {
                        for x in x0..x1.min(rect.w) {
                            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                            if dx * dx + dy * dy <= RADIUS * RADIUS {
                                mask[y * rect.w + x] = true;
                            }
                        }
                    }
                }
                for (v, &m) in out.iter_mut().zip(&mask) {
                    *v = if m { a } else { 0.0 };
                }
            }
            TextureKind::UniformNoise { sigma } => {
                let half = sigma * 3f64.sqrt();
                if half > 0.0 {
                    out.iter_mut().for_each(|v| *v = rng.random_range(-half..half));
                }
            }
        }
        if self.noise > 0.0 {
            let normal = Normal::new(0.0, self.noise).expect("validated sigma");
            out.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        let mean = out.iter().sum::<f64>() / out.len().max(1) as f64;
        out.iter_mut().for_each(|v| *v += MEAN_INTENSITY - mean);
        out
    }
}

impl fmt::Display for TextureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TextureKind::Stripes { angle_deg, period } => write!(f, "stripes:{angle_deg}:{period}"),
            TextureKind::Checker { cell } => write!(f, "checker:{cell}"),
            TextureKind::Blobs { density } => write!(f, "blobs:{density}"),
            TextureKind::UniformNoise { sigma } => write!(f, "noise:{sigma}"),
        }
    }
}

impl FromStr for TextureKind {
    type Err = Error;

    /// `stripes:<angle>:<period>`, `checker:<cell>`, `blobs:<density>` or `noise:<sigma>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::Argument(format!("bad texture {s:?}")))
        };
        match (parts[0], parts.len()) {
            ("stripes", 3) => Ok(TextureKind::Stripes { angle_deg: num(1)?, period: num(2)? }),
            ("checker", 2) => Ok(TextureKind::Checker { cell: num(1)? as usize }),
            ("blobs", 2) => Ok(TextureKind::Blobs { density: num(1)? }),
            ("noise", 2) => Ok(TextureKind::UniformNoise { sigma: num(1)? }),
            _ => Err(Error::Argument(format!("bad texture {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }
}

/// Renders `regions` into one image. The returned label map holds the region index of every pixel.
pub fn gen_image(width: usize, height: usize, regions: &[(Rect, TextureSpec)]) -> Result<(GrayImage, GrayImage)> {
    if width == 0 || height == 0 {
        return Err(Error::Size("synthetic image must be non-empty".into()));
    }
    if regions.len() > 256 {
        return Err(Error::Argument("at most 256 regions".into()));
    }
    let mut owner: Vec<Option<u8>> = vec![None; width * height];
    for (idx, (r, spec)) in regions.iter().enumerate() {
        spec.validate()?;
        if r.w == 0 || r.h == 0 || r.x + r.w > width || r.y + r.h > height {
            return Err(Error::Geometry(format!("region {idx} {r:?} outside {width}x{height}")));
        }
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                let slot = &mut owner[y * width + x];
                if let Some(other) = slot {
                    return Err(Error::Geometry(format!("regions {other} and {idx} overlap at ({x}, {y})")));
                }
                *slot = Some(idx as u8);
            }
        }
    }
    if let Some(i) = owner.iter().position(Option::is_none) {
        return Err(Error::Geometry(format!(
            "pixel ({}, {}) not covered by any region",
            i % width,
            i / width
        )));
    }
    let mut pixels = vec![0u8; width * height];
    for (r, spec) in regions {
        let field = spec.field(r);
        for (i, v) in field.into_iter().enumerate() {
            let (x, y) = (r.x + i % r.w, r.y + i / r.w);
            pixels[y * width + x] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    let labels = owner.into_iter().map(|o| o.expect("checked coverage")).collect();
    Ok((GrayImage::new(width, height, pixels)?, GrayImage::new(width, height, labels)?))
}

/// Single-texture image.
pub fn gen_texture(width: usize, height: usize, spec: &TextureSpec) -> Result<GrayImage> {
    Ok(gen_image(width, height, &[(Rect::new(0, 0, width, height), *spec)])?.0)
}

/// Isotropic Gaussian clusters in `d` dimensions with centers `separation` apart
/// along distinct axes. Returns the points and their true cluster indices.
pub fn gaussian_blobs(
    k: usize,
    per_cluster: usize,
    d: usize,
    separation: f64,
    sigma: f64,
    seed: u64,
) -> Result<(FeatureMatrix, Vec<usize>)> {
    if k == 0 || per_cluster == 0 || d == 0 {
        return Err(Error::Argument("blob counts and width must be positive".into()));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Argument(format!("sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(k * per_cluster);
    let mut labels = Vec::with_capacity(k * per_cluster);
    for c in 0..k {
        let mut center = vec![0.0; d];
        // axis c when available, otherwise spread along axis 0
        if c < d {
            center[c] = separation;
        } else {
            center[0] = separation * (c - d + 2) as f64;
        }
        for _ in 0..per_cluster {
            rows.push(center.iter().map(|&m| m + normal.sample(&mut rng)).collect::<Vec<f64>>());
            labels.push(c);
        }
    }
    Ok((FeatureMatrix::from_f64_rows(&rows)?, labels))
}
