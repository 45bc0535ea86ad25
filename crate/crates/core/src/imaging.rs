//! Grayscale rasters, mirror padding and the overlapping patch grid.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel 8-bit raster, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GrayImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Size(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Size(format!(
                "{width}x{height} image needs {} bytes, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Copies the `w`×`h` rectangle whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<GrayImage> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::Size(format!(
                "crop {w}x{h}+{x}+{y} exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for row in y..y + h {
            data.extend_from_slice(&self.row(row)[x..x + w]);
        }
        GrayImage::new(w, h, data)
    }

    /// Block-average downsampling by an integer factor. Dimensions must divide evenly.
    pub fn downsample_area(&self, factor: usize) -> Result<GrayImage> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::Size(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let area = (factor * factor) as u32;
        let mut data = Vec::with_capacity(w * h);
        for by in 0..h {
            for bx in 0..w {
                let mut sum = 0u32;
                for y in by * factor..(by + 1) * factor {
                    for &v in &self.row(y)[bx * factor..(bx + 1) * factor] {
                        sum += v as u32;
                    }
                }
                data.push(((sum + area / 2) / area) as u8);
            }
        }
        GrayImage::new(w, h, data)
    }

    /// Reads PNG (any color type) or binary PGM. Multi-channel inputs are reduced
    /// to the mean of their color channels.
    pub fn load(path: impl AsRef<Path>) -> Result<GrayImage> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(b"P5") {
            return decode_pgm(&bytes);
        }
        let img = image::load_from_memory(&bytes)?;
        from_dynamic(&img)
    }

    /// Writes PNG or PGM depending on the file extension (`.pgm` → PGM, otherwise PNG).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let is_pgm = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("pgm"))
            .unwrap_or(false);
        let bytes = if is_pgm { self.encode_pgm() } else { self.encode_png()? };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 20);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height).expect("vec write");
        out.extend_from_slice(&self.data);
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::Size("buffer size".into()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

fn from_dynamic(img: &image::DynamicImage) -> Result<GrayImage> {
    use image::DynamicImage as D;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        D::ImageLuma8(g) => GrayImage::new(w, h, g.as_raw().clone()),
        D::ImageLumaA8(_) | D::ImageLuma16(_) | D::ImageLumaA16(_) => {
            GrayImage::new(w, h, img.to_luma8().into_raw())
        }
        _ => {
            let rgb = img.to_rgb8();
            let data = rgb
                .pixels()
                .map(|p| ((p[0] as u32 + p[1] as u32 + p[2] as u32 + 1) / 3) as u8)
                .collect();
            GrayImage::new(w, h, data)
        }
    }
}

/// Parses a binary (P5) PGM with maxval ≤ 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "truncated PGM header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P5" {
        return Err(Error::format(0, "not a binary PGM (P5)"));
    }
    let num = |i: usize| -> Result<usize> {
        fields[i]
            .1
            .parse()
            .map_err(|_| Error::format(fields[i].0 as u64, "bad PGM header number"))
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(fields[3].0 as u64, "only 8-bit PGM supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h;
    if bytes.len() < pos + need {
        return Err(Error::format(bytes.len() as u64, "truncated PGM raster"));
    }
    GrayImage::new(w, h, bytes[pos..pos + need].to_vec())
}

/// Symmetric (edge-inclusive) reflection of `i` into `[0, n)`, valid for `-n ≤ i < 2n`.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    r as usize
}

/// Extends every border by `pad` pixels of edge-inclusive mirror reflection,
/// so `[a, b, c, d]` padded by 2 becomes `[b, a, a, b, c, d, d, c]`.
pub fn mirror_pad(image: &GrayImage, pad: usize) -> Result<GrayImage> {
    if pad > image.width.min(image.height) {
        return Err(Error::Size(format!(
            "pad {pad} exceeds smallest image side {}",
            image.width.min(image.height)
        )));
    }
    if pad == 0 {
        return Ok(image.clone());
    }
    let (w, h) = (image.width, image.height);
    let (pw, ph) = (w + 2 * pad, h + 2 * pad);
    let cols: Vec<usize> = (0..pw).map(|x| reflect(x as isize - pad as isize, w)).collect();
    let mut data = Vec::with_capacity(pw * ph);
    for y in 0..ph {
        let src = image.row(reflect(y as isize - pad as isize, h));
        data.extend(cols.iter().map(|&x| src[x]));
    }
    GrayImage::new(pw, ph, data)
}

/// Patch size, stride and mirror padding used to cut an image into tiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub patch_size: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Default for TileSpec {
    fn default() -> Self {
        Self {
            patch_size: 256,
            stride: 64,
            pad: 128,
        }
    }
}

impl TileSpec {
    pub fn new(patch_size: usize, stride: usize, pad: usize) -> Result<Self> {
        let spec = Self {
            patch_size,
            stride,
            pad,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 {
            return Err(Error::Argument(format!(
                "patch_size and stride must be positive (got {} / {})",
                self.patch_size, self.stride
            )));
        }
        Ok(())
    }

    /// Grid geometry for a `width`×`height` source image.
    pub fn grid(&self, width: usize, height: usize) -> Result<PatchGrid> {
        self.validate()?;
        if width == 0 || height == 0 {
            return Err(Error::Size("empty image".into()));
        }
        if self.pad > width.min(height) {
            return Err(Error::Size(format!(
                "pad {} exceeds smallest image side {}",
                self.pad,
                width.min(height)
            )));
        }
        let (pw, ph) = (width + 2 * self.pad, height + 2 * self.pad);
        if pw < self.patch_size || ph < self.patch_size {
            return Err(Error::Size(format!(
                "{width}x{height} image padded by {} is smaller than {}px patch",
                self.pad, self.patch_size
            )));
        }
        Ok(PatchGrid {
            rows: (ph - self.patch_size) / self.stride + 1,
            cols: (pw - self.patch_size) / self.stride + 1,
            spec: *self,
            source_width: width,
            source_height: height,
        })
    }
}

/// Geometry of the overlapping tiles laid over a padded image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub spec: TileSpec,
    pub source_width: usize,
    pub source_height: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left corner of patch `(r, c)` in original-image coordinates. Negative
    /// values mean the patch starts inside the mirrored border.
    pub fn patch_origin(&self, r: usize, c: usize) -> Result<(isize, isize)> {
        if r >= self.rows || c >= self.cols {
            return Err(Error::Index(format!(
                "patch ({r}, {c}) outside {}x{} grid",
                self.rows, self.cols
            )));
        }
        let s = self.spec.stride as isize;
        let p = self.spec.pad as isize;
        Ok((c as isize * s - p, r as isize * s - p))
    }

    /// Row-major patch index of `(r, c)`.
    pub fn index(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    /// Grid rows whose patches cover original-image row `y` (same formula for columns).
    pub fn covering_range(&self, coord: usize, along_rows: bool) -> std::ops::Range<usize> {
        let n = if along_rows { self.rows } else { self.cols };
        let s = self.spec.stride;
        let padded = coord + self.spec.pad;
        // patch i covers padded coordinate q iff i*s <= q < i*s + patch
        let hi = (padded / s + 1).min(n);
        let lo = if padded + 1 > self.spec.patch_size {
            (padded + 1 - self.spec.patch_size).div_ceil(s)
        } else {
            0
        };
        lo.min(hi)..hi
    }
}

/// One tile cut from a padded image.
#[derive(Clone, PartialEq, Eq)]
pub struct Patch {
    pub grid_row: usize,
    pub grid_col: usize,
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl std::fmt::Debug for Patch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Patch")
            .field("grid_row", &self.grid_row)
            .field("grid_col", &self.grid_col)
            .field("size", &self.size)
            .finish_non_exhaustive()
    }
}

impl Patch {
    pub fn to_image(&self) -> GrayImage {
        GrayImage::new(self.size, self.size, self.pixels.clone()).expect("patch invariant")
    }
}

/// Cuts `image` into the overlapping patches described by `spec`, in row-major grid order.
pub fn tile(image: &GrayImage, spec: &TileSpec) -> Result<(PatchGrid, Vec<Patch>)> {
    let grid = spec.grid(image.width, image.height)?;
    let padded = mirror_pad(image, spec.pad)?;
    let n = spec.patch_size;
    let mut patches = Vec::with_capacity(grid.len());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let (x0, y0) = (c * spec.stride, r * spec.stride);
            let mut pixels = Vec::with_capacity(n * n);
            for y in y0..y0 + n {
                pixels.extend_from_slice(&padded.row(y)[x0..x0 + n]);
            }
            patches.push(Patch {
                grid_row: r,
                grid_col: c,
                size: n,
                pixels,
            });
        }
    }
    Ok((grid, patches))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[u8]) -> GrayImage {
        GrayImage::new(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn mirror_pad_one_dimensional_row() {
        // height 1 cannot be padded by 2 vertically, so pad a 4x4 image and read a row
        let img = GrayImage::from_fn(4, 4, |x, _| [10, 20, 30, 40][x]).unwrap();
        let p = mirror_pad(&img, 2).unwrap();
        assert_eq!(p.row(0), &[20, 10, 10, 20, 30, 40, 40, 30]);
        let single = mirror_pad(&row(&[1, 2, 3]), 1).unwrap();
        assert_eq!(single.row(1), &[1, 1, 2, 3, 3]);
    }

    #[test]
    fn mirror_pad_zero_is_identity() {
        let img = GrayImage::from_fn(5, 3, |x, y| (x * 7 + y * 13) as u8).unwrap();
        assert_eq!(mirror_pad(&img, 0).unwrap(), img);
    }

    #[test]
    fn mirror_pad_full_size_image() {
        let img = GrayImage::filled(1000, 1000, 9).unwrap();
        let p = mirror_pad(&img, 128).unwrap();
        assert_eq!((p.width(), p.height()), (1256, 1256));
    }

    #[test]
    fn mirror_pad_rejects_oversized_pad() {
        let img = GrayImage::filled(10, 4, 0).unwrap();
        assert!(matches!(mirror_pad(&img, 5), Err(Error::Size(_))));
        assert!(mirror_pad(&img, 4).is_ok());
    }

    #[test]
    fn corners_reflect_both_axes() {
        let img = GrayImage::from_fn(3, 3, |x, y| (y * 3 + x) as u8).unwrap();
        let p = mirror_pad(&img, 2).unwrap();
        // padded (0,0) -> source (1,1); padded (1,1) -> source (0,0)
        assert_eq!(p.get(0, 0), img.get(1, 1));
        assert_eq!(p.get(1, 1), img.get(0, 0));
        assert_eq!(p.get(6, 6), img.get(1, 1));
    }

    #[test]
    fn reference_patch_counts() {
        let spec = TileSpec::default();
        let g = spec.grid(1000, 1000).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (16, 16, 256));
        let g = spec.grid(1024, 1024).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (17, 17, 289));
    }

    #[test]
    fn exact_fit_single_patch() {
        let img = GrayImage::filled(256, 256, 1).unwrap();
        let (g, patches) = tile(&img, &TileSpec::new(256, 64, 0).unwrap()).unwrap();
        assert_eq!((g.rows, g.cols), (1, 1));
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].pixels, img.data());
    }

    #[test]
    fn tile_rejects_small_images() {
        let img = GrayImage::filled(20, 20, 0).unwrap();
        let err = tile(&img, &TileSpec::new(64, 8, 10).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Size(_)));
    }

    #[test]
    fn patch_origin_values() {
        let g = TileSpec::default().grid(1000, 1000).unwrap();
        assert_eq!(g.patch_origin(0, 0).unwrap(), (-128, -128));
        assert_eq!(g.patch_origin(2, 3).unwrap(), (64, 0));
        assert_eq!(g.patch_origin(15, 15).unwrap(), (832, 832));
        assert!(matches!(g.patch_origin(16, 0), Err(Error::Index(_))));
    }

    #[test]
    fn covering_range_matches_enumeration() {
        for (w, spec) in [(1000, TileSpec::default()), (37, TileSpec::new(16, 5, 7).unwrap())] {
            let g = spec.grid(w, w).unwrap();
            for y in 0..w {
                let brute: Vec<usize> = (0..g.rows)
                    .filter(|&r| {
                        let top = r * spec.stride;
                        top <= y + spec.pad && y + spec.pad < top + spec.patch_size
                    })
                    .collect();
                let range: Vec<usize> = g.covering_range(y, true).collect();
                assert_eq!(brute, range, "y = {y}");
            }
        }
    }

    #[test]
    fn pgm_header_is_exact() {
        let img = GrayImage::new(2, 1, vec![7, 250]).unwrap();
        let bytes = img.encode_pgm();
        assert_eq!(&bytes[..], b"P5\n2 1\n255\n\x07\xfa");
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn pgm_truncation_reports_offset() {
        let err = decode_pgm(b"P5\n4 4\n255\n\x00\x01").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 13, .. }), "{err}");
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_fn(13, 9, |x, y| (x * 19 + y * 3) as u8).unwrap();
        let path = dir.path().join("a.png");
        img.save(&path).unwrap();
        assert_eq!(GrayImage::load(&path).unwrap(), img);
        let path = dir.path().join("a.pgm");
        img.save(&path).unwrap();
        assert_eq!(GrayImage::load(&path).unwrap(), img);
    }

    #[test]
    fn rgb_input_is_channel_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = image::RgbImage::from_pixel(2, 2, image::Rgb([30, 60, 90]));
        let path = dir.path().join("rgb.png");
        rgb.save(&path).unwrap();
        let g = GrayImage::load(&path).unwrap();
        assert!(g.data().iter().all(|&v| v == 60));
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = GrayImage::new(2, 2, vec![0, 10, 20, 30]).unwrap();
        assert_eq!(img.downsample_area(2).unwrap().data(), &[15]);
        assert!(img.downsample_area(3).is_err());
    }
}
