//! Per-pixel cluster maps and severity-colored overlays.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{GrayImage, PatchGrid};

/// The five severity codes used when annotating clusters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Severity {
    Green,
    Yellow,
    Orange,
    Red,
    Blue,
}

impl Severity {
    pub const ALL: [Severity; 5] = [
        Severity::Green,
        Severity::Yellow,
        Severity::Orange,
        Severity::Red,
        Severity::Blue,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Severity::Green => [0, 200, 0],
            Severity::Yellow => [255, 215, 0],
            Severity::Orange => [255, 140, 0],
            Severity::Red => [220, 0, 0],
            Severity::Blue => [0, 120, 255],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Severity::Green => "green",
            Severity::Yellow => "yellow",
            Severity::Orange => "orange",
            Severity::Red => "red",
            Severity::Blue => "blue",
        }
    }

    /// Conventional reading of each code.
    pub fn meaning(self) -> &'static str {
        match self {
            Severity::Green => "regular",
            Severity::Yellow | Severity::Orange => "irregular",
            Severity::Red => "atypical",
            Severity::Blue => "artifact",
        }
    }
}

/// Tint used for clusters without an annotation.
pub const NEUTRAL_RGB: [u8; 3] = [128, 128, 128];

/// Annotation color: a palette code or an explicit RGB triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Code(Severity),
    Rgb([u8; 3]),
}

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Code(s) => s.rgb(),
            Color::Rgb(c) => c,
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Color::Code(s) => f.write_str(s.name()),
            Color::Rgb([r, g, b]) => write!(f, "#{r:02x}{g:02x}{b:02x}"),
        }
    }
}

impl FromStr for Color {
    type Err = Error;

    /// Accepts a palette name (case-insensitive) or `#rrggbb`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if let Some(sev) = Severity::ALL.iter().find(|c| c.name().eq_ignore_ascii_case(t)) {
            return Ok(Color::Code(*sev));
        }
        if let Some(hex) = t.strip_prefix('#') {
            if hex.len() == 6 && hex.bytes().all(|b| b.is_ascii_hexdigit()) {
                let v = u32::from_str_radix(hex, 16).expect("validated hex");
                return Ok(Color::Rgb([(v >> 16) as u8, (v >> 8) as u8, v as u8]));
            }
        }
        Err(Error::Argument(format!(
            "unknown color {s:?}: expected green, yellow, orange, red, blue or #rrggbb"
        )))
    }
}

impl Serialize for Color {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Color {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub name: String,
    pub color: Color,
}

/// Human-assigned name and color per cluster id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnnotationSet {
    pub entries: BTreeMap<usize, Annotation>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    #[serde(default, rename = "cluster")]
    clusters: Vec<AnnotationRecord>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    id: usize,
    name: String,
    color: Color,
}

impl AnnotationSet {
    pub fn get(&self, id: usize) -> Option<&Annotation> {
        self.entries.get(&id)
    }

    pub fn set(&mut self, id: usize, annotation: Annotation) {
        self.entries.insert(id, annotation);
    }

    pub fn color_of(&self, label: usize) -> [u8; 3] {
        self.get(label).map_or(NEUTRAL_RGB, |a| a.color.rgb())
    }

    /// TOML document with one `[[cluster]]` table per annotation.
    pub fn to_text(&self) -> String {
        let file = AnnotationFile {
            clusters: self
                .entries
                .iter()
                .map(|(&id, a)| AnnotationRecord {
                    id,
                    name: a.name.clone(),
                    color: a.color,
                })
                .collect(),
        };
        toml::to_string(&file).expect("annotation serialization")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let file: AnnotationFile = toml::from_str(text).map_err(|e| Error::Parse(format!("annotations: {e}")))?;
        let mut entries = BTreeMap::new();
        for r in file.clusters {
            if entries
                .insert(r.id, Annotation { name: r.name, color: r.color })
                .is_some()
            {
                return Err(Error::Parse(format!("cluster {} annotated twice", r.id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Missing file reads as an empty set.
    pub fn load_or_default(path: impl AsRef<Path>) -> Result<Self> {
        if path.as_ref().exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::fsutil::write_atomic(path.as_ref(), self.to_text().as_bytes())
    }
}

/// Cluster label of every patch of one image, in row-major grid order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterMap {
    pub grid: PatchGrid,
    pub labels: Vec<usize>,
}

impl ClusterMap {
    pub fn new(grid: PatchGrid, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "{} labels for a {}x{} grid",
                labels.len(),
                grid.rows,
                grid.cols
            )));
        }
        Ok(Self { grid, labels })
    }

    pub fn label(&self, r: usize, c: usize) -> usize {
        self.labels[self.grid.index(r, c)]
    }

    /// Key-value header followed by one line of labels per grid row.
    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let mut out = format!(
            "width {}\nheight {}\npatch {}\nstride {}\npad {}\nrows {}\ncols {}\n",
            g.source_width, g.source_height, g.spec.patch_size, g.spec.stride, g.spec.pad, g.rows, g.cols
        );
        for row in self.labels.chunks(g.cols) {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut field = |key: &str| -> Result<usize> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Parse(format!("cluster map: expected `{key} <n>`")))
        };
        let (w, h) = (field("width")?, field("height")?);
        let spec = crate::imaging::TileSpec::new(field("patch")?, field("stride")?, field("pad")?)?;
        let (rows, cols) = (field("rows")?, field("cols")?);
        let grid = spec.grid(w, h)?;
        if (grid.rows, grid.cols) != (rows, cols) {
            return Err(Error::Parse("cluster map grid does not match its geometry".into()));
        }
        let labels = lines
            .flat_map(str::split_whitespace)
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad label {t:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        ClusterMap::new(grid, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::fsutil::write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Cluster label of every pixel of the source image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelLabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<usize>,
}

impl PixelLabelMap {
    pub fn get(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x]
    }
}

/// How overlapping patch labels resolve to one label per pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResolveMode {
    /// Most frequent label among the patches covering the pixel; lowest label on ties.
    #[default]
    Majority,
    /// Each stride-sized cell takes the label of the patch whose center is nearest the cell center.
    CenterCell,
}

impl FromStr for ResolveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(ResolveMode::Majority),
            "center-cell" => Ok(ResolveMode::CenterCell),
            _ => Err(Error::Argument(format!("unknown resolve mode {s:?}"))),
        }
    }
}

/// Majority label of a multiset; ties go to the smallest label.
pub fn majority(labels: impl IntoIterator<Item = usize>) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .fold(None, |best: Option<(usize, usize)>, (l, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((l, c)),
        })
        .map(|(l, _)| l)
}

pub fn pixel_labels(map: &ClusterMap, mode: ResolveMode) -> PixelLabelMap {
    match mode {
        ResolveMode::Majority => majority_labels(map),
        ResolveMode::CenterCell => center_cell_labels(map),
    }
}

fn majority_labels(map: &ClusterMap) -> PixelLabelMap {
    let g = &map.grid;
    let (w, h) = (g.source_width, g.source_height);
    let row_ranges: Vec<_> = (0..h).map(|y| g.covering_range(y, true)).collect();
    let col_ranges: Vec<_> = (0..w).map(|x| g.covering_range(x, false)).collect();
    let mut cache: HashMap<(usize, usize, usize, usize), usize> = HashMap::new();
    let mut labels = Vec::with_capacity(w * h);
    for rr in &row_ranges {
        for cr in &col_ranges {
            let key = (rr.start, rr.end, cr.start, cr.end);
            let l = *cache.entry(key).or_insert_with(|| {
                let covering = rr
                    .clone()
                    .flat_map(|r| cr.clone().map(move |c| (r, c)))
                    .map(|(r, c)| map.label(r, c));
                majority(covering).expect("every pixel is covered by a patch")
            });
            labels.push(l);
        }
    }
    PixelLabelMap {
        width: w,
        height: h,
        labels,
    }
}

/// Index in `0..n` of the patch whose center lies nearest `coord` (original coordinates).
fn nearest_patch(coord: f64, n: usize, grid: &PatchGrid) -> usize {
    let s = grid.spec.stride as f64;
    let offset = grid.spec.patch_size as f64 / 2.0 - grid.spec.pad as f64;
    (0..n)
        .map(|i| (i, (i as f64 * s + offset - coord).abs()))
        .fold((0, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best })
        .0
}

fn center_cell_labels(map: &ClusterMap) -> PixelLabelMap {
    let g = &map.grid;
    let (w, h) = (g.source_width, g.source_height);
    let s = g.spec.stride as isize;
    let origin = (-(g.spec.pad as isize)).rem_euclid(s);
    let cell_center = |v: usize| {
        let cell = (v as isize - origin).div_euclid(s);
        (origin + cell * s) as f64 + s as f64 / 2.0
    };
    let rows: Vec<usize> = (0..h).map(|y| nearest_patch(cell_center(y), g.rows, g)).collect();
    let cols: Vec<usize> = (0..w).map(|x| nearest_patch(cell_center(x), g.cols, g)).collect();
    let labels = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| map.label(r, c)))
        .collect();
    PixelLabelMap {
        width: w,
        height: h,
        labels,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub alpha: f64,
    pub draw_grid: bool,
    pub draw_numbers: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            draw_grid: false,
            draw_numbers: false,
        }
    }
}

#[inline]
fn blend(gray: u8, color: u8, alpha: f64) -> u8 {
    ((1.0 - alpha) * gray as f64 + alpha * color as f64).round().clamp(0.0, 255.0) as u8
}

/// Alpha-blends each pixel's cluster color over the grayscale image.
pub fn render_overlay(
    image: &GrayImage,
    pl: &PixelLabelMap,
    ann: &AnnotationSet,
    opts: &RenderOptions,
    grid: Option<&PatchGrid>,
) -> Result<RgbImage> {
    if (image.width(), image.height()) != (pl.width, pl.height) {
        return Err(Error::Dimension(format!(
            "image {}x{} vs label map {}x{}",
            image.width(),
            image.height(),
            pl.width,
            pl.height
        )));
    }
    if !(0.0..=1.0).contains(&opts.alpha) {
        return Err(Error::Argument(format!("alpha {} outside [0, 1]", opts.alpha)));
    }
    let mut out = RgbImage::new(pl.width as u32, pl.height as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let g = image.data()[i];
        let c = ann.color_of(pl.labels[i]);
        *px = Rgb([blend(g, c[0], opts.alpha), blend(g, c[1], opts.alpha), blend(g, c[2], opts.alpha)]);
    }
    if let Some(grid) = grid.filter(|_| opts.draw_grid || opts.draw_numbers) {
        decorate(&mut out, pl, grid, opts);
    }
    Ok(out)
}

fn decorate(out: &mut RgbImage, pl: &PixelLabelMap, grid: &PatchGrid, opts: &RenderOptions) {
    let s = grid.spec.stride;
    let origin = (-(grid.spec.pad as isize)).rem_euclid(s as isize) as usize;
    let (w, h) = (pl.width, pl.height);
    if opts.draw_grid {
        let line = Rgb([255, 255, 255]);
        for x in (origin..w).step_by(s) {
            (0..h).for_each(|y| out.put_pixel(x as u32, y as u32, line));
        }
        for y in (origin..h).step_by(s) {
            (0..w).for_each(|x| out.put_pixel(x as u32, y as u32, line));
        }
    }
    if opts.draw_numbers {
        let starts = |n: usize| {
            let mut v: Vec<usize> = (origin..n).step_by(s).collect();
            if origin > 0 {
                v.insert(0, 0);
            }
            v
        };
        for &y0 in &starts(h) {
            for &x0 in &starts(w) {
                let cw = (x0 + s).min(w) - x0;
                let ch = (y0 + s).min(h) - y0;
                let label = pl.get(x0 + cw / 2, y0 + ch / 2);
                draw_number(out, label, x0 + cw / 2, y0 + ch / 2, (s / 24).max(1));
            }
        }
    }
}

const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

/// Draws `value` centered on `(cx, cy)` in a 3×5 bitmap font with a dark backing box.
fn draw_number(out: &mut RgbImage, value: usize, cx: usize, cy: usize, scale: usize) {
    let text = value.to_string();
    let glyph_w = 4 * scale;
    let total_w = text.len() * glyph_w - scale;
    let total_h = 5 * scale;
    let x0 = cx as isize - total_w as isize / 2;
    let y0 = cy as isize - total_h as isize / 2;
    let (w, h) = (out.width() as isize, out.height() as isize);
    let mut put = |x: isize, y: isize, c: Rgb<u8>| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            out.put_pixel(x as u32, y as u32, c);
        }
    };
    for y in y0 - 1..y0 + total_h as isize + 1 {
        for x in x0 - 1..x0 + total_w as isize + 1 {
            put(x, y, Rgb([0, 0, 0]));
        }
    }
    for (i, ch) in text.bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        let gx = x0 + (i * glyph_w) as isize;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        put(
                            gx + (col * scale + dx) as isize,
                            y0 + (row * scale + dy) as isize,
                            Rgb([255, 255, 255]),
                        );
                    }
                }
            }
        }
    }
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Pixel share of each color key; `neutral` collects unannotated labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SeverityHistogram {
    /// `(key, pixel count, fraction)`, palette codes first, then explicit colors, then neutral.
    pub entries: Vec<(String, usize, f64)>,
}

impl SeverityHistogram {
    pub fn fraction(&self, key: &str) -> f64 {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map_or(0.0, |e| e.2)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("color,pixels,fraction\n");
        for (k, n, f) in &self.entries {
            writeln!(out, "{k},{n},{f:.6}").unwrap();
        }
        out
    }
}

pub fn severity_histogram(pl: &PixelLabelMap, ann: &AnnotationSet) -> SeverityHistogram {
    let mut per_label: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &pl.labels {
        *per_label.entry(l).or_default() += 1;
    }
    let mut codes = [0usize; 5];
    let mut custom: BTreeMap<String, usize> = BTreeMap::new();
    let mut neutral = 0usize;
    for (label, count) in per_label {
        match ann.get(label).map(|a| a.color) {
            Some(Color::Code(s)) => codes[Severity::ALL.iter().position(|&c| c == s).unwrap()] += count,
            Some(c @ Color::Rgb(_)) => *custom.entry(c.to_string()).or_default() += count,
            None => neutral += count,
        }
    }
    let total = pl.labels.len().max(1) as f64;
    let mut entries: Vec<(String, usize, f64)> = Severity::ALL
        .iter()
        .zip(codes)
        .map(|(s, n)| (s.name().to_string(), n, n as f64 / total))
        .collect();
    entries.extend(custom.into_iter().map(|(k, n)| (k, n, n as f64 / total)));
    entries.push(("neutral".to_string(), neutral, neutral as f64 / total));
    SeverityHistogram { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::TileSpec;

    fn grid() -> PatchGrid {
        TileSpec::default().grid(1000, 1000).unwrap()
    }

    #[test]
    fn majority_rules() {
        assert_eq!(majority([3, 3, 5]), Some(3));
        assert_eq!(majority([5, 2]), Some(2));
        assert_eq!(majority([9, 4, 9, 4, 1]), Some(4));
        assert_eq!(majority(std::iter::empty()), None);
    }

    #[test]
    fn uniform_map_is_constant() {
        let g = grid();
        let map = ClusterMap::new(g, vec![7; g.len()]).unwrap();
        for mode in [ResolveMode::Majority, ResolveMode::CenterCell] {
            let pl = pixel_labels(&map, mode);
            assert_eq!((pl.width, pl.height), (1000, 1000));
            assert!(pl.labels.iter().all(|&l| l == 7));
        }
    }

    #[test]
    fn center_cell_follows_nearest_patch() {
        let g = grid();
        // patch (r, c) labeled by column index
        let map = ClusterMap::new(g, (0..g.len()).map(|i| i % g.cols).collect()).unwrap();
        let pl = pixel_labels(&map, ResolveMode::CenterCell);
        // cell [0, 64) has center 32; patch c has center 64c; nearest c = 0 (32 vs 32 tie -> lower)
        assert_eq!(pl.get(10, 500), 0);
        // cell [64, 128) center 96 -> patch 1 (center 64) or 2 (128): tie -> 1
        assert_eq!(pl.get(100, 500), 1);
    }

    #[test]
    fn color_parsing() {
        assert_eq!("Red".parse::<Color>().unwrap(), Color::Code(Severity::Red));
        assert_eq!("#0a0B0c".parse::<Color>().unwrap(), Color::Rgb([10, 11, 12]));
        assert!("purple".parse::<Color>().is_err());
        assert!("#12345".parse::<Color>().is_err());
        assert_eq!(Color::Rgb([1, 2, 255]).to_string(), "#0102ff");
    }

    #[test]
    fn palette_values() {
        let names: Vec<_> = Severity::ALL.iter().map(|s| s.name()).collect();
        assert_eq!(names, ["green", "yellow", "orange", "red", "blue"]);
        assert_eq!(Severity::Red.rgb(), [220, 0, 0]);
        assert_eq!(Severity::Blue.meaning(), "artifact");
    }

    #[test]
    fn annotation_round_trip_and_duplicates() {
        let mut set = AnnotationSet::default();
        set.set(12, Annotation { name: "Atypical spread".into(), color: Color::Code(Severity::Red) });
        set.set(0, Annotation { name: "Regular \"epidermis\"".into(), color: Color::Rgb([1, 2, 3]) });
        let back = AnnotationSet::from_text(&set.to_text()).unwrap();
        assert_eq!(back, set);
        let dup = "[[cluster]]\nid = 1\nname = \"a\"\ncolor = \"red\"\n[[cluster]]\nid = 1\nname = \"b\"\ncolor = \"blue\"\n";
        assert!(AnnotationSet::from_text(dup).is_err());
        let bad = "[[cluster]]\nid = 1\nname = \"a\"\ncolor = \"mauve\"\n";
        assert!(AnnotationSet::from_text(bad).is_err());
    }

    #[test]
    fn render_alpha_extremes() {
        let img = GrayImage::from_fn(4, 2, |x, y| (x * 40 + y * 5) as u8).unwrap();
        let pl = PixelLabelMap { width: 4, height: 2, labels: vec![0, 0, 1, 1, 0, 0, 1, 1] };
        let mut ann = AnnotationSet::default();
        ann.set(1, Annotation { name: "x".into(), color: Color::Code(Severity::Red) });
        let out = render_overlay(&img, &pl, &ann, &RenderOptions { alpha: 0.0, ..Default::default() }, None).unwrap();
        for (i, p) in out.pixels().enumerate() {
            let g = img.data()[i];
            assert_eq!(p.0, [g, g, g]);
        }
        let out = render_overlay(&img, &pl, &ann, &RenderOptions { alpha: 1.0, ..Default::default() }, None).unwrap();
        assert_eq!(out.get_pixel(2, 0).0, [220, 0, 0]);
        assert_eq!(out.get_pixel(0, 0).0, NEUTRAL_RGB);
    }

    #[test]
    fn render_rejects_bad_inputs() {
        let img = GrayImage::filled(4, 2, 0).unwrap();
        let pl = PixelLabelMap { width: 2, height: 2, labels: vec![0; 4] };
        let ann = AnnotationSet::default();
        assert!(matches!(render_overlay(&img, &pl, &ann, &RenderOptions::default(), None), Err(Error::Dimension(_))));
        let pl = PixelLabelMap { width: 4, height: 2, labels: vec![0; 8] };
        let opts = RenderOptions { alpha: 1.5, ..Default::default() };
        assert!(matches!(render_overlay(&img, &pl, &ann, &opts, None), Err(Error::Argument(_))));
    }

    #[test]
    fn grid_and_numbers_are_drawn() {
        let img = GrayImage::filled(256, 256, 50).unwrap();
        let g = TileSpec::default().grid(256, 256).unwrap();
        let map = ClusterMap::new(g, vec![3; g.len()]).unwrap();
        let pl = pixel_labels(&map, ResolveMode::Majority);
        let opts = RenderOptions { alpha: 0.4, draw_grid: true, draw_numbers: true };
        let out = render_overlay(&img, &pl, &AnnotationSet::default(), &opts, Some(&g)).unwrap();
        assert_eq!(out.get_pixel(64, 10).0, [255, 255, 255]);
        assert!(out.pixels().any(|p| p.0 == [0, 0, 0]));
        let plain = render_overlay(&img, &pl, &AnnotationSet::default(), &RenderOptions::default(), Some(&g)).unwrap();
        assert_ne!(plain.get_pixel(64, 10).0, [255, 255, 255]);
    }

    #[test]
    fn histogram_fractions() {
        let mut ann = AnnotationSet::default();
        ann.set(0, Annotation { name: "a".into(), color: Color::Code(Severity::Green) });
        ann.set(1, Annotation { name: "b".into(), color: Color::Code(Severity::Red) });
        let pl = PixelLabelMap { width: 2, height: 2, labels: vec![0, 0, 0, 0] };
        assert_eq!(severity_histogram(&pl, &ann).fraction("green"), 1.0);
        let pl = PixelLabelMap { width: 2, height: 2, labels: vec![0, 1, 0, 1] };
        let h = severity_histogram(&pl, &ann);
        assert_eq!((h.fraction("green"), h.fraction("red")), (0.5, 0.5));
        let pl = PixelLabelMap { width: 2, height: 2, labels: vec![0, 1, 5, 5] };
        let h = severity_histogram(&pl, &ann);
        assert_eq!(h.fraction("neutral"), 0.5);
        let total: f64 = h.entries.iter().map(|e| e.2).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(h.to_csv().starts_with("color,pixels,fraction\ngreen,1,0.250000\n"));
    }

    #[test]
    fn cluster_map_text_round_trip() {
        let g = TileSpec::new(16, 8, 4).unwrap().grid(40, 30).unwrap();
        let map = ClusterMap::new(g, (0..g.len()).map(|i| i % 3).collect()).unwrap();
        assert_eq!(ClusterMap::from_text(&map.to_text()).unwrap(), map);
        assert!(ClusterMap::new(g, vec![0; 2]).is_err());
    }
}
