//! Dataset loading, preprocessing and the synthetic sign generator.
//!
//! Every sample becomes a 3×56×56 `f32` tensor: the source image (optionally
//! cropped to its annotated region) is bilinearly resized to 56×56, scaled
//! to [0, 1] and mapped to [−1, 1] by `(v − 0.5) / 0.5`.
//!
//! Two on-disk layouts are understood:
//!
//! * a root with one subdirectory per class, holding `.ppm`/`.png` images and
//!   optionally a `;`-separated annotation CSV (GTSRB training layout);
//! * a `;`-separated manifest with `Filename` and `ClassId` columns and
//!   optional `Roi.X1`, `Roi.Y1`, `Roi.X2`, `Roi.Y2` (GTSRB test layout).

use std::collections::HashMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const INPUT_SIZE: usize = 56;
pub const NORM_MEAN: f32 = 0.5;
pub const NORM_SCALE: f32 = 0.5;
/// Most classes the synthetic generator can draw distinctly.
pub const MAX_SYNTHETIC_CLASSES: usize = 16;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Data(format!("{width}x{height} RGB image with {} bytes", data.len())));
        }
        Ok(RgbImage { width, height, data })
    }

    /// Crop to an inclusive pixel box, clamped to the image.
    pub fn crop(&self, roi: Roi) -> Result<RgbImage> {
        let x2 = roi.x2.min(self.width - 1);
        let y2 = roi.y2.min(self.height - 1);
        if roi.x1 > x2 || roi.y1 > y2 {
            return Err(Error::Data(format!("empty region {roi:?} in {}x{} image", self.width, self.height)));
        }
        let (w, h) = (x2 - roi.x1 + 1, y2 - roi.y1 + 1);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in roi.y1..=y2 {
            let row = (y * self.width + roi.x1) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        RgbImage::new(w, h, data)
    }
}

/// Region of interest, inclusive corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Roi {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

/// Binary (P6) or ASCII (P3) portable pixmap.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let err = |msg: &str| Error::Data(format!("ppm: {msg}"));
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(bytes)?;
    let num = |s: String| s.parse::<usize>().map_err(|_| err("bad header number"));
    let width = num(token(bytes)?)?;
    let height = num(token(bytes)?)?;
    let maxval = num(token(bytes)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(err("maxval out of range"));
    }
    let scale = |v: usize| -> u8 { ((v.min(maxval) * 255 + maxval / 2) / maxval) as u8 };
    let count = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| err("dimensions overflow"))?;
    let data = match magic.as_str() {
        "P6" => {
            // exactly one whitespace byte separates the header from the raster
            let start = pos + 1;
            let wide = maxval > 255;
            let need = count * if wide { 2 } else { 1 };
            let raster = bytes.get(start..start + need).ok_or_else(|| err("truncated raster"))?;
            if wide {
                raster.chunks_exact(2).map(|b| scale(u16::from_be_bytes([b[0], b[1]]) as usize)).collect()
            } else if maxval == 255 {
                raster.to_vec()
            } else {
                raster.iter().map(|&b| scale(b as usize)).collect()
            }
        }
        "P3" => {
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                v.push(scale(num(token(bytes)?)?));
            }
            v
        }
        _ => return Err(err("not a P3/P6 pixmap")),
    };
    RgbImage::new(width, height, data)
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let err = |e: png::DecodingError| Error::Data(format!("png: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Data("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let data = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::Data("png: palette not expanded".into())),
    };
    RgbImage::new(w, h, data)
}

/// Decodes by magic bytes.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
        decode_ppm(bytes)
    } else {
        Err(Error::Data("unrecognised image format".into()))
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path)?;
    decode_image(&bytes).map_err(|e| Error::Decode { path: path.to_path_buf(), msg: e.to_string() })
}

/// Bilinear resize to 56×56 (half-pixel centres, edge clamped) written into
/// `out` as normalized planar RGB.
pub fn preprocess_into(img: &RgbImage, out: &mut [f32]) {
    let n = INPUT_SIZE;
    debug_assert_eq!(out.len(), 3 * n * n);
    let sx = img.width as f32 / n as f32;
    let sy = img.height as f32 / n as f32;
    let taps = |o: usize, s: f32, len: usize| {
        let p = ((o as f32 + 0.5) * s - 0.5).clamp(0.0, (len - 1) as f32);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(len - 1), p - i0 as f32)
    };
    let cols: Vec<_> = (0..n).map(|x| taps(x, sx, img.width)).collect();
    for y in 0..n {
        let (y0, y1, fy) = taps(y, sy, img.height);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for c in 0..3 {
                let px = |yy: usize, xx: usize| img.data[(yy * img.width + xx) * 3 + c] as f32;
                let top = px(y0, x0) + (px(y0, x1) - px(y0, x0)) * fx;
                let bottom = px(y1, x0) + (px(y1, x1) - px(y1, x0)) * fx;
                let v = (top + (bottom - top) * fy) / 255.0;
                out[(c * n + y) * n + x] = (v - NORM_MEAN) / NORM_SCALE;
            }
        }
    }
}

/// (1, 3, 56, 56) network input for one image.
pub fn to_input_tensor(img: &RgbImage) -> Tensor<f32> {
    let mut out = vec![0.0; 3 * INPUT_SIZE * INPUT_SIZE];
    preprocess_into(img, &mut out);
    Tensor::from_vec(Shape::new(1, 3, INPUT_SIZE, INPUT_SIZE), out).expect("fixed input shape")
}

#[derive(Clone, Debug)]
pub enum Pixels {
    File { path: PathBuf, roi: Option<Roi> },
    /// Already preprocessed 3×56×56 values.
    Memory(Arc<[f32]>),
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub pixels: Pixels,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub name: String,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
    /// Files that were listed but could not be decoded, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Preprocessed values of sample `i`.
    pub fn load_into(&self, i: usize, out: &mut [f32]) -> Result<()> {
        match &self.samples[i].pixels {
            Pixels::Memory(v) => out.copy_from_slice(v),
            Pixels::File { path, roi } => {
                let img = load_image(path)?;
                let img = match roi {
                    Some(r) => img.crop(*r)?,
                    None => img,
                };
                preprocess_into(&img, out);
            }
        }
        Ok(())
    }

    /// Stacks the given samples into an (n, 3, 56, 56) tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let per = 3 * INPUT_SIZE * INPUT_SIZE;
        let mut data = vec![0.0f32; indices.len() * per];
        data.par_chunks_mut(per).zip(indices.par_iter()).try_for_each(|(out, &i)| self.load_into(i, out))?;
        let labels = indices.iter().map(|&i| self.samples[i].label).collect();
        Ok((Tensor::from_vec(Shape::new(indices.len(), 3, INPUT_SIZE, INPUT_SIZE), data)?, labels))
    }

    pub fn skip_report(&self) -> String {
        let mut s = format!("{} skipped\n", self.skipped.len());
        for (p, why) in &self.skipped {
            s.push_str(&format!("{}\t{why}\n", p.display()));
        }
        s
    }

    fn subset(&self, name: &str, mut idx: Vec<usize>) -> DatasetSplit {
        idx.sort_unstable();
        DatasetSplit {
            name: name.into(),
            num_classes: self.num_classes,
            samples: idx.into_iter().map(|i| self.samples[i].clone()).collect(),
            skipped: Vec::new(),
        }
    }
}

/// Loads batches on a background thread, at most `capacity` ahead of the
/// consumer, and hands them to `f` in order.
pub fn for_each_batch<F>(split: &DatasetSplit, batches: &[Vec<usize>], capacity: usize, mut f: F) -> Result<()>
where
    F: FnMut(Tensor<f32>, Vec<usize>) -> Result<()>,
{
    std::thread::scope(|scope| {
        let (tx, rx) = sync_channel(capacity.max(1));
        scope.spawn(move || {
            for b in batches {
                if tx.send(split.batch(b)).is_err() {
                    break;
                }
            }
        });
        for item in rx {
            let (x, y) = item?;
            f(x, y)?;
        }
        Ok(())
    })
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// `;`-separated manifest; paths inside are relative to the data root.
    pub manifest: Option<PathBuf>,
    /// Crop to annotated regions when the annotations provide them.
    pub use_roi: bool,
    /// Expected class count; inferred from the labels when absent.
    pub num_classes: Option<usize>,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["ppm", "png", "pnm"];

fn has_ext(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    v.sort_by(|a, b| a.as_os_str().as_encoded_bytes().cmp(b.as_os_str().as_encoded_bytes()));
    Ok(v)
}

struct ManifestRow {
    file: String,
    class: Option<usize>,
    roi: Option<Roi>,
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(b';').trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let file_col = col("Filename").ok_or_else(|| Error::Data(format!("{}: no Filename column", path.display())))?;
    let class_col = col("ClassId");
    let roi_cols = [col("Roi.X1"), col("Roi.Y1"), col("Roi.X2"), col("Roi.Y2")];
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parse = |i: usize| {
            field(i)
                .parse::<usize>()
                .map_err(|_| Error::Data(format!("{} row {}: bad number {:?}", path.display(), line + 2, field(i))))
        };
        let class = class_col.map(parse).transpose()?;
        let roi = match roi_cols {
            [Some(a), Some(b), Some(c), Some(d)] => Some(Roi { x1: parse(a)?, y1: parse(b)?, x2: parse(c)?, y2: parse(d)? }),
            _ => None,
        };
        rows.push(ManifestRow { file: field(file_col).to_string(), class, roi });
    }
    Ok(rows)
}

/// Lists a dataset, decoding every image once so unreadable files land in
/// the skip report instead of failing later.
pub fn load_folder_dataset(root: &Path, opts: &LoadOptions) -> Result<DatasetSplit> {
    if !root.is_dir() {
        return Err(Error::Data(format!("data root {} is not a directory", root.display())));
    }
    let mut listed: Vec<Sample> = Vec::new();
    if let Some(manifest) = &opts.manifest {
        for row in read_manifest(manifest)? {
            let label = row.class.ok_or_else(|| Error::Data(format!("{}: no ClassId column", manifest.display())))?;
            let roi = row.roi.filter(|_| opts.use_roi);
            listed.push(Sample { pixels: Pixels::File { path: root.join(&row.file), roi }, label });
        }
    } else {
        let dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
        if dirs.is_empty() {
            return Err(Error::Data(format!("{} has no class subdirectories", root.display())));
        }
        let names: Vec<String> = dirs.iter().map(|d| d.file_name().unwrap().to_string_lossy().into_owned()).collect();
        let numeric = names.iter().all(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()));
        for (i, (dir, name)) in dirs.iter().zip(&names).enumerate() {
            let label = if numeric { name.parse::<usize>().map_err(|_| Error::Data(format!("class dir {name}")))? } else { i };
            let entries = sorted_entries(dir)?;
            let mut rois: HashMap<String, Roi> = HashMap::new();
            if opts.use_roi {
                for csv_path in entries.iter().filter(|p| has_ext(p, &["csv"])) {
                    for row in read_manifest(csv_path)? {
                        if let Some(r) = row.roi {
                            rois.insert(row.file, r);
                        }
                    }
                }
            }
            for path in entries.into_iter().filter(|p| p.is_file() && has_ext(p, &IMAGE_EXTENSIONS)) {
                let file = path.file_name().unwrap().to_string_lossy().into_owned();
                let roi = rois.get(&file).copied();
                listed.push(Sample { pixels: Pixels::File { path, roi }, label });
            }
        }
    }

    let checks: Vec<Option<String>> = listed
        .par_iter()
        .map(|s| match &s.pixels {
            Pixels::File { path, roi } => {
                let img = load_image(path);
                let img = match (img, roi) {
                    (Ok(img), Some(r)) => img.crop(*r),
                    (img, _) => img,
                };
                img.err().map(|e| e.to_string())
            }
            Pixels::Memory(_) => None,
        })
        .collect();
    let mut samples = Vec::with_capacity(listed.len());
    let mut skipped = Vec::new();
    for (s, problem) in listed.into_iter().zip(checks) {
        match (problem, &s.pixels) {
            (Some(why), Pixels::File { path, .. }) => skipped.push((path.clone(), why)),
            _ => samples.push(s),
        }
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("no decodable images under {}", root.display())));
    }
    let inferred = samples.iter().map(|s| s.label).max().unwrap() + 1;
    let num_classes = match opts.num_classes {
        Some(n) if n < inferred => {
            return Err(Error::Data(format!("label {} out of range for {n} classes", inferred - 1)));
        }
        Some(n) => n,
        None => inferred,
    };
    let split = DatasetSplit { name: "train".into(), num_classes, samples, skipped };
    if let Some(empty) = split.class_counts().iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {empty} has no images")));
    }
    Ok(split)
}

/// Stratified split: each class contributes `round(n·val_fraction)` samples
/// (at least one, leaving at least one) to validation.
pub fn split_train_val(split: &DatasetSplit, val_fraction: f64, seed: u64) -> Result<(DatasetSplit, DatasetSplit)> {
    if !(val_fraction > 0.0 && val_fraction < 0.5) {
        return Err(Error::Config(format!("val fraction {val_fraction} outside (0, 0.5)")));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); split.num_classes];
    for (i, s) in split.samples.iter().enumerate() {
        per_class[s.label].push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (class, mut idx) in per_class.into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Data(format!("class {class} has {} samples, need 2 to split", idx.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, class as u64, 0x5917));
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * val_fraction).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    Ok((split.subset("train", train), split.subset("val", val)))
}

/// SplitMix64-style mixing of a seed with two stream identifiers.
pub fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Glyph {
    Disk,
    Triangle,
    Square,
    Ring,
    Bar,
    Diamond,
    Cross,
    InvertedTriangle,
}

const GLYPHS: [Glyph; 8] = [
    Glyph::Disk,
    Glyph::Triangle,
    Glyph::Square,
    Glyph::Ring,
    Glyph::Bar,
    Glyph::Diamond,
    Glyph::Cross,
    Glyph::InvertedTriangle,
];

const PALETTE: [[f32; 3]; MAX_SYNTHETIC_CLASSES] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.30, 0.85],
    [0.95, 0.80, 0.10],
    [0.10, 0.70, 0.20],
    [0.95, 0.95, 0.95],
    [0.60, 0.15, 0.70],
    [0.95, 0.50, 0.05],
    [0.05, 0.75, 0.80],
    [0.55, 0.30, 0.10],
    [0.95, 0.45, 0.65],
    [0.10, 0.10, 0.10],
    [0.50, 0.80, 0.30],
    [0.20, 0.20, 0.50],
    [0.80, 0.80, 0.50],
    [0.40, 0.05, 0.05],
    [0.30, 0.55, 0.55],
];

fn inside(glyph: Glyph, u: f32, v: f32) -> bool {
    // (u, v) in units of the glyph radius, v pointing down
    match glyph {
        Glyph::Disk => u * u + v * v <= 1.0,
        Glyph::Ring => (0.55..=1.0).contains(&(u * u + v * v).sqrt()),
        Glyph::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
        Glyph::Diamond => u.abs() + v.abs() <= 1.0,
        Glyph::Bar => u.abs() <= 1.0 && v.abs() <= 0.35,
        Glyph::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        Glyph::Triangle => (-0.9..=0.8).contains(&v) && u.abs() <= (v + 0.9) * 0.6,
        Glyph::InvertedTriangle => (-0.8..=0.9).contains(&v) && u.abs() <= (0.9 - v) * 0.6,
    }
}

/// One synthetic sign: preprocessed 3×56×56 values.
pub fn render_sign(class: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = INPUT_SIZE;
    let glyph = GLYPHS[class % GLYPHS.len()];
    let color = PALETTE[class % PALETTE.len()];
    let dx = rng.random_range(-4..=4) as f32;
    let dy = rng.random_range(-4..=4) as f32;
    let radius = 16.0 * rng.random_range(0.85..=1.15f32);
    let base = rng.random_range(0.25..0.65f32);
    let (cx, cy) = (n as f32 / 2.0 + dx, n as f32 / 2.0 + dy);
    let mut out = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let u = (x as f32 + 0.5 - cx) / radius;
            let v = (y as f32 + 0.5 - cy) / radius;
            let hit = inside(glyph, u, v);
            for c in 0..3 {
                let noise = rng.random_range(-0.08..0.08f32);
                let val = if hit { color[c] + 0.5 * noise } else { base + noise };
                out[(c * n + y) * n + x] = (val.clamp(0.0, 1.0) - NORM_MEAN) / NORM_SCALE;
            }
        }
    }
    out
}

/// Sample `index` of `class` exactly as the synthetic generators draw it.
pub fn synthetic_sign(class: usize, index: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, class as u64, index as u64));
    render_sign(class, &mut rng)
}

/// `per_class` signs per class drawn with sample indices `first..first+per_class`;
/// each sample has its own generator seeded from (seed, class, index).
pub fn generate_synthetic_range(num_classes: usize, first: usize, per_class: usize, seed: u64, name: &str) -> Result<DatasetSplit> {
    if num_classes == 0 || num_classes > MAX_SYNTHETIC_CLASSES {
        return Err(Error::Config(format!("synthetic classes must be in 1..={MAX_SYNTHETIC_CLASSES}, got {num_classes}")));
    }
    if per_class == 0 {
        return Err(Error::Config("synthetic samples per class must be positive".into()));
    }
    let jobs: Vec<(usize, usize)> =
        (0..num_classes).flat_map(|c| (first..first + per_class).map(move |i| (c, i))).collect();
    let samples = jobs
        .par_iter()
        .map(|&(class, idx)| {
            Sample { pixels: Pixels::Memory(synthetic_sign(class, idx, seed).into()), label: class }
        })
        .collect();
    Ok(DatasetSplit { name: name.into(), num_classes, samples, skipped: Vec::new() })
}

pub fn generate_synthetic(num_classes: usize, per_class: usize, seed: u64) -> Result<DatasetSplit> {
    generate_synthetic_range(num_classes, 0, per_class, seed, "train")
}

/// Held-out companion of [`generate_synthetic`]: fresh sample indices, so
/// no image repeats a training image.
pub fn generate_synthetic_heldout(num_classes: usize, train_per_class: usize, per_class: usize, seed: u64) -> Result<DatasetSplit> {
    generate_synthetic_range(num_classes, train_per_class, per_class, seed, "heldout")
}
