//! Paired image/mask datasets: RGB IO, ingestion with grid patchification,
//! augmentation, and a synthetic toy fixture rendered from masks.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use ndarray::{s, Array3};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::AugmentParams;
use crate::error::{Error, Result};
use crate::featurize::{distance_map, featurize, ConditionMaps};
use crate::mask::InstanceMask;
use crate::maskgen::{derive_seed, generate_instance_mask, LayoutParams, NucleusPolygonParams};
use crate::raster;

/// One training patch. The image is (3, H, W) in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub image: Array3<f32>,
    pub mask: InstanceMask,
    pub organ: String,
    /// Id of the source image the patch was cut from.
    pub source: String,
}

impl DatasetItem {
    pub fn new(image: Array3<f32>, mask: InstanceMask, organ: impl Into<String>, source: impl Into<String>) -> Result<Self> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::shape("3-channel image", format!("{c} channels")));
        }
        if (h, w) != (mask.height(), mask.width()) {
            return Err(Error::shape(
                format!("mask of {h}x{w}"),
                format!("{}x{}", mask.height(), mask.width()),
            ));
        }
        Ok(Self {
            image,
            mask,
            organ: organ.into(),
            source: source.into(),
        })
    }

    pub fn maps(&self) -> ConditionMaps {
        featurize(&self.mask)
    }
}

/// Reads an 8-bit RGB(A) PNG into `[-1, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        raw[(y * w + x) * 3 + c] as f32 / 127.5 - 1.0
    }))
}

/// Writes a (3, H, W) image in `[-1, 1]` as an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::shape("3-channel image", format!("{c} channels")));
    }
    let mut raw = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = ((image[(ch, y, x)].clamp(-1.0, 1.0) + 1.0) * 127.5).round();
                raw.push(v as u8);
            }
        }
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// One line of `dataset.jsonl`. Paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default)]
    pub organ: Option<String>,
}

pub const DATASET_MANIFEST: &str = "dataset.jsonl";
pub const UNKNOWN_ORGAN: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ItemProblem {
    MissingPair,
    Corrupt,
    SizeMismatch,
    LabelOverflow,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemError {
    pub id: String,
    pub path: PathBuf,
    pub problem: ItemProblem,
    pub detail: String,
}

impl fmt::Display for ItemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}): {:?}: {}", self.id, self.path.display(), self.problem, self.detail)
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub items: Vec<DatasetItem>,
    pub errors: Vec<ItemError>,
}

/// Lists the image/mask pairs of `dir`, from `dataset.jsonl` when present,
/// otherwise by pairing `<stem>.png` with `<stem>_mask.png`.
pub fn list_pairs(dir: &Path) -> Result<(Vec<DatasetEntry>, Vec<ItemError>)> {
    let manifest = dir.join(DATASET_MANIFEST);
    if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Format {
                    path: manifest.clone(),
                    reason: format!("line {}: {e}", i + 1),
                })
            })
            .collect::<Result<Vec<DatasetEntry>>>()?;
        return Ok((entries, Vec::new()));
    }
    let mut images = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(stem) = name.strip_suffix(".png") else { continue };
        match stem.strip_suffix("_mask") {
            Some(base) => masks.insert(base.to_string(), PathBuf::from(name)),
            None => images.insert(stem.to_string(), PathBuf::from(name)),
        };
    }
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for (id, image) in &images {
        match masks.get(id) {
            Some(mask) => entries.push(DatasetEntry {
                id: id.clone(),
                image: image.clone(),
                mask: mask.clone(),
                organ: None,
            }),
            None => errors.push(ItemError {
                id: id.clone(),
                path: dir.join(image),
                problem: ItemProblem::MissingPair,
                detail: format!("no {id}_mask.png"),
            }),
        }
    }
    for (id, mask) in &masks {
        if !images.contains_key(id) {
            errors.push(ItemError {
                id: id.clone(),
                path: dir.join(mask),
                problem: ItemProblem::MissingPair,
                detail: format!("no {id}.png"),
            });
        }
    }
    Ok((entries, errors))
}

/// Loads every pair of `dir` and cuts it into `patch x patch` tiles. When
/// `partial` is false any per-item problem fails the whole load with an
/// itemized message; otherwise the problems are returned alongside the
/// items that did load.
pub fn ingest(dir: &Path, patch: usize, partial: bool) -> Result<IngestReport> {
    if patch == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if !dir.is_dir() {
        return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())));
    }
    let (entries, mut errors) = list_pairs(dir)?;
    if entries.is_empty() && errors.is_empty() {
        log::warn!("no image/mask pairs found in {}", dir.display());
    }
    let mut items = Vec::new();
    for e in &entries {
        match load_entry(dir, e, patch) {
            Ok(mut tiles) => items.append(&mut tiles),
            Err(err) => errors.push(err),
        }
    }
    if !errors.is_empty() {
        for e in &errors {
            log::warn!("skipping {e}");
        }
        if !partial {
            let list: Vec<String> = errors.iter().map(|e| format!("  {e}")).collect();
            return Err(Error::invalid(format!(
                "{} dataset item(s) failed to load:\n{}",
                errors.len(),
                list.join("\n")
            )));
        }
    }
    Ok(IngestReport { items, errors })
}

fn load_entry(dir: &Path, e: &DatasetEntry, patch: usize) -> std::result::Result<Vec<DatasetItem>, ItemError> {
    let fail = |path: &Path, problem, detail: String| ItemError {
        id: e.id.clone(),
        path: path.to_path_buf(),
        problem,
        detail,
    };
    let image_path = dir.join(&e.image);
    let mask_path = dir.join(&e.mask);
    for p in [&image_path, &mask_path] {
        if !p.exists() {
            return Err(fail(p, ItemProblem::MissingPair, "file not found".into()));
        }
    }
    let image = read_rgb_png(&image_path).map_err(|err| fail(&image_path, ItemProblem::Corrupt, err.to_string()))?;
    let mask = InstanceMask::read_png(&mask_path).map_err(|err| fail(&mask_path, ItemProblem::Corrupt, err.to_string()))?;
    let (_, h, w) = image.dim();
    if (h, w) != (mask.height(), mask.width()) {
        return Err(fail(
            &mask_path,
            ItemProblem::SizeMismatch,
            format!("image is {h}x{w} but mask is {}x{}", mask.height(), mask.width()),
        ));
    }
    let organ = e.organ.clone().unwrap_or_else(|| UNKNOWN_ORGAN.to_string());
    let tiles = patchify(&image, &mask, patch);
    tiles
        .into_iter()
        .map(|(img, m)| {
            if m.max_label() > u16::MAX as u32 {
                return Err(fail(&mask_path, ItemProblem::LabelOverflow, format!("{} instances in one patch", m.max_label())));
            }
            Ok(DatasetItem {
                image: img,
                mask: m,
                organ: organ.clone(),
                source: e.id.clone(),
            })
        })
        .collect()
}

/// Non-overlapping grid tiles, row-major, after mirror-padding the bottom
/// and right edges up to a multiple of `patch`. Tile masks are relabeled so
/// ids stay compact and each instance is one connected region.
pub fn patchify(image: &Array3<f32>, mask: &InstanceMask, patch: usize) -> Vec<(Array3<f32>, InstanceMask)> {
    let (_, h, w) = image.dim();
    let (ph, pw) = (h.div_ceil(patch) * patch, w.div_ceil(patch) * patch);
    let img = raster::mirror_pad3(image.view(), ph, pw);
    let labels = raster::mirror_pad(mask.labels(), ph, pw);
    let mut out = Vec::new();
    for ty in 0..ph / patch {
        for tx in 0..pw / patch {
            let ys = ty * patch..(ty + 1) * patch;
            let xs = tx * patch..(tx + 1) * patch;
            let tile_img = img.slice(s![.., ys.clone(), xs.clone()]).to_owned();
            let tile_mask = InstanceMask::new(labels.slice(s![ys, xs]).to_owned())
                .expect("tile is non-empty")
                .relabeled();
            out.push((tile_img, tile_mask));
        }
    }
    out
}

/// Random flips, 90-degree rotations and 3x3 median blur. Geometry is
/// applied to image and mask together; the blur touches the image only.
/// Every random draw happens regardless of the probabilities so the stream
/// position does not depend on the configuration.
pub fn augment(item: &DatasetItem, rng: &mut impl Rng, p: &AugmentParams) -> DatasetItem {
    let hflip = rng.random::<f64>() < p.hflip;
    let vflip = rng.random::<f64>() < p.vflip;
    let rotate = rng.random::<f64>() < p.rotate;
    let turns = rng.random_range(1..4usize);
    let blur = rng.random::<f64>() < p.median_blur;
    let mut image = item.image.clone();
    let mut mask = item.mask.clone();
    if hflip {
        image = raster::flip_h3(image.view());
        mask = mask.flip_h();
    }
    if vflip {
        image = raster::flip_v3(image.view());
        mask = mask.flip_v();
    }
    if rotate {
        for _ in 0..turns {
            image = raster::rot90_ccw3(image.view());
            mask = mask.rot90_ccw();
        }
    }
    if blur {
        image = median_blur3(&image);
    }
    DatasetItem {
        image,
        mask,
        organ: item.organ.clone(),
        source: item.source.clone(),
    }
}

/// Per-channel 3x3 median with edge replication.
pub fn median_blur3(image: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let mut v = [0.0f32; 9];
        let mut k = 0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                v[k] = image[(ch, yy, xx)];
                k += 1;
            }
        }
        v.sort_by(f32::total_cmp);
        v[4]
    })
}

/// Stain-like colors of a toy organ, each channel in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyPalette {
    pub background: [f32; 3],
    pub nucleus_rim: [f32; 3],
    pub nucleus_core: [f32; 3],
}

pub fn toy_palettes() -> Vec<(&'static str, ToyPalette)> {
    vec![
        (
            "breast",
            ToyPalette {
                background: [0.93, 0.72, 0.84],
                nucleus_rim: [0.55, 0.35, 0.65],
                nucleus_core: [0.28, 0.12, 0.45],
            },
        ),
        (
            "kidney",
            ToyPalette {
                background: [0.97, 0.82, 0.80],
                nucleus_rim: [0.50, 0.40, 0.70],
                nucleus_core: [0.20, 0.18, 0.50],
            },
        ),
        (
            "liver",
            ToyPalette {
                background: [0.86, 0.62, 0.78],
                nucleus_rim: [0.45, 0.25, 0.55],
                nucleus_core: [0.30, 0.08, 0.32],
            },
        ),
    ]
}

/// Renders a deterministic H&E-like image: flat background, nuclei shaded
/// from rim to core by the normalized interior distance, plus faint noise.
pub fn render_toy_image(mask: &InstanceMask, palette: &ToyPalette, seed: u64) -> Array3<f32> {
    let q = distance_map(mask).0;
    let labels = mask.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = labels.dim();
    let mut out = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let t = q[(0, y, x)];
            let noise = rng.random_range(-0.02f32..0.02);
            for c in 0..3 {
                let v = if labels[(y, x)] == 0 {
                    palette.background[c]
                } else {
                    palette.nucleus_rim[c] + (palette.nucleus_core[c] - palette.nucleus_rim[c]) * t
                };
                out[(c, y, x)] = ((v + noise).clamp(0.0, 1.0)) * 2.0 - 1.0;
            }
        }
    }
    out
}

/// Mask layout used for toy fixtures of side `size`.
pub fn toy_layout(size: usize, seed: u64) -> (LayoutParams, NucleusPolygonParams) {
    let area_scale = (size * size) as f64 / (64.0 * 64.0);
    let layout = LayoutParams {
        canvas: (size, size),
        nucleus_count_range: (
            ((6.0 * area_scale).round() as usize).max(1),
            ((12.0 * area_scale).round() as usize).max(1),
        ),
        seed,
        ..LayoutParams::default()
    };
    let nucleus = NucleusPolygonParams {
        radius_range: (3.0, 7.0),
        ..NucleusPolygonParams::default()
    };
    (layout, nucleus)
}

/// In-memory toy items: masks from `toy_layout`, organs assigned
/// round-robin, each item its own source.
pub fn toy_items(count: usize, size: usize, seed: u64) -> Result<Vec<DatasetItem>> {
    let palettes = toy_palettes();
    (0..count)
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let (layout, nucleus) = toy_layout(size, s);
            let mask = generate_instance_mask(&mut ChaCha8Rng::seed_from_u64(s), &layout, &nucleus)?.mask;
            let (organ, palette) = palettes[i % palettes.len()];
            let image = render_toy_image(&mask, &palette, s ^ 0xA5A5);
            DatasetItem::new(image, mask, organ, format!("toy_{i:04}"))
        })
        .collect()
}

/// Writes `items` as `<source>.png` / `<source>_mask.png` plus
/// `dataset.jsonl` with organ tags.
pub fn write_dataset(dir: &Path, items: &[DatasetItem]) -> Result<Vec<DatasetEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(items.len());
    let mut text = String::new();
    for item in items {
        let entry = DatasetEntry {
            id: item.source.clone(),
            image: PathBuf::from(format!("{}.png", item.source)),
            mask: PathBuf::from(format!("{}_mask.png", item.source)),
            organ: Some(item.organ.clone()),
        };
        write_rgb_png(&dir.join(&entry.image), &item.image)?;
        item.mask.write_png(dir.join(&entry.mask))?;
        text.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
        text.push('\n');
        entries.push(entry);
    }
    let manifest = dir.join(DATASET_MANIFEST);
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(entries)
}
