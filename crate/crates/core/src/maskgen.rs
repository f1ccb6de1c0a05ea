//! Synthetic nucleus-like instance masks built from perturbed ellipses.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::InstanceMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NucleusPolygonParams {
    /// Semi-major axis range in pixels.
    pub radius_range: (f64, f64),
    pub eccentricity_range: (f64, f64),
    pub vertex_count: usize,
    /// Peak radial perturbation as a fraction of the local radius.
    pub radial_noise_amplitude: f64,
    pub smoothing_passes: usize,
}

impl Default for NucleusPolygonParams {
    fn default() -> Self {
        Self {
            radius_range: (4.0, 12.0),
            eccentricity_range: (0.0, 0.7),
            vertex_count: 24,
            radial_noise_amplitude: 0.25,
            smoothing_passes: 2,
        }
    }
}

impl NucleusPolygonParams {
    pub fn validate(&self) -> Result<()> {
        let (rmin, rmax) = self.radius_range;
        let (emin, emax) = self.eccentricity_range;
        if !(rmin > 0.0 && rmin <= rmax && rmax.is_finite()) {
            return Err(Error::invalid(format!("radius_range {:?} must satisfy 0 < min <= max", self.radius_range)));
        }
        if !(0.0 <= emin && emin <= emax && emax < 1.0) {
            return Err(Error::invalid(format!(
                "eccentricity_range {:?} must satisfy 0 <= min <= max < 1",
                self.eccentricity_range
            )));
        }
        if self.vertex_count < 8 {
            return Err(Error::invalid(format!("vertex_count {} must be at least 8", self.vertex_count)));
        }
        if !(0.0..=0.5).contains(&self.radial_noise_amplitude) {
            return Err(Error::invalid(format!(
                "radial_noise_amplitude {} must lie in [0, 0.5]",
                self.radial_noise_amplitude
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutParams {
    /// `(height, width)`
    pub canvas: (usize, usize),
    pub nucleus_count_range: (usize, usize),
    /// Largest tolerated overlap, as a fraction of the smaller polygon's area.
    pub max_pairwise_overlap_fraction: f64,
    pub cluster_probability: f64,
    /// Gap tolerance around an anchor nucleus when clustering, in pixels.
    pub cluster_spread: f64,
    pub seed: u64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        Self {
            canvas: (256, 256),
            nucleus_count_range: (60, 120),
            max_pairwise_overlap_fraction: 0.3,
            cluster_probability: 0.5,
            cluster_spread: 6.0,
            seed: 0,
        }
    }
}

impl LayoutParams {
    pub fn validate(&self) -> Result<()> {
        if self.canvas.0 < 16 || self.canvas.1 < 16 {
            return Err(Error::invalid(format!("canvas {:?} must be at least 16x16", self.canvas)));
        }
        if self.nucleus_count_range.0 > self.nucleus_count_range.1 {
            return Err(Error::invalid(format!(
                "nucleus_count_range {:?} has min > max",
                self.nucleus_count_range
            )));
        }
        if !(0.0..1.0).contains(&self.max_pairwise_overlap_fraction) {
            return Err(Error::invalid("max_pairwise_overlap_fraction must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.cluster_probability) {
            return Err(Error::invalid("cluster_probability must lie in [0, 1]"));
        }
        if self.cluster_spread.is_nan() || self.cluster_spread < 0.0 {
            return Err(Error::invalid("cluster_spread must be non-negative"));
        }
        Ok(())
    }
}

/// Closed polygon around `center`; the last vertex connects to the first.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub center: (f64, f64),
    pub vertices: Vec<(f64, f64)>,
}

impl Polygon {
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        let twice: f64 = (0..n)
            .map(|i| {
                let (x0, y0) = self.vertices[i];
                let (x1, y1) = self.vertices[(i + 1) % n];
                x0 * y1 - x1 * y0
            })
            .sum();
        twice.abs() / 2.0
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            center: (self.center.0 + dx, self.center.1 + dy),
            vertices: self.vertices.iter().map(|&(x, y)| (x + dx, y + dy)).collect(),
        }
    }

    /// Largest distance from the center to a vertex.
    pub fn outer_radius(&self) -> f64 {
        self.vertices
            .iter()
            .map(|&(x, y)| (x - self.center.0).hypot(y - self.center.1))
            .fold(0.0, f64::max)
    }

    /// Even-odd test.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = self.vertices[i];
            let (xj, yj) = self.vertices[j];
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    pub fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            let a = (self.vertices[i], self.vertices[(i + 1) % n]);
            for j in i + 1..n {
                // skip edges sharing a vertex
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                let b = (self.vertices[j], self.vertices[(j + 1) % n]);
                if segments_intersect(a, b) {
                    return false;
                }
            }
        }
        true
    }

    /// Row-major indices of the pixels whose centers lie inside the polygon,
    /// clipped to an `h x w` canvas. Pixel `(x, y)` has its center at `(x, y)`.
    pub fn rasterize(&self, h: usize, w: usize) -> Vec<usize> {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y) in &self.vertices {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let clamp = |v: f64, n: usize| v.max(0.0).min(n as f64 - 1.0);
        let (ya, yb) = (clamp(y0.ceil(), h) as usize, clamp(y1.floor(), h) as usize);
        let (xa, xb) = (clamp(x0.ceil(), w) as usize, clamp(x1.floor(), w) as usize);
        let mut out = Vec::new();
        if y1 < 0.0 || x1 < 0.0 || y0 > (h - 1) as f64 || x0 > (w - 1) as f64 {
            return out;
        }
        for y in ya..=yb {
            for x in xa..=xb {
                if self.contains(x as f64, y as f64) {
                    out.push(y * w + x);
                }
            }
        }
        out
    }
}

fn segments_intersect(a: ((f64, f64), (f64, f64)), b: ((f64, f64), (f64, f64))) -> bool {
    let orient = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| {
        (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0)
    };
    let d1 = orient(b.0, b.1, a.0);
    let d2 = orient(b.0, b.1, a.1);
    let d3 = orient(a.0, a.1, b.0);
    let d4 = orient(a.0, a.1, b.1);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

/// Samples a nucleus-like polygon centered at the origin: an ellipse with
/// random size, eccentricity and orientation whose vertices are scaled
/// radially by smoothed uniform noise.
pub fn sample_nucleus_polygon(rng: &mut ChaCha8Rng, params: &NucleusPolygonParams) -> Polygon {
    let (rmin, rmax) = params.radius_range;
    let (emin, emax) = params.eccentricity_range;
    let a = if rmax > rmin { rng.random_range(rmin..rmax) } else { rmin };
    let e = if emax > emin { rng.random_range(emin..emax) } else { emin };
    let b = a * (1.0 - e * e).sqrt();
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let n = params.vertex_count;
    let amp = params.radial_noise_amplitude;
    let (sin_t, cos_t) = theta.sin_cos();
    let ellipse: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            let (ex, ey) = (a * t.cos(), b * t.sin());
            (ex * cos_t - ey * sin_t, ex * sin_t + ey * cos_t)
        })
        .collect();
    let base = Polygon {
        center: (0.0, 0.0),
        vertices: ellipse.clone(),
    };
    if amp == 0.0 {
        return base;
    }
    for _ in 0..10 {
        let mut noise: Vec<f64> = (0..n).map(|_| rng.random_range(-amp..=amp)).collect();
        for _ in 0..params.smoothing_passes {
            noise = (0..n)
                .map(|i| (noise[(i + n - 1) % n] + noise[i] + noise[(i + 1) % n]) / 3.0)
                .collect();
        }
        let poly = Polygon {
            center: (0.0, 0.0),
            vertices: ellipse
                .iter()
                .zip(&noise)
                .map(|(&(x, y), &s)| (x * (1.0 + s), y * (1.0 + s)))
                .collect(),
        };
        if poly.is_simple() {
            return poly;
        }
    }
    base
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedMask {
    pub mask: InstanceMask,
    pub requested: usize,
    pub placed: usize,
    /// Set when the placement budget ran out before `requested` was reached.
    pub shortfall: bool,
}

pub fn generate_instance_mask(
    rng: &mut ChaCha8Rng,
    layout: &LayoutParams,
    nucleus: &NucleusPolygonParams,
) -> Result<GeneratedMask> {
    layout.validate()?;
    nucleus.validate()?;
    let (h, w) = layout.canvas;
    let (cmin, cmax) = layout.nucleus_count_range;
    let requested = if cmax > cmin { rng.random_range(cmin..=cmax) } else { cmin };

    struct Placed {
        polygon: Polygon,
        pixels: Vec<usize>,
    }
    let mut placed: Vec<Placed> = Vec::with_capacity(requested);
    // polygons covering each pixel, used for overlap accounting
    let mut cover: Vec<Vec<u32>> = vec![Vec::new(); h * w];
    let mut attempts = 0usize;
    let budget = 100 * requested;
    while placed.len() < requested && attempts < budget {
        attempts += 1;
        let shape = sample_nucleus_polygon(rng, nucleus);
        let center = if !placed.is_empty() && rng.random_bool(layout.cluster_probability) {
            let anchor = &placed[rng.random_range(0..placed.len())].polygon;
            let gap = rng.random_range(-layout.cluster_spread..=layout.cluster_spread);
            let dist = (anchor.outer_radius() + shape.outer_radius() + gap).max(0.0);
            let phi = rng.random_range(0.0..2.0 * std::f64::consts::PI);
            (anchor.center.0 + dist * phi.cos(), anchor.center.1 + dist * phi.sin())
        } else {
            (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64))
        };
        let polygon = shape.translated(center.0, center.1);
        let pixels = polygon.rasterize(h, w);
        if pixels.is_empty() {
            continue;
        }
        let mut shared = vec![0usize; placed.len()];
        for &p in &pixels {
            for &other in &cover[p] {
                shared[other as usize] += 1;
            }
        }
        let violates = shared.iter().enumerate().any(|(i, &s)| {
            s > 0 && s as f64 > layout.max_pairwise_overlap_fraction * pixels.len().min(placed[i].pixels.len()) as f64
        });
        if violates {
            continue;
        }
        let id = placed.len() as u32;
        for &p in &pixels {
            cover[p].push(id);
        }
        placed.push(Placed { polygon, pixels });
    }

    let mut labels = Array2::<u32>::zeros((h, w));
    {
        let flat = labels.as_slice_mut().expect("standard layout");
        for (i, p) in placed.iter().enumerate() {
            for &px in &p.pixels {
                flat[px] = i as u32 + 1;
            }
        }
    }
    let mask = InstanceMask::new(labels)?.relabeled();
    let shortfall = placed.len() < requested;
    if shortfall {
        log::warn!(
            "placed {} of {} nuclei within {} attempts",
            placed.len(),
            requested,
            budget
        );
    }
    Ok(GeneratedMask {
        mask,
        requested,
        placed: placed.len(),
        shortfall,
    })
}

/// SplitMix64 finalizer over the master seed and mask index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub instances: usize,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Writes `n` masks as `mask_00000.png ...` plus a line-delimited JSON
/// manifest. On any IO failure the files written so far are removed.
pub fn generate_mask_dataset(
    n: usize,
    layout: &LayoutParams,
    nucleus: &NucleusPolygonParams,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    layout.validate()?;
    nucleus.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| {
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let seed = derive_seed(layout.seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let generated = generate_instance_mask(&mut rng, layout, nucleus)?;
            let name = format!("mask_{i:05}.png");
            let path = out_dir.join(&name);
            written.push(path.clone());
            generated.mask.write_png(&path)?;
            entries.push(ManifestEntry {
                name,
                seed,
                instances: generated.mask.instance_count(),
            });
        }
        let manifest = out_dir.join(MANIFEST_NAME);
        written.push(manifest.clone());
        write_manifest(&manifest, &entries)?;
        Ok(entries)
    })();
    if result.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
    }
    result
}

fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        text.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}
