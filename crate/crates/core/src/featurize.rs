//! Conditioning layouts derived from an instance mask: the one-hot semantic
//! map, the per-pixel direction toward the owning nucleus centroid, and the
//! per-instance normalized interior distance that peaks on the medial axis.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};
use crate::mask::InstanceMask;
use crate::raster;

/// Two channels: background, nucleus.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap(pub Array3<f32>);

/// Two channels `(dx, dy)`; unit vectors toward the instance centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionMap(pub Array3<f32>);

/// One channel in `[0, 1]`, 1 on each instance's medial axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap(pub Array3<f32>);

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMaps {
    pub semantic: SemanticMap,
    pub direction: DirectionMap,
    pub distance: DistanceMap,
}

/// Condition maps resampled to each generator stage, coarsest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPyramid {
    pub levels: Vec<ConditionMaps>,
}

pub fn semantic_map(inst: &InstanceMask) -> SemanticMap {
    let labels = inst.labels();
    let (h, w) = labels.dim();
    let mut out = Array3::<f32>::zeros((2, h, w));
    for ((y, x), &l) in labels.indexed_iter() {
        out[(usize::from(l > 0), y, x)] = 1.0;
    }
    SemanticMap(out)
}

pub fn direction_map(inst: &InstanceMask) -> DirectionMap {
    let labels = inst.labels();
    let (h, w) = labels.dim();
    let n_ids = inst.max_label() as usize + 1;
    // Integer moments keep the centroid test exact under rotations and flips.
    let mut moments = vec![(0i64, 0i64, 0i64); n_ids];
    for ((y, x), &l) in labels.indexed_iter() {
        if l > 0 {
            let m = &mut moments[l as usize];
            m.0 += x as i64;
            m.1 += y as i64;
            m.2 += 1;
        }
    }
    let mut out = Array3::<f32>::zeros((2, h, w));
    for ((y, x), &l) in labels.indexed_iter() {
        if l == 0 {
            continue;
        }
        let (sx, sy, n) = moments[l as usize];
        // n * (centroid - pixel)
        let ex = sx - n * x as i64;
        let ey = sy - n * y as i64;
        // The centroid lies inside this pixel's closed unit square.
        if 2 * ex.abs() <= n && 2 * ey.abs() <= n {
            continue;
        }
        let (fx, fy) = (ex as f64, ey as f64);
        let norm = fx.hypot(fy);
        out[(0, y, x)] = (fx / norm) as f32;
        out[(1, y, x)] = (fy / norm) as f32;
    }
    DirectionMap(out)
}

pub fn distance_map(inst: &InstanceMask) -> DistanceMap {
    let labels = inst.labels();
    let (h, w) = labels.dim();
    let n_ids = inst.max_label() as usize + 1;
    // Bounding boxes: (y0, x0, y1, x1) inclusive.
    let mut boxes = vec![(usize::MAX, usize::MAX, 0usize, 0usize); n_ids];
    for ((y, x), &l) in labels.indexed_iter() {
        if l > 0 {
            let b = &mut boxes[l as usize];
            b.0 = b.0.min(y);
            b.1 = b.1.min(x);
            b.2 = b.2.max(y);
            b.3 = b.3.max(x);
        }
    }
    let mut out = Array3::<f32>::zeros((1, h, w));
    for (id, &(y0, x0, y1, x1)) in boxes.iter().enumerate().skip(1) {
        if y0 == usize::MAX {
            continue;
        }
        // One ring of padding guarantees a complement cell around the box;
        // cells beyond the image border count as complement.
        let (bh, bw) = (y1 - y0 + 3, x1 - x0 + 3);
        let inside = Array2::from_shape_fn((bh, bw), |(by, bx)| {
            let (y, x) = (by as isize + y0 as isize - 1, bx as isize + x0 as isize - 1);
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && labels[(y as usize, x as usize)] == id as u32
        });
        let sq = squared_edt(&inside);
        let max = sq.iter().copied().fold(0.0f64, f64::max).sqrt();
        for ((by, bx), &d2) in sq.indexed_iter() {
            if inside[(by, bx)] {
                out[(0, by + y0 - 1, bx + x0 - 1)] = (d2.sqrt() / max) as f32;
            }
        }
    }
    DistanceMap(out)
}

/// Exact squared Euclidean distance from every `true` cell to the nearest
/// `false` cell (separable lower-envelope transform). `false` cells map to 0.
pub fn squared_edt(inside: &Array2<bool>) -> Array2<f64> {
    let (h, w) = inside.dim();
    let big = ((h * h + w * w) as f64) * 4.0 + 1.0;
    let mut grid = inside.mapv(|v| if v { big } else { 0.0 });
    let mut buf = Vec::new();
    for mut col in grid.columns_mut() {
        buf.clear();
        buf.extend(col.iter().copied());
        let d = edt_1d(&buf);
        col.iter_mut().zip(d).for_each(|(c, v)| *c = v);
    }
    for mut row in grid.rows_mut() {
        buf.clear();
        buf.extend(row.iter().copied());
        let d = edt_1d(&buf);
        row.iter_mut().zip(d).for_each(|(c, v)| *c = v);
    }
    grid
}

fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| -> f64 {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64)
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut out = vec![0f64; n];
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
    out
}

pub fn featurize(inst: &InstanceMask) -> ConditionMaps {
    ConditionMaps {
        semantic: semantic_map(inst),
        direction: direction_map(inst),
        distance: distance_map(inst),
    }
}

impl ConditionMaps {
    pub const CHANNELS: usize = 5;

    pub fn height(&self) -> usize {
        self.semantic.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.semantic.0.dim().2
    }

    /// Channels in order: background, nucleus, dx, dy, distance.
    pub fn stacked(&self) -> Array3<f32> {
        ndarray::concatenate(
            Axis(0),
            &[self.semantic.0.view(), self.direction.0.view(), self.distance.0.view()],
        )
        .expect("maps share spatial dims")
    }

    pub fn from_stacked(stack: ArrayView3<'_, f32>) -> Result<Self> {
        if stack.dim().0 != Self::CHANNELS {
            return Err(Error::shape(
                format!("{} channels", Self::CHANNELS),
                format!("{} channels", stack.dim().0),
            ));
        }
        Ok(Self {
            semantic: SemanticMap(stack.slice(s![0..2, .., ..]).to_owned()),
            direction: DirectionMap(stack.slice(s![2..4, .., ..]).to_owned()),
            distance: DistanceMap(stack.slice(s![4..5, .., ..]).to_owned()),
        })
    }

    /// Applies a raster transform to the maps as plain channel stacks,
    /// without remapping vector components.
    pub fn map_raster(&self, f: impl Fn(ArrayView3<'_, f32>) -> Array3<f32>) -> Self {
        Self {
            semantic: SemanticMap(f(self.semantic.0.view())),
            direction: DirectionMap(f(self.direction.0.view())),
            distance: DistanceMap(f(self.distance.0.view())),
        }
    }

    /// Maps as they would be featurized from the mask rotated 90 degrees
    /// counter-clockwise: `(dx, dy)` becomes `(dy, -dx)`.
    pub fn rot90_ccw(&self) -> Self {
        let mut out = self.map_raster(raster::rot90_ccw3);
        let d = &mut out.direction.0;
        let dx = d.index_axis(Axis(0), 0).to_owned();
        let dy = d.index_axis(Axis(0), 1).to_owned();
        d.index_axis_mut(Axis(0), 0).assign(&dy);
        d.index_axis_mut(Axis(0), 1).assign(&dx.mapv(|v| -v));
        out
    }

    pub fn flip_h(&self) -> Self {
        let mut out = self.map_raster(raster::flip_h3);
        out.direction.0.index_axis_mut(Axis(0), 0).mapv_inplace(|v| -v);
        out
    }

    pub fn flip_v(&self) -> Self {
        let mut out = self.map_raster(raster::flip_v3);
        out.direction.0.index_axis_mut(Axis(0), 1).mapv_inplace(|v| -v);
        out
    }

    pub const MAGIC: &'static [u8; 8] = b"SIANMAPS";
    pub const VERSION: u16 = 1;

    /// Writes the stacked maps as `magic | version u16 | channels u32 |
    /// height u32 | width u32 | f32 payload`, little-endian, row-major.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        let stack = self.stacked();
        let (c, h, w) = stack.dim();
        out.write_all(Self::MAGIC)?;
        out.write_all(&Self::VERSION.to_le_bytes())?;
        for d in [c, h, w] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(c * h * w * 4);
        for v in stack.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)
    }

    pub fn read_from(mut input: impl Read, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: origin.to_path_buf(),
            reason,
        };
        let mut header = [0u8; 22];
        input
            .read_exact(&mut header)
            .map_err(|e| bad(format!("truncated header: {e}")))?;
        if &header[..8] != Self::MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u16::from_le_bytes([header[8], header[9]]);
        if version != Self::VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dim = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (c, h, w) = (dim(10), dim(14), dim(18));
        let mut payload = vec![0u8; c * h * w * 4];
        input
            .read_exact(&mut payload)
            .map_err(|e| bad(format!("truncated payload: {e}")))?;
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let stack = Array3::from_shape_vec((c, h, w), values).map_err(|e| bad(e.to_string()))?;
        Self::from_stacked(stack.view())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file), path)
    }
}

/// Resamples full-resolution maps to each target size: nearest neighbor for
/// the categorical semantic map, block means for direction and distance.
pub fn build_condition_pyramid(
    maps: &ConditionMaps,
    target_sizes: &[(usize, usize)],
) -> Result<ConditionPyramid> {
    let (h, w) = (maps.height(), maps.width());
    let mut levels = Vec::with_capacity(target_sizes.len());
    for &(th, tw) in target_sizes {
        if th == 0 || tw == 0 {
            return Err(Error::invalid(format!("pyramid target size must be positive, got {th}x{tw}")));
        }
        if th > h || tw > w || h % th != 0 || w % tw != 0 {
            return Err(Error::invalid(format!(
                "pyramid target {th}x{tw} does not evenly divide native {h}x{w}"
            )));
        }
        let (fy, fx) = (h / th, w / tw);
        if !fy.is_power_of_two() || !fx.is_power_of_two() {
            return Err(Error::invalid(format!(
                "pyramid target {th}x{tw} is not a dyadic reduction of {h}x{w}"
            )));
        }
        let nearest = |a: &Array3<f32>| a.slice(s![.., ..;fy, ..;fx]).to_owned();
        levels.push(ConditionMaps {
            semantic: SemanticMap(nearest(&maps.semantic.0)),
            direction: DirectionMap(block_mean(&maps.direction.0, fy, fx)),
            distance: DistanceMap(block_mean(&maps.distance.0, fy, fx)),
        });
    }
    Ok(ConditionPyramid { levels })
}

fn block_mean(a: &Array3<f32>, fy: usize, fx: usize) -> Array3<f32> {
    if fy == 1 && fx == 1 {
        return a.clone();
    }
    let (c, h, w) = a.dim();
    let mut out = Array3::<f32>::zeros((c, h / fy, w / fx));
    let scale = 1.0 / (fy * fx) as f64;
    Zip::indexed(&mut out).for_each(|(ch, y, x), o| {
        let block = a.slice(s![ch, y * fy..(y + 1) * fy, x * fx..(x + 1) * fx]);
        *o = (block.iter().map(|&v| v as f64).sum::<f64>() * scale) as f32;
    });
    out
}
