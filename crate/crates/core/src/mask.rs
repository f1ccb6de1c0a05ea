//! Instance label maps: 0 is background, every positive id is one nucleus.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::raster;

const NEIGHBORS4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    labels: Array2<u32>,
}

impl InstanceMask {
    pub fn new(labels: Array2<u32>) -> Result<Self> {
        let (h, w) = labels.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!("instance mask must be at least 1x1, got {h}x{w}")));
        }
        Ok(Self { labels })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(Array2::zeros((height, width)))
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn labels(&self) -> ArrayView2<'_, u32> {
        self.labels.view()
    }

    pub fn into_labels(self) -> Array2<u32> {
        self.labels
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Sorted ids of the instances present in the mask.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut seen = vec![false; self.max_label() as usize + 1];
        for &l in self.labels.iter() {
            seen[l as usize] = true;
        }
        (1..seen.len() as u32).filter(|&l| seen[l as usize]).collect()
    }

    pub fn instance_count(&self) -> usize {
        self.instance_ids().len()
    }

    pub fn foreground_pixels(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    /// Whether every present id occupies exactly one 4-connected region.
    pub fn is_valid(&self) -> bool {
        let components = connected_components(self.labels.view(), |a, b| a == b && a > 0);
        let mut owner = vec![0u32; self.max_label() as usize + 1];
        for ((y, x), &c) in components.indexed_iter() {
            if c == 0 {
                continue;
            }
            let l = self.labels[(y, x)] as usize;
            if owner[l] == 0 {
                owner[l] = c;
            } else if owner[l] != c {
                return false;
            }
        }
        true
    }

    /// Splits fragmented ids into separate instances and renumbers all
    /// instances compactly as 1..=K in raster order of first appearance.
    pub fn relabeled(&self) -> Self {
        Self {
            labels: connected_components(self.labels.view(), |a, b| a == b && a > 0),
        }
    }

    pub fn rot90_ccw(&self) -> Self {
        Self {
            labels: raster::rot90_ccw(self.labels.view()),
        }
    }

    pub fn flip_h(&self) -> Self {
        Self {
            labels: raster::flip_h(self.labels.view()),
        }
    }

    pub fn flip_v(&self) -> Self {
        Self {
            labels: raster::flip_v(self.labels.view()),
        }
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<u32> = match img {
            DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
            DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
            other => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("expected a single-channel label image, found {:?}", other.color()),
                })
            }
        };
        let labels = Array2::from_shape_vec((h, w), data).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::new(labels)
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let max = self.max_label();
        if max > u16::MAX as u32 {
            return Err(Error::invalid(format!(
                "label {max} does not fit a 16-bit label image"
            )));
        }
        let raw: Vec<u16> = self.labels.iter().map(|&l| l as u16).collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width() as u32, self.height() as u32, raw)
                .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Labels the 4-connected components of `grid` under the `joins` relation,
/// numbering them 1.. in raster order. Cells for which `joins(v, v)` is false
/// are left at 0.
pub fn connected_components<T: Copy>(
    grid: ArrayView2<'_, T>,
    joins: impl Fn(T, T) -> bool,
) -> Array2<u32> {
    let (h, w) = grid.dim();
    let mut out = Array2::<u32>::zeros((h, w));
    let mut next = 1u32;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = grid[(y, x)];
            if out[(y, x)] != 0 || !joins(v, v) {
                continue;
            }
            out[(y, x)] = next;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                for (dy, dx) in NEIGHBORS4 {
                    let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if out[(ny, nx)] == 0 && joins(v, grid[(ny, nx)]) {
                        out[(ny, nx)] = next;
                        stack.push((ny, nx));
                    }
                }
            }
            next += 1;
        }
    }
    out
}
