//! Lossless geometric transforms on 2-D grids and channel-first stacks.
//!
//! Coordinates follow the image convention: `x` grows rightward along
//! columns and `y` grows downward along rows.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};

/// Rotates a grid 90 degrees counter-clockwise as seen on screen.
/// Pixel `(x, y)` of an `H x W` grid lands at `(y, W - 1 - x)`.
pub fn rot90_ccw<T: Clone>(a: ArrayView2<'_, T>) -> Array2<T> {
    a.t().slice(s![..;-1, ..]).to_owned()
}

pub fn flip_h<T: Clone>(a: ArrayView2<'_, T>) -> Array2<T> {
    a.slice(s![.., ..;-1]).to_owned()
}

pub fn flip_v<T: Clone>(a: ArrayView2<'_, T>) -> Array2<T> {
    a.slice(s![..;-1, ..]).to_owned()
}

pub fn rot90_ccw3<T: Clone>(a: ArrayView3<'_, T>) -> Array3<T> {
    a.permuted_axes([0, 2, 1]).slice(s![.., ..;-1, ..]).to_owned()
}

pub fn flip_h3<T: Clone>(a: ArrayView3<'_, T>) -> Array3<T> {
    a.slice(s![.., .., ..;-1]).to_owned()
}

pub fn flip_v3<T: Clone>(a: ArrayView3<'_, T>) -> Array3<T> {
    a.slice(s![.., ..;-1, ..]).to_owned()
}

/// Reflect-pads (edge pixel not repeated) the bottom and right of a grid.
/// Falls back to symmetric repetition when the pad exceeds the source size.
pub fn mirror_pad<T: Clone>(a: ArrayView2<'_, T>, height: usize, width: usize) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((height, width), |(y, x)| {
        a[(mirror_index(y, h), mirror_index(x, w))].clone()
    })
}

pub fn mirror_pad3<T: Clone>(a: ArrayView3<'_, T>, height: usize, width: usize) -> Array3<T> {
    let (c, h, w) = a.dim();
    Array3::from_shape_fn((c, height, width), |(ch, y, x)| {
        a[(ch, mirror_index(y, h), mirror_index(x, w))].clone()
    })
}

fn mirror_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}
