//! Minimal layer toolkit over candle tensors: named parameter stores,
//! convolutions lowered to im2col + matmul, and an Adam optimizer whose
//! state can be checkpointed.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Parameter initialization rule.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Zero-mean Gaussian with standard deviation `gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Const(f64),
}

/// Parameter values by name: shape and flattened data.
pub type Snapshot = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Ordered map of trainable variables keyed by canonical dotted names.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn vars_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> {
        self.vars.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Creates a variable and returns a tensor sharing its storage.
    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Tensor> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::FanIn { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut self.rng);
                        z * std
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!("{name} {:?}", var.dims()), format!("{:?}", value.dims())));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn fill(&self, name: &str, value: f64) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        let t = Tensor::full(value, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Values of every parameter, flattened, for checkpointing or comparison.
    pub fn snapshot(&self) -> Result<Snapshot> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let data = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                Ok((k.clone(), (v.dims().to_vec(), data)))
            })
            .collect()
    }

    pub fn load_snapshot(&self, values: &Snapshot) -> Result<()> {
        for (name, var) in &self.vars {
            let (dims, data) = values
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if dims.as_slice() != var.dims() {
                return Err(Error::shape(format!("{name} {:?}", var.dims()), format!("{dims:?}")));
            }
            let t = Tensor::from_slice(data, dims.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.param(
            format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::FanIn { fan_in, gain: 1.0 },
        )?;
        let bias = if bias {
            Some(store.param(format!("{name}.bias"), &[out_ch], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Same-size 3x3 convolution with bias.
    pub fn same3(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Self::new(store, name, in_ch, out_ch, 3, 1, 1, true)
    }

    pub fn pointwise(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Self::new(store, name, in_ch, out_ch, 1, 1, 0, true)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

/// Cross-correlation of `x` (N, C, H, W) with `w` (O, C, K, K), computed as
/// a single matmul against the unfolded (C*K*K, N*Ho*Wo) column matrix.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, wc, k, k2) = w.dims4()?;
    if wc != c || k != k2 {
        return Err(Error::shape(format!("kernel for {c} input channels"), format!("{:?}", w.dims())));
    }
    let (hp, wp) = (h + 2 * padding, wd + 2 * padding);
    if hp < k || wp < k || stride == 0 {
        return Err(Error::shape(format!("input of at least {k}x{k} after padding"), format!("{hp}x{wp}")));
    }
    let (ho, wo) = ((hp - k) / stride + 1, (wp - k) / stride + 1);
    let w2 = w.reshape((o, c * k * k))?;
    let y = if k == 1 && stride == 1 && padding == 0 {
        let cols = x.transpose(0, 1)?.contiguous()?.reshape((c, n * h * wd))?;
        let y = w2.matmul(&cols)?;
        match bias {
            Some(b) => y.broadcast_add(&b.reshape((o, 1))?)?,
            None => y,
        }
    } else {
        let geom = Unfold {
            n,
            c,
            h,
            w: wd,
            k,
            stride,
            pad: padding,
            ho,
            wo,
        };
        // the trailing ones row of the column matrix multiplies the bias
        let cols = x.contiguous()?.apply_op1(Im2Col(geom))?;
        let b = match bias {
            Some(b) => b.reshape((o, 1))?,
            None => Tensor::zeros((o, 1), w.dtype(), w.device())?,
        };
        Tensor::cat(&[&w2, &b], 1)?.matmul(&cols)?
    };
    Ok(y.reshape((o, n, ho, wo))?.transpose(0, 1)?.contiguous()?)
}

/// Geometry of an unfold: rows are `(c, dy, dx)`, columns `(n, oy, ox)`.
#[derive(Debug, Clone, Copy)]
struct Unfold {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Unfold {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Calls `f(column_offset, input_offset, len, input_step)` for every
    /// in-bounds run of taps along an output row.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let cols = self.cols();
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..self.c {
            for dy in 0..self.k {
                for dx in 0..self.k {
                    let row = (ci * self.k + dy) * self.k + dx;
                    // valid ox satisfy 0 <= ox * s + dx - p < w
                    let lo = (p - dx as isize + s - 1).div_euclid(s).max(0) as usize;
                    let hi = ((self.w as isize + p - dx as isize + s - 1).div_euclid(s)).clamp(0, self.wo as isize) as usize;
                    if lo >= hi {
                        continue;
                    }
                    for b in 0..self.n {
                        let plane = (b * self.c + ci) * self.h * self.w;
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + dy) as isize - p;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let col = row * cols + (b * self.ho + oy) * self.wo + lo;
                            let ix = (lo * self.stride + dx) as isize - p;
                            let src = plane + iy as usize * self.w + ix as usize;
                            f(col, src, hi - lo, self.stride);
                        }
                    }
                }
            }
        }
    }

    /// Column matrix with a trailing row of ones that carries the bias.
    fn unfold<T: Copy + Default>(&self, x: &[T], one: T) -> Vec<T> {
        let cols = self.cols();
        let mut out = vec![T::default(); (self.rows() + 1) * cols];
        self.for_each_run(|o, i, len, step| {
            let dst = &mut out[o..o + len];
            if step == 1 {
                dst.copy_from_slice(&x[i..i + len]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = x[i + j * step];
                }
            }
        });
        out[self.rows() * cols..].fill(one);
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.n * self.c * self.h * self.w];
        self.for_each_run(|o, i, len, step| {
            let src = &cols[o..o + len];
            if step == 1 {
                for (d, &v) in out[i..i + len].iter_mut().zip(src) {
                    *d += v;
                }
            } else {
                for (j, &v) in src.iter().enumerate() {
                    out[i + j * step] += v;
                }
            }
        });
        out
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("unfold expects a contiguous tensor"),
    }
}

struct Im2Col(Unfold);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.unfold(contiguous_slice(v, layout)?, 1.0)),
            CpuStorage::F64(v) => CpuStorage::F64(g.unfold(contiguous_slice(v, layout)?, 1.0)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, Shape::from((g.rows() + 1, g.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = self.0;
        Ok(Some(grad.narrow(0, 0, g.rows())?.contiguous()?.apply_op1(Col2Im(g))?))
    }
}

struct Col2Im(Unfold);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.fold(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.fold(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = self.0;
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(g))?.narrow(0, 0, g.rows())?))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias_init: f64) -> Result<Self> {
        Self::with_gain(store, name, in_dim, out_dim, 1.0, bias_init)
    }

    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        bias_init: f64,
    ) -> Result<Self> {
        let weight = store.param(
            format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::FanIn { fan_in: in_dim, gain },
        )?;
        let bias = store.param(format!("{name}.bias"), &[out_dim], Init::Const(bias_init))?;
        Ok(Self { weight, bias })
    }

    /// `x` is (N, in_dim).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * 2, w * 2)?)
}

/// Sum of `|x|` as f64; NaN or infinite when any element is.
pub fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let s = x.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Adam with bias correction; state is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Applies one update to every variable in `store` whose name starts with
    /// one of `prefixes` and that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &candle_core::backprop::GradStore, prefixes: &[&str]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.iter() {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let Some(g) = grads.get(var) else { continue };
            let g = g.detach();
            let m = match self.first_moment.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.second_moment.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            let next = (var.as_tensor().detach() - (update * self.lr)?)?;
            var.set(&next)?;
            self.first_moment.insert(name.clone(), m);
            self.second_moment.insert(name.clone(), v);
        }
        Ok(())
    }
}
