//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! with its measured values and pinned tolerances; the binary exits nonzero
//! if any criterion fails. Runs without the libtest harness so the report is
//! always printed.

mod common;

use std::error::Error as StdError;
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3, Axis};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sian_core::config::{AugmentParams, Config};
use sian_core::data::{toy_items, DatasetItem};
use sian_core::downstream::{instances_from_seg, masks_to_seg_targets, run_augmentation_experiment, synthesize_set};
use sian_core::extractor::FeatureExtractor;
use sian_core::featurize::{featurize, ConditionMaps};
use sian_core::losses::{
    feature_matching_loss, hinge_d_loss, hinge_g_loss, kld_loss, perceptual_loss, total_generator_loss, LossParts,
    LossReport, LossWeights, Regularizer,
};
use sian_core::mask::InstanceMask;
use sian_core::maskgen::{generate_instance_mask, generate_mask_dataset, LayoutParams, NucleusPolygonParams};
use sian_core::metrics::{
    evaluate_sets, fid, match_instances, pq_metrics, ssim, ssim_signed, EvalSets, GaussianStats,
};
use sian_core::network::{
    stack_conditions, BatchConditions, CondTensors, NetworkConfig, ResBlockSpec, SianBlock, SianFlags, SianModel,
    SianResBlock, StyleVector,
};
use sian_core::nn::ParamStore;
use sian_core::synthesize::{StyleSource, Synthesizer};
use sian_core::train::{train, Batch, LogRecord, TrainOptions, Trainer};

use common::{brute_force_matching, jitter, random_boxes, same_matching, tiny_config, tiny_network};

type Outcome = Result<String, Box<dyn StdError>>;

fn fail(msg: impl Into<String>) -> Box<dyn StdError> {
    msg.into().into()
}

/// Pinned tolerances and budgets.
const STANDARDIZE_MEAN_TOL: f64 = 1e-4;
const STANDARDIZE_STD_TOL: f64 = 1e-3;
const C1_BUDGET: Duration = Duration::from_secs(5);
const FD_STEP: f64 = 1e-3;
const FD_REL_TOL: f64 = 1e-3;
const C2_BUDGET: Duration = Duration::from_secs(60);
const EQUIVARIANCE_TOL: f32 = 1e-6;
const FID_TOL: f64 = 1e-6;
const LOSS_TOL: f64 = 1e-9;
const OVERFIT_STEPS: u64 = 500;
/// Frozen from calibration runs on this exact fixture (0.69 at step 500).
const OVERFIT_SSIM_THRESHOLD: f64 = 0.6;
const C7_BUDGET: Duration = Duration::from_secs(600);
const LIVENESS_MIN_DIFF: f64 = 1e-3;
const TOTAL_BUDGET: Duration = Duration::from_secs(20 * 60);

fn main() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut overfit: Option<Trainer> = None;
    let mut report = |id: u32, name: &str, budget: Option<Duration>, run: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let result = run();
        let elapsed = t.elapsed();
        let over = budget.is_some_and(|b| elapsed > b);
        let budget_note = budget.map(|b| format!(", budget {:.0}s", b.as_secs_f64())).unwrap_or_default();
        match result {
            Ok(detail) if !over => {
                println!("criterion {id:>2} PASS [{name}] {detail} ({:.1}s{budget_note})", elapsed.as_secs_f64())
            }
            Ok(detail) => {
                println!("criterion {id:>2} FAIL [{name}] {detail}; over budget ({:.1}s{budget_note})", elapsed.as_secs_f64());
                failures.push(id);
            }
            Err(e) => {
                println!("criterion {id:>2} FAIL [{name}] {e} ({:.1}s{budget_note})", elapsed.as_secs_f64());
                failures.push(id);
            }
        }
    };
    report(1, "normalization unit suite", Some(C1_BUDGET), &mut criterion_1);
    report(2, "gradient suite", Some(C2_BUDGET), &mut criterion_2);
    report(3, "ablation reduction", None, &mut criterion_3);
    report(4, "featurize oracles", None, &mut criterion_4);
    report(5, "metric oracles", None, &mut criterion_5);
    report(6, "loss closed forms", None, &mut criterion_6);
    report(7, "overfit smoke", Some(C7_BUDGET), &mut || {
        let (detail, trainer) = criterion_7()?;
        overfit = Some(trainer);
        Ok(detail)
    });
    report(8, "style-path liveness", None, &mut || criterion_8(overfit.take()));
    report(9, "determinism", None, &mut criterion_9);
    report(10, "end-to-end integration", None, &mut || {
        let detail = criterion_10()?;
        let total = start.elapsed();
        if total > TOTAL_BUDGET {
            return Err(fail(format!("{detail}; acceptance wall-clock {:.0}s exceeds {:.0}s", total.as_secs_f64(), TOTAL_BUDGET.as_secs_f64())));
        }
        Ok(format!("{detail}; acceptance wall-clock so far {:.0}s <= {:.0}s", total.as_secs_f64(), TOTAL_BUDGET.as_secs_f64()))
    });
    if failures.is_empty() {
        println!("acceptance: all criteria passed in {:.1}s", start.elapsed().as_secs_f64());
    } else {
        println!("acceptance: failed criteria {failures:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], mean: f64, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            mean + std * z
        })
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    values(a).iter().zip(values(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn bitwise_equal(a: &Tensor, b: &Tensor) -> bool {
    a.dims() == b.dims() && values(a).iter().zip(values(b)).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn box_masks(n: usize, size: usize, seed: u64) -> Vec<InstanceMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_boxes(&mut rng, size)).collect()
}

fn cond_for(masks: &[InstanceMask]) -> CondTensors {
    let maps: Vec<ConditionMaps> = masks.iter().map(featurize).collect();
    stack_conditions(&maps.iter().collect::<Vec<_>>(), DType::F64).unwrap()
}

fn sian_block(seed: u64, flags: SianFlags) -> (ParamStore, SianBlock) {
    let mut store = ParamStore::new(DType::F64, seed);
    let block = SianBlock::new(&mut store, "sian", 4, 4, 6, flags).unwrap();
    (store, block)
}

/// Per-channel mean and population std over (N, H, W), computed with ndarray.
fn channel_moments(t: &Tensor) -> Vec<(f64, f64)> {
    let (n, c, h, w) = t.dims4().unwrap();
    let a = ndarray::Array4::from_shape_vec((n, c, h, w), values(t)).unwrap();
    (0..c)
        .map(|ch| {
            let x = a.index_axis(Axis(1), ch);
            let m = x.mean().unwrap();
            let var = x.mapv(|v| (v - m) * (v - m)).mean().unwrap();
            (m, var.sqrt())
        })
        .collect()
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = randn(&mut rng, &[2, 4, 8, 8], 3.0, 2.0);
    let cond = cond_for(&box_masks(2, 8, 1));
    let style = randn(&mut rng, &[2, 6], 0.0, 1.0);

    // zero modulation
    let (store, block) = sian_block(1, SianFlags::default());
    for name in store.names() {
        if name.contains("gamma_conv") || name.contains("beta_conv") {
            store.fill(&name, 0.0)?;
        }
    }
    let zero = block.forward(&h, &cond, &style)?;
    let zero_max = values(&zero).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if zero_max != 0.0 {
        return Err(fail(format!("gamma = beta = 0 left max |out| = {zero_max:e}")));
    }

    // unit gamma: the two branch biases 0.5 + 0.5, beta 0
    for name in store.names() {
        if name.contains("gamma_conv.bias") {
            store.fill(&name, 0.5)?;
        }
    }
    let unit = block.forward(&h, &cond, &style)?;
    let mut worst_mean = 0.0f64;
    let mut worst_std = 0.0f64;
    for (m, s) in channel_moments(&unit) {
        worst_mean = worst_mean.max(m.abs());
        worst_std = worst_std.max((s - 1.0).abs());
    }
    if worst_mean >= STANDARDIZE_MEAN_TOL || worst_std >= STANDARDIZE_STD_TOL {
        return Err(fail(format!("unit gamma: max |mean| {worst_mean:e}, max |std-1| {worst_std:e}")));
    }

    // branch additivity and the modulation formula, bitwise, on random weights
    let (_store, block) = sian_block(2, SianFlags::default());
    let (g, b) = block.modulation(&cond, &style)?;
    let (gi, bi) = block.branches[0].modulation(&cond, &style, block.flags)?;
    let (gj, bj) = block.branches[1].modulation(&cond, &style, block.flags)?;
    if !bitwise_equal(&g, &(&gi + &gj)?) || !bitwise_equal(&b, &(&bi + &bj)?) {
        return Err(fail("summed branch outputs differ from the fused modulation"));
    }
    let fused = block.forward(&h, &cond, &style)?;
    let manual = ((&g * block.standardize(&h)?)? + &b)?;
    if !bitwise_equal(&fused, &manual) {
        return Err(fail("forward differs from gamma * standardize(h) + beta"));
    }
    Ok(format!(
        "zero modulation -> max |out| 0; unit gamma -> max |mean| {worst_mean:.1e} < {STANDARDIZE_MEAN_TOL:.0e}, max |std-1| {worst_std:.1e} < {STANDARDIZE_STD_TOL:.0e}; branch sum bitwise"
    ))
}

// ---------------------------------------------------------------- criterion 2

/// Objective value and ReLU pattern at one perturbed point.
type Probe = (f64, Option<Vec<bool>>);

/// Counts of finite-difference probes across the gradient suite.
#[derive(Default)]
struct FdTally {
    entries: usize,
    straddled: usize,
}

/// Central differences over sampled entries of `var`, compared with the
/// analytic gradient `grad`. Returns the worst relative error.
///
/// `kinks` reports the on/off pattern of every ReLU the objective passes
/// through. An entry whose `+step` and `-step` evaluations land on different
/// patterns has no valid central difference at that step; its step is cut by
/// 10x until both sides share a pattern, and the entry is tallied.
fn fd_check(
    var: &Var,
    grad: &Tensor,
    loss: &mut dyn FnMut() -> f64,
    kinks: Option<&dyn Fn() -> Vec<bool>>,
    tally: &mut FdTally,
) -> Result<f64, Box<dyn StdError>> {
    const SAMPLES: usize = 12;
    let base = values(var.as_tensor());
    let analytic = values(grad);
    let shape = var.as_tensor().dims().to_vec();
    let n = base.len();
    let picks: Vec<usize> = if n <= SAMPLES {
        (0..n).collect()
    } else {
        (0..SAMPLES).map(|k| (k * n) / SAMPLES + (k * 7919) % (n / SAMPLES).max(1)).collect()
    };
    let mut at = |i: usize, delta: f64| -> Result<Probe, Box<dyn StdError>> {
        let mut v = base.clone();
        v[i] += delta;
        var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu)?)?;
        Ok((loss(), kinks.map(|k| k())))
    };
    let mut worst = 0.0f64;
    for i in picks {
        tally.entries += 1;
        let mut step = FD_STEP;
        let numeric = loop {
            let (lp, kp) = at(i, step)?;
            let (lm, km) = at(i, -step)?;
            if kp == km || step < 1e-8 {
                break (lp - lm) / (2.0 * step);
            }
            if step == FD_STEP {
                tally.straddled += 1;
            }
            step /= 10.0;
        };
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    var.set(&Tensor::from_vec(base, shape.as_slice(), &Device::Cpu)?)?;
    Ok(worst)
}

/// On/off pattern of the two ReLUs inside each branch of `block`.
fn relu_pattern(block: &SianBlock, cond: &CondTensors, style: &Tensor) -> Vec<bool> {
    let mut out = Vec::new();
    for br in &block.branches {
        let pre_a = br.semantic_conv.forward(&cond.semantic).unwrap();
        out.extend(values(&pre_a).iter().map(|v| *v > 0.0));
        let (n, hidden) = (pre_a.dims4().unwrap().0, pre_a.dims4().unwrap().1);
        let s = br.style_affine.forward(style).unwrap().reshape((n, hidden, 1, 1)).unwrap();
        let a = pre_a.relu().unwrap().broadcast_mul(&s).unwrap();
        let layout = if br.instance_conv.weight.dims()[1] == 2 { &cond.direction } else { &cond.distance };
        let b = (br.branch_conv.forward(&a).unwrap() * br.instance_conv.forward(layout).unwrap()).unwrap();
        out.extend(values(&br.compensation_conv.forward(&b).unwrap()).iter().map(|v| *v > 0.0));
    }
    out
}

/// Random values kept at least `gap` away from the listed kinks.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64, kinks: &[f64], gap: f64) -> Var {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| loop {
            let x = (rng.random::<f64>() * 2.0 - 1.0) * scale;
            if kinks.iter().all(|k| (x - k).abs() > gap) {
                break x;
            }
        })
        .collect();
    Var::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_groups: Vec<(String, f64)> = Vec::new();

    // every weight group of the normalization block, plus its inputs
    let (store, block) = sian_block(3, SianFlags::default());
    let h = Var::from_tensor(&randn(&mut rng, &[2, 4, 8, 8], 0.5, 1.5))?;
    let style = Var::from_tensor(&randn(&mut rng, &[2, 6], 0.0, 1.0))?;
    let cond = cond_for(&box_masks(2, 8, 2));
    let probe = randn(&mut rng, &[2, 4, 8, 8], 0.0, 1.0);
    let objective = |h: &Tensor, s: &Tensor| -> f64 {
        let y = block.forward(h, &cond, s).unwrap();
        (y * &probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
    };
    let pattern = || relu_pattern(&block, &cond, style.as_tensor());
    let mut tally = FdTally::default();
    let y = block.forward(h.as_tensor(), &cond, style.as_tensor())?;
    let grads = (y * &probe)?.sum_all()?.backward()?;
    for (name, var) in store.iter() {
        let g = grads.get(var).ok_or_else(|| fail(format!("no gradient for {name}")))?;
        let mut f = || objective(h.as_tensor(), style.as_tensor());
        worst_groups.push((name.clone(), fd_check(var, g, &mut f, Some(&pattern), &mut tally)?));
    }
    for (name, var) in [("input activation", &h), ("style vector", &style)] {
        let g = grads.get(var).ok_or_else(|| fail(format!("no gradient for {name}")))?;
        let mut f = || objective(h.as_tensor(), style.as_tensor());
        worst_groups.push((name.to_string(), fd_check(var, g, &mut f, Some(&pattern), &mut tally)?));
    }
    let sian_groups = store.len();

    // hinge discriminator and generator losses, two scales
    let real = [away_from(&mut rng, &[2, 1, 3, 3], 3.0, &[1.0, -1.0], 0.05), away_from(&mut rng, &[2, 1, 2, 2], 3.0, &[1.0, -1.0], 0.05)];
    let fake = [away_from(&mut rng, &[2, 1, 3, 3], 3.0, &[1.0, -1.0], 0.05), away_from(&mut rng, &[2, 1, 2, 2], 3.0, &[1.0, -1.0], 0.05)];
    let ts = |v: &[Var; 2]| [v[0].as_tensor().clone(), v[1].as_tensor().clone()];
    let d = |r: &[Var; 2], f: &[Var; 2]| hinge_d_loss(&ts(r), &ts(f)).unwrap().to_scalar::<f64>().unwrap();
    let grads = hinge_d_loss(&ts(&real), &ts(&fake))?.backward()?;
    for (side, vars) in [("real", &real), ("fake", &fake)] {
        for (k, v) in vars.iter().enumerate() {
            let mut f = || d(&real, &fake);
            worst_groups.push((format!("hinge_d/{side}{k}"), fd_check(v, grads.get(v).unwrap(), &mut f, None, &mut tally)?));
        }
    }
    let grads = hinge_g_loss(&ts(&fake))?.backward()?;
    for (k, v) in fake.iter().enumerate() {
        let mut f = || hinge_g_loss(&ts(&fake)).unwrap().to_scalar::<f64>().unwrap();
        worst_groups.push((format!("hinge_g/fake{k}"), fd_check(v, grads.get(v).unwrap(), &mut f, None, &mut tally)?));
    }

    // feature matching: fake features offset from constant real features
    let real_feats = vec![vec![randn(&mut rng, &[2, 3, 4, 4], 0.0, 1.0), randn(&mut rng, &[2, 5, 2, 2], 0.0, 1.0)]];
    let fake_feats: Vec<Var> = real_feats[0]
        .iter()
        .map(|r| {
            let off = away_from(&mut rng, r.dims(), 1.0, &[0.0], 0.05);
            Var::from_tensor(&(r + off.as_tensor()).unwrap()).unwrap()
        })
        .collect();
    let fm = || {
        let f = vec![fake_feats.iter().map(|v| v.as_tensor().clone()).collect::<Vec<_>>()];
        feature_matching_loss(&real_feats, &f).unwrap()
    };
    let grads = fm().backward()?;
    for (k, v) in fake_feats.iter().enumerate() {
        let mut f = || fm().to_scalar::<f64>().unwrap();
        worst_groups.push((format!("feature_match/layer{k}"), fd_check(v, grads.get(v).unwrap(), &mut f, None, &mut tally)?));
    }

    // perceptual loss through a 64-bit random extractor
    let extractor = FeatureExtractor::random(9, &[4, 6], vec![1.0, 0.5], DType::F64)?;
    let real_img = randn(&mut rng, &[2, 3, 8, 8], 0.0, 0.5);
    let fake_img = Var::from_tensor(&randn(&mut rng, &[2, 3, 8, 8], 0.0, 0.5))?;
    let grads = perceptual_loss(&real_img, fake_img.as_tensor(), &extractor)?.backward()?;
    let mut f = || perceptual_loss(&real_img, fake_img.as_tensor(), &extractor).unwrap().to_scalar::<f64>().unwrap();
    worst_groups.push(("perceptual/fake".into(), fd_check(&fake_img, grads.get(&fake_img).unwrap(), &mut f, None, &mut tally)?));

    // KL divergence w.r.t. both posterior parameters
    let mu = Var::from_tensor(&randn(&mut rng, &[2, 5], 0.0, 1.0))?;
    let logvar = Var::from_tensor(&randn(&mut rng, &[2, 5], 0.0, 0.5))?;
    let kld = || kld_loss(&StyleVector::from_posterior(mu.as_tensor().clone(), logvar.as_tensor().clone())).unwrap();
    let grads = kld().backward()?;
    for (name, v) in [("kld/mu", &mu), ("kld/logvar", &logvar)] {
        let mut f = || kld().to_scalar::<f64>().unwrap();
        worst_groups.push((name.into(), fd_check(v, grads.get(v).unwrap(), &mut f, None, &mut tally)?));
    }

    // weight regularizer hook
    let mut reg_store = ParamStore::new(DType::F64, 4);
    reg_store.param("gen.a", &[3, 4], sian_core::nn::Init::FanIn { fan_in: 4, gain: 1.0 })?;
    reg_store.param("gen.b", &[5], sian_core::nn::Init::FanIn { fan_in: 5, gain: 1.0 })?;
    let pen = || Regularizer::WeightL2.penalty(&reg_store, &["gen."]).unwrap().unwrap();
    let grads = pen().backward()?;
    for (name, var) in reg_store.iter() {
        let mut f = || pen().to_scalar::<f64>().unwrap();
        worst_groups.push((format!("reg/{name}"), fd_check(var, grads.get(var).unwrap(), &mut f, None, &mut tally)?));
    }

    let (worst_name, worst) = worst_groups
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .expect("groups checked");
    if worst >= FD_REL_TOL {
        let bad: Vec<_> = worst_groups.iter().filter(|g| g.1 >= FD_REL_TOL).collect();
        return Err(fail(format!("relative error >= {FD_REL_TOL:.0e} in {bad:?}")));
    }
    Ok(format!(
        "{} groups ({sian_groups} normalization weight groups, 2 block inputs, {} loss-term inputs), {} entries, worst rel err {worst:.1e} ({worst_name}) < {FD_REL_TOL:.0e}, step {FD_STEP:.0e}, f64; {} entries straddled a ReLU kink at full step and used a reduced step",
        worst_groups.len(),
        worst_groups.len() - sian_groups - 2,
        tally.entries,
        tally.straddled
    ))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let h = randn(&mut rng, &[2, 4, 8, 8], 0.0, 1.0);
    let base = cond_for(&box_masks(2, 8, 3));
    // same semantic map, unrelated instance layouts
    let other = CondTensors {
        semantic: base.semantic.clone(),
        direction: randn(&mut rng, &[2, 2, 8, 8], 0.0, 1.0),
        distance: randn(&mut rng, &[2, 1, 8, 8], 0.5, 0.3),
    };
    let s1 = randn(&mut rng, &[2, 6], 0.0, 1.0);
    let s2 = randn(&mut rng, &[2, 6], 0.0, 1.0);

    let off = SianFlags {
        instance: false,
        style: false,
    };
    let (_store, block) = sian_block(5, off);
    let reference = block.forward(&h, &base, &s1)?;
    for (cond, s) in [(&other, &s1), (&base, &s2), (&other, &s2)] {
        if !bitwise_equal(&reference, &block.forward(&h, cond, s)?) {
            return Err(fail("INST/STYLE off: normalization output depends on P, Q or S"));
        }
    }
    let mut store = ParamStore::new(DType::F64, 6);
    let spec = ResBlockSpec {
        in_channels: 4,
        out_channels: 3,
        hidden: 4,
        style_dim: 6,
        flags: off,
        skip_sian: true,
    };
    let resblock = SianResBlock::new(&mut store, "blk", spec)?;
    let r0 = resblock.forward(&h, &base, &s1)?;
    if !bitwise_equal(&r0, &resblock.forward(&h, &other, &s2)?) {
        return Err(fail("INST/STYLE off: residual block output depends on P, Q or S"));
    }

    // single switches isolate their own inputs; the full block sees both
    let diff = |flags: SianFlags, a: (&CondTensors, &Tensor), b: (&CondTensors, &Tensor)| -> f64 {
        let (_s, blk) = sian_block(5, flags);
        max_abs_diff(&blk.forward(&h, a.0, a.1).unwrap(), &blk.forward(&h, b.0, b.1).unwrap())
    };
    let inst_off = SianFlags {
        instance: false,
        style: true,
    };
    let style_off = SianFlags {
        instance: true,
        style: false,
    };
    let checks = [
        ("INST off, vary P/Q", diff(inst_off, (&base, &s1), (&other, &s1)) == 0.0),
        ("INST off, vary S", diff(inst_off, (&base, &s1), (&base, &s2)) > 0.0),
        ("STYLE off, vary S", diff(style_off, (&base, &s1), (&base, &s2)) == 0.0),
        ("STYLE off, vary P/Q", diff(style_off, (&base, &s1), (&other, &s1)) > 0.0),
        ("full, vary P/Q", diff(SianFlags::default(), (&base, &s1), (&other, &s1)) > 0.0),
        ("full, vary S", diff(SianFlags::default(), (&base, &s1), (&base, &s2)) > 0.0),
    ];
    if let Some((name, _)) = checks.iter().find(|c| !c.1) {
        return Err(fail(format!("switch isolation broken: {name}")));
    }

    // generator with both switches off: layout maps beyond M are ignored
    let cfg = NetworkConfig {
        inst: false,
        style: false,
        ..tiny_network()
    };
    let model = SianModel::new(cfg.clone(), DType::F32, 7)?;
    let masks = box_masks(2, 16, 4);
    let a = BatchConditions::from_masks(&masks, &cfg.level_sizes(), DType::F32)?;
    let scrambled: Vec<CondTensors> = a
        .levels
        .iter()
        .map(|l| CondTensors {
            semantic: l.semantic.clone(),
            direction: l.direction.affine(-1.0, 0.3).unwrap(),
            distance: l.distance.affine(0.5, 0.2).unwrap(),
        })
        .collect();
    let s = Tensor::randn(0f32, 1.0, (2, cfg.style_dim), &Device::Cpu)?;
    let ga = model.generator.forward(&s, &a.levels)?;
    let gb = model.generator.forward(&s, &scrambled)?;
    if !bitwise_equal(&ga, &gb) {
        return Err(fail("INST/STYLE off: generator output depends on P, Q"));
    }
    Ok("INST+STYLE off: block and residual block bitwise invariant to P, Q, S; generator invariant to P, Q; single switches isolate their inputs".into())
}

// ---------------------------------------------------------------- criterion 4

fn maskgen_16(seed: u64) -> InstanceMask {
    let layout = LayoutParams {
        canvas: (16, 16),
        nucleus_count_range: (1, 6),
        seed,
        ..LayoutParams::default()
    };
    let nucleus = NucleusPolygonParams {
        radius_range: (1.5, 5.0),
        ..NucleusPolygonParams::default()
    };
    generate_instance_mask(&mut ChaCha8Rng::seed_from_u64(seed), &layout, &nucleus).unwrap().mask
}

/// Test-side raster transforms: (rows, cols) index maps written out directly.
fn rot_ccw(a: &Array2<f32>) -> Array2<f32> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((w, h), |(r, c)| a[(c, w - 1 - r)])
}

fn rot_ccw_u32(a: &Array2<u32>) -> Array2<u32> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((w, h), |(r, c)| a[(c, w - 1 - r)])
}

fn flip_cols<T: Copy>(a: &Array2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(r, c)| a[(r, w - 1 - c)])
}

fn flip_rows<T: Copy>(a: &Array2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(r, c)| a[(h - 1 - r, c)])
}

fn channel(a: &Array3<f32>, c: usize) -> Array2<f32> {
    a.index_axis(Axis(0), c).to_owned()
}

fn worst(a: &Array2<f32>, b: &Array2<f32>) -> f32 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Per-instance Euclidean distance to the nearest pixel outside the
/// instance (other instances, background, or beyond the border),
/// normalized by the instance maximum; exhaustive search.
fn brute_force_distance(m: &InstanceMask) -> Array2<f32> {
    let l = m.labels();
    let (h, w) = l.dim();
    let mut raw = Array2::<f64>::zeros((h, w));
    for ((y, x), &id) in l.indexed_iter() {
        if id == 0 {
            continue;
        }
        let mut best = f64::INFINITY;
        for qy in -1..=h as isize {
            for qx in -1..=w as isize {
                let outside = qy < 0 || qx < 0 || qy >= h as isize || qx >= w as isize;
                if outside || l[(qy as usize, qx as usize)] != id {
                    let d = ((qy - y as isize).pow(2) + (qx - x as isize).pow(2)) as f64;
                    best = best.min(d.sqrt());
                }
            }
        }
        raw[(y, x)] = best;
    }
    let mut peak = vec![0.0f64; m.max_label() as usize + 1];
    for ((y, x), &id) in l.indexed_iter() {
        peak[id as usize] = peak[id as usize].max(raw[(y, x)]);
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let id = l[(y, x)];
        if id == 0 { 0.0 } else { (raw[(y, x)] / peak[id as usize]) as f32 }
    })
}

fn criterion_4() -> Outcome {
    let mut worst_eq = 0.0f32;
    let mut instances = 0usize;
    for seed in 0..100 {
        let m = maskgen_16(1000 + seed);
        instances += m.instance_count();
        let f = featurize(&m);
        let (dx, dy, q) = (channel(&f.direction.0, 0), channel(&f.direction.0, 1), channel(&f.distance.0, 0));
        let transformed = |labels: Array2<u32>| featurize(&InstanceMask::new(labels).unwrap());
        // rotation: (dx, dy) -> (dy, -dx)
        let r = transformed(rot_ccw_u32(&m.labels().to_owned()));
        let rot_checks = [
            worst(&channel(&r.direction.0, 0), &rot_ccw(&dy)),
            worst(&channel(&r.direction.0, 1), &rot_ccw(&dx).mapv(|v| -v)),
            worst(&channel(&r.distance.0, 0), &rot_ccw(&q)),
        ];
        // horizontal flip negates dx, vertical flip negates dy
        let fh = transformed(flip_cols(&m.labels().to_owned()));
        let fv = transformed(flip_rows(&m.labels().to_owned()));
        let flip_checks = [
            worst(&channel(&fh.direction.0, 0), &flip_cols(&dx).mapv(|v| -v)),
            worst(&channel(&fh.direction.0, 1), &flip_cols(&dy)),
            worst(&channel(&fh.distance.0, 0), &flip_cols(&q)),
            worst(&channel(&fv.direction.0, 0), &flip_rows(&dx)),
            worst(&channel(&fv.direction.0, 1), &flip_rows(&dy).mapv(|v| -v)),
            worst(&channel(&fv.distance.0, 0), &flip_rows(&q)),
        ];
        for v in rot_checks.into_iter().chain(flip_checks) {
            worst_eq = worst_eq.max(v);
        }
    }
    if worst_eq >= EQUIVARIANCE_TOL {
        return Err(fail(format!("equivariance error {worst_eq:e} >= {EQUIVARIANCE_TOL:e}")));
    }
    let mut worst_edt = 0.0f32;
    for seed in 0..50 {
        let m = maskgen_16(5000 + seed);
        let q = channel(&featurize(&m).distance.0, 0);
        worst_edt = worst_edt.max(worst(&q, &brute_force_distance(&m)));
    }
    if worst_edt >= EQUIVARIANCE_TOL {
        return Err(fail(format!("distance map vs brute-force EDT: {worst_edt:e}")));
    }
    Ok(format!(
        "100 masks ({instances} nuclei) rot90/flip max err {worst_eq:.1e} < {EQUIVARIANCE_TOL:.0e}; 50 masks brute-force EDT max err {worst_edt:.1e}"
    ))
}

// ---------------------------------------------------------------- criterion 5

fn boxes(h: usize, w: usize, bs: &[(usize, usize, usize, usize)]) -> InstanceMask {
    let mut l = Array2::<u32>::zeros((h, w));
    for (i, &(y, x, bh, bw)) in bs.iter().enumerate() {
        l.slice_mut(ndarray::s![y..y + bh, x..x + bw]).fill(i as u32 + 1);
    }
    InstanceMask::new(l).unwrap()
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut pairs_matched = 0;
    let mut worst_identity = 0.0f64;
    for i in 0..200 {
        let gt = random_boxes(&mut rng, 32);
        let pred = if i % 2 == 0 { jitter(&gt, &mut rng) } else { random_boxes(&mut rng, 32) };
        let got = match_instances(&gt, &pred)?;
        if !same_matching(&got, &brute_force_matching(&gt, &pred), 1e-12) {
            return Err(fail(format!("matching differs from exhaustive search on pair {i}")));
        }
        let s = pq_metrics(&got);
        worst_identity = worst_identity.max((s.pq - s.dq * s.sq).abs());
        pairs_matched += got.pairs.len();
    }
    if worst_identity > 1e-12 {
        return Err(fail(format!("PQ != DQ*SQ by {worst_identity:e}")));
    }

    let x = Array3::from_shape_fn((3, 16, 16), |_| rng.random::<f32>());
    if ssim(x.view(), x.view(), 1.0)? != 1.0 {
        return Err(fail("SSIM(x, x) != 1"));
    }

    let a = rand_cov(&mut rng, 5);
    let s = GaussianStats {
        mean: nalgebra::DVector::from_vec(vec![0.3, -0.2, 1.0, 0.0, 2.0]),
        cov: a.clone(),
        count: 8,
    };
    let same = fid(&s, &s)?;
    let d = [1.0, -0.5, 0.25, 2.0, 0.0];
    let shifted = GaussianStats {
        mean: &s.mean + nalgebra::DVector::from_row_slice(&d),
        ..s.clone()
    };
    let want: f64 = d.iter().map(|v| v * v).sum();
    let got = fid(&s, &shifted)?;
    if same.abs() >= FID_TOL || (got - want).abs() >= FID_TOL {
        return Err(fail(format!("FID identical {same:e}, mean shift {got} vs {want}")));
    }

    // hand-computed panoptic cases
    let two = boxes(20, 20, &[(0, 0, 4, 4), (10, 10, 4, 4)]);
    let one = boxes(20, 20, &[(0, 0, 4, 4)]);
    let c1 = pq_metrics(&match_instances(&two, &one)?);
    let gt = boxes(20, 20, &[(0, 0, 2, 5)]);
    let pred = boxes(20, 20, &[(0, 0, 2, 4), (15, 15, 3, 3)]);
    let c2 = pq_metrics(&match_instances(&gt, &pred)?);
    let perfect = pq_metrics(&match_instances(&two, &two)?);
    let exact = [
        (c1.dq, 2.0 / 3.0),
        (c1.sq, 1.0),
        (c1.pq, 2.0 / 3.0),
        (c2.dq, 1.0 / 1.5),
        (c2.sq, 0.8),
        (c2.pq, 0.8 * (1.0 / 1.5)),
        (perfect.pq, 1.0),
    ];
    if let Some((g, w)) = exact.iter().find(|(g, w)| (g - w).abs() > 1e-12) {
        return Err(fail(format!("hand-computed panoptic case: {g} vs {w}")));
    }
    Ok(format!(
        "200 pairs ({pairs_matched} matches) equal exhaustive search; PQ=DQ*SQ within {worst_identity:.0e}; SSIM(x,x)=1; FID identical {same:.1e}, shift err {:.1e} < {FID_TOL:.0e}; hand cases (2/3,1,2/3), (2/3,0.8,0.5333) exact",
        (got - want).abs()
    ))
}

fn rand_cov(rng: &mut ChaCha8Rng, d: usize) -> nalgebra::DMatrix<f64> {
    let a = nalgebra::DMatrix::from_fn(d, d + 3, |_, _| rng.random::<f64>() - 0.5);
    &a * a.transpose()
}

// ---------------------------------------------------------------- criterion 6

fn filled(v: f64, shape: &[usize]) -> Tensor {
    Tensor::full(v, shape, &Device::Cpu).unwrap()
}

fn scalar(t: Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn criterion_6() -> Outcome {
    let sh = [2, 1, 3, 3];
    let two_scales = |v: f64| vec![filled(v, &sh), filled(v, &[2, 1, 2, 2])];
    let mixed = Tensor::new(&[[-1.0f64, 1.0], [1.0, -1.0]], &Device::Cpu)?.reshape((1, 1, 2, 2))?;
    let ln2 = std::f64::consts::LN_2;
    let mut mu1 = vec![0.0; 4];
    mu1[0] = 1.0;
    let mut lv = vec![0.0; 4];
    lv[2] = ln2;
    let kl = |mu: Vec<f64>, logvar: Vec<f64>| {
        scalar(
            kld_loss(&StyleVector::from_posterior(
                Tensor::from_vec(mu, (1, 4), &Device::Cpu).unwrap(),
                Tensor::from_vec(logvar, (1, 4), &Device::Cpu).unwrap(),
            ))
            .unwrap(),
        )
    };
    let base = randn(&mut ChaCha8Rng::seed_from_u64(6), &[2, 3, 4, 4], 0.0, 1.0);
    let fm = |offsets: &[f64]| {
        let real: Vec<Tensor> = offsets.iter().map(|_| base.clone()).collect();
        let fake: Vec<Tensor> = offsets.iter().map(|o| (&base + *o).unwrap()).collect();
        scalar(feature_matching_loss(&[real], &[fake]).unwrap())
    };
    let cases: Vec<(&str, f64, f64)> = vec![
        ("hinge_d(2, -2)", scalar(hinge_d_loss(&two_scales(2.0), &two_scales(-2.0))?), 0.0),
        ("hinge_d(0, 0)", scalar(hinge_d_loss(&two_scales(0.0), &two_scales(0.0))?), 2.0),
        ("hinge_d(-1, 1)", scalar(hinge_d_loss(&two_scales(-1.0), &two_scales(1.0))?), 4.0),
        ("hinge_g(0)", scalar(hinge_g_loss(&two_scales(0.0))?), 0.0),
        ("hinge_g(3)", scalar(hinge_g_loss(&two_scales(3.0))?), -3.0),
        ("hinge_g(+-1)", scalar(hinge_g_loss(&[mixed])?), 0.0),
        ("fm identical", fm(&[0.0]), 0.0),
        ("fm +0.5", fm(&[0.5]), 0.5),
        ("fm 0.5 and 1.5", fm(&[0.5, 1.5]), 2.0),
        ("kld standard", kl(vec![0.0; 4], vec![0.0; 4]), 0.0),
        ("kld unit mean", kl(mu1, vec![0.0; 4]), 0.5),
        ("kld ln2 variance", kl(vec![0.0; 4], lv), 0.5 * (2.0 - ln2 - 1.0)),
    ];
    let mut worst = 0.0f64;
    for (name, got, want) in &cases {
        let err = (got - want).abs();
        if err > LOSS_TOL {
            return Err(fail(format!("{name}: {got} vs {want}")));
        }
        worst = worst.max(err);
    }

    // weighted total of unit parts under the default weights
    let ones = LossParts {
        gan: filled(1.0, &[]),
        feature_match: filled(1.0, &[]),
        perceptual: filled(1.0, &[]),
        kld: filled(1.0, &[]),
        reg: Some(filled(1.0, &[])),
    };
    let (_, r) = total_generator_loss(&ones, &LossWeights::default())?;
    if r.total != 21.05 {
        return Err(fail(format!("unit parts total {} != 21.05", r.total)));
    }

    // exact reconstruction on random parts and weights
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for _ in 0..100 {
        let v: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 3.0).collect();
        let w = LossWeights {
            adversarial: 1.0,
            feature_matching: rng.random::<f64>() * 20.0,
            perceptual: rng.random::<f64>() * 20.0,
            kld: rng.random::<f64>(),
            regularization: if rng.random_bool(0.5) { 0.0 } else { rng.random::<f64>() },
        };
        let parts = LossParts {
            gan: filled(v[0], &[]),
            feature_match: filled(v[1], &[]),
            perceptual: filled(v[2], &[]),
            kld: filled(v[3], &[]),
            reg: Some(filled(v[4], &[])),
        };
        let (t, r) = total_generator_loss(&parts, &w)?;
        let mut want = v[0];
        want += w.feature_matching * v[1];
        want += w.perceptual * v[2];
        want += w.kld * v[3];
        if w.regularization != 0.0 {
            want += w.regularization * v[4];
        }
        let rebuilt = LossReport::compose(r.gan, r.feature_match, r.perceptual, r.kld, r.reg, &w);
        if r.total.to_bits() != want.to_bits() || r.total.to_bits() != rebuilt.to_bits() {
            return Err(fail(format!("total {} vs reconstruction {want}", r.total)));
        }
        if (scalar(t) - want).abs() > LOSS_TOL * want.abs().max(1.0) {
            return Err(fail("graph total differs from the reported total"));
        }
    }
    Ok(format!("{} closed forms max err {worst:.1e} <= {LOSS_TOL:.0e}; unit parts total 21.05; 100 random totals reconstructed bitwise", cases.len()))
}

// ---------------------------------------------------------------- criterion 7

fn mean_ssim(reals: &[DatasetItem], fakes: &[Array3<f32>]) -> Result<f64, Box<dyn StdError>> {
    let mut total = 0.0;
    for (r, f) in reals.iter().zip(fakes) {
        total += ssim_signed(r.image.view(), f.view())?;
    }
    Ok(total / reals.len() as f64)
}

fn criterion_7() -> Result<(String, Trainer), Box<dyn StdError>> {
    let mut cfg = Config::default();
    cfg.train.batch_size = 2;
    cfg.augment = AugmentParams::off();
    let items = toy_items(2, 64, 7)?;
    let mut trainer = Trainer::new(cfg)?;
    let batch = Batch::from_items(&items, &trainer.model)?;
    let before = mean_ssim(&items, &trainer.reconstruct(&items)?)?;
    let mut last = None;
    for _ in 0..OVERFIT_STEPS {
        last = Some(trainer.train_step(&batch)?);
    }
    let after = mean_ssim(&items, &trainer.reconstruct(&items)?)?;
    let last = last.expect("steps ran");
    let detail = format!(
        "desk config {}x{} {} blocks, 2 patches, {OVERFIT_STEPS} steps: SSIM {before:.3} -> {after:.4} (threshold {OVERFIT_SSIM_THRESHOLD}); final g {:.3} d {:.3}",
        trainer.config.network.image_size,
        trainer.config.network.image_size,
        trainer.config.network.resblocks(),
        last.gan,
        last.discriminator
    );
    if after < OVERFIT_SSIM_THRESHOLD {
        return Err(fail(detail));
    }
    Ok((detail, trainer))
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8(trained: Option<Trainer>) -> Outcome {
    let (synth, origin) = match trained {
        Some(t) => (Synthesizer::from_model(t.model), "overfit model"),
        None => (Synthesizer::from_model(SianModel::new(NetworkConfig::desk(), DType::F32, 0)?), "initial model"),
    };
    let items = toy_items(2, 64, 7)?;
    let mean_diff = |a: &Array3<f32>, b: &Array3<f32>| (a - b).mapv(|v| v.abs() as f64).mean().unwrap();
    let style_a = StyleSource::Image(&items[0].image);
    let style_b = StyleSource::Image(&items[1].image);
    let mask_a = &items[0].mask;
    let mask_b = &items[1].mask;
    let by_style = mean_diff(&synth.synthesize(style_a, mask_a, None)?, &synth.synthesize(style_b, mask_a, None)?);
    let by_mask = mean_diff(
        &synth.synthesize(StyleSource::Image(&items[0].image), mask_a, None)?,
        &synth.synthesize(StyleSource::Image(&items[0].image), mask_b, None)?,
    );
    let detail = format!(
        "{origin}: two styles same mask mean |diff| {by_style:.4}, two masks same style {by_mask:.4} (> {LIVENESS_MIN_DIFF:.0e})"
    );
    if by_style > LIVENESS_MIN_DIFF && by_mask > LIVENESS_MIN_DIFF {
        Ok(detail)
    } else {
        Err(fail(detail))
    }
}

// ---------------------------------------------------------------- criterion 9

fn run_training(items: &[DatasetItem], cfg: &Config, dir: &Path) -> Result<(Vec<u8>, Vec<LogRecord>), Box<dyn StdError>> {
    let out = train(
        items,
        cfg,
        &TrainOptions {
            out_dir: dir.to_path_buf(),
            resume: None,
            interrupt: None,
        },
    )?;
    Ok((std::fs::read(&out.checkpoint)?, out.records))
}

fn criterion_9() -> Outcome {
    let items = toy_items(8, 16, 90)?;
    let cfg = tiny_config();
    let (d1, d2) = (tempfile::tempdir()?, tempfile::tempdir()?);
    let (ckpt_a, log_a) = run_training(&items, &cfg, d1.path())?;
    let (ckpt_b, log_b) = run_training(&items, &cfg, d2.path())?;
    if ckpt_a != ckpt_b || log_a != log_b {
        return Err(fail("two identical training runs diverged"));
    }
    let evals = log_a.iter().filter(|r| matches!(r, LogRecord::Eval { .. })).count();

    // evaluation of the trained model, twice
    let t = Trainer::load(&d1.path().join(sian_core::train::CHECKPOINT_FILE))?;
    let fakes = t.reconstruct(&items)?;
    let reals: Vec<Array3<f32>> = items.iter().map(|i| i.image.clone()).collect();
    let masks: Vec<InstanceMask> = items.iter().map(|i| i.mask.clone()).collect();
    let organs: Vec<String> = items.iter().map(|i| i.organ.clone()).collect();
    let extractor = FeatureExtractor::from_config(&cfg.extractor, DType::F32)?;
    let sets = EvalSets {
        real: &reals,
        fake: &fakes,
        gt_masks: &masks,
        pred_masks: Some(&masks),
        organs: Some(&organs),
    };
    let r1 = evaluate_sets(&sets, &extractor)?;
    let fakes_b = Trainer::load(&d2.path().join(sian_core::train::CHECKPOINT_FILE))?.reconstruct(&items)?;
    let sets_b = EvalSets { fake: &fakes_b, ..sets };
    let r2 = evaluate_sets(&sets_b, &FeatureExtractor::from_config(&cfg.extractor, DType::F32)?)?;
    if r1.to_json() != r2.to_json() {
        return Err(fail("evaluation reports differ"));
    }

    // 3 steps, checkpoint, 3 more == 6 uninterrupted
    let mut six = cfg.clone();
    six.train.max_steps = Some(6);
    let mut three = cfg.clone();
    three.train.max_steps = Some(3);
    let (full_dir, part_dir) = (tempfile::tempdir()?, tempfile::tempdir()?);
    let (full_ckpt, full_log) = run_training(&items, &six, full_dir.path())?;
    let head = train(
        &items,
        &three,
        &TrainOptions {
            out_dir: part_dir.path().to_path_buf(),
            resume: None,
            interrupt: None,
        },
    )?;
    let tail = train(
        &items,
        &six,
        &TrainOptions {
            out_dir: part_dir.path().to_path_buf(),
            resume: Some(head.checkpoint.clone()),
            interrupt: None,
        },
    )?;
    let steps = |log: &[LogRecord]| -> Vec<LossReport> {
        log.iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    };
    let resumed: Vec<LossReport> = steps(&head.records).into_iter().chain(steps(&tail.records)).collect();
    if steps(&full_log) != resumed {
        return Err(fail("resumed loss trajectory differs from the uninterrupted run"));
    }
    let a = Trainer::load(&full_dir.path().join(sian_core::train::CHECKPOINT_FILE))?.model.store.snapshot()?;
    let b = Trainer::load(&tail.checkpoint)?.model.store.snapshot()?;
    if a != b {
        return Err(fail("resumed weights differ from the uninterrupted run"));
    }
    Ok(format!(
        "two {}-epoch runs: checkpoints ({} bytes) and {} log records identical ({evals} evals); evaluation reports identical; 3+3 resumed steps == 6 uninterrupted (losses and weights bitwise); full checkpoint {} bytes",
        cfg.train.epochs,
        ckpt_a.len(),
        log_a.len(),
        full_ckpt.len()
    ))
}

// ---------------------------------------------------------------- criterion 10

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir()?;
    let mut cfg = tiny_config();
    cfg.train.epochs = 3;
    cfg.maskgen.layout.canvas = (16, 16);
    cfg.maskgen.layout.nucleus_count_range = (1, 4);
    cfg.maskgen.nucleus.radius_range = (2.0, 4.0);
    cfg.segmenter.epochs = 3;
    cfg.segmenter.width = 8;
    cfg.segmenter.synthetic_per_organ = 4;

    // maskgen -> featurize
    let mask_dir = tmp.path().join("masks");
    let entries = generate_mask_dataset(6, &cfg.maskgen.layout, &cfg.maskgen.nucleus, &mask_dir)?;
    let mut masks = Vec::new();
    for e in &entries {
        let m = InstanceMask::read_png(mask_dir.join(&e.name))?;
        let maps = featurize(&m);
        let path = tmp.path().join(format!("{}.maps", e.name));
        maps.save(&path)?;
        if ConditionMaps::load(&path)? != maps {
            return Err(fail("condition maps did not survive a save/load round trip"));
        }
        masks.push(m);
    }

    // toy checkpoint -> synthesize
    let real = toy_items(6, 16, 100)?;
    let run_dir = tmp.path().join("run");
    let out = train(
        &real,
        &cfg,
        &TrainOptions {
            out_dir: run_dir,
            resume: None,
            interrupt: None,
        },
    )?;
    let synth = Synthesizer::load(&out.checkpoint)?;
    let fakes = masks
        .iter()
        .zip(&real)
        .map(|(m, r)| synth.synthesize(StyleSource::Image(&r.image), m, None))
        .collect::<sian_core::Result<Vec<_>>>()?;

    // evaluate: generated images against the real set, masks scored by the
    // three-class round trip of the generated layouts
    let reals: Vec<Array3<f32>> = real.iter().map(|i| i.image.clone()).collect();
    let preds: Vec<InstanceMask> = masks.iter().map(|m| instances_from_seg(&masks_to_seg_targets(m))).collect();
    let organs: Vec<String> = real.iter().map(|i| i.organ.clone()).collect();
    let extractor = FeatureExtractor::from_config(&cfg.extractor, DType::F32)?;
    let metrics = evaluate_sets(
        &EvalSets {
            real: &reals,
            fake: &fakes,
            gt_masks: &masks,
            pred_masks: Some(&preds),
            organs: Some(&organs),
        },
        &extractor,
    )?;
    metrics.check_invariants()?;

    // downstream experiment
    let test = toy_items(4, 16, 200)?;
    let s = &cfg.segmenter;
    let synthetic = synthesize_set(&synth, &real, s.synthetic_per_organ, s.styles_per_organ, &cfg.maskgen, s.seed)?;
    let experiment = run_augmentation_experiment(&real, &synthetic, &test, s, &cfg.augment)?;
    if experiment.rows.len() != 3 {
        return Err(fail("experiment report must have three rows"));
    }
    for row in &experiment.rows {
        for v in [row.dq, row.sq, row.pq] {
            if !(0.0..=1.0).contains(&v) {
                return Err(fail(format!("{}: score {v} outside [0, 1]", row.setting)));
            }
        }
        if (row.pq - row.dq * row.sq).abs() > 1e-9 {
            return Err(fail(format!("{}: pq != dq * sq", row.setting)));
        }
    }
    let pq: Vec<String> = experiment.rows.iter().map(|r| format!("{} {:.3}", r.setting, r.pq)).collect();
    Ok(format!(
        "{} masks -> maps -> {} images; FID {:.3} SSIM {:.3} PQ {:.3} over {} organs; {} synthetic pairs; PQ rows [{}]",
        masks.len(),
        fakes.len(),
        metrics.overall.fid.unwrap_or(f64::NAN),
        metrics.overall.ssim,
        metrics.overall.pq.unwrap_or(f64::NAN),
        metrics.organs.len(),
        synthetic.len(),
        pq.join(", ")
    ))
}
