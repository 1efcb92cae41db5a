//! Sliding-window prediction with uniform overlap averaging.

use crate::error::{Error, Result};
use crate::network::{AlbuNet, Mode, NetworkParams};
use crate::tensor::Tensor;
use crate::training::sampling::pad_axis;
use crate::volume::{
    crop, nonzero_bounding_box, uncrop_labels, ClassProbabilityMap, MultiModalScan, NormRegion, SegmentationMap,
    NUM_CLASSES,
};

/// Window steps along (depth, height, width).
pub const DEFAULT_STEPS: [usize; 3] = [24, 32, 32];

/// Origins `0, step, 2·step, …` below `extent - patch`, plus the flush
/// origin `extent - patch`. `extent` must be at least `patch`.
pub fn window_positions(extent: usize, patch: usize, step: usize) -> Vec<usize> {
    assert!(extent >= patch && patch >= 1 && step >= 1, "window_positions({extent}, {patch}, {step})");
    let last = extent - patch;
    let mut out: Vec<usize> = (0..=last).step_by(step).collect();
    if *out.last().expect("origin 0") != last {
        out.push(last);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlidingWindowPlan {
    pub dims: [usize; 3],
    pub patch: [usize; 3],
    /// Effective steps; a step larger than the patch is reduced to it.
    pub steps: [usize; 3],
    /// Zeros inserted before the data on each axis.
    pub pad_before: [usize; 3],
    pub padded: [usize; 3],
    /// Window origins in padded coordinates, lexicographic.
    pub origins: Vec<[usize; 3]>,
}

impl SlidingWindowPlan {
    pub fn new(dims: [usize; 3], patch: [usize; 3], steps: [usize; 3]) -> Result<Self> {
        if patch.contains(&0) || steps.contains(&0) || dims.contains(&0) {
            return Err(Error::Config(format!(
                "dims {dims:?}, patch {patch:?} and steps {steps:?} must be positive"
            )));
        }
        let steps = [0, 1, 2].map(|a| steps[a].min(patch[a]));
        let pads = [0, 1, 2].map(|a| pad_axis(dims[a], patch[a]));
        let padded = pads.map(|p| p.1);
        let axes = [0, 1, 2].map(|a| window_positions(padded[a], patch[a], steps[a]));
        let mut origins = Vec::new();
        for &z in &axes[0] {
            for &y in &axes[1] {
                for &x in &axes[2] {
                    origins.push([z, y, x]);
                }
            }
        }
        Ok(SlidingWindowPlan { dims, patch, steps, pad_before: pads.map(|p| p.0), padded, origins })
    }
}

/// Zero-padded 3-channel copy of the scan on the plan's padded grid.
fn padded_input(scan: &MultiModalScan, plan: &SlidingWindowPlan) -> Vec<f32> {
    let [pd, ph, pw] = plan.padded;
    let [d, h, w] = plan.dims;
    let [bz, by, bx] = plan.pad_before;
    let np = pd * ph * pw;
    let mut out = vec![0.0f32; 3 * np];
    for c in 0..3 {
        let src = scan.channel(c).data();
        for z in 0..d {
            for y in 0..h {
                let s = (z * h + y) * w;
                let t = c * np + ((z + bz) * ph + y + by) * pw + bx;
                out[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    out
}

fn window_tensor(padded: &[f32], plan: &SlidingWindowPlan, origin: [usize; 3]) -> Tensor<f32> {
    let [pd, ph, pw] = plan.padded;
    let [kd, kh, kw] = plan.patch;
    let np = pd * ph * pw;
    let mut data = Vec::with_capacity(3 * kd * kh * kw);
    for c in 0..3 {
        for z in 0..kd {
            for y in 0..kh {
                let s = c * np + ((origin[0] + z) * ph + origin[1] + y) * pw + origin[2];
                data.extend_from_slice(&padded[s..s + kw]);
            }
        }
    }
    Tensor::from_vec(&[1, 3, kd, kh, kw], data).expect("window shape")
}

/// Mean of window softmax outputs per voxel (windows accumulated in plan
/// order), the padding removed, and its argmax labels.
pub fn predict_volume(
    net: &AlbuNet,
    params: &NetworkParams<f32>,
    scan: &MultiModalScan,
    plan: &SlidingWindowPlan,
) -> Result<(ClassProbabilityMap, SegmentationMap)> {
    if scan.dims() != plan.dims {
        return Err(Error::Shape(format!("plan for {:?} used on scan {:?}", plan.dims, scan.dims())));
    }
    let padded = padded_input(scan, plan);
    let [pd, ph, pw] = plan.padded;
    let [kd, kh, kw] = plan.patch;
    let np = pd * ph * pw;
    let nk = kd * kh * kw;
    let mut sum = vec![0.0f64; NUM_CLASSES * np];
    let mut count = vec![0u32; np];
    for &o in &plan.origins {
        let (probs, _) = net.forward(params, &window_tensor(&padded, plan, o), Mode::Eval)?;
        let p = probs.data();
        for z in 0..kd {
            for y in 0..kh {
                let row = ((o[0] + z) * ph + o[1] + y) * pw + o[2];
                let prow = (z * kh + y) * kw;
                for x in 0..kw {
                    count[row + x] += 1;
                    for c in 0..NUM_CLASSES {
                        sum[c * np + row + x] += p[c * nk + prow + x] as f64;
                    }
                }
            }
        }
    }
    let [d, h, w] = plan.dims;
    let [bz, by, bx] = plan.pad_before;
    let n = d * h * w;
    let mut probs = vec![0.0f32; NUM_CLASSES * n];
    for c in 0..NUM_CLASSES {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let pi = ((z + bz) * ph + y + by) * pw + x + bx;
                    probs[c * n + (z * h + y) * w + x] = (sum[c * np + pi] / count[pi] as f64) as f32;
                }
            }
        }
    }
    let map = ClassProbabilityMap::new(plan.dims, probs)?;
    let labels = map.argmax(scan.spacing())?;
    Ok((map, labels))
}

/// Full-grid labels for a raw scan: normalize, crop to the nonzero box,
/// predict, and place the result back on the original grid.
pub fn predict_case(
    net: &AlbuNet,
    params: &NetworkParams<f32>,
    scan: &MultiModalScan,
    patch: [usize; 3],
    steps: [usize; 3],
    region: NormRegion,
) -> Result<SegmentationMap> {
    let bbox = nonzero_bounding_box(scan)?;
    let (cropped, _) = crop(&scan.normalized(region)?, None, &bbox)?;
    let plan = SlidingWindowPlan::new(cropped.dims(), patch, steps)?;
    let (_, labels) = predict_volume(net, params, &cropped, &plan)?;
    uncrop_labels(&labels, &bbox, scan.dims())
}

/// [`predict_case`] that also returns full-grid probabilities; voxels
/// outside the nonzero box are certain background.
pub fn predict_case_probs(
    net: &AlbuNet,
    params: &NetworkParams<f32>,
    scan: &MultiModalScan,
    patch: [usize; 3],
    steps: [usize; 3],
    region: NormRegion,
) -> Result<(ClassProbabilityMap, SegmentationMap)> {
    let bbox = nonzero_bounding_box(scan)?;
    let (cropped, _) = crop(&scan.normalized(region)?, None, &bbox)?;
    let plan = SlidingWindowPlan::new(cropped.dims(), patch, steps)?;
    let (probs, labels) = predict_volume(net, params, &cropped, &plan)?;
    let [d, h, w] = scan.dims();
    let n = d * h * w;
    let [ed, eh, ew] = bbox.extent();
    let [(z0, _), (y0, _), (x0, _)] = bbox.0;
    let mut full = vec![0.0f32; NUM_CLASSES * n];
    full[..n].fill(1.0);
    for c in 0..NUM_CLASSES {
        let src = probs.class(c);
        for z in 0..ed {
            for y in 0..eh {
                let s = (z * eh + y) * ew;
                let t = c * n + ((z + z0) * h + y + y0) * w + x0;
                full[t..t + ew].copy_from_slice(&src[s..s + ew]);
            }
        }
    }
    Ok((ClassProbabilityMap::new(scan.dims(), full)?, uncrop_labels(&labels, &bbox, scan.dims())?))
}
