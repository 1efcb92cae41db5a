//! Sliding-window prediction over a phantom with an untrained tiny network:
//! window layout, probability sums and label counts.
//!
//! cargo run --release --example sliding_window_predict

use albuseg::inference::{predict_volume, SlidingWindowPlan, DEFAULT_STEPS};
use albuseg::network::{build_network, NetworkConfig};
use albuseg::synth::{phantom, PhantomSpec};
use albuseg::volume::{NormRegion, LABEL_CODES, NUM_CLASSES};

fn main() -> albuseg::Result<()> {
    let case = phantom(&PhantomSpec::new([40, 80, 72], 1, 3), 0)?;
    let scan = case.scan.normalized(NormRegion::Nonzero)?;
    let (net, params) = build_network::<f32>(NetworkConfig::tiny(), 1)?;
    let plan = SlidingWindowPlan::new(scan.dims(), [24, 64, 64], DEFAULT_STEPS)?;
    println!("dims {:?}, padded {:?}, {} windows", plan.dims, plan.padded, plan.origins.len());
    let (probs, labels) = predict_volume(&net, &params, &scan, &plan)?;
    let n = labels.len();
    let worst = (0..n)
        .map(|i| ((0..NUM_CLASSES).map(|c| probs.class(c)[i] as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    println!("max |sum of class probabilities - 1| = {worst:.2e}");
    for code in LABEL_CODES {
        println!("label {code}: {} voxels", labels.labels().iter().filter(|&&l| l == code).count());
    }
    Ok(())
}
