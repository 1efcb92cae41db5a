//! Misaligns the FLAIR and T2 of a phantom, then runs the pipeline
//! (reorient, mask, register to T1c, resample) and reports what it recovered.
//!
//! cargo run --release --example preprocess_pipeline

use albuseg::preprocess::{apply_rigid, run_pipeline, PipelineConfig, RigidTransform};
use albuseg::synth::{brain_mask, phantom, PhantomSpec};

fn main() -> albuseg::Result<()> {
    let spec = PhantomSpec::new([40, 64, 64], 1, 5);
    let case = phantom(&spec, 0)?;
    let ch = case.scan.channels();
    // same-modality pairs: each moved channel is registered back onto its own original
    let moves = [
        RigidTransform::new([0.08, -0.05, 0.03], [1.5, -2.0, 2.5]),
        RigidTransform::new([-0.06, 0.04, 0.07], [-2.0, 1.0, -1.5]),
    ];
    for (name, (vol, t)) in ["flair", "t2"].iter().zip([&ch[0], &ch[2]].into_iter().zip(&moves)) {
        let moved = apply_rigid(vol, t)?;
        let out = run_pipeline(&[moved, vol.clone()], None, &PipelineConfig { reference: 1, ..Default::default() })?;
        let got = &out.registrations[0].transform;
        let want = t.inverse();
        println!(
            "{name}: recovered angles {:?} translation {:?}; expected {:?} {:?}; ncc {:.4}",
            got.angles.map(|a| (a.to_degrees() * 100.0).round() / 100.0),
            got.translation.map(|v| (v * 100.0).round() / 100.0),
            want.angles.map(|a| (a.to_degrees() * 100.0).round() / 100.0),
            want.translation.map(|v| (v * 100.0).round() / 100.0),
            out.registrations[0].objective
        );
    }

    let mask = brain_mask(&case);
    let anisotropic = PipelineConfig { target_spacing: [2.0, 1.0, 1.0], ..Default::default() };
    let out = run_pipeline(ch, Some(&mask), &anisotropic)?;
    println!("resampled to 2x1x1 mm: dims {:?} -> {:?}", case.scan.dims(), out.volumes[0].dims());
    Ok(())
}
