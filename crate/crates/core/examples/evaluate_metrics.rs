//! Region dice and 95th-percentile Hausdorff of perturbed references,
//! aggregated into the report table and boxplot rows.
//!
//! cargo run --release --example evaluate_metrics

use albuseg::metrics::{aggregate, cases_table, evaluate_case};
use albuseg::synth::{generate, PhantomSpec};
use albuseg::volume::SegmentationMap;

/// Shifts the labels `s` voxels along x, filling with background.
fn shifted(seg: &SegmentationMap, s: usize) -> albuseg::Result<SegmentationMap> {
    let [d, h, w] = seg.dims();
    let mut out = vec![0u8; seg.len()];
    for z in 0..d {
        for y in 0..h {
            for x in s..w {
                out[(z * h + y) * w + x] = seg.get(z, y, x - s);
            }
        }
    }
    SegmentationMap::new(seg.dims(), seg.spacing(), out)
}

fn main() -> albuseg::Result<()> {
    let cases = generate(&PhantomSpec::new([32, 64, 64], 4, 2))?;
    let mut scores = Vec::new();
    for (k, c) in cases.iter().enumerate() {
        scores.push(evaluate_case(c.scan.patient_id(), &shifted(&c.seg, k)?, &c.seg, 95.0)?);
    }
    print!("{}", cases_table(&scores));
    let report = aggregate(&scores, 1)?;
    print!("{}", report.to_table());
    print!("{}", report.to_boxplot());
    Ok(())
}
