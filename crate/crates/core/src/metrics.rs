//! Region dice, percentile Hausdorff distance and cohort summaries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{regions_from_labels, Region, SegmentationMap};

/// Hausdorff value when exactly one of the two sets is empty.
pub const HD_SENTINEL: f64 = f64::INFINITY;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("masks have {a} and {b} voxels")));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both are empty.
pub fn dice_region(pred: &[bool], reference: &[bool]) -> Result<f64> {
    check_len(pred.len(), reference.len())?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &r) in pred.iter().zip(reference) {
        inter += (p && r) as usize;
        total += p as usize + r as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Voxels of the set with at least one 6-neighbour outside it; positions
/// beyond the grid count as outside.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                let inside = |dz: isize, dy: isize, dx: isize| {
                    let (zz, yy, xx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    zz >= 0
                        && yy >= 0
                        && xx >= 0
                        && (zz as usize) < d
                        && (yy as usize) < h
                        && (xx as usize) < w
                        && mask[((zz as usize) * h + yy as usize) * w + xx as usize]
                };
                out[i] = !(inside(-1, 0, 0)
                    && inside(1, 0, 0)
                    && inside(0, -1, 0)
                    && inside(0, 1, 0)
                    && inside(0, 0, -1)
                    && inside(0, 0, 1));
            }
        }
    }
    out
}

/// Exact squared distance transform along one line (lower envelope of
/// parabolas), positions `i * spacing`.
fn edt_1d(f: &mut [f64], spacing: f64, buf_v: &mut Vec<usize>, buf_z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    buf_v.clear();
    buf_z.clear();
    let pos = |i: usize| i as f64 * spacing;
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        loop {
            let Some(&v) = buf_v.last() else { break };
            let s = ((f[q] + pos(q) * pos(q)) - (f[v] + pos(v) * pos(v))) / (2.0 * (pos(q) - pos(v)));
            if s <= *buf_z.last().expect("paired") {
                buf_v.pop();
                buf_z.pop();
            } else {
                buf_v.push(q);
                buf_z.push(s);
                break;
            }
        }
        if buf_v.is_empty() {
            buf_v.push(q);
            buf_z.push(f64::NEG_INFINITY);
        }
    }
    if buf_v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for q in 0..n {
        while k + 1 < buf_v.len() && buf_z[k + 1] < pos(q) {
            k += 1;
        }
        let dq = pos(q) - pos(buf_v[k]);
        out.push(dq * dq + f[buf_v[k]]);
    }
    f.copy_from_slice(out);
}

/// Squared physical distance from every voxel to the nearest voxel of
/// `mask` (infinite everywhere when the mask is empty).
pub fn squared_distance_transform(mask: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let strides = [h * w, w, 1];
    let (mut bv, mut bz, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    for axis in [2, 1, 0] {
        let len = dims[axis];
        for start in 0..d * h * w {
            if (start / strides[axis]) % len != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|i| g[start + i * strides[axis]]));
            edt_1d(&mut line, spacing[axis], &mut bv, &mut bz, &mut out);
            for (i, &v) in line.iter().enumerate() {
                g[start + i * strides[axis]] = v;
            }
        }
    }
    g
}

/// Percentile of `values` with linear interpolation between order
/// statistics.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Symmetric Hausdorff statistic between boundary voxels, in mm: the larger
/// of the two directed `percentile`s of nearest-boundary distances.
pub fn hausdorff(pred: &[bool], reference: &[bool], dims: [usize; 3], spacing: [f64; 3], pct: f64) -> Result<f64> {
    check_len(pred.len(), reference.len())?;
    check_len(pred.len(), dims.iter().product())?;
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::Config(format!("percentile must be in [0, 100], got {pct}")));
    }
    let (pe, re) = (!pred.contains(&true), !reference.contains(&true));
    if pe && re {
        return Ok(0.0);
    }
    if pe || re {
        return Ok(HD_SENTINEL);
    }
    let bp = boundary(pred, dims);
    let br = boundary(reference, dims);
    let directed = |from: &[bool], to: &[bool]| {
        let dt = squared_distance_transform(to, dims, spacing);
        let mut d: Vec<f64> = from.iter().zip(&dt).filter(|(&f, _)| f).map(|(_, &v)| v.sqrt()).collect();
        percentile(&mut d, pct)
    };
    Ok(directed(&bp, &br).max(directed(&br, &bp)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    /// ET, WT, TC.
    pub dice: [f64; 3],
    /// ET, WT, TC in mm; [`HD_SENTINEL`] when one side is empty.
    pub hausdorff: [f64; 3],
}

pub fn evaluate_case(case_id: &str, pred: &SegmentationMap, reference: &SegmentationMap, pct: f64) -> Result<CaseScores> {
    if pred.dims() != reference.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and reference {:?} differ",
            pred.dims(),
            reference.dims()
        )));
    }
    let rp = regions_from_labels(pred);
    let rr = regions_from_labels(reference);
    let mut dice = [0.0; 3];
    let mut hd = [0.0; 3];
    for k in 0..3 {
        dice[k] = dice_region(&rp[k], &rr[k])?;
        hd[k] = hausdorff(&rp[k], &rr[k], reference.dims(), reference.spacing(), pct)?;
    }
    Ok(CaseScores { case_id: case_id.to_string(), dice, hausdorff: hd })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Finite values summarized.
    pub count: usize,
    /// Sentinel values left out of every statistic.
    pub infinite: usize,
    pub boxplot: BoxStats,
}

/// Statistics over the finite entries of `values`; `None` when there are
/// none.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    let infinite = values.len() - v.len();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let q1 = percentile(&mut v, 25.0);
    let median = percentile(&mut v, 50.0);
    let q3 = percentile(&mut v, 75.0);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().copied().filter(|&x| x >= lo_fence && x <= hi_fence).collect();
    let outliers = v.iter().copied().filter(|&x| x < lo_fence || x > hi_fence).collect();
    let boxplot = BoxStats {
        q1,
        median,
        q3,
        whisker_lo: inside.first().copied().unwrap_or(q1),
        whisker_hi: inside.last().copied().unwrap_or(q3),
        outliers,
    };
    Some(Summary { mean, median, std, count: v.len(), infinite, boxplot })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: usize,
    pub cases: usize,
    /// Per region (ET, WT, TC).
    pub dice: Vec<Option<Summary>>,
    pub hausdorff: Vec<Option<Summary>>,
}

/// Pools case scores (from `runs` prediction sets) into per-region summaries.
pub fn aggregate(cases: &[CaseScores], runs: usize) -> Result<Report> {
    if cases.is_empty() {
        return Err(Error::Config("no cases to aggregate".into()));
    }
    if runs == 0 {
        return Err(Error::Config("runs must be >= 1".into()));
    }
    let col = |k: usize, hd: bool| -> Vec<f64> {
        cases.iter().map(|c| if hd { c.hausdorff[k] } else { c.dice[k] }).collect()
    };
    Ok(Report {
        runs,
        cases: cases.len(),
        dice: (0..3).map(|k| summarize(&col(k, false))).collect(),
        hausdorff: (0..3).map(|k| summarize(&col(k, true))).collect(),
    })
}

fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "inf".into()
    }
}

impl Report {
    /// Table layout: one row per metric, `mean (median)` per region.
    pub fn to_table(&self) -> String {
        let mut s = String::from("metric");
        for r in Region::ALL {
            write!(s, "\t{}", r.name()).unwrap();
        }
        s.push_str("\tstd_ET\tstd_WT\tstd_TC\tinfinite\n");
        for (name, rows) in [("dice", &self.dice), ("hausdorff", &self.hausdorff)] {
            s.push_str(name);
            for r in rows.iter() {
                match r {
                    Some(x) => write!(s, "\t{} ({})", fmt_value(x.mean), fmt_value(x.median)).unwrap(),
                    None => s.push_str("\tnan"),
                }
            }
            for r in rows.iter() {
                write!(s, "\t{}", r.as_ref().map_or("nan".into(), |x| fmt_value(x.std))).unwrap();
            }
            let inf: usize = rows.iter().map(|r| r.as_ref().map_or(self.cases, |x| x.infinite)).sum();
            writeln!(s, "\t{inf}").unwrap();
        }
        s
    }

    /// One row per metric and region with the boxplot statistics.
    pub fn to_boxplot(&self) -> String {
        let mut s = String::from("metric\tregion\tq1\tmedian\tq3\twhisker_lo\twhisker_hi\toutliers\n");
        for (name, rows) in [("dice", &self.dice), ("hausdorff", &self.hausdorff)] {
            for (r, row) in Region::ALL.iter().zip(rows.iter()) {
                let Some(x) = row else { continue };
                let b = &x.boxplot;
                let outliers: Vec<String> = b.outliers.iter().map(|v| fmt_value(*v)).collect();
                writeln!(
                    s,
                    "{name}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.name(),
                    fmt_value(b.q1),
                    fmt_value(b.median),
                    fmt_value(b.q3),
                    fmt_value(b.whisker_lo),
                    fmt_value(b.whisker_hi),
                    outliers.join(",")
                )
                .unwrap();
            }
        }
        s
    }
}

/// Per-case rows: case id, three dice values, three Hausdorff values.
pub fn cases_table(cases: &[CaseScores]) -> String {
    let mut s = String::from("case\tdice_ET\tdice_WT\tdice_TC\thd_ET\thd_WT\thd_TC\n");
    for c in cases {
        s.push_str(&c.case_id);
        for v in c.dice.iter().chain(&c.hausdorff) {
            write!(s, "\t{}", fmt_value(*v)).unwrap();
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> Vec<bool> {
        let mut m = vec![false; dims.iter().product()];
        for p in on {
            m[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] = true;
        }
        m
    }

    #[test]
    fn dice_examples() {
        let a = vec![true, true, false, false];
        assert_eq!(dice_region(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_region(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(dice_region(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(dice_region(&[false; 4], &a).unwrap(), 0.0);
        let r: Vec<bool> = (0..10).map(|i| i < 4).collect();
        let p: Vec<bool> = (0..10).map(|i| (1..7).contains(&i)).collect();
        assert_eq!(dice_region(&p, &r).unwrap(), 0.6);
        assert!(dice_region(&a, &[true]).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let dims = [1, 4, 5];
        let a = mask(dims, &[[0, 0, 0]]);
        let b = mask(dims, &[[0, 3, 4]]);
        assert_eq!(hausdorff(&a, &b, dims, [1.0; 3], 100.0).unwrap(), 5.0);
        assert_eq!(hausdorff(&a, &a, dims, [1.0; 3], 95.0).unwrap(), 0.0);
        assert_eq!(hausdorff(&a, &b, dims, [2.0; 3], 100.0).unwrap(), 10.0);
        let empty = vec![false; 20];
        assert_eq!(hausdorff(&empty, &empty, dims, [1.0; 3], 95.0).unwrap(), 0.0);
        assert_eq!(hausdorff(&empty, &a, dims, [1.0; 3], 95.0).unwrap(), HD_SENTINEL);
    }

    #[test]
    fn anisotropic_distance_transform() {
        let dims = [3, 4, 5];
        let m = mask(dims, &[[1, 2, 0]]);
        let sp = [2.0, 0.5, 1.5];
        let dt = squared_distance_transform(&m, dims, sp);
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    let e = ((z as f64 - 1.0) * 2.0).powi(2) + ((y as f64 - 2.0) * 0.5).powi(2) + (x as f64 * 1.5).powi(2);
                    assert!((dt[(z * 4 + y) * 5 + x] - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn boundary_of_solid_cube() {
        let dims = [3, 3, 3];
        let b = boundary(&vec![true; 27], dims);
        assert_eq!(b.iter().filter(|&&v| v).count(), 26);
        assert!(!b[13]);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&mut v, 50.0), 2.5);
        assert_eq!(percentile(&mut v, 100.0), 4.0);
        assert!((percentile(&mut v, 95.0) - 3.85).abs() < 1e-12);
    }

    #[test]
    fn evaluate_identical_maps() {
        let seg = SegmentationMap::new([2, 2, 2], [1.0; 3], vec![0, 1, 2, 4, 0, 0, 2, 4]).unwrap();
        let s = evaluate_case("a", &seg, &seg, 95.0).unwrap();
        assert_eq!(s.dice, [1.0; 3]);
        assert_eq!(s.hausdorff, [0.0; 3]);
        let bg = SegmentationMap::background([2, 2, 2], [1.0; 3]).unwrap();
        let s = evaluate_case("b", &bg, &seg, 95.0).unwrap();
        assert_eq!(s.dice, [0.0; 3]);
        assert!(s.hausdorff.iter().all(|h| h.is_infinite()));
    }

    #[test]
    fn aggregate_examples() {
        let case = |d: f64, h: f64| CaseScores { case_id: "c".into(), dice: [d; 3], hausdorff: [h; 3] };
        let r = aggregate(&[case(0.7, 3.0)], 1).unwrap();
        let s = r.dice[0].as_ref().unwrap();
        assert_eq!((s.mean, s.median, s.std), (0.7, 0.7, 0.0));
        let r = aggregate(&[case(0.2, 1.0), case(0.4, f64::INFINITY), case(0.9, 3.0)], 1).unwrap();
        let s = r.dice[1].as_ref().unwrap();
        assert!((s.mean - 0.5).abs() < 1e-12);
        assert_eq!(s.median, 0.4);
        let h = r.hausdorff[2].as_ref().unwrap();
        assert_eq!((h.mean, h.infinite, h.count), (2.0, 1, 2));
        assert!(aggregate(&[], 1).is_err());
        assert!(r.to_table().contains("0.5000 (0.4000)"));
    }

    #[test]
    fn boxplot_outliers() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(s.boxplot.outliers, vec![100.0]);
        assert_eq!(s.boxplot.whisker_hi, 4.0);
        assert_eq!(s.boxplot.whisker_lo, 1.0);
    }
}
