//! Uniform patch sampling with symmetric zero padding of short axes.

use rand::Rng;

use crate::volume::{MultiModalScan, SegmentationMap};

/// Co-located input (3 channels) and label patches, both indexed `(z, y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub dims: [usize; 3],
    /// `3 × D × H × W`, channel-major.
    pub input: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Patch {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Padding before the data on one axis and the padded extent. A shorter
/// axis is centred, any odd remainder going after the data.
pub fn pad_axis(extent: usize, patch: usize) -> (usize, usize) {
    if extent >= patch {
        (0, extent)
    } else {
        ((patch - extent) / 2, patch)
    }
}

/// Number of admissible origins per axis.
pub fn origin_counts(dims: [usize; 3], patch: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| pad_axis(dims[a], patch[a]).1 - patch[a] + 1)
}

/// Origin drawn uniformly over all positions of the padded volume.
pub fn sample_origin<R: Rng + ?Sized>(dims: [usize; 3], patch: [usize; 3], rng: &mut R) -> [usize; 3] {
    origin_counts(dims, patch).map(|n| rng.random_range(0..n))
}

/// Cuts the patch at `origin`, given in padded coordinates.
pub fn extract_patch(scan: &MultiModalScan, seg: &SegmentationMap, patch: [usize; 3], origin: [usize; 3]) -> Patch {
    let dims = scan.dims();
    let before = [0, 1, 2].map(|a| pad_axis(dims[a], patch[a]).0);
    let n = patch.iter().product::<usize>();
    let mut input = vec![0.0f32; 3 * n];
    let mut labels = vec![0u8; n];
    let src = |a: usize, p: usize| -> Option<usize> {
        let q = (origin[a] + p).checked_sub(before[a])?;
        (q < dims[a]).then_some(q)
    };
    for z in 0..patch[0] {
        let Some(sz) = src(0, z) else { continue };
        for y in 0..patch[1] {
            let Some(sy) = src(1, y) else { continue };
            for x in 0..patch[2] {
                let Some(sx) = src(2, x) else { continue };
                let si = (sz * dims[1] + sy) * dims[2] + sx;
                let di = (z * patch[1] + y) * patch[2] + x;
                for c in 0..3 {
                    input[c * n + di] = scan.channel(c).data()[si];
                }
                labels[di] = seg.labels()[si];
            }
        }
    }
    Patch { dims: patch, input, labels }
}

pub fn sample_patch<R: Rng + ?Sized>(
    scan: &MultiModalScan,
    seg: &SegmentationMap,
    patch: [usize; 3],
    rng: &mut R,
) -> Patch {
    let origin = sample_origin(scan.dims(), patch, rng);
    extract_patch(scan, seg, patch, origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Volume3D;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn ramp_case(dims: [usize; 3]) -> (MultiModalScan, SegmentationMap) {
        let n: usize = dims.iter().product();
        let v = |k: f32| Volume3D::new(dims, [1.0; 3], (0..n).map(|i| i as f32 + k).collect()).unwrap();
        let scan = MultiModalScan::new(v(1.0), v(2.0), v(3.0), "p").unwrap();
        let seg = SegmentationMap::new(dims, [1.0; 3], (0..n).map(|i| [0, 1, 2, 4][i % 4]).collect()).unwrap();
        (scan, seg)
    }

    #[test]
    fn exact_size_has_one_origin() {
        let (scan, seg) = ramp_case([4, 6, 5]);
        assert_eq!(origin_counts([4, 6, 5], [4, 6, 5]), [1, 1, 1]);
        let p = sample_patch(&scan, &seg, [4, 6, 5], &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(&p.input[..120], scan.channel(0).data());
        assert_eq!(p.labels, seg.labels());
    }

    #[test]
    fn full_size_patch_origin_counts() {
        assert_eq!(origin_counts([30, 160, 160], [24, 128, 128]), [7, 33, 33]);
        assert_eq!(origin_counts([10, 128, 128], [24, 128, 128]), [1, 1, 1]);
        assert_eq!(pad_axis(10, 24), (7, 24));
    }

    #[test]
    fn short_axis_is_centred() {
        let (scan, seg) = ramp_case([2, 2, 2]);
        let p = extract_patch(&scan, &seg, [5, 2, 2], [0, 0, 0]);
        // pad 1 before, 2 after along z
        assert!(p.input[..4].iter().all(|&v| v == 0.0));
        assert_eq!(p.input[4], 1.0);
        assert_eq!(p.input[8..12], [5.0, 6.0, 7.0, 8.0]);
        assert!(p.input[12..20].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_and_labels_aligned() {
        let (scan, seg) = ramp_case([6, 7, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = sample_patch(&scan, &seg, [3, 4, 4], &mut rng);
            for (i, &l) in p.labels.iter().enumerate() {
                let src = (p.input[i] - 1.0) as usize;
                assert_eq!(l, [0, 1, 2, 4][src % 4]);
                assert_eq!(p.input[2 * p.voxels() + i], p.input[i] + 2.0);
            }
        }
    }

    #[test]
    fn origins_pass_chi_square() {
        let dims = [30, 160, 160];
        let patch = [24, 128, 128];
        let counts = origin_counts(dims, patch);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hist = counts.map(|n| vec![0usize; n]);
        let draws = 10_000;
        for _ in 0..draws {
            let o = sample_origin(dims, patch, &mut rng);
            for a in 0..3 {
                hist[a][o[a]] += 1;
            }
        }
        for h in &hist {
            let expected = draws as f64 / h.len() as f64;
            let stat: f64 = h.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
            let p = 1.0 - ChiSquared::new((h.len() - 1) as f64).unwrap().cdf(stat);
            assert!(p > 0.01, "chi-square p = {p}");
        }
    }
}
