//! Patch augmentation: reflections, elastic deformation, noise and blur.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sampling::Patch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub reflect: bool,
    pub elastic: bool,
    pub noise: bool,
    pub blur: bool,
    /// Probability of each enabled transform (per axis for reflections).
    pub probability: f64,
    /// Control-point count per axis of the coarse displacement grid.
    pub elastic_grid: usize,
    /// Standard deviation of control-point displacements, in voxels.
    pub elastic_sigma: f64,
    /// Noise standard deviation is drawn from `U[0, noise_max]`.
    pub noise_max: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            reflect: true,
            elastic: true,
            noise: true,
            blur: true,
            probability: 0.5,
            elastic_grid: 4,
            elastic_sigma: 2.0,
            noise_max: 0.1,
            blur_sigma: (0.5, 1.5),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { reflect: false, elastic: false, noise: false, blur: false, ..Self::default() }
    }
}

pub fn augment_patch<R: Rng + ?Sized>(patch: &mut Patch, cfg: &AugmentConfig, rng: &mut R) {
    if cfg.reflect {
        for axis in 0..3 {
            if rng.random_bool(cfg.probability) {
                reflect(patch, axis);
            }
        }
    }
    if cfg.elastic && rng.random_bool(cfg.probability) {
        elastic(patch, cfg.elastic_grid, cfg.elastic_sigma, rng);
    }
    if cfg.noise && rng.random_bool(cfg.probability) {
        let sigma = rng.random_range(0.0..=cfg.noise_max);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            for v in &mut patch.input {
                *v += normal.sample(rng) as f32;
            }
        }
    }
    if cfg.blur && rng.random_bool(cfg.probability) {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        gaussian_blur(patch, sigma);
    }
}

/// Mirrors input and labels along `axis` (0 = z, 1 = y, 2 = x).
pub fn reflect(patch: &mut Patch, axis: usize) {
    let dims = patch.dims;
    let n = patch.voxels();
    let mirror = |i: usize| -> usize {
        let mut c = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
        c[axis] = dims[axis] - 1 - c[axis];
        (c[0] * dims[1] + c[1]) * dims[2] + c[2]
    };
    for i in 0..n {
        let j = mirror(i);
        if j > i {
            patch.labels.swap(i, j);
            for c in 0..3 {
                patch.input.swap(c * n + i, c * n + j);
            }
        }
    }
}

/// Linear interpolation weights of control points along one axis: the
/// `grid` points span the axis end to end.
fn axis_weights(extent: usize, grid: usize) -> Vec<(usize, f64)> {
    (0..extent)
        .map(|p| {
            if extent == 1 || grid == 1 {
                return (0, 0.0);
            }
            let t = p as f64 * (grid - 1) as f64 / (extent - 1) as f64;
            let i = (t.floor() as usize).min(grid - 2);
            (i, t - i as f64)
        })
        .collect()
}

/// Random smooth deformation: Gaussian control-point displacements,
/// trilinearly upsampled; intensities resampled linearly, labels by
/// nearest neighbour, samples clamped to the patch.
pub fn elastic<R: Rng + ?Sized>(patch: &mut Patch, grid: usize, sigma: f64, rng: &mut R) {
    let dims = patch.dims;
    let g = grid.max(1);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    // unit axes are never displaced
    let ctrl: Vec<[f64; 3]> = (0..g * g * g)
        .map(|_| [0, 1, 2].map(|a| {
            let d = normal.sample(rng);
            if dims[a] > 1 { d } else { 0.0 }
        }))
        .collect();
    let w = [0, 1, 2].map(|a| axis_weights(dims[a], g));
    let n = patch.voxels();
    let mut input = vec![0.0f32; 3 * n];
    let mut labels = vec![0u8; n];
    let at = |z: usize, y: usize, x: usize| ctrl[(z * g + y) * g + x];
    let idx = |z: usize, y: usize, x: usize| (z * dims[1] + y) * dims[2] + x;
    for z in 0..dims[0] {
        let (iz, fz) = w[0][z];
        for y in 0..dims[1] {
            let (iy, fy) = w[1][y];
            for x in 0..dims[2] {
                let (ix, fx) = w[2][x];
                let mut disp = [0.0; 3];
                for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                            let wt = wz * wy * wx;
                            if wt == 0.0 {
                                continue;
                            }
                            let c = at((iz + dz).min(g - 1), (iy + dy).min(g - 1), (ix + dx).min(g - 1));
                            for a in 0..3 {
                                disp[a] += wt * c[a];
                            }
                        }
                    }
                }
                let pos = [z as f64 + disp[0], y as f64 + disp[1], x as f64 + disp[2]];
                let pos = [0, 1, 2].map(|a| pos[a].clamp(0.0, (dims[a] - 1) as f64));
                let o = idx(z, y, x);
                let nn = pos.map(|p| p.round() as usize);
                labels[o] = patch.labels[idx(nn[0], nn[1], nn[2])];
                let lo = pos.map(|p| p.floor() as usize);
                let fr = [0, 1, 2].map(|a| pos[a] - lo[a] as f64);
                let hi = [0, 1, 2].map(|a| (lo[a] + 1).min(dims[a] - 1));
                for c in 0..3 {
                    let src = &patch.input[c * n..(c + 1) * n];
                    let mut acc = 0.0f64;
                    for (pz, wz) in [(lo[0], 1.0 - fr[0]), (hi[0], fr[0])] {
                        for (py, wy) in [(lo[1], 1.0 - fr[1]), (hi[1], fr[1])] {
                            for (px, wx) in [(lo[2], 1.0 - fr[2]), (hi[2], fr[2])] {
                                acc += wz * wy * wx * src[idx(pz, py, px)] as f64;
                            }
                        }
                    }
                    input[c * n + o] = acc as f32;
                }
            }
        }
    }
    patch.input = input;
    patch.labels = labels;
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing of every input channel along axes longer
/// than one voxel, replicating edge values.
pub fn gaussian_blur(patch: &mut Patch, sigma: f64) {
    let dims = patch.dims;
    let n = patch.voxels();
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut tmp = vec![0.0f32; n];
    for c in 0..3 {
        let chan = &mut patch.input[c * n..(c + 1) * n];
        for a in (0..3).filter(|&a| dims[a] > 1) {
            let len = dims[a] as isize;
            for i in 0..n {
                let p = ((i / strides[a]) % dims[a]) as isize;
                let base = i - p as usize * strides[a];
                let mut acc = 0.0f64;
                for (j, kv) in k.iter().enumerate() {
                    let q = (p + j as isize - r).clamp(0, len - 1) as usize;
                    acc += kv * chan[base + q * strides[a]] as f64;
                }
                tmp[i] = acc as f32;
            }
            chan.copy_from_slice(&tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_patch(dims: [usize; 3], seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        Patch {
            dims,
            input: (0..3 * n).map(|_| rng.random_range(-2.0..2.0)).collect(),
            labels: (0..n).map(|_| [0, 1, 2, 4][rng.random_range(0..4)]).collect(),
        }
    }

    #[test]
    fn disabled_is_identity() {
        let p = random_patch([3, 8, 8], 1);
        let mut q = p.clone();
        augment_patch(&mut q, &AugmentConfig::none(), &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(p, q);
    }

    #[test]
    fn reflection_is_involution() {
        let p = random_patch([3, 5, 4], 3);
        for axis in 0..3 {
            let mut q = p.clone();
            reflect(&mut q, axis);
            assert_ne!(p, q);
            reflect(&mut q, axis);
            assert_eq!(p, q);
        }
    }

    #[test]
    fn reflection_moves_voxels() {
        let mut p = random_patch([2, 3, 4], 4);
        let before = p.clone();
        reflect(&mut p, 2);
        assert_eq!(p.input[0], before.input[3]);
        assert_eq!(p.labels[5], before.labels[6]);
    }

    #[test]
    fn zero_displacement_elastic_is_identity() {
        let p = random_patch([4, 6, 6], 5);
        let mut q = p.clone();
        elastic(&mut q, 4, 1e-300, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.labels, q.labels);
        for (a, b) in p.input.iter().zip(&q.input) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_constants_and_mean_bounds() {
        let n = 1 * 8 * 8;
        let mut p = Patch { dims: [1, 8, 8], input: vec![2.5; 3 * n], labels: vec![1; n] };
        gaussian_blur(&mut p, 1.2);
        assert!(p.input.iter().all(|v| (v - 2.5).abs() < 1e-5));
        let mut q = random_patch([1, 8, 8], 9);
        let (lo, hi) = q.input.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        gaussian_blur(&mut q, 0.8);
        assert!(q.input.iter().all(|&v| v >= lo - 1e-5 && v <= hi + 1e-5));
    }

    #[test]
    fn same_seed_same_augmentation() {
        let p = random_patch([4, 8, 8], 6);
        let cfg = AugmentConfig { probability: 1.0, ..AugmentConfig::default() };
        let mut a = p.clone();
        let mut b = p.clone();
        augment_patch(&mut a, &cfg, &mut ChaCha8Rng::seed_from_u64(7));
        augment_patch(&mut b, &cfg, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn labels_stay_in_codebook(seed in 0u64..1000, d in 1usize..5) {
            let mut p = random_patch([d, 8, 8], seed);
            let cfg = AugmentConfig { probability: 1.0, ..AugmentConfig::default() };
            augment_patch(&mut p, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(p.labels.iter().all(|l| [0, 1, 2, 4].contains(l)));
            prop_assert!(p.input.iter().all(|v| v.is_finite()));
        }
    }
}
