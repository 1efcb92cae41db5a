//! Synthetic phantoms: textured brain blobs with nested ellipsoid lesions,
//! and a 2D shape-classification set for encoder pretraining.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{read_labels, read_volume, write_labels, write_volume};
use crate::rng::stream_rng;
use crate::training::Case;
use crate::volume::{MultiModalScan, NormRegion, SegmentationMap, Volume3D, MODALITIES};

/// Smallest admissible extent per axis.
pub const MIN_EXTENT: usize = 32;
/// Voxels every lesion region must reach.
pub const MIN_REGION_VOXELS: usize = 32;
const MAX_ATTEMPTS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub count: usize,
    pub seed: u64,
    /// Outer (edema) semi-axes as fractions of the extent, drawn from this range.
    pub outer_radius: (f64, f64),
    /// Core semi-axes relative to the outer ones.
    pub core_ratio: (f64, f64),
    /// Enhancing semi-axes relative to the core ones.
    pub enhancing_ratio: (f64, f64),
}

impl PhantomSpec {
    pub fn new(dims: [usize; 3], count: usize, seed: u64) -> Self {
        PhantomSpec {
            dims,
            spacing: [1.0; 3],
            count,
            seed,
            outer_radius: (0.2, 0.28),
            core_ratio: (0.6, 0.8),
            enhancing_ratio: (0.4, 0.6),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < MIN_EXTENT) {
            return Err(Error::Config(format!(
                "phantom dims {:?} must be at least {MIN_EXTENT} per axis",
                self.dims
            )));
        }
        let (lo, hi) = self.outer_radius;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("outer_radius range {:?} is invalid", self.outer_radius)));
        }
        if hi >= 0.5 {
            return Err(Error::Config(format!(
                "lesion radii up to {hi} of the extent exceed the volume"
            )));
        }
        for (name, (a, b)) in [("core_ratio", self.core_ratio), ("enhancing_ratio", self.enhancing_ratio)] {
            if !(a > 0.0 && a <= b && b < 1.0) {
                return Err(Error::Config(format!("{name} range ({a}, {b}) must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Low-frequency random field: a sum of a few random plane waves, roughly
/// in [-1, 1].
struct SmoothField {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, waves: usize, max_freq: f64) -> Self {
        let waves = (0..waves)
            .map(|_| {
                let k = [0, 1, 2].map(|_| rng.random_range(-max_freq..max_freq));
                (k, rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0))
            })
            .collect();
        SmoothField { waves }
    }

    /// `p` in unit coordinates.
    fn at(&self, p: [f64; 3]) -> f64 {
        let total: f64 = self.waves.iter().map(|(_, _, w)| w).sum();
        self.waves
            .iter()
            .map(|(k, ph, w)| w * (2.0 * PI * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2]) + ph).sin())
            .sum::<f64>()
            / total
    }
}

/// Per-region intensity offsets of (FLAIR, T1c, T2) for edema, core and
/// enhancing tissue.
const OFFSETS: [[f64; 3]; 3] = [[0.55, -0.05, 0.45], [0.10, -0.25, 0.75], [0.40, 0.85, 0.30]];

fn ellipsoid(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum()
}

/// Case `index` of the set described by `spec`.
pub fn phantom(spec: &PhantomSpec, index: usize) -> Result<Case> {
    let [d, h, w] = spec.dims;
    let dimsf = spec.dims.map(|v| v as f64);
    let mut rng = stream_rng(spec.seed, index as u64);
    let center = dimsf.map(|v| v / 2.0 * (1.0 + rng.random_range(-0.04..0.04)));
    let brain_r = dimsf.map(|v| v * rng.random_range(0.40..0.45));
    let outline = SmoothField::new(&mut rng, 4, 1.5);
    let texture = SmoothField::new(&mut rng, 8, 4.0);
    let n = d * h * w;
    let mut mask = vec![false; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let u = [0, 1, 2].map(|a| p[a] / dimsf[a]);
                mask[(z * h + y) * w + x] = ellipsoid(p, center, brain_r) < 1.0 + 0.12 * outline.at(u);
            }
        }
    }
    let mut labels = vec![0u8; n];
    let mut ok = false;
    for _ in 0..MAX_ATTEMPTS {
        let outer = dimsf.map(|v| v * rng.random_range(spec.outer_radius.0..=spec.outer_radius.1));
        let core = outer.map(|r| r * rng.random_range(spec.core_ratio.0..=spec.core_ratio.1));
        let enh = core.map(|r| r * rng.random_range(spec.enhancing_ratio.0..=spec.enhancing_ratio.1));
        // lesion centre well inside the brain
        let lc: [f64; 3] = [0, 1, 2].map(|a| {
            let slack = (brain_r[a] * 0.8 - outer[a]).max(0.0);
            center[a] + rng.random_range(-slack..=slack) * 0.6
        });
        let mut counts = [0usize; 3];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                    labels[i] = if !mask[i] {
                        0
                    } else if ellipsoid(p, lc, enh) < 1.0 {
                        counts[0] += 1;
                        4
                    } else if ellipsoid(p, lc, core) < 1.0 {
                        counts[1] += 1;
                        1
                    } else if ellipsoid(p, lc, outer) < 1.0 {
                        counts[2] += 1;
                        2
                    } else {
                        0
                    };
                }
            }
        }
        // ET, TC and WT voxel counts
        let regions = [counts[0], counts[0] + counts[1], counts[0] + counts[1] + counts[2]];
        if regions.iter().all(|&c| c >= MIN_REGION_VOXELS) {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(Error::Config(format!(
            "could not place a lesion with {MIN_REGION_VOXELS} voxels per region in dims {:?}",
            spec.dims
        )));
    }
    let gain = rng.random_range(80.0..120.0);
    let jitter: [[f64; 3]; 3] = [0, 1, 2].map(|_| [0, 1, 2].map(|_| rng.random_range(0.8..1.2)));
    let noise = Normal::new(0.0, 0.03).expect("finite sigma");
    let mut channels = [vec![0f32; n], vec![0f32; n], vec![0f32; n]];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                let u = [(z as f64 + 0.5) / dimsf[0], (y as f64 + 0.5) / dimsf[1], (x as f64 + 0.5) / dimsf[2]];
                let tissue = 0.6 + 0.12 * texture.at(u);
                let region = match labels[i] {
                    2 => Some(0),
                    1 => Some(1),
                    4 => Some(2),
                    _ => None,
                };
                for (c, chan) in channels.iter_mut().enumerate() {
                    let mut v = tissue + noise.sample(&mut rng);
                    if let Some(r) = region {
                        v += OFFSETS[r][c] * jitter[r][c];
                    }
                    // keep brain voxels strictly positive so the nonzero box is the mask's
                    chan[i] = (gain * v.max(0.05)) as f32;
                }
            }
        }
    }
    let [f, t1c, t2] = channels.map(|c| Volume3D::new(spec.dims, spec.spacing, c));
    let scan = MultiModalScan::new(f?, t1c?, t2?, format!("case_{index:03}"))?;
    let seg = SegmentationMap::new(spec.dims, spec.spacing, labels)?;
    Ok(Case { scan, seg })
}

/// Deterministic phantoms; case `i` depends only on the seed and `i`.
pub fn generate(spec: &PhantomSpec) -> Result<Vec<Case>> {
    spec.validate()?;
    (0..spec.count).map(|i| phantom(spec, i)).collect()
}

/// Brain mask of a phantom: the voxels with nonzero FLAIR.
pub fn brain_mask(case: &Case) -> Volume3D {
    let v = case.scan.channel(0);
    let data = v.data().iter().map(|&x| if x != 0.0 { 1.0 } else { 0.0 }).collect();
    Volume3D::new(v.dims(), v.spacing(), data).expect("same grid")
}

/// Writes `<dir>/<patient>/{flair,t1c,t2,seg,mask}.nii`.
pub fn write_case(case: &Case, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let pdir = dir.as_ref().join(case.scan.patient_id());
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    for (name, v) in MODALITIES.iter().zip(case.scan.channels()) {
        write_volume(v, pdir.join(format!("{name}.nii")))?;
    }
    write_labels(&case.seg, pdir.join("seg.nii"))?;
    write_volume(&brain_mask(case), pdir.join("mask.nii"))?;
    Ok(pdir)
}

/// Reads the three modalities of a patient directory.
pub fn read_scan(pdir: impl AsRef<Path>) -> Result<MultiModalScan> {
    let pdir = pdir.as_ref();
    let missing: Vec<&str> = MODALITIES.iter().copied().filter(|m| !pdir.join(format!("{m}.nii")).is_file()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingInput(format!("{}: missing modalities {}", pdir.display(), missing.join(", "))));
    }
    let id = pdir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let [a, b, c] = MODALITIES.map(|m| read_volume(pdir.join(format!("{m}.nii"))));
    MultiModalScan::new(a?, b?, c?, id)
}

pub fn read_case(pdir: impl AsRef<Path>) -> Result<Case> {
    let pdir = pdir.as_ref();
    Ok(Case { scan: read_scan(pdir)?, seg: read_labels(pdir.join("seg.nii"))? })
}

/// Patient subdirectories of `dir`, sorted by name.
pub fn patient_dirs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<Case>> {
    let dirs = patient_dirs(&dir)?;
    if dirs.is_empty() {
        return Err(Error::MissingInput(format!("no patient directories in {}", dir.as_ref().display())));
    }
    dirs.iter().map(read_case).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub size: usize,
    pub count: usize,
    pub seed: u64,
}

/// Shape classes of the 2D set.
pub const PRETRAIN_CLASSES: [&str; 4] = ["disk", "square", "ring", "nested"];

/// Normalized 3-channel 2D images with shape labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSet {
    pub size: usize,
    /// `count × 3 × size × size`.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl PretrainSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = 3 * self.size * self.size;
        &self.images[i * n..(i + 1) * n]
    }
}

fn pretrain_image(size: usize, rng: &mut ChaCha8Rng) -> (Vec<f32>, usize) {
    let class = rng.random_range(0..PRETRAIN_CLASSES.len());
    let s = size as f64;
    let texture = SmoothField::new(rng, 6, 3.0);
    let outline = SmoothField::new(rng, 3, 1.5);
    let brain_r = [s * rng.random_range(0.40..0.46), s * rng.random_range(0.40..0.46)];
    let r = s * rng.random_range(0.10..0.18);
    let c = [s / 2.0 + rng.random_range(-0.12..0.12) * s, s / 2.0 + rng.random_range(-0.12..0.12) * s];
    let angle = rng.random_range(0.0..PI / 2.0);
    let contrast: [[f64; 3]; 2] = [0, 1].map(|_| [0, 1, 2].map(|_| rng.random_range(-0.9..0.9)));
    let noise = Normal::new(0.0, 0.03).expect("finite sigma");
    let n = size * size;
    let mut img = vec![0f32; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let p = [y as f64 + 0.5, x as f64 + 0.5];
            let u = [p[0] / s, p[1] / s, 0.0];
            let e = ((p[0] - s / 2.0) / brain_r[0]).powi(2) + ((p[1] - s / 2.0) / brain_r[1]).powi(2);
            if e >= 1.0 + 0.12 * outline.at(u) {
                continue;
            }
            let (dy, dx) = (p[0] - c[0], p[1] - c[1]);
            let (ry, rx) = (dy * angle.cos() - dx * angle.sin(), dy * angle.sin() + dx * angle.cos());
            let dist = (dy * dy + dx * dx).sqrt();
            // 0: outside the shape, 1: shape body, 2: inner part (nested only)
            let part = match class {
                0 => (dist < r) as usize,
                1 => (ry.abs() < r * 0.85 && rx.abs() < r * 0.85) as usize,
                2 => (dist < r && dist > 0.55 * r) as usize,
                _ => {
                    if dist < 0.5 * r {
                        2
                    } else {
                        (dist < r) as usize
                    }
                }
            };
            let tissue = 0.6 + 0.12 * texture.at(u);
            for ch in 0..3 {
                let mut v = tissue + noise.sample(rng);
                if part >= 1 {
                    v += contrast[part - 1][ch];
                }
                img[ch * n + y * size + x] = v.max(0.05) as f32;
            }
        }
    }
    (img, class)
}

/// Deterministic 2D classification set, each channel z-scored over its
/// nonzero pixels like the volumetric inputs.
pub fn generate_pretrain_2d(spec: &PretrainSpec) -> Result<PretrainSet> {
    if spec.size == 0 || spec.size % 32 != 0 {
        return Err(Error::Config(format!("pretraining image size {} must be a multiple of 32", spec.size)));
    }
    let mut images = Vec::with_capacity(spec.count * 3 * spec.size * spec.size);
    let mut labels = Vec::with_capacity(spec.count);
    let n = spec.size * spec.size;
    for i in 0..spec.count {
        let mut rng = stream_rng(spec.seed, i as u64);
        let (img, class) = pretrain_image(spec.size, &mut rng);
        for ch in 0..3 {
            let v = Volume3D::new([1, spec.size, spec.size], [1.0; 3], img[ch * n..(ch + 1) * n].to_vec())?;
            images.extend_from_slice(crate::volume::zscore_normalize(&v, NormRegion::Nonzero)?.data());
        }
        labels.push(class);
    }
    Ok(PretrainSet { size: spec.size, images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::regions_from_labels;

    #[test]
    fn deterministic_and_nested() {
        let spec = PhantomSpec::new([32, 48, 40], 3, 7);
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        for case in &a {
            let [et, wt, tc] = regions_from_labels(&case.seg);
            for i in 0..et.len() {
                assert!(!et[i] || tc[i]);
                assert!(!tc[i] || wt[i]);
            }
            for r in [&et, &wt, &tc] {
                assert!(r.iter().filter(|&&v| v).count() >= MIN_REGION_VOXELS);
            }
            assert!(case.seg.labels().iter().all(|l| [0, 1, 2, 4].contains(l)));
        }
        let other = generate(&PhantomSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a[0], other[0]);
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&PhantomSpec::new([16, 64, 64], 1, 0)).is_err());
        let spec = PhantomSpec { outer_radius: (0.3, 0.6), ..PhantomSpec::new([32, 32, 32], 1, 0) };
        assert!(generate(&spec).unwrap_err().to_string().contains("exceed"));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cases = generate(&PhantomSpec::new([32, 32, 32], 2, 1)).unwrap();
        for c in &cases {
            write_case(c, dir.path()).unwrap();
        }
        assert_eq!(read_dataset(dir.path()).unwrap(), cases);
        fs::remove_file(dir.path().join("case_001/flair.nii")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing modalities flair"), "{err}");
    }

    #[test]
    fn pretrain_set_is_balanced_enough() {
        let set = generate_pretrain_2d(&PretrainSpec { size: 32, count: 200, seed: 3 }).unwrap();
        assert_eq!(set.images.len(), 200 * 3 * 32 * 32);
        for c in 0..4 {
            assert!(set.labels.iter().filter(|&&l| l == c).count() > 25);
        }
        assert_eq!(set, generate_pretrain_2d(&PretrainSpec { size: 32, count: 200, seed: 3 }).unwrap());
    }
}
