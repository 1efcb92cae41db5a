//! Clinical-style preprocessing: reorientation, skull masking, rigid
//! co-registration and isotropic nearest-neighbour resampling.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volume::{SegmentationMap, Volume3D};

/// Signed permutation of the `(z, y, x)` axes: output axis `a` reads input
/// axis `perm[a]`, reversed when `flip[a]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisSpec {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

impl AxisSpec {
    pub const IDENTITY: AxisSpec = AxisSpec { perm: [0, 1, 2], flip: [false; 3] };

    pub fn new(perm: [usize; 3], flip: [bool; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for &p in &perm {
            if p > 2 || seen[p] {
                return Err(Error::Config(format!("axis spec {perm:?} is not a permutation of (z, y, x)")));
            }
            seen[p] = true;
        }
        Ok(AxisSpec { perm, flip })
    }

    pub fn inverse(&self) -> AxisSpec {
        let mut inv = AxisSpec::IDENTITY;
        for a in 0..3 {
            inv.perm[self.perm[a]] = a;
            inv.flip[self.perm[a]] = self.flip[a];
        }
        inv
    }

    fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        self.perm.map(|p| dims[p])
    }

    /// Input flat index for every output voxel, in output order.
    fn source_indices(&self, dims: [usize; 3]) -> Vec<usize> {
        let od = self.out_dims(dims);
        let stride = [dims[1] * dims[2], dims[2], 1];
        let mut out = Vec::with_capacity(dims.iter().product());
        for z in 0..od[0] {
            for y in 0..od[1] {
                for x in 0..od[2] {
                    let o = [z, y, x];
                    let mut i = 0;
                    for a in 0..3 {
                        let p = self.perm[a];
                        let c = if self.flip[a] { dims[p] - 1 - o[a] } else { o[a] };
                        i += c * stride[p];
                    }
                    out.push(i);
                }
            }
        }
        out
    }
}

const AXIS_NAMES: [char; 3] = ['z', 'y', 'x'];

/// Parses `"z,-y,x"`-style specs: one signed axis name per output axis.
impl FromStr for AxisSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("axis spec '{s}' needs three comma-separated axes")));
        }
        let mut perm = [0; 3];
        let mut flip = [false; 3];
        for (a, part) in parts.iter().enumerate() {
            let (neg, name) = match part.strip_prefix('-') {
                Some(rest) => (true, rest),
                None => (false, *part),
            };
            let mut chars = name.chars();
            let axis = match (chars.next(), chars.next()) {
                (Some(c), None) => AXIS_NAMES.iter().position(|&n| n == c),
                _ => None,
            };
            perm[a] = axis.ok_or_else(|| Error::Config(format!("unknown axis '{part}' in spec '{s}'")))?;
            flip[a] = neg;
        }
        AxisSpec::new(perm, flip)
    }
}

impl fmt::Display for AxisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> =
            (0..3).map(|a| format!("{}{}", if self.flip[a] { "-" } else { "" }, AXIS_NAMES[self.perm[a]])).collect();
        write!(f, "{}", parts.join(","))
    }
}

pub fn reorient(vol: &Volume3D, spec: &AxisSpec) -> Result<Volume3D> {
    let src = spec.source_indices(vol.dims());
    let data = src.iter().map(|&i| vol.data()[i]).collect();
    Volume3D::new(spec.out_dims(vol.dims()), spec.perm.map(|p| vol.spacing()[p]), data)
}

pub fn reorient_labels(seg: &SegmentationMap, spec: &AxisSpec) -> Result<SegmentationMap> {
    let src = spec.source_indices(seg.dims());
    let labels = src.iter().map(|&i| seg.labels()[i]).collect();
    SegmentationMap::new(spec.out_dims(seg.dims()), spec.perm.map(|p| seg.spacing()[p]), labels)
}

/// Zeroes every voxel outside the binary `mask`.
pub fn apply_mask(vol: &Volume3D, mask: &Volume3D) -> Result<Volume3D> {
    if vol.dims() != mask.dims() {
        return Err(Error::Shape(format!("mask dims {:?} differ from volume dims {:?}", mask.dims(), vol.dims())));
    }
    if let Some(v) = mask.data().iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(Error::Config(format!("mask must be binary, found value {v}")));
    }
    let data = vol.data().iter().zip(mask.data()).map(|(&v, &m)| if m == 1.0 { v } else { 0.0 }).collect();
    Volume3D::new(vol.dims(), vol.spacing(), data)
}

/// Per-axis source index of each output voxel when resampling `n` voxels of
/// spacing `s` onto spacing `t`.
fn nn_axis(n: usize, s: f64, t: f64) -> Vec<usize> {
    let m = ((n as f64 * s / t).round() as usize).max(1);
    (0..m).map(|j| (((j as f64 + 0.5) * t / s).floor() as usize).min(n - 1)).collect()
}

fn resample_indices(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> Result<([usize; 3], Vec<usize>)> {
    if target.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::Config(format!("target spacing must be positive, got {target:?}")));
    }
    let axes: [Vec<usize>; 3] = [0, 1, 2].map(|a| nn_axis(dims[a], spacing[a], target[a]));
    let out = [axes[0].len(), axes[1].len(), axes[2].len()];
    let mut idx = Vec::with_capacity(out.iter().product());
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                idx.push((z * dims[1] + y) * dims[2] + x);
            }
        }
    }
    Ok((out, idx))
}

/// Nearest-neighbour resampling to `target` spacing (mm); each output voxel
/// copies the input voxel whose centre is nearest to its own.
pub fn resample_nn(vol: &Volume3D, target: [f64; 3]) -> Result<Volume3D> {
    let (dims, idx) = resample_indices(vol.dims(), vol.spacing(), target)?;
    Volume3D::new(dims, target, idx.iter().map(|&i| vol.data()[i]).collect())
}

pub fn resample_labels(seg: &SegmentationMap, target: [f64; 3]) -> Result<SegmentationMap> {
    let (dims, idx) = resample_indices(seg.dims(), seg.spacing(), target)?;
    SegmentationMap::new(dims, target, idx.iter().map(|&i| seg.labels()[i]).collect())
}

type Mat3 = [[f64; 3]; 3];

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

fn transpose3(a: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[j][i];
        }
    }
    m
}

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// Wraps an angle into `(-π, π]`.
fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Rotation about the volume centre followed by a translation, both in
/// physical `(z, y, x)` millimetres. `angles` are about z, y and x and are
/// applied in that order.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RigidTransform {
    pub angles: [f64; 3],
    pub translation: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform { angles: [0.0; 3], translation: [0.0; 3] };

    pub fn new(angles: [f64; 3], translation: [f64; 3]) -> Self {
        RigidTransform { angles: angles.map(wrap_angle), translation }
    }

    /// Rotation matrix acting on `(z, y, x)` vectors.
    pub fn matrix(&self) -> Mat3 {
        let [rz, ry, rx] = self.angles;
        let (sz, cz) = rz.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sx, cx) = rx.sin_cos();
        // (x, y, z) ordering: Rx · Ry · Rz
        let rot_x = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let rot_y = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rot_z = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        let xyz = matmul3(&rot_x, &matmul3(&rot_y, &rot_z));
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = xyz[2 - i][2 - j];
            }
        }
        m
    }

    /// Euler angles of a `(z, y, x)` rotation matrix.
    fn from_matrix(m: &Mat3, translation: [f64; 3]) -> Self {
        let mut xyz = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                xyz[i][j] = m[2 - i][2 - j];
            }
        }
        let ry = xyz[0][2].clamp(-1.0, 1.0).asin();
        let (rx, rz) = if ry.cos() > 1e-9 {
            ((-xyz[1][2]).atan2(xyz[2][2]), (-xyz[0][1]).atan2(xyz[0][0]))
        } else {
            (0.0, xyz[1][0].atan2(xyz[1][1]))
        };
        RigidTransform::new([rz, ry, rx], translation)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.matrix(), p);
        [0, 1, 2].map(|a| r[a] + self.translation[a])
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose3(&self.matrix());
        let t = mat_vec(&rt, self.translation);
        RigidTransform::from_matrix(&rt, t.map(|v| -v))
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &RigidTransform) -> Self {
        let m = matmul3(&self.matrix(), &first.matrix());
        let t = mat_vec(&self.matrix(), first.translation);
        RigidTransform::from_matrix(&m, [0, 1, 2].map(|a| t[a] + self.translation[a]))
    }
}

/// Physical position of voxel centres relative to the grid centre.
fn centered(dims: [usize; 3], spacing: [f64; 3], idx: [usize; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| (idx[a] as f64 - (dims[a] as f64 - 1.0) / 2.0) * spacing[a])
}

/// Nearest voxel of `dims`/`spacing` to centred physical point `p`.
fn nearest_voxel(dims: [usize; 3], spacing: [f64; 3], p: [f64; 3]) -> Option<usize> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let f = (p[a] / spacing[a] + (dims[a] as f64 - 1.0) / 2.0).round();
        if !(f >= 0.0 && f < dims[a] as f64) {
            return None;
        }
        idx[a] = f as usize;
    }
    Some((idx[0] * dims[1] + idx[1]) * dims[2] + idx[2])
}

/// Resamples `vol` onto the grid `dims`/`spacing`: the output voxel at
/// physical point `x` takes the nearest input sample at `t⁻¹(x)`; points
/// outside the input field are 0.
pub fn apply_rigid_onto(vol: &Volume3D, t: &RigidTransform, dims: [usize; 3], spacing: [f64; 3]) -> Result<Volume3D> {
    let rt = transpose3(&t.matrix());
    let mut out = Volume3D::zeros(dims, spacing)?;
    let data = out.data_mut();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let q = centered(dims, spacing, [z, y, x]);
                let p = mat_vec(&rt, [0, 1, 2].map(|a| q[a] - t.translation[a]));
                if let Some(i) = nearest_voxel(vol.dims(), vol.spacing(), p) {
                    data[(z * dims[1] + y) * dims[2] + x] = vol.data()[i];
                }
            }
        }
    }
    Ok(out)
}

/// [`apply_rigid_onto`] the input's own grid.
pub fn apply_rigid(vol: &Volume3D, t: &RigidTransform) -> Result<Volume3D> {
    apply_rigid_onto(vol, t, vol.dims(), vol.spacing())
}

pub const PYRAMID_LEVELS: usize = 3;
pub const INITIAL_TRANSLATION_STEP: f64 = 4.0;
pub const INITIAL_ROTATION_STEP: f64 = 0.1;
pub const MIN_TRANSLATION_STEP: f64 = 0.25;
pub const MIN_ROTATION_STEP: f64 = 0.005;
pub const MAX_ITERATIONS: usize = 200;
/// Overlaps covering less than this fraction of the reference's nonzero
/// voxels score as the worst possible correlation.
pub const MIN_OVERLAP_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Registration {
    pub transform: RigidTransform,
    /// Normalized cross-correlation at `transform` on the full-resolution grid.
    pub objective: f64,
    pub converged: bool,
    /// Coordinate sweeps over all levels.
    pub iterations: usize,
}

fn is_constant(vol: &Volume3D) -> bool {
    let first = vol.data()[0];
    vol.data().iter().all(|&v| v == first)
}

/// 2×2×2 block average; axes of extent 1 are kept.
fn downsample(vol: &Volume3D) -> Result<Volume3D> {
    let d = vol.dims();
    let f = d.map(|n| if n >= 2 { 2 } else { 1 });
    let out = [0, 1, 2].map(|a| d[a] / f[a]);
    let spacing = [0, 1, 2].map(|a| vol.spacing()[a] * f[a] as f64);
    Volume3D::from_fn(out, spacing, |z, y, x| {
        let mut s = 0.0f64;
        for dz in 0..f[0] {
            for dy in 0..f[1] {
                for dx in 0..f[2] {
                    s += vol.get(z * f[0] + dz, y * f[1] + dy, x * f[2] + dx) as f64;
                }
            }
        }
        (s / (f[0] * f[1] * f[2]) as f64) as f32
    })
}

/// Linear interpolation of `vol` at centred physical point `p`; `None` outside
/// the grid or when any of the surrounding samples is zero.
fn trilinear(vol: &Volume3D, p: [f64; 3]) -> Option<f64> {
    let (dims, spacing) = (vol.dims(), vol.spacing());
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut w = [0.0f64; 3];
    for a in 0..3 {
        let f = p[a] / spacing[a] + (dims[a] as f64 - 1.0) / 2.0;
        if !(f >= 0.0 && f <= (dims[a] - 1) as f64) {
            return None;
        }
        lo[a] = f.floor() as usize;
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        w[a] = f - lo[a] as f64;
    }
    let mut s = 0.0;
    for (z, wz) in [(lo[0], 1.0 - w[0]), (hi[0], w[0])] {
        for (y, wy) in [(lo[1], 1.0 - w[1]), (hi[1], w[1])] {
            for (x, wx) in [(lo[2], 1.0 - w[2]), (hi[2], w[2])] {
                let v = vol.get(z, y, x);
                if v == 0.0 {
                    return None;
                }
                s += wz * wy * wx * v as f64;
            }
        }
    }
    Some(s)
}

/// Reference voxels with nonzero intensity, as centred coordinates.
struct Fixed {
    points: Vec<[f64; 3]>,
    values: Vec<f64>,
}

impl Fixed {
    fn new(reference: &Volume3D) -> Self {
        let (dims, spacing) = (reference.dims(), reference.spacing());
        let mut points = Vec::new();
        let mut values = Vec::new();
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let v = reference.get(z, y, x);
                    if v != 0.0 {
                        points.push(centered(dims, spacing, [z, y, x]));
                        values.push(v as f64);
                    }
                }
            }
        }
        Fixed { points, values }
    }

    /// NCC between the reference and the warped moving volume over voxels
    /// where both are nonzero. Moving intensities are sampled linearly so the
    /// score varies smoothly with the transform.
    fn ncc(&self, moving: &Volume3D, t: &RigidTransform) -> f64 {
        let rt = transpose3(&t.matrix());
        let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0usize, 0.0, 0.0, 0.0, 0.0, 0.0);
        for (q, &b) in self.points.iter().zip(&self.values) {
            let p = mat_vec(&rt, [q[0] - t.translation[0], q[1] - t.translation[1], q[2] - t.translation[2]]);
            let Some(a) = trilinear(moving, p) else { continue };
            n += 1;
            sa += a;
            sb += b;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
        }
        if n < 2 || (n as f64) < MIN_OVERLAP_FRACTION * self.values.len() as f64 {
            return -1.0;
        }
        let nf = n as f64;
        let cov = sab - sa * sb / nf;
        let va = saa - sa * sa / nf;
        let vb = sbb - sb * sb / nf;
        if va <= 0.0 || vb <= 0.0 {
            return -1.0;
        }
        cov / (va * vb).sqrt()
    }
}

fn params_to_transform(p: &[f64; 6]) -> RigidTransform {
    RigidTransform::new([p[3], p[4], p[5]], [p[0], p[1], p[2]])
}

/// Finds the rigid transform that best aligns `moving` onto `reference`
/// (maximum NCC of `apply_rigid_onto(moving, t, reference grid)` against
/// `reference`) by coarse-to-fine coordinate search with step halving.
pub fn rigid_register(moving: &Volume3D, reference: &Volume3D) -> Result<Registration> {
    if is_constant(moving) || is_constant(reference) {
        return Err(Error::DegenerateIntensity);
    }
    let mut levels = vec![(moving.clone(), reference.clone())];
    for _ in 1..PYRAMID_LEVELS {
        let (m, r) = levels.last().expect("non-empty");
        levels.push((downsample(m)?, downsample(r)?));
    }
    // (tz, ty, tx) in mm, then (rz, ry, rx)
    let mut params = [0.0f64; 6];
    let mut iterations = 0;
    let mut converged = false;
    // steps are in full-resolution voxels; each level stops at a quarter of its own voxel
    let voxel = reference.spacing();
    for (level, (m, r)) in levels.iter().enumerate().rev() {
        let fixed = Fixed::new(r);
        let level_voxel = r.spacing();
        let mut steps = [
            INITIAL_TRANSLATION_STEP * voxel[0],
            INITIAL_TRANSLATION_STEP * voxel[1],
            INITIAL_TRANSLATION_STEP * voxel[2],
            INITIAL_ROTATION_STEP,
            INITIAL_ROTATION_STEP,
            INITIAL_ROTATION_STEP,
        ];
        let done = |s: &[f64; 6]| {
            (0..3).all(|a| s[a] < MIN_TRANSLATION_STEP * level_voxel[a]) && s[3..].iter().all(|&v| v < MIN_ROTATION_STEP)
        };
        let mut best = fixed.ncc(m, &params_to_transform(&params));
        let mut level_iters = 0;
        converged = false;
        while level_iters < MAX_ITERATIONS {
            if done(&steps) {
                converged = true;
                break;
            }
            level_iters += 1;
            let mut improved = false;
            for k in 0..6 {
                let mut winner = None;
                for sign in [1.0, -1.0] {
                    let mut trial = params;
                    trial[k] += sign * steps[k];
                    let score = fixed.ncc(m, &params_to_transform(&trial));
                    if score > best + 1e-12 {
                        best = score;
                        winner = Some(trial);
                    }
                }
                if let Some(w) = winner {
                    params = w;
                    improved = true;
                }
            }
            if !improved {
                steps.iter_mut().for_each(|s| *s *= 0.5);
            }
        }
        if level == 0 && !converged {
            converged = done(&steps);
        }
        iterations += level_iters;
    }
    let transform = params_to_transform(&params);
    let objective = Fixed::new(reference).ncc(moving, &transform);
    Ok(Registration { transform, objective, converged, iterations })
}

/// Options of [`run_pipeline`].
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub orient: AxisSpec,
    /// Index (into the modality list) of the scan the others are registered to.
    pub reference: usize,
    pub register: bool,
    pub target_spacing: [f64; 3],
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { orient: AxisSpec::IDENTITY, reference: 1, register: true, target_spacing: [1.0; 3] }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub volumes: Vec<Volume3D>,
    pub mask: Option<Volume3D>,
    /// One entry per modality; the reference gets the identity.
    pub registrations: Vec<Registration>,
}

/// Reorients every modality, masks the reference, registers the others onto
/// it, masks them on the reference grid and resamples everything to
/// `target_spacing`. The mask lives on the reference grid.
pub fn run_pipeline(modalities: &[Volume3D], mask: Option<&Volume3D>, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    if cfg.reference >= modalities.len() {
        return Err(Error::Config(format!(
            "reference index {} out of range for {} modalities",
            cfg.reference,
            modalities.len()
        )));
    }
    let oriented: Vec<Volume3D> = modalities.iter().map(|v| reorient(v, &cfg.orient)).collect::<Result<_>>()?;
    let mask = mask.map(|m| reorient(m, &cfg.orient)).transpose()?;
    let masked = |v: &Volume3D| match &mask {
        Some(m) => apply_mask(v, m),
        None => Ok(v.clone()),
    };
    let reference = masked(&oriented[cfg.reference])?;
    let (dims, spacing) = (reference.dims(), reference.spacing());
    let mut volumes = Vec::with_capacity(oriented.len());
    let mut registrations = Vec::with_capacity(oriented.len());
    for (i, v) in oriented.iter().enumerate() {
        if i == cfg.reference {
            volumes.push(reference.clone());
            registrations.push(Registration {
                transform: RigidTransform::IDENTITY,
                objective: 1.0,
                converged: true,
                iterations: 0,
            });
            continue;
        }
        let reg = if cfg.register {
            rigid_register(v, &reference)?
        } else {
            Registration { transform: RigidTransform::IDENTITY, objective: f64::NAN, converged: true, iterations: 0 }
        };
        volumes.push(masked(&apply_rigid_onto(v, &reg.transform, dims, spacing)?)?);
        registrations.push(reg);
    }
    let volumes = volumes.iter().map(|v| resample_nn(v, cfg.target_spacing)).collect::<Result<_>>()?;
    let mask = mask.map(|m| resample_nn(&m, cfg.target_spacing)).transpose()?;
    Ok(PipelineOutput { volumes, mask, registrations })
}
