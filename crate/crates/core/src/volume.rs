//! Volumes, label maps and the per-scan preprocessing that feeds the network.

use crate::error::{Error, Result};

/// Label codes in class-axis order: background, necrotic/non-enhancing
/// core, edema, enhancing tumor.
pub const LABEL_CODES: [u8; 4] = [0, 1, 2, 4];

/// Number of classes predicted by the network.
pub const NUM_CLASSES: usize = 4;

/// Class-axis index of a label code.
pub fn class_index(code: u8) -> Option<usize> {
    LABEL_CODES.iter().position(|&c| c == code)
}

/// Single-channel scalar grid indexed `(z, y, x)`, `x` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

fn check_grid(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
    }
    if dims.iter().product::<usize>() != len {
        return Err(Error::Shape(format!(
            "dims {dims:?} need {} voxels, got {len}",
            dims.iter().product::<usize>()
        )));
    }
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::Shape(format!("spacing must be finite and positive, got {spacing:?}")));
    }
    Ok(())
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_grid(dims, spacing, data.len())?;
        Ok(Volume3D { dims, spacing, data })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; dims.iter().product()])
    }

    /// Builds a volume by evaluating `f(z, y, x)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }
}

/// Voxel subset over which normalization statistics are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormRegion {
    All,
    #[default]
    Nonzero,
}

/// Z-score normalization with population statistics over `region`.
///
/// Voxels outside a `Nonzero` region stay zero. A region whose standard
/// deviation is below `1e-8` maps to all zeros.
pub fn zscore_normalize(vol: &Volume3D, region: NormRegion) -> Result<Volume3D> {
    let inside = |v: f32| region == NormRegion::All || v != 0.0;
    let (mut n, mut sum) = (0usize, 0f64);
    for &v in vol.data.iter().filter(|&&v| inside(v)) {
        n += 1;
        sum += v as f64;
    }
    if n == 0 {
        return Err(Error::EmptyRegion);
    }
    let mean = sum / n as f64;
    let var = vol
        .data
        .iter()
        .filter(|&&v| inside(v))
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    let data = vol
        .data
        .iter()
        .map(|&v| {
            if !inside(v) || std < 1e-8 {
                0.0
            } else {
                ((v as f64 - mean) / std) as f32
            }
        })
        .collect();
    Volume3D::new(vol.dims, vol.spacing, data)
}

/// Co-registered FLAIR / T1c / T2 volumes of one patient, in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalScan {
    channels: [Volume3D; 3],
    patient_id: String,
}

/// Channel names in network input order (R, G, B).
pub const MODALITIES: [&str; 3] = ["flair", "t1c", "t2"];

impl MultiModalScan {
    pub fn new(flair: Volume3D, t1c: Volume3D, t2: Volume3D, patient_id: impl Into<String>) -> Result<Self> {
        for (name, v) in [("t1c", &t1c), ("t2", &t2)] {
            if v.dims != flair.dims || v.spacing != flair.spacing {
                return Err(Error::Shape(format!(
                    "{name} grid {:?}/{:?} differs from flair {:?}/{:?}",
                    v.dims, v.spacing, flair.dims, flair.spacing
                )));
            }
        }
        Ok(MultiModalScan { channels: [flair, t1c, t2], patient_id: patient_id.into() })
    }

    pub fn channels(&self) -> &[Volume3D; 3] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &Volume3D {
        &self.channels[i]
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn dims(&self) -> [usize; 3] {
        self.channels[0].dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.channels[0].spacing
    }

    /// Normalizes every channel independently.
    pub fn normalized(&self, region: NormRegion) -> Result<Self> {
        let [a, b, c] = &self.channels;
        Self::new(
            zscore_normalize(a, region)?,
            zscore_normalize(b, region)?,
            zscore_normalize(c, region)?,
            self.patient_id.clone(),
        )
    }
}

/// Integer label grid using the codebook {0, 1, 2, 4}.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMap {
    dims: [usize; 3],
    spacing: [f64; 3],
    labels: Vec<u8>,
}

impl SegmentationMap {
    /// Validates every voxel against the codebook.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        check_grid(dims, spacing, labels.len())?;
        if let Some(i) = labels.iter().position(|&l| class_index(l).is_none()) {
            let x = i % dims[2];
            let y = (i / dims[2]) % dims[1];
            let z = i / (dims[1] * dims[2]);
            return Err(Error::InvalidLabel { value: labels[i], z, y, x });
        }
        Ok(SegmentationMap { dims, spacing, labels })
    }

    pub fn background(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[(z * self.dims[1] + y) * self.dims[2] + x]
    }
}

/// Per-voxel class probabilities, shape `(4, D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilityMap {
    dims: [usize; 3],
    probs: Vec<f32>,
}

impl ClassProbabilityMap {
    pub fn new(dims: [usize; 3], probs: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if probs.len() != NUM_CLASSES * n {
            return Err(Error::Shape(format!(
                "probability map {dims:?} needs {} values, got {}",
                NUM_CLASSES * n,
                probs.len()
            )));
        }
        Ok(ClassProbabilityMap { dims, probs })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    /// Probabilities of one class as a contiguous slice.
    pub fn class(&self, c: usize) -> &[f32] {
        let n = self.probs.len() / NUM_CLASSES;
        &self.probs[c * n..(c + 1) * n]
    }

    /// Per-voxel argmax mapped to label codes; ties go to the lowest class.
    pub fn argmax(&self, spacing: [f64; 3]) -> Result<SegmentationMap> {
        let n = self.probs.len() / NUM_CLASSES;
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..NUM_CLASSES {
                    if self.probs[c * n + i] > self.probs[best * n + i] {
                        best = c;
                    }
                }
                LABEL_CODES[best]
            })
            .collect();
        SegmentationMap::new(self.dims, spacing, labels)
    }
}

/// Half-open box `[(z0, z1), (y0, y1), (x0, x1)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox(pub [(usize, usize); 3]);

impl BoundingBox {
    pub fn full(dims: [usize; 3]) -> Self {
        BoundingBox([(0, dims[0]), (0, dims[1]), (0, dims[2])])
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.0[a].1 - self.0[a].0)
    }

    fn check(&self, dims: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            let (lo, hi) = self.0[a];
            if lo >= hi || hi > dims[a] {
                return Err(Error::Shape(format!("box {:?} does not fit dims {dims:?}", self.0)));
            }
        }
        Ok(())
    }
}

/// Tightest box holding every voxel that is nonzero in any channel.
pub fn nonzero_bounding_box(scan: &MultiModalScan) -> Result<BoundingBox> {
    let [d, h, w] = scan.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if scan.channels.iter().any(|c| c.data[i] != 0.0) {
                    any = true;
                    for (a, p) in [z, y, x].into_iter().enumerate() {
                        lo[a] = lo[a].min(p);
                        hi[a] = hi[a].max(p + 1);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyScan);
    }
    Ok(BoundingBox([(lo[0], hi[0]), (lo[1], hi[1]), (lo[2], hi[2])]))
}

fn crop_grid<V: Copy>(data: &[V], dims: [usize; 3], bbox: &BoundingBox) -> Vec<V> {
    let [(z0, z1), (y0, y1), (x0, x1)] = bbox.0;
    let mut out = Vec::with_capacity((z1 - z0) * (y1 - y0) * (x1 - x0));
    for z in z0..z1 {
        for y in y0..y1 {
            let row = (z * dims[1] + y) * dims[2];
            out.extend_from_slice(&data[row + x0..row + x1]);
        }
    }
    out
}

pub fn crop_volume(vol: &Volume3D, bbox: &BoundingBox) -> Result<Volume3D> {
    bbox.check(vol.dims)?;
    Volume3D::new(bbox.extent(), vol.spacing, crop_grid(&vol.data, vol.dims, bbox))
}

pub fn crop_labels(seg: &SegmentationMap, bbox: &BoundingBox) -> Result<SegmentationMap> {
    bbox.check(seg.dims)?;
    Ok(SegmentationMap {
        dims: bbox.extent(),
        spacing: seg.spacing,
        labels: crop_grid(&seg.labels, seg.dims, bbox),
    })
}

/// Crops all channels and (optionally) the label map with the same box.
pub fn crop(
    scan: &MultiModalScan,
    seg: Option<&SegmentationMap>,
    bbox: &BoundingBox,
) -> Result<(MultiModalScan, Option<SegmentationMap>)> {
    if let Some(s) = seg {
        if s.dims != scan.dims() {
            return Err(Error::Shape(format!(
                "label dims {:?} differ from scan dims {:?}",
                s.dims,
                scan.dims()
            )));
        }
    }
    let [a, b, c] = &scan.channels;
    let out = MultiModalScan::new(
        crop_volume(a, bbox)?,
        crop_volume(b, bbox)?,
        crop_volume(c, bbox)?,
        scan.patient_id.clone(),
    )?;
    let seg = seg.map(|s| crop_labels(s, bbox)).transpose()?;
    Ok((out, seg))
}

/// Writes a cropped label map back into a background grid of `dims`.
pub fn uncrop_labels(seg: &SegmentationMap, bbox: &BoundingBox, dims: [usize; 3]) -> Result<SegmentationMap> {
    bbox.check(dims)?;
    if seg.dims != bbox.extent() {
        return Err(Error::Shape(format!("labels {:?} do not match box {:?}", seg.dims, bbox.0)));
    }
    let mut labels = vec![0u8; dims.iter().product()];
    let [(z0, _), (y0, _), (x0, _)] = bbox.0;
    let [d, h, w] = seg.dims;
    for z in 0..d {
        for y in 0..h {
            let src = (z * h + y) * w;
            let dst = ((z + z0) * dims[1] + y + y0) * dims[2] + x0;
            labels[dst..dst + w].copy_from_slice(&seg.labels[src..src + w]);
        }
    }
    SegmentationMap::new(dims, seg.spacing, labels)
}

/// One-hot encoding with class axis `(0, 1, 2, 4)`: shape `(4, D, H, W)`.
pub fn one_hot(seg: &SegmentationMap) -> Vec<u8> {
    let n = seg.labels.len();
    let mut out = vec![0u8; NUM_CLASSES * n];
    for (i, &l) in seg.labels.iter().enumerate() {
        // labels are validated on construction
        let c = class_index(l).expect("validated label");
        out[c * n + i] = 1;
    }
    out
}

/// Nested evaluation regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Region {
    /// Enhancing tumor: {4}.
    Et,
    /// Whole tumor: {1, 2, 4}.
    Wt,
    /// Tumor core: {1, 4}.
    Tc,
}

impl Region {
    /// Report order.
    pub const ALL: [Region; 3] = [Region::Et, Region::Wt, Region::Tc];

    pub fn name(self) -> &'static str {
        match self {
            Region::Et => "ET",
            Region::Wt => "WT",
            Region::Tc => "TC",
        }
    }

    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::Et => label == 4,
            Region::Wt => matches!(label, 1 | 2 | 4),
            Region::Tc => matches!(label, 1 | 4),
        }
    }
}

/// Binary masks for ET, WT and TC, in that order.
pub fn regions_from_labels(seg: &SegmentationMap) -> [Vec<bool>; 3] {
    Region::ALL.map(|r| seg.labels.iter().map(|&l| r.contains(l)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ISO: [f64; 3] = [1.0, 1.0, 1.0];

    fn vol(dims: [usize; 3], data: Vec<f32>) -> Volume3D {
        Volume3D::new(dims, ISO, data).unwrap()
    }

    fn scan_from(a: Volume3D, b: Volume3D, c: Volume3D) -> MultiModalScan {
        MultiModalScan::new(a, b, c, "p").unwrap()
    }

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let v = vol([2, 2, 2], vec![5.0; 8]);
        let out = zscore_normalize(&v, NormRegion::All).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zscore_on_three_values() {
        let v = vol([1, 1, 3], vec![1.0, 2.0, 3.0]);
        let out = zscore_normalize(&v, NormRegion::All).unwrap();
        let e = 1.224_744_9_f32;
        for (a, b) in out.data().iter().zip([-e, 0.0, e]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zscore_nonzero_region_keeps_background() {
        let v = vol([1, 1, 4], vec![0.0, 0.0, 4.0, 6.0]);
        let out = zscore_normalize(&v, NormRegion::Nonzero).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, -1.0, 1.0]);
    }

    #[test]
    fn zscore_empty_region_is_error() {
        let v = vol([1, 1, 2], vec![0.0, 0.0]);
        let err = zscore_normalize(&v, NormRegion::Nonzero).unwrap_err();
        assert_eq!(err.to_string(), "no voxels to normalize");
    }

    #[test]
    fn bbox_single_voxel() {
        let mut a = Volume3D::zeros([8, 8, 8], ISO).unwrap();
        a.set(2, 3, 4, 1.0);
        let z = Volume3D::zeros([8, 8, 8], ISO).unwrap();
        let s = scan_from(a, z.clone(), z);
        assert_eq!(nonzero_bounding_box(&s).unwrap().0, [(2, 3), (3, 4), (4, 5)]);
    }

    #[test]
    fn bbox_full_and_empty() {
        let ones = vol([8, 8, 8], vec![1.0; 512]);
        let s = scan_from(ones.clone(), ones.clone(), ones);
        assert_eq!(nonzero_bounding_box(&s).unwrap(), BoundingBox::full([8, 8, 8]));
        let z = Volume3D::zeros([4, 4, 4], ISO).unwrap();
        let s = scan_from(z.clone(), z.clone(), z);
        assert_eq!(nonzero_bounding_box(&s).unwrap_err().to_string(), "empty scan");
    }

    #[test]
    fn bbox_is_union_over_channels() {
        let mut a = Volume3D::zeros([8, 4, 4], ISO).unwrap();
        let mut c = Volume3D::zeros([8, 4, 4], ISO).unwrap();
        a.set(1, 0, 0, 1.0);
        c.set(5, 2, 3, -1.0);
        let s = scan_from(a, Volume3D::zeros([8, 4, 4], ISO).unwrap(), c);
        // brute force: scan every voxel of every channel
        let mut zs = vec![];
        for z in 0..8 {
            for y in 0..4 {
                for x in 0..4 {
                    if s.channels().iter().any(|ch| ch.get(z, y, x) != 0.0) {
                        zs.push(z);
                    }
                }
            }
        }
        let b = nonzero_bounding_box(&s).unwrap();
        assert_eq!(b.0[0], (*zs.iter().min().unwrap(), zs.iter().max().unwrap() + 1));
        assert_eq!(b.0[0], (1, 6));
    }

    #[test]
    fn crop_identity_and_corner() {
        let v = Volume3D::from_fn([3, 4, 5], ISO, |z, y, x| (z * 100 + y * 10 + x) as f32).unwrap();
        let s = scan_from(v.clone(), v.clone(), v);
        let (full, _) = crop(&s, None, &BoundingBox::full([3, 4, 5])).unwrap();
        assert_eq!(full, s);
        let (one, _) = crop(&s, None, &BoundingBox([(0, 1), (0, 1), (0, 1)])).unwrap();
        assert_eq!(one.dims(), [1, 1, 1]);
        assert_eq!(one.channel(2).data(), &[0.0]);
        assert!(crop(&s, None, &BoundingBox([(0, 4), (0, 1), (0, 1)])).is_err());
    }

    #[test]
    fn crop_to_tight_box_is_tight() {
        let v = Volume3D::from_fn([6, 6, 6], ISO, |z, y, x| {
            if (1..4).contains(&z) && (2..5).contains(&y) && x == 3 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let s = scan_from(v.clone(), v.clone(), v);
        let b = nonzero_bounding_box(&s).unwrap();
        let (c, _) = crop(&s, None, &b).unwrap();
        assert_eq!(nonzero_bounding_box(&c).unwrap(), BoundingBox::full(c.dims()));
    }

    #[test]
    fn one_hot_cases() {
        let seg = SegmentationMap::background([2, 2, 2], ISO).unwrap();
        let oh = one_hot(&seg);
        assert!(oh[..8].iter().all(|&v| v == 1));
        assert!(oh[8..].iter().all(|&v| v == 0));

        let seg = SegmentationMap::new([1, 1, 2], ISO, vec![4, 0]).unwrap();
        let oh = one_hot(&seg);
        assert_eq!([oh[0], oh[2], oh[4], oh[6]], [0, 0, 0, 1]);
    }

    #[test]
    fn invalid_label_names_voxel() {
        let err = SegmentationMap::new([1, 2, 2], ISO, vec![0, 0, 0, 3]).unwrap_err();
        assert_eq!(err.to_string(), "invalid label value 3 at voxel (0, 1, 1)");
    }

    #[test]
    fn region_examples() {
        let all4 = SegmentationMap::new([1, 1, 3], ISO, vec![4; 3]).unwrap();
        for r in regions_from_labels(&all4) {
            assert!(r.iter().all(|&b| b));
        }
        let all2 = SegmentationMap::new([1, 1, 3], ISO, vec![2; 3]).unwrap();
        let [et, wt, tc] = regions_from_labels(&all2);
        assert!(wt.iter().all(|&b| b));
        assert!(!et.iter().any(|&b| b) && !tc.iter().any(|&b| b));
    }

    fn label_strategy(n: usize) -> impl Strategy<Value = Vec<u8>> {
        proptest::collection::vec(proptest::sample::select(LABEL_CODES.to_vec()), n)
    }

    proptest! {
        #[test]
        fn one_hot_partitions_and_inverts(labels in label_strategy(27)) {
            let seg = SegmentationMap::new([3, 3, 3], ISO, labels.clone()).unwrap();
            let oh = one_hot(&seg);
            for i in 0..27 {
                let col: Vec<u8> = (0..4).map(|c| oh[c * 27 + i]).collect();
                prop_assert_eq!(col.iter().map(|&v| v as u32).sum::<u32>(), 1);
                let arg = col.iter().position(|&v| v == 1).unwrap();
                prop_assert_eq!(LABEL_CODES[arg], labels[i]);
            }
        }

        #[test]
        fn regions_are_nested(labels in label_strategy(27)) {
            let seg = SegmentationMap::new([3, 3, 3], ISO, labels).unwrap();
            let [et, wt, tc] = regions_from_labels(&seg);
            for i in 0..27 {
                prop_assert!(!et[i] || tc[i]);
                prop_assert!(!tc[i] || wt[i]);
            }
        }

        #[test]
        fn zscore_is_idempotent(data in proptest::collection::vec(-100f32..100f32, 8..64)) {
            let n = data.len();
            let v = vol([1, 1, n], data);
            let once = zscore_normalize(&v, NormRegion::All).unwrap();
            prop_assume!(once.data().iter().any(|&x| x != 0.0));
            let twice = zscore_normalize(&once, NormRegion::All).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn nested_crops_compose(z0 in 0usize..3, y0 in 0usize..3, dz in 1usize..3, dy in 1usize..3) {
            let v = Volume3D::from_fn([6, 6, 6], ISO, |z, y, x| (z * 36 + y * 6 + x) as f32).unwrap();
            let outer = BoundingBox([(1, 6), (1, 6), (0, 6)]);
            let inner = BoundingBox([(z0, z0 + dz), (y0, y0 + dy), (2, 4)]);
            let twice = crop_volume(&crop_volume(&v, &outer).unwrap(), &inner).unwrap();
            let composed = BoundingBox([(z0 + 1, z0 + 1 + dz), (y0 + 1, y0 + 1 + dy), (2, 4)]);
            prop_assert_eq!(twice, crop_volume(&v, &composed).unwrap());
        }
    }
}
