//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use albuseg::network::{NetworkConfig, NetworkParams};

/// Channel-major 2D feature map.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map { c, h, w, v: vec![0.0; c * h * w] }
    }

    fn at(&self, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            return 0.0;
        }
        self.v[(c * self.h + y as usize) * self.w + x as usize]
    }
}

fn weights<'a>(p: &'a NetworkParams<f64>, name: &str) -> (&'a [f64], Vec<usize>) {
    let t = p.get(name).unwrap_or_else(|e| panic!("{name}: {e}"));
    (t.data(), t.shape().to_vec())
}

/// Plain 2D cross-correlation; the stored kernel is `(out, in, 1, k, k)`.
fn conv(x: &Map, p: &NetworkParams<f64>, name: &str, stride: usize, pad: usize) -> Map {
    let (w, s) = weights(p, name);
    let (co, ci, kd, k) = (s[0], s[1], s[2], s[3]);
    assert_eq!((ci, kd, s[4]), (x.c, 1, k));
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut out = Map::zeros(co, oh, ow);
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0;
                for i in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            acc += w[((o * ci + i) * k + ky) * k + kx] * x.at(i, iy, ix);
                        }
                    }
                }
                out.v[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

/// Stride-2 transposed convolution with a 4×4 kernel and padding 1; the
/// stored kernel is `(in, out, 1, 4, 4)`.
fn up(x: &Map, p: &NetworkParams<f64>, name: &str) -> Map {
    let (w, s) = weights(p, name);
    let (ci, co) = (s[0], s[1]);
    assert_eq!((ci, s[3], s[4]), (x.c, 4, 4));
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut out = Map::zeros(co, oh, ow);
    for i in 0..ci {
        for y in 0..x.h {
            for xx in 0..x.w {
                let v = x.v[(i * x.h + y) * x.w + xx];
                for o in 0..co {
                    for ky in 0..4 {
                        for kx in 0..4 {
                            let oy = (2 * y + ky) as isize - 1;
                            let ox = (2 * xx + kx) as isize - 1;
                            if oy < 0 || ox < 0 || oy as usize >= oh || ox as usize >= ow {
                                continue;
                            }
                            out.v[(o * oh + oy as usize) * ow + ox as usize] += v * w[((i * co + o) * 4 + ky) * 4 + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn batchnorm(x: &Map, p: &NetworkParams<f64>, name: &str) -> Map {
    let get = |s: &str| p.get(&format!("{name}.{s}")).unwrap().data().to_vec();
    let (scale, shift, mean, var) = (get("scale"), get("shift"), get("mean"), get("var"));
    let mut out = x.clone();
    let n = x.h * x.w;
    for c in 0..x.c {
        for i in 0..n {
            out.v[c * n + i] = scale[c] * (x.v[c * n + i] - mean[c]) / (var[c] + 1e-5).sqrt() + shift[c];
        }
    }
    out
}

fn relu(mut x: Map) -> Map {
    x.v.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

fn add(mut a: Map, b: &Map) -> Map {
    a.v.iter_mut().zip(&b.v).for_each(|(x, y)| *x += y);
    a
}

fn maxpool(x: &Map) -> Map {
    let mut out = Map::zeros(x.c, x.h / 2, x.w / 2);
    for c in 0..x.c {
        for y in 0..x.h / 2 {
            for xx in 0..x.w / 2 {
                let mut m = f64::NEG_INFINITY;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    m = m.max(x.at(c, (2 * y + dy) as isize, (2 * xx + dx) as isize));
                }
                out.v[(c * out.h + y) * out.w + xx] = m;
            }
        }
    }
    out
}

fn concat(a: &Map, b: &Map) -> Map {
    let mut v = a.v.clone();
    v.extend_from_slice(&b.v);
    Map { c: a.c + b.c, h: a.h, w: a.w, v }
}

/// Slice-wise reference of the segmentation network with the depth layers
/// removed, in evaluation mode: class probabilities `(4, H, W)`.
pub fn reference_forward_2d(cfg: &NetworkConfig, p: &NetworkParams<f64>, image: &Map) -> Map {
    assert!(!cfg.depth_layers_enabled);
    let k = cfg.stem_kernel;
    let stem = relu(batchnorm(&conv(image, p, "enc.stage0.block0.conv1.weight", 2, k / 2), p, "enc.stage0.block0.bn1"));
    let mut feats = vec![stem.clone()];
    let mut cur = maxpool(&stem);
    for (s, &n) in cfg.blocks_per_stage.iter().enumerate() {
        for b in 0..n {
            let name = format!("enc.stage{}.block{b}", s + 1);
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let h = relu(batchnorm(&conv(&cur, p, &format!("{name}.conv1.weight"), stride, 1), p, &format!("{name}.bn1")));
            let h = batchnorm(&conv(&h, p, &format!("{name}.conv2.weight"), 1, 1), p, &format!("{name}.bn2"));
            let shortcut = if p.get(&format!("{name}.down.weight")).is_ok() {
                batchnorm(&conv(&cur, p, &format!("{name}.down.weight"), stride, 0), p, &format!("{name}.down_bn"))
            } else {
                cur.clone()
            };
            cur = relu(add(h, &shortcut));
        }
        feats.push(cur.clone());
    }
    for j in 0..5 {
        let u = up(&cur, p, &format!("dec.block{j}.up.weight"));
        let cat = if j < 4 { concat(&u, &feats[3 - j]) } else { u };
        cur = relu(conv(&cat, p, &format!("dec.block{j}.conv.weight"), 1, 1));
    }
    let (hw, hs) = weights(p, "head.weight");
    let bias = p.get("head.bias").unwrap().data();
    let n = cur.h * cur.w;
    let mut logits = Map::zeros(hs[0], cur.h, cur.w);
    for o in 0..hs[0] {
        for i in 0..n {
            logits.v[o * n + i] = bias[o] + (0..hs[1]).map(|c| hw[o * hs[1] + c] * cur.v[c * n + i]).sum::<f64>();
        }
    }
    let mut probs = logits.clone();
    for i in 0..n {
        let m = (0..hs[0]).map(|o| logits.v[o * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..hs[0]).map(|o| (logits.v[o * n + i] - m).exp()).sum();
        for o in 0..hs[0] {
            probs.v[o * n + i] = (logits.v[o * n + i] - m).exp() / z;
        }
    }
    probs
}

/// `2|A∩B| / (|A|+|B|)` from explicit index sets; 1 when both are empty.
pub fn dice_by_sets(a: &[bool], b: &[bool]) -> f64 {
    use std::collections::BTreeSet;
    let sa: BTreeSet<usize> = a.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
    let sb: BTreeSet<usize> = b.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

fn coords(i: usize, dims: [usize; 3]) -> [usize; 3] {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}

/// Set members with a 6-neighbour outside the set or the grid.
pub fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<usize> {
    let idx = |c: [isize; 3]| -> Option<usize> {
        (0..3)
            .all(|a| c[a] >= 0 && (c[a] as usize) < dims[a])
            .then(|| (c[0] as usize * dims[1] + c[1] as usize) * dims[2] + c[2] as usize)
    };
    (0..mask.len())
        .filter(|&i| {
            mask[i] && {
                let c = coords(i, dims).map(|v| v as isize);
                [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]]
                    .iter()
                    .any(|d| idx([c[0] + d[0], c[1] + d[1], c[2] + d[2]]).is_none_or(|j| !mask[j]))
            }
        })
        .collect()
}

/// Percentile Hausdorff from all pairwise surface distances.
pub fn hausdorff_pairwise(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3], pct: f64) -> f64 {
    let (ea, eb) = (!a.contains(&true), !b.contains(&true));
    if ea && eb {
        return 0.0;
    }
    if ea || eb {
        return f64::INFINITY;
    }
    let (sa, sb) = (surface(a, dims), surface(b, dims));
    let directed = |from: &[usize], to: &[usize]| {
        let mut d: Vec<f64> = from
            .iter()
            .map(|&i| {
                let p = coords(i, dims);
                to.iter()
                    .map(|&j| {
                        let q = coords(j, dims);
                        (0..3).map(|k| ((p[k] as f64 - q[k] as f64) * spacing[k]).powi(2)).sum::<f64>().sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        d.sort_by(|x, y| x.total_cmp(y));
        let rank = pct / 100.0 * (d.len() - 1) as f64;
        let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
        d[lo] + (d[hi] - d[lo]) * (rank - lo as f64)
    };
    directed(&sa, &sb).max(directed(&sb, &sa))
}

/// Largest |difference| between the network (depth layers off, D = 1,
/// evaluation mode) and [`reference_forward_2d`] over `inputs` random
/// images, with randomized batch-norm statistics.
pub fn max_2d_discrepancy(seed: u64, inputs: usize, size: [usize; 2]) -> f64 {
    use albuseg::network::{build_network, Mode};
    use albuseg::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    let cfg = NetworkConfig::tiny().with_depth_layers(false);
    let (net, mut params) = build_network::<f64>(cfg.clone(), seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let id = params.id(name).unwrap();
        let t = params.tensor_mut(id);
        let range = if name.ends_with(".var") {
            Some(0.5..2.0)
        } else if name.ends_with(".scale") {
            Some(0.5..1.5)
        } else if name.ends_with(".mean") || name.ends_with(".shift") || name == "head.bias" {
            Some(-0.5..0.5)
        } else {
            None
        };
        if let Some(r) = range {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(r.clone()));
        }
    }
    let [h, w] = size;
    let mut worst = 0.0f64;
    for _ in 0..inputs {
        let data: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(&[1, 3, 1, h, w], data.clone()).unwrap();
        let (probs, _) = net.forward(&params, &x, Mode::Eval).unwrap();
        let reference = reference_forward_2d(&cfg, &params, &Map { c: 3, h, w, v: data });
        for (a, b) in probs.data().iter().zip(&reference.v) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}
