//! Encoder-decoder segmentation network.
//!
//! The encoder is a ResNet with every k×k kernel lifted to 1×k×k, so it
//! processes a volume slice by slice and accepts unmodified 2D weights. The
//! decoder upsamples with 1×4×4 transposed convolutions, concatenates the
//! matching encoder feature, applies a 1×3×3 convolution and (optionally) a
//! 3×1×1 depth convolution that mixes neighbouring slices, then a rectifier.
//! A 1×1×1 classifier and a softmax over four classes close the network.

mod config;
pub mod gradcheck;
pub mod layers;
mod params;

pub use config::NetworkConfig;
pub use gradcheck::{gradient_check, GradCheckReport, Probe};
pub use params::{lift_kernel_2d_to_3d, squeeze_kernel_3d_to_2d, NetworkParams, ParamKind, ParamSpec};

use layers::{BnCache, BnStats, ConvGeom};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are refreshed.
    Train,
    /// Gradients recorded, but batch norm uses stored running statistics.
    TrainFrozenBn,
    /// Nothing recorded; running statistics.
    Eval,
}

impl Mode {
    fn bn_stats(self) -> BnStats {
        match self {
            Mode::Train => BnStats::Batch,
            Mode::TrainFrozenBn | Mode::Eval => BnStats::Running,
        }
    }
}

const STEM_POOL_FACTOR: usize = 32;

/// Initial background logit; with the other logits near zero the network
/// starts out predicting background with probability about 0.87.
pub const BACKGROUND_BIAS: f64 = 3.0;

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    geom: ConvGeom,
}

#[derive(Clone, Debug)]
struct Bn {
    scale: usize,
    shift: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    bn1: Bn,
    conv2: Conv,
    bn2: Bn,
    down: Option<(Conv, Bn)>,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    up: Conv,
    conv: Conv,
    depth: Option<Conv>,
    up_channels: usize,
}

/// Architecture bound to a [`NetworkConfig`]; parameters live separately in
/// [`NetworkParams`].
#[derive(Clone, Debug)]
pub struct AlbuNet {
    cfg: NetworkConfig,
    specs: Vec<ParamSpec>,
    stem: Conv,
    stem_bn: Bn,
    stages: Vec<Vec<Block>>,
    decoder: Vec<DecoderBlock>,
    head_w: usize,
    head_b: usize,
}

struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> usize {
        self.specs.push(ParamSpec { name, shape, kind });
        self.specs.len() - 1
    }

    /// He-uniform bound for convolutions followed by batch normalization,
    /// `1/sqrt(fan_in)` for the unnormalized decoder.
    fn conv(&mut self, name: &str, cout: usize, cin: usize, geom: ConvGeom) -> Conv {
        let fan_in = (cin * geom.taps()) as f64;
        let bound = if name.starts_with("enc.") { (6.0 / fan_in).sqrt() } else { fan_in.sqrt().recip() };
        let k = geom.kernel;
        let w = self.add(format!("{name}.weight"), vec![cout, cin, k[0], k[1], k[2]], ParamKind::Kernel { bound });
        Conv { w, geom }
    }

    fn tconv(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Conv {
        let overlap: usize = (0..3).map(|a| geom.kernel[a] / geom.stride[a]).product();
        let bound = ((cin * overlap) as f64).sqrt().recip();
        let k = geom.kernel;
        let w = self.add(format!("{name}.weight"), vec![cin, cout, k[0], k[1], k[2]], ParamKind::Kernel { bound });
        Conv { w, geom }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        Bn {
            scale: self.add(format!("{name}.scale"), vec![c], ParamKind::BnScale),
            shift: self.add(format!("{name}.shift"), vec![c], ParamKind::BnShift),
            mean: self.add(format!("{name}.mean"), vec![c], ParamKind::BnMean),
            var: self.add(format!("{name}.var"), vec![c], ParamKind::BnVar),
        }
    }
}

const K3: ConvGeom = ConvGeom::new([1, 3, 3], [1, 1, 1], [0, 1, 1]);
const K3_DOWN: ConvGeom = ConvGeom::new([1, 3, 3], [1, 2, 2], [0, 1, 1]);
const PROJ_DOWN: ConvGeom = ConvGeom::new([1, 1, 1], [1, 2, 2], [0, 0, 0]);
const UP: ConvGeom = ConvGeom::new([1, 4, 4], [1, 2, 2], [0, 1, 1]);
const DEPTH: ConvGeom = ConvGeom::new([3, 1, 1], [1, 1, 1], [1, 0, 0]);
const POINT: ConvGeom = ConvGeom::new([1, 1, 1], [1, 1, 1], [0, 0, 0]);

impl AlbuNet {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut reg = Registry { specs: Vec::new() };
        let k = cfg.stem_kernel;
        let stem_geom = ConvGeom::new([1, k, k], [1, 2, 2], [0, k / 2, k / 2]);
        let enc = cfg.encoder_widths();
        let stem = reg.conv("enc.stage0.block0.conv1", enc[0], cfg.in_channels, stem_geom);
        let stem_bn = reg.bn("enc.stage0.block0.bn1", enc[0]);
        let mut stages = Vec::new();
        let mut cin = enc[0];
        for (s, &nblocks) in cfg.blocks_per_stage.iter().enumerate() {
            let cout = enc[s + 1];
            let mut blocks = Vec::new();
            for b in 0..nblocks {
                let p = format!("enc.stage{}.block{b}", s + 1);
                let downsample = s > 0 && b == 0;
                let conv1 = reg.conv(&format!("{p}.conv1"), cout, cin, if downsample { K3_DOWN } else { K3 });
                let bn1 = reg.bn(&format!("{p}.bn1"), cout);
                let conv2 = reg.conv(&format!("{p}.conv2"), cout, cout, K3);
                let bn2 = reg.bn(&format!("{p}.bn2"), cout);
                let down = (downsample || cin != cout).then(|| {
                    let geom = if downsample { PROJ_DOWN } else { POINT };
                    (reg.conv(&format!("{p}.down"), cout, cin, geom), reg.bn(&format!("{p}.down_bn"), cout))
                });
                blocks.push(Block { conv1, bn1, conv2, bn2, down });
                cin = cout;
            }
            stages.push(blocks);
        }
        let mut decoder = Vec::new();
        let inputs = cfg.decoder_inputs();
        let skips = cfg.decoder_skips();
        for (j, &d) in cfg.decoder_widths.iter().enumerate() {
            let p = format!("dec.block{j}");
            let up = reg.tconv(&format!("{p}.up"), inputs[j], d, UP);
            let conv = reg.conv(&format!("{p}.conv"), d, d + skips[j], K3);
            let depth = cfg.depth_layers_enabled.then(|| reg.conv(&format!("{p}.depth"), d, d, DEPTH));
            decoder.push(DecoderBlock { up, conv, depth, up_channels: d });
        }
        let last = cfg.decoder_widths[4];
        let head_w = reg.add(
            "head.weight".into(),
            vec![cfg.out_classes, last, 1, 1, 1],
            ParamKind::Kernel { bound: (1.0 / last as f64).sqrt() },
        );
        let head_b = reg.add(
            "head.bias".into(),
            vec![cfg.out_classes],
            ParamKind::Bias { first: BACKGROUND_BIAS },
        );
        Ok(AlbuNet { cfg, specs: reg.specs, stem, stem_bn, stages, decoder, head_w, head_b })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Freshly initialized parameters; identical seeds give identical bits.
    pub fn init_params<T: Real>(&self, seed: u64) -> NetworkParams<T> {
        NetworkParams::initialize(self.specs.clone(), seed)
    }

    fn check_params<T: Real>(&self, params: &NetworkParams<T>) -> Result<()> {
        if params.specs() != self.specs.as_slice() {
            return Err(Error::Shape("parameters were built for a different configuration".into()));
        }
        params.audit()
    }

    fn check_input<T: Real>(&self, x: &Tensor<T>) -> Result<[usize; 5]> {
        let dims = x.dims5()?;
        let [_, c, d, h, w] = dims;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!("expected {} input channels, got {c}", self.cfg.in_channels)));
        }
        if d == 0 || h % STEM_POOL_FACTOR != 0 || w % STEM_POOL_FACTOR != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input H and W must be positive multiples of {STEM_POOL_FACTOR} and D >= 1, got D={d} H={h} W={w}"
            )));
        }
        Ok(dims)
    }

    /// Class probabilities `(B, 4, D, H, W)` plus the tape for [`Self::backward`].
    pub fn forward<T: Real>(&self, params: &NetworkParams<T>, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_params(params)?;
        self.check_input(x)?;
        let stats = mode.bn_stats();
        let record = mode != Mode::Eval;
        let mut running = Vec::new();
        let (features, enc_tape) = self.encode_inner(params, x, stats, record, &mut running)?;
        let mut cur = features[4].clone();
        let mut dec_tapes = Vec::new();
        for (j, blk) in self.decoder.iter().enumerate() {
            let skip = (j < 4).then(|| &features[3 - j]);
            let (out, tape) = self.decode_block(params, blk, &cur, skip, record)?;
            if let Some(t) = tape {
                dec_tapes.push(t);
            }
            cur = out;
        }
        let logits = layers::conv_forward(&cur, params.tensor(self.head_w), Some(params.tensor(self.head_b)), &POINT)?;
        let probs = layers::softmax(&logits)?;
        let recorded = record.then(|| Recorded {
            enc: enc_tape.expect("recorded"),
            dec: dec_tapes,
            head_in: cur,
            probs: probs.clone(),
        });
        Ok((probs, Tape { mode, recorded, running }))
    }

    /// Encoder features f0..f4 (stem at 1/2 resolution through the last
    /// stage at 1/32), for classification heads built on the encoder.
    pub fn encode<T: Real>(
        &self,
        params: &NetworkParams<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Vec<Tensor<T>>, EncoderTape<T>)> {
        self.check_params(params)?;
        self.check_input(x)?;
        let mut running = Vec::new();
        let record = mode != Mode::Eval;
        let (features, tape) = self.encode_inner(params, x, mode.bn_stats(), record, &mut running)?;
        Ok((features, EncoderTape { mode, inner: tape, running }))
    }

    #[allow(clippy::type_complexity)]
    fn encode_inner<T: Real>(
        &self,
        params: &NetworkParams<T>,
        x: &Tensor<T>,
        stats: BnStats,
        record: bool,
        running: &mut Vec<(usize, Vec<T>)>,
    ) -> Result<(Vec<Tensor<T>>, Option<EncTape<T>>)> {
        let c = layers::conv_forward(x, params.tensor(self.stem.w), None, &self.stem.geom)?;
        let (c, stem_bn, upd) = bn(params, &self.stem_bn, &c, stats)?;
        push_running(running, &self.stem_bn, upd);
        let stem_act = layers::relu(c);
        let (mut cur, pool_idx) = layers::maxpool_forward(&stem_act)?;
        let mut features = vec![stem_act.clone()];
        let mut block_tapes = Vec::new();
        for stage in &self.stages {
            let mut stage_tapes = Vec::new();
            for blk in stage {
                let (out, tape) = block_forward(params, blk, &cur, stats, record, running)?;
                if let Some(t) = tape {
                    stage_tapes.push(t);
                }
                cur = out;
            }
            features.push(cur.clone());
            block_tapes.push(stage_tapes);
        }
        let tape = record.then(|| EncTape {
            input: x.clone(),
            stem_bn,
            stem_act,
            pool_idx,
            blocks: block_tapes,
        });
        Ok((features, tape))
    }

    fn decode_block<T: Real>(
        &self,
        params: &NetworkParams<T>,
        blk: &DecoderBlock,
        x: &Tensor<T>,
        skip: Option<&Tensor<T>>,
        record: bool,
    ) -> Result<(Tensor<T>, Option<DecTape<T>>)> {
        let up = layers::tconv_forward(x, params.tensor(blk.up.w), &blk.up.geom)?;
        let cat = match skip {
            Some(s) => layers::concat(&up, s)?,
            None => up,
        };
        let conv_out = layers::conv_forward(&cat, params.tensor(blk.conv.w), None, &blk.conv.geom)?;
        let pre = match &blk.depth {
            Some(d) => layers::conv_forward(&conv_out, params.tensor(d.w), None, &d.geom)?,
            None => conv_out.clone(),
        };
        let out = layers::relu(pre);
        let tape = record.then(|| DecTape { up_in: x.clone(), cat, conv_out, out: out.clone() });
        Ok((out, tape))
    }

    /// Parameter gradients for the loss whose gradient w.r.t. the output
    /// probabilities is `grad_out`. The tape is only read, so repeated calls
    /// return identical results.
    pub fn backward<T: Real>(
        &self,
        params: &NetworkParams<T>,
        tape: &Tape<T>,
        grad_out: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<Gradients<T>> {
        self.check_params(params)?;
        let rec = tape.recorded.as_ref().ok_or(Error::EvalTape)?;
        if grad_out.shape() != rec.probs.shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                grad_out.shape(),
                rec.probs.shape()
            )));
        }
        let mut grads = Gradients::zeros_like(params);
        let dlogits = layers::softmax_backward(&rec.probs, grad_out)?;
        let (dx, dw, db) = layers::conv_backward(&rec.head_in, params.tensor(self.head_w), &dlogits, &POINT, true, true)?;
        grads.add(self.head_w, &dw);
        grads.add(self.head_b, &db.expect("bias requested"));
        let mut d = dx.expect("input grad requested");
        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; 5];
        for (j, blk) in self.decoder.iter().enumerate().rev() {
            let t = &rec.dec[j];
            let (dx, dskip) = decode_block_backward(params, blk, t, d, &mut grads)?;
            if let Some(ds) = dskip {
                dskips[3 - j] = Some(ds);
            }
            d = dx;
        }
        dskips[4] = Some(d);
        let input = self.encode_backward_inner(params, &rec.enc, dskips, tape.mode.bn_stats(), &mut grads, need_input_grad)?;
        grads.input = input;
        Ok(grads)
    }

    /// Backward through the encoder given gradients for any subset of the
    /// five features returned by [`Self::encode`].
    pub fn encode_backward<T: Real>(
        &self,
        params: &NetworkParams<T>,
        tape: &EncoderTape<T>,
        dfeatures: Vec<Option<Tensor<T>>>,
    ) -> Result<Gradients<T>> {
        let inner = tape.inner.as_ref().ok_or(Error::EvalTape)?;
        let mut grads = Gradients::zeros_like(params);
        self.encode_backward_inner(params, inner, dfeatures, tape.mode.bn_stats(), &mut grads, false)?;
        Ok(grads)
    }

    fn encode_backward_inner<T: Real>(
        &self,
        params: &NetworkParams<T>,
        t: &EncTape<T>,
        mut dfeatures: Vec<Option<Tensor<T>>>,
        _stats: BnStats,
        grads: &mut Gradients<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mut d: Option<Tensor<T>> = dfeatures[4].take();
        for (s, stage) in self.stages.iter().enumerate().rev() {
            if s < 3 {
                d = add_opt(d, dfeatures[s + 1].take());
            }
            for (b, blk) in stage.iter().enumerate().rev() {
                let Some(g) = d.take() else { continue };
                d = Some(block_backward(params, blk, &t.blocks[s][b], g, grads)?);
            }
        }
        // d now holds the gradient w.r.t. the pooled stem output
        let mut dstem = match d {
            Some(g) => Some(layers::maxpool_backward(t.stem_act.shape(), &t.pool_idx, &g)),
            None => None,
        };
        dstem = add_opt(dstem, dfeatures[0].take());
        let Some(g) = dstem else { return Ok(None) };
        let g = layers::relu_backward(&t.stem_act, g);
        let g = bn_backward(params, &self.stem_bn, &t.stem_bn, &g, grads)?;
        let (dx, dw, _) = layers::conv_backward(&t.input, params.tensor(self.stem.w), &g, &self.stem.geom, false, need_input_grad)?;
        grads.add(self.stem.w, &dw);
        Ok(dx)
    }
}

fn add_opt<T: Real>(a: Option<Tensor<T>>, b: Option<Tensor<T>>) -> Option<Tensor<T>> {
    match (a, b) {
        (Some(mut a), Some(b)) => {
            a.add_assign(&b);
            Some(a)
        }
        (a, None) => a,
        (None, b) => b,
    }
}

fn push_running<T: Real>(running: &mut Vec<(usize, Vec<T>)>, b: &Bn, upd: Option<(Vec<T>, Vec<T>)>) {
    if let Some((m, v)) = upd {
        running.push((b.mean, m));
        running.push((b.var, v));
    }
}

#[allow(clippy::type_complexity)]
fn bn<T: Real>(
    params: &NetworkParams<T>,
    b: &Bn,
    x: &Tensor<T>,
    stats: BnStats,
) -> Result<(Tensor<T>, BnCache<T>, Option<(Vec<T>, Vec<T>)>)> {
    layers::bn_forward(
        x,
        params.tensor(b.scale).data(),
        params.tensor(b.shift).data(),
        params.tensor(b.mean).data(),
        params.tensor(b.var).data(),
        stats,
    )
}

fn bn_backward<T: Real>(
    params: &NetworkParams<T>,
    b: &Bn,
    cache: &BnCache<T>,
    dy: &Tensor<T>,
    grads: &mut Gradients<T>,
) -> Result<Tensor<T>> {
    let (dx, dscale, dshift) = layers::bn_backward(cache, params.tensor(b.scale).data(), dy)?;
    grads.add_slice(b.scale, &dscale);
    grads.add_slice(b.shift, &dshift);
    Ok(dx)
}

fn block_forward<T: Real>(
    params: &NetworkParams<T>,
    blk: &Block,
    x: &Tensor<T>,
    stats: BnStats,
    record: bool,
    running: &mut Vec<(usize, Vec<T>)>,
) -> Result<(Tensor<T>, Option<BlockTape<T>>)> {
    let h = layers::conv_forward(x, params.tensor(blk.conv1.w), None, &blk.conv1.geom)?;
    let (h, bn1, u1) = bn(params, &blk.bn1, &h, stats)?;
    push_running(running, &blk.bn1, u1);
    let act1 = layers::relu(h);
    let h = layers::conv_forward(&act1, params.tensor(blk.conv2.w), None, &blk.conv2.geom)?;
    let (mut h, bn2, u2) = bn(params, &blk.bn2, &h, stats)?;
    push_running(running, &blk.bn2, u2);
    let mut down_bn = None;
    match &blk.down {
        Some((conv, b)) => {
            let s = layers::conv_forward(x, params.tensor(conv.w), None, &conv.geom)?;
            let (s, cache, u) = bn(params, b, &s, stats)?;
            push_running(running, b, u);
            h.add_assign(&s);
            down_bn = Some(cache);
        }
        None => h.add_assign(x),
    }
    let out = layers::relu(h);
    let tape = record.then(|| BlockTape { input: x.clone(), bn1, act1, bn2, down_bn, out: out.clone() });
    Ok((out, tape))
}

fn block_backward<T: Real>(
    params: &NetworkParams<T>,
    blk: &Block,
    t: &BlockTape<T>,
    dout: Tensor<T>,
    grads: &mut Gradients<T>,
) -> Result<Tensor<T>> {
    let dsum = layers::relu_backward(&t.out, dout);
    let g = bn_backward(params, &blk.bn2, &t.bn2, &dsum, grads)?;
    let (da, dw, _) = layers::conv_backward(&t.act1, params.tensor(blk.conv2.w), &g, &blk.conv2.geom, false, true)?;
    grads.add(blk.conv2.w, &dw);
    let g = layers::relu_backward(&t.act1, da.expect("dx"));
    let g = bn_backward(params, &blk.bn1, &t.bn1, &g, grads)?;
    let (dx, dw, _) = layers::conv_backward(&t.input, params.tensor(blk.conv1.w), &g, &blk.conv1.geom, false, true)?;
    grads.add(blk.conv1.w, &dw);
    let mut dx = dx.expect("dx");
    match (&blk.down, &t.down_bn) {
        (Some((conv, b)), Some(cache)) => {
            let g = bn_backward(params, b, cache, &dsum, grads)?;
            let (ds, dw, _) = layers::conv_backward(&t.input, params.tensor(conv.w), &g, &conv.geom, false, true)?;
            grads.add(conv.w, &dw);
            dx.add_assign(&ds.expect("dx"));
        }
        _ => dx.add_assign(&dsum),
    }
    Ok(dx)
}

fn decode_block_backward<T: Real>(
    params: &NetworkParams<T>,
    blk: &DecoderBlock,
    t: &DecTape<T>,
    dout: Tensor<T>,
    grads: &mut Gradients<T>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let mut g = layers::relu_backward(&t.out, dout);
    if let Some(d) = &blk.depth {
        let (dx, dw, _) = layers::conv_backward(&t.conv_out, params.tensor(d.w), &g, &d.geom, false, true)?;
        grads.add(d.w, &dw);
        g = dx.expect("dx");
    }
    let (dcat, dw, _) = layers::conv_backward(&t.cat, params.tensor(blk.conv.w), &g, &blk.conv.geom, false, true)?;
    grads.add(blk.conv.w, &dw);
    let dcat = dcat.expect("dx");
    let (dup, dskip) = if dcat.shape()[1] > blk.up_channels {
        let (a, b) = layers::split(&dcat, blk.up_channels)?;
        (a, Some(b))
    } else {
        (dcat, None)
    };
    let (dx, dw) = layers::tconv_backward(&t.up_in, params.tensor(blk.up.w), &dup, &blk.up.geom)?;
    grads.add(blk.up.w, &dw);
    Ok((dx, dskip))
}

struct BlockTape<T> {
    input: Tensor<T>,
    bn1: BnCache<T>,
    act1: Tensor<T>,
    bn2: BnCache<T>,
    down_bn: Option<BnCache<T>>,
    out: Tensor<T>,
}

struct EncTape<T> {
    input: Tensor<T>,
    stem_bn: BnCache<T>,
    stem_act: Tensor<T>,
    pool_idx: Vec<u32>,
    blocks: Vec<Vec<BlockTape<T>>>,
}

struct DecTape<T> {
    up_in: Tensor<T>,
    cat: Tensor<T>,
    conv_out: Tensor<T>,
    out: Tensor<T>,
}

struct Recorded<T> {
    enc: EncTape<T>,
    dec: Vec<DecTape<T>>,
    head_in: Tensor<T>,
    probs: Tensor<T>,
}

/// Activations cached by a train-mode forward. Empty in eval mode.
pub struct Tape<T> {
    mode: Mode,
    recorded: Option<Recorded<T>>,
    running: Vec<(usize, Vec<T>)>,
}

impl<T: Real> Tape<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_empty(&self) -> bool {
        self.recorded.is_none()
    }

    /// Updated batch-norm running statistics as `(parameter id, values)`.
    pub fn running_stats(&self) -> &[(usize, Vec<T>)] {
        &self.running
    }
}

impl<T> std::fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("mode", &self.mode)
            .field("recorded", &self.recorded.is_some())
            .field("running", &self.running.len())
            .finish()
    }
}

/// Tape of an encoder-only forward.
pub struct EncoderTape<T> {
    mode: Mode,
    inner: Option<EncTape<T>>,
    running: Vec<(usize, Vec<T>)>,
}

impl<T: Real> EncoderTape<T> {
    pub fn running_stats(&self) -> &[(usize, Vec<T>)] {
        &self.running
    }
}

/// One gradient tensor per parameter (zero for running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
    /// Gradient w.r.t. the network input, when requested.
    pub input: Option<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &NetworkParams<T>) -> Self {
        Gradients {
            tensors: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            input: None,
        }
    }

    fn add(&mut self, id: usize, g: &Tensor<T>) {
        self.tensors[id].add_assign(g);
    }

    fn add_slice(&mut self, id: usize, g: &[T]) {
        for (a, &b) in self.tensors[id].data_mut().iter_mut().zip(g) {
            *a = *a + b;
        }
    }

    pub fn merge(&mut self, other: &Gradients<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }
}

/// Builds the architecture for `cfg` and draws its parameters from `seed`.
pub fn build_network<T: Real>(cfg: NetworkConfig, seed: u64) -> Result<(AlbuNet, NetworkParams<T>)> {
    let net = AlbuNet::new(cfg)?;
    let params = net.init_params(seed);
    params.audit()?;
    Ok((net, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect()).unwrap()
    }

    /// Closed-form parameter count of the tiny configuration, layer by layer.
    #[test]
    fn tiny_parameter_count_matches_closed_form() {
        let cfg = NetworkConfig::tiny();
        let (_, params) = build_network::<f32>(cfg.clone(), 0).unwrap();
        let w = 8;
        let bn = |c: usize| 4 * c;
        let conv = |co: usize, ci: usize, taps: usize| co * ci * taps;
        let mut expected = conv(w, 3, 49) + bn(w);
        // stage1: no projection
        expected += 2 * conv(w, w, 9) + 2 * bn(w);
        for (ci, co) in [(w, 2 * w), (2 * w, 4 * w), (4 * w, 8 * w)] {
            expected += conv(co, ci, 9) + conv(co, co, 9) + 2 * bn(co) + conv(co, ci, 1) + bn(co);
        }
        let d = cfg.decoder_widths;
        let inputs = [8 * w, d[0], d[1], d[2], d[3]];
        let skips = [4 * w, 2 * w, w, w, 0];
        for j in 0..5 {
            expected += inputs[j] * d[j] * 16 + conv(d[j], d[j] + skips[j], 9) + conv(d[j], d[j], 3);
        }
        expected += 4 * d[4] + 4;
        assert_eq!(params.scalar_count(), expected);
    }

    #[test]
    fn resnet34_encoder_has_33_main_convs() {
        let cfg = NetworkConfig::resnet34();
        assert_eq!(cfg.encoder_main_convs(), 33);
        let net = AlbuNet::new(cfg).unwrap();
        let main = net
            .param_specs()
            .iter()
            .filter(|s| s.name.starts_with("enc.") && (s.name.ends_with("conv1.weight") || s.name.ends_with("conv2.weight")))
            .count();
        assert_eq!(main, 33);
        for s in net.param_specs() {
            if s.shape.len() == 5 {
                let kd = s.shape[2];
                if s.name.ends_with("depth.weight") {
                    assert_eq!(kd, 3, "{}", s.name);
                } else {
                    assert_eq!(kd, 1, "{}", s.name);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_bits() {
        let (_, a) = build_network::<f32>(NetworkConfig::tiny(), 42).unwrap();
        let (_, b) = build_network::<f32>(NetworkConfig::tiny(), 42).unwrap();
        let (_, c) = build_network::<f32>(NetworkConfig::tiny(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn widening_decoder_rejected() {
        let mut cfg = NetworkConfig::tiny();
        cfg.decoder_widths = [128, 16, 8, 64, 8];
        let err = AlbuNet::new(cfg).unwrap_err().to_string();
        assert!(err.contains("decoder block 0") && err.contains("decoder block 3"), "{err}");
    }

    #[test]
    fn output_is_normalized_and_shaped() {
        let (net, params) = build_network::<f32>(NetworkConfig::tiny(), 1).unwrap();
        let x = random_input::<f32>(&[2, 3, 3, 32, 64], 2);
        let (p, tape) = net.forward(&params, &x, Mode::Eval).unwrap();
        assert_eq!(p.shape(), &[2, 4, 3, 32, 64]);
        assert!(tape.is_empty());
        let s = 3 * 32 * 64;
        for b in 0..2 {
            for i in 0..s {
                let sum: f32 = (0..4).map(|c| p.data()[(b * 4 + c) * s + i]).sum();
                assert!((sum - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let (net, params) = build_network::<f32>(NetworkConfig::tiny(), 1).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 3, 1, 48, 32]);
        let err = net.forward(&params, &x, Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("multiples of 32"));
    }

    #[test]
    fn eval_tape_cannot_backprop() {
        let (net, params) = build_network::<f32>(NetworkConfig::tiny(), 1).unwrap();
        let x = random_input::<f32>(&[1, 3, 1, 32, 32], 3);
        let (p, tape) = net.forward(&params, &x, Mode::Eval).unwrap();
        assert!(matches!(net.backward(&params, &tape, &p, false), Err(Error::EvalTape)));
    }

    #[test]
    fn zero_upstream_gives_zero_grads_and_backward_is_repeatable() {
        let (net, params) = build_network::<f64>(NetworkConfig::tiny(), 5).unwrap();
        let x = random_input::<f64>(&[2, 3, 2, 32, 32], 6);
        let (p, tape) = net.forward(&params, &x, Mode::Train).unwrap();
        let g = net.backward(&params, &tape, &Tensor::zeros(p.shape()), false).unwrap();
        assert!(g.tensors.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        let up = random_input::<f64>(p.shape(), 7);
        let g1 = net.backward(&params, &tape, &up, true).unwrap();
        let g2 = net.backward(&params, &tape, &up, true).unwrap();
        assert_eq!(g1, g2);
        assert!(g1.input.is_some());
    }

    #[test]
    fn slicewise_encoder_without_depth_layers() {
        let (net, params) = build_network::<f64>(NetworkConfig::tiny().with_depth_layers(false), 8).unwrap();
        let x = random_input::<f64>(&[1, 3, 3, 32, 32], 9);
        let (full, _) = net.forward(&params, &x, Mode::Eval).unwrap();
        let plane = 32 * 32;
        for z in 0..3 {
            let mut slice = Vec::new();
            for c in 0..3 {
                let o = (c * 3 + z) * plane;
                slice.extend_from_slice(&x.data()[o..o + plane]);
            }
            let xs = Tensor::from_vec(&[1, 3, 1, 32, 32], slice).unwrap();
            let (ps, _) = net.forward(&params, &xs, Mode::Eval).unwrap();
            for c in 0..4 {
                for i in 0..plane {
                    let a = full.data()[(c * 3 + z) * plane + i];
                    let b = ps.data()[c * plane + i];
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn running_stats_update_in_train_mode_only() {
        let (net, mut params) = build_network::<f32>(NetworkConfig::tiny(), 5).unwrap();
        let x = random_input::<f32>(&[2, 3, 1, 32, 32], 6);
        let (_, tape) = net.forward(&params, &x, Mode::TrainFrozenBn).unwrap();
        assert!(tape.running_stats().is_empty());
        let (_, tape) = net.forward(&params, &x, Mode::Train).unwrap();
        assert!(!tape.running_stats().is_empty());
        let before = params.get("enc.stage0.block0.bn1.mean").unwrap().clone();
        params.apply_running_stats(tape.running_stats());
        assert_ne!(&before, params.get("enc.stage0.block0.bn1.mean").unwrap());
    }

    #[test]
    fn pretrained_load_touches_encoder_only() {
        let (net, src) = build_network::<f32>(NetworkConfig::tiny(), 10).unwrap();
        let store = src.export_encoder_2d().unwrap();
        assert_eq!(store.get("enc.stage0.block0.conv1.weight").unwrap().shape, vec![8, 3, 7, 7]);
        let mut dst = net.init_params::<f32>(11);
        let fresh = dst.clone();
        let loaded = dst.load_pretrained(&store, true).unwrap();
        assert_eq!(loaded.len(), store.len());
        for (i, spec) in dst.specs().iter().enumerate() {
            if spec.name.starts_with("enc.") {
                assert_eq!(dst.tensor(i).data(), src.tensor(i).data());
            } else {
                assert_eq!(dst.tensor(i), fresh.tensor(i));
            }
        }
        let mut partial = store.clone();
        partial.remove("enc.stage2.block0.bn2.var");
        let err = dst.clone().load_pretrained(&partial, true).unwrap_err();
        assert_eq!(err.to_string(), "missing tensor 'enc.stage2.block0.bn2.var'");
        assert!(dst.load_pretrained(&partial, false).is_ok());
    }
}
