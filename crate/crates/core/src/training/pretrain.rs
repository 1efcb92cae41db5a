//! 2D encoder pretraining on a shape-classification task: the encoder's
//! deepest feature map is averaged globally and fed to a linear classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::network::{AlbuNet, Mode, NetworkConfig, NetworkParams};
use crate::rng::derive_seed;
use crate::synth::{PretrainSet, PRETRAIN_CLASSES};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 200, batch_size: 16, learning_rate: 1e-3, seed: 0 }
    }
}

pub struct Pretrained {
    pub store: WeightStore,
    /// Cross-entropy of every step, in order.
    pub losses: Vec<f64>,
    /// Cross-entropy of the untrained model on the first batch.
    pub initial_loss: f64,
    pub accuracy: f64,
}

/// Softmax cross-entropy and its gradient w.r.t. the logits (`B × K`).
fn cross_entropy(logits: &[f64], labels: &[usize], k: usize) -> (f64, Vec<f64>) {
    let b = labels.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * k];
    for i in 0..b {
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[labels[i]];
        for j in 0..k {
            grad[i * k + j] = ((row[j] - m).exp() / z - (j == labels[i]) as usize as f64) / b as f64;
        }
    }
    (loss / b as f64, grad)
}

struct Classifier {
    w: Tensor<f32>,
    b: Tensor<f32>,
}

/// Logits and the pooled features.
fn classify(
    net: &AlbuNet,
    params: &NetworkParams<f32>,
    head: &Classifier,
    x: &Tensor<f32>,
    mode: Mode,
) -> Result<(Vec<f64>, Vec<f64>, [usize; 5], crate::network::EncoderTape<f32>)> {
    let (features, tape) = net.encode(params, x, mode)?;
    let f = &features[4];
    let dims = f.dims5()?;
    let [b, c, d, h, w] = dims;
    let s = d * h * w;
    let pooled: Vec<f64> = (0..b * c)
        .map(|i| f.data()[i * s..(i + 1) * s].iter().map(|&v| v as f64).sum::<f64>() / s as f64)
        .collect();
    let k = PRETRAIN_CLASSES.len();
    let mut logits = vec![0.0; b * k];
    for i in 0..b {
        for j in 0..k {
            let mut acc = head.b.data()[j] as f64;
            for ci in 0..c {
                acc += head.w.data()[j * c + ci] as f64 * pooled[i * c + ci];
            }
            logits[i * k + j] = acc;
        }
    }
    Ok((logits, pooled, dims, tape))
}

fn batch(set: &PretrainSet, idx: &[usize]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(idx.len() * 3 * set.size * set.size);
    for &i in idx {
        data.extend_from_slice(set.image(i));
    }
    Tensor::from_vec(&[idx.len(), 3, 1, set.size, set.size], data).expect("image batch")
}

/// Trains encoder and classifier with Adam and returns the encoder in 2D
/// form under canonical names.
pub fn pretrain_encoder(net_cfg: &NetworkConfig, set: &PretrainSet, cfg: &PretrainConfig) -> Result<Pretrained> {
    if set.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("pretraining needs images and a positive batch size".into()));
    }
    let net_cfg = NetworkConfig { depth_layers_enabled: false, ..net_cfg.clone() };
    let net = AlbuNet::new(net_cfg)?;
    let mut params: NetworkParams<f32> = net.init_params(derive_seed(cfg.seed, 1));
    let c = net.config().encoder_widths()[4];
    let k = PRETRAIN_CLASSES.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let bound = (1.0 / c as f64).sqrt();
    let mut head = Classifier {
        w: Tensor::from_vec(&[k, c], (0..k * c).map(|_| rng.random_range(-bound..bound) as f32).collect())?,
        b: Tensor::zeros(&[k]),
    };
    let enc_mask: Vec<bool> = params.specs().iter().map(|s| s.kind.trainable() && s.name.starts_with("enc.")).collect();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut adam = AdamState::for_params(&params);
    let mut head_adam = AdamState::<f32>::new([vec![k, c], vec![k]]);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut initial_loss = f64::NAN;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..set.len())).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
        let x = batch(set, &idx);
        let (logits, pooled, [b, _, d, h, w], tape) = classify(&net, &params, &head, &x, Mode::Train)?;
        let (loss, dlogits) = cross_entropy(&logits, &labels, k);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, iteration: step, snapshot: "pretraining".into() });
        }
        if step == 0 {
            initial_loss = loss;
        }
        losses.push(loss);
        let mut dw = vec![0f32; k * c];
        let mut db = vec![0f32; k];
        let mut dpooled = vec![0f64; b * c];
        for i in 0..b {
            for j in 0..k {
                let g = dlogits[i * k + j];
                db[j] += g as f32;
                for ci in 0..c {
                    dw[j * c + ci] += (g * pooled[i * c + ci]) as f32;
                    dpooled[i * c + ci] += g * head.w.data()[j * c + ci] as f64;
                }
            }
        }
        let s = d * h * w;
        let dfeat: Vec<f32> = (0..b * c * s).map(|i| (dpooled[i / s] / s as f64) as f32).collect();
        let dfeat = Tensor::from_vec(&[b, c, d, h, w], dfeat)?;
        let grads = net.encode_backward(&params, &tape, vec![None, None, None, None, Some(dfeat)])?;
        adam.step(params.tensors_mut(), &grads.tensors, &enc_mask, &names, cfg.learning_rate)?;
        params.apply_running_stats(tape.running_stats());
        let hg = [Tensor::from_vec(&[k, c], dw)?, Tensor::from_vec(&[k], db)?];
        let mut ht = [head.w.clone(), head.b.clone()];
        head_adam.step(&mut ht, &hg, &[true, true], &["head.weight", "head.bias"], cfg.learning_rate)?;
        let [hw, hb] = ht;
        head = Classifier { w: hw, b: hb };
    }
    // accuracy over (up to) 256 images with running statistics
    let probe: Vec<usize> = (0..set.len().min(256)).collect();
    let mut correct = 0usize;
    for chunk in probe.chunks(32) {
        let (logits, ..) = classify(&net, &params, &head, &batch(set, chunk), Mode::Eval)?;
        for (r, &i) in chunk.iter().enumerate() {
            let row = &logits[r * k..(r + 1) * k];
            let best = (0..k).fold(0, |a, j| if row[j] > row[a] { j } else { a });
            correct += (best == set.labels[i]) as usize;
        }
    }
    Ok(Pretrained {
        store: params.export_encoder_2d()?,
        losses,
        initial_loss,
        accuracy: correct as f64 / probe.len() as f64,
    })
}
