//! Central finite-difference check of the analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AlbuNet, Mode, NetworkParams};
use crate::error::Result;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares backward-pass gradients of `loss(forward(params, x))` against
/// central differences at `probe_count` trainable scalars drawn uniformly.
///
/// `loss` maps output probabilities to `(value, d value / d probs)`.
pub fn gradient_check<L>(
    net: &AlbuNet,
    params: &NetworkParams<f64>,
    x: &Tensor<f64>,
    mode: Mode,
    loss: L,
    probe_count: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    L: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    let (probs, tape) = net.forward(params, x, mode)?;
    let (_, dprobs) = loss(&probs)?;
    let grads = net.backward(params, &tape, &dprobs, false)?;

    let candidates: Vec<(usize, usize)> = params
        .specs()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind.trainable())
        .flat_map(|(i, _)| (0..params.tensor(i).len()).map(move |j| (i, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let eval = |p: &NetworkParams<f64>| -> Result<f64> {
        let (probs, _) = net.forward(p, x, mode)?;
        Ok(loss(&probs)?.0)
    };
    let mut probes = Vec::with_capacity(probe_count);
    for _ in 0..probe_count {
        let (t, j) = candidates[rng.random_range(0..candidates.len())];
        let orig = work.tensor(t).data()[j];
        work.tensor_mut(t).data_mut()[j] = orig + FD_STEP;
        let up = eval(&work)?;
        work.tensor_mut(t).data_mut()[j] = orig - FD_STEP;
        let down = eval(&work)?;
        work.tensor_mut(t).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads.tensors[t].data()[j];
        probes.push(Probe {
            name: params.specs()[t].name.clone(),
            index: j,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { probes, max_rel_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, NetworkConfig};

    #[test]
    fn linear_map_is_exact() {
        let a = [3.0, -1.5, 0.25, 7.0];
        let f = |w: &[f64]| w.iter().zip(a).map(|(w, a)| w * a).sum::<f64>();
        let w = [0.3, 0.1, -2.0, 1.0];
        for i in 0..4 {
            let mut up = w;
            up[i] += FD_STEP;
            let mut down = w;
            down[i] -= FD_STEP;
            let numeric = (f(&up) - f(&down)) / (2.0 * FD_STEP);
            assert!(relative_error(a[i], numeric) < 1e-9);
        }
    }

    #[test]
    fn network_through_dice_loss() {
        let (net, params) = build_network::<f64>(NetworkConfig::tiny(), 3).unwrap();
        let n = 2 * 2 * 32 * 32;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_vec(&[2, 3, 2, 32, 32], (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut target = vec![0.0; 4 * n];
        for v in 0..n {
            let (b, i) = (v / (n / 2), v % (n / 2));
            target[(b * 4 + rng.random_range(0..4)) * (n / 2) + i] = 1.0;
        }
        let target = Tensor::from_vec(&[2, 4, 2, 32, 32], target).unwrap();
        let loss = |p: &Tensor<f64>| {
            let out = crate::training::multiple_dice_loss(p, &target)?;
            Ok((out.loss, out.grad))
        };
        let report = gradient_check(&net, &params, &x, Mode::Train, loss, 30, 5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
