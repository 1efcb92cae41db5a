//! Overfits the tiny network on a handful of phantoms and reports the
//! training-set region dice.
//!
//! cargo run --release --example train_tiny -- [iterations] [seed]

use std::time::Instant;

use albuseg::network::NetworkConfig;
use albuseg::synth::{generate, PhantomSpec};
use albuseg::training::{evaluate_region_dice, mean_dice, train_with_progress, AugmentConfig, TrainConfig};
use albuseg::volume::NormRegion;

fn main() -> albuseg::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let iterations = args.first().copied().unwrap_or(200);
    let seed = args.get(1).copied().unwrap_or(1) as u64;
    let cases = generate(&PhantomSpec::new([32, 64, 64], 5, 11))?;
    let cfg = TrainConfig {
        patch_shape: [16, 32, 32],
        batch_size: 8,
        epochs: 1,
        batches_per_epoch: iterations,
        seed,
        augment: AugmentConfig::none(),
        ..TrainConfig::volumetric()
    };
    let start = Instant::now();
    let trained = train_with_progress(&cfg, &NetworkConfig::tiny(), &cases, &[], None, |e| {
        println!("epoch {} loss {:.4}", e.epoch, e.loss);
    })?;
    println!("trained {iterations} iterations in {:.1?}", start.elapsed());
    let prepared: Vec<_> = cases.iter().map(|c| c.prepared(NormRegion::Nonzero)).collect::<Result<_, _>>()?;
    let dice = mean_dice(&evaluate_region_dice(&trained.net, &trained.params, &prepared, cfg.patch_shape, cfg.val_steps)?);
    println!("training dice ET {:.3} WT {:.3} TC {:.3} ({:.1?} total)", dice[0], dice[1], dice[2], start.elapsed());
    Ok(())
}
