//! Pretrained versus random encoder initialization on the synthetic benchmark:
//! several seeds per arm, per-epoch validation dice, final-epoch summary.
//!
//! cargo run --release --example transfer_comparison -- [seeds] [epochs] [batches_per_epoch]

use std::time::Instant;

use albuseg::network::NetworkConfig;
use albuseg::synth::{generate, generate_pretrain_2d, PhantomSpec, PretrainSpec};
use albuseg::training::{compare_arms, pretrain_encoder, AugmentConfig, PretrainConfig, TrainConfig};

fn main() -> albuseg::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = args.first().copied().unwrap_or(5);
    let epochs = args.get(1).copied().unwrap_or(10);
    let batches = args.get(2).copied().unwrap_or(20);
    let start = Instant::now();

    let net_cfg = NetworkConfig::tiny();
    let set = generate_pretrain_2d(&PretrainSpec { size: 64, count: 512, seed: 3 })?;
    let pre = pretrain_encoder(&net_cfg, &set, &PretrainConfig { seed: 3, ..PretrainConfig::default() })?;
    println!(
        "pretraining: loss {:.3} -> {:.3}, accuracy {:.2} ({:.1?})",
        pre.initial_loss,
        pre.losses.last().copied().unwrap_or(f64::NAN),
        pre.accuracy,
        start.elapsed()
    );

    let cases = generate(&PhantomSpec::new([32, 64, 64], 25, 21))?;
    let (train_cases, val_cases) = cases.split_at(20);
    let cfg = TrainConfig {
        patch_shape: [16, 32, 32],
        batch_size: 8,
        epochs,
        batches_per_epoch: batches,
        augment: AugmentConfig::none(),
        ..TrainConfig::volumetric()
    };
    let seed_list: Vec<u64> = (1..=seeds as u64).collect();
    let cmp = compare_arms(&cfg, &net_cfg, &seed_list, train_cases, val_cases, &pre.store, |arm, seed, run| {
        let d = run.final_dice().unwrap_or([f64::NAN; 3]);
        println!(
            "{:>10} seed {seed}: ET {:.3} WT {:.3} TC {:.3} ({:.1?})",
            arm.name(),
            d[0],
            d[1],
            d[2],
            start.elapsed()
        );
    })?;
    print!("{}", cmp.to_tsv());
    let fin = cmp.final_summary();
    print!("{}", fin.to_tsv());
    println!("pretrained mean >= random in {}/3 regions, smaller std in {}/3", fin.mean_wins(), fin.std_wins());
    Ok(())
}
