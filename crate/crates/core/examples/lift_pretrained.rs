//! Pretrains the 2D encoder briefly, lifts it into the 3D network and checks
//! that every kernel keeps its values with a unit depth axis.
//!
//! cargo run --release --example lift_pretrained -- [steps]

use albuseg::network::{build_network, NetworkConfig};
use albuseg::synth::{generate_pretrain_2d, PretrainSpec};
use albuseg::training::{pretrain_encoder, PretrainConfig};

fn main() -> albuseg::Result<()> {
    let steps = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(40);
    let cfg = NetworkConfig::tiny();
    let set = generate_pretrain_2d(&PretrainSpec { size: 64, count: 128, seed: 1 })?;
    let pre = pretrain_encoder(&cfg, &set, &PretrainConfig { steps, ..Default::default() })?;
    println!("pretraining loss {:.3} -> {:.3}", pre.initial_loss, pre.losses.last().copied().unwrap_or(f64::NAN));

    let (_, mut params) = build_network::<f32>(cfg.clone(), 9)?;
    let loaded = params.load_pretrained(&pre.store, true)?;
    let mut scalars = 0;
    for name in &loaded {
        let stored = pre.store.get(name)?;
        let lifted = params.get(name)?;
        assert_eq!(stored.data, lifted.data(), "{name}");
        scalars += stored.data.len();
    }
    println!("lifted {} tensors ({scalars} scalars) bit-exactly", loaded.len());
    let example = loaded.iter().find(|n| n.ends_with("weight")).expect("a kernel");
    println!("{example}: {:?} -> {:?}", pre.store.get(example)?.shape, params.get(example)?.shape());

    let mut other = pre.store.clone();
    other.remove(example);
    match params.load_pretrained(&other, true) {
        Err(e) => println!("strict load without {example}: {e}"),
        Ok(_) => unreachable!("strict load must fail"),
    }
    Ok(())
}
