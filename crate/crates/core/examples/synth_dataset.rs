//! Writes a small phantom dataset and prints per-case region sizes.
//!
//! cargo run --release --example synth_dataset -- [out_dir] [cases] [seed]

use albuseg::synth::{generate, write_case, PhantomSpec};
use albuseg::volume::{regions_from_labels, Region};

fn main() -> albuseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().cloned().unwrap_or_else(|| "phantoms".into());
    let count = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(4);
    let seed = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(7);
    for case in generate(&PhantomSpec::new([48, 96, 96], count, seed))? {
        let dir = write_case(&case, &out)?;
        let regions = regions_from_labels(&case.seg);
        let sizes: Vec<String> = Region::ALL
            .iter()
            .zip(&regions)
            .map(|(r, m)| format!("{} {}", r.name(), m.iter().filter(|&&v| v).count()))
            .collect();
        println!("{}: {}", dir.display(), sizes.join(", "));
    }
    Ok(())
}
