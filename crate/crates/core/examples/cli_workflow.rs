//! The command chain synth → pretrain → train → predict → evaluate at desk
//! scale through the library entry point, then a manifest rerun.
//!
//! cargo run --release --example cli_workflow -- [work_dir]

use albuseg::cli::{run_args, MANIFEST_FILE};

fn step(args: &[&str]) -> albuseg::Result<()> {
    let m = run_args(args)?;
    println!("{:<10} {:>3} outputs, {:.1}s", m.command, m.outputs.len(), m.wall_clock_secs);
    Ok(())
}

fn main() -> albuseg::Result<()> {
    let work = std::env::args().nth(1).unwrap_or_else(|| "albuseg_work".into());
    let p = |s: &str| format!("{work}/{s}");
    step(&["synth", "--cases", "4", "--dims", "32,64,64", "--seed", "7", "--out", &p("data")])?;
    step(&["pretrain", "--config", "tiny", "--steps", "40", "--force", "--out", &p("pre")])?;
    step(&[
        "train", "--data", &p("data"), "--val", "1", "--config", "tiny", "--pretrained", &p("pre/encoder"),
        "--epochs", "2", "--batches-per-epoch", "10", "--batch-size", "4", "--patch", "16,32,32",
        "--no-augment", "--out", &p("train"),
    ])?;
    step(&["predict", "--weights", &p("train/model"), "--data", &p("data"), "--out", &p("pred")])?;
    step(&["evaluate", "--ref", &p("data"), "--runs", &p("pred"), "--out", &p("eval")])?;
    print!("{}", std::fs::read_to_string(p("eval/report.tsv")).expect("report written"));
    let manifest = p(&format!("train/{MANIFEST_FILE}"));
    step(&["rerun", "--manifest", &manifest, "--out", &p("train_rerun")])?;
    println!("train rerun reproduced every output");
    Ok(())
}
