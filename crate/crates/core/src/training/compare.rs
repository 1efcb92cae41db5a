//! Paired training runs with and without a pretrained encoder.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::trainer::{train, Case, TrainConfig, TrainRun};
use crate::error::{Error, Result};
use crate::metrics::summarize;
use crate::network::NetworkConfig;
use crate::volume::Region;
use crate::weights::WeightStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    Pretrained,
    Random,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Pretrained, Arm::Random];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Pretrained => "pretrained",
            Arm::Random => "random",
        }
    }
}

/// Validation dice of every run of both arms; `runs[arm][seed]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub runs: [Vec<TrainRun>; 2],
}

/// Across-seed statistics of one arm at one epoch and region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmStat {
    pub mean: f64,
    pub std: f64,
}

/// Trains every seed twice, once from `pretrained` and once from random
/// initialization. Both runs of a seed share the batch stream and the
/// initial decoder weights.
pub fn compare_arms(
    base: &TrainConfig,
    net_cfg: &NetworkConfig,
    seeds: &[u64],
    train_cases: &[Case],
    val_cases: &[Case],
    pretrained: &WeightStore,
    mut progress: impl FnMut(Arm, u64, &TrainRun),
) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::Config("comparison needs at least one seed".into()));
    }
    if val_cases.is_empty() {
        return Err(Error::Config("comparison needs validation cases".into()));
    }
    let mut runs: [Vec<TrainRun>; 2] = [Vec::new(), Vec::new()];
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..base.clone() };
        for (a, arm) in Arm::BOTH.into_iter().enumerate() {
            let store = (arm == Arm::Pretrained).then_some(pretrained);
            let run = train(&cfg, net_cfg, train_cases, val_cases, store)?.run;
            progress(arm, seed, &run);
            runs[a].push(run);
        }
    }
    Ok(Comparison { seeds: seeds.to_vec(), runs })
}

impl Comparison {
    pub fn epochs(&self) -> usize {
        self.runs[0].first().map_or(0, |r| r.epochs.len())
    }

    /// Mean and population std over seeds of the validation dice at `epoch`
    /// (1-based).
    pub fn stat(&self, arm: Arm, epoch: usize, region: usize) -> ArmStat {
        let values: Vec<f64> = self.runs[arm as usize].iter().map(|r| r.epochs[epoch - 1].val_dice[region]).collect();
        let s = summarize(&values).expect("finite dice");
        ArmStat { mean: s.mean, std: s.std }
    }

    /// Per-epoch curves: `epoch, arm, region, mean, std`; rows =
    /// epochs × 2 arms × 3 regions.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tarm\tregion\tmean\tstd\n");
        for epoch in 1..=self.epochs() {
            for arm in Arm::BOTH {
                for (k, region) in Region::ALL.iter().enumerate() {
                    let st = self.stat(arm, epoch, k);
                    writeln!(s, "{epoch}\t{}\t{}\t{:.6}\t{:.6}", arm.name(), region.name(), st.mean, st.std).unwrap();
                }
            }
        }
        s
    }

    /// Final-epoch comparison per region.
    pub fn final_summary(&self) -> FinalComparison {
        let last = self.epochs();
        let per_region = [0, 1, 2].map(|k| (self.stat(Arm::Pretrained, last, k), self.stat(Arm::Random, last, k)));
        FinalComparison { per_region }
    }
}

/// `(pretrained, random)` final-epoch statistics for ET, WT and TC.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinalComparison {
    pub per_region: [(ArmStat, ArmStat); 3],
}

impl FinalComparison {
    /// Regions where the pretrained arm's mean is at least the random arm's.
    pub fn mean_wins(&self) -> usize {
        self.per_region.iter().filter(|(p, r)| p.mean >= r.mean).count()
    }

    /// Regions where the pretrained arm's std is strictly smaller.
    pub fn std_wins(&self) -> usize {
        self.per_region.iter().filter(|(p, r)| p.std < r.std).count()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("region\tpretrained_mean\tpretrained_std\trandom_mean\trandom_std\n");
        for (region, (p, r)) in Region::ALL.iter().zip(&self.per_region) {
            writeln!(s, "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", region.name(), p.mean, p.std, r.mean, r.std).unwrap();
        }
        s
    }
}
