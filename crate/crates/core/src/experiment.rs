//! Paired MLM/MTH runs and the joint similarity curves they produce.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Objective, TrainConfig};
use crate::diagnostics::{similarity_curve, SimilarityReport};
use crate::error::Result;
use crate::train::{checkpoint_path, evaluation_sequences, prepare, Trainer};

/// One step of a seed pair: similarity of the MLM and the MTH model side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRecord {
    pub seed: u64,
    pub step: u64,
    pub mlm_fs: Option<f64>,
    pub mlm_fh: Option<f64>,
    pub mth_fs: Option<f64>,
    pub mth_fh: Option<f64>,
}

impl CompareRecord {
    /// Both f(S) and f(H) strictly lower under MTH.
    pub fn mth_lower(&self) -> bool {
        let lower = |a: Option<f64>, b: Option<f64>| matches!((a, b), (Some(mlm), Some(mth)) if mth < mlm);
        lower(self.mlm_fs, self.mth_fs) && lower(self.mlm_fh, self.mth_fh)
    }
}

fn objective_dir(objective: Objective) -> &'static str {
    match objective {
        Objective::Mlm => "mlm",
        Objective::Mth => "mth",
    }
}

/// Trains `cfg` under both objectives for every seed, writing runs to `out/seed-<s>/<objective>`,
/// and evaluates f(S)/f(H) at each checkpoint on a shared sentence sample.
pub fn compare(cfg: &TrainConfig, seeds: &[u64], out: &Path, sample: Option<usize>) -> Result<Vec<CompareRecord>> {
    let mut records = Vec::new();
    for &seed in seeds {
        let mut curves: Vec<Vec<SimilarityReport>> = Vec::new();
        for objective in [Objective::Mlm, Objective::Mth] {
            let run = TrainConfig { seed, objective, ..cfg.clone() };
            let dir = out.join(format!("seed-{seed}")).join(objective_dir(objective));
            let (run, data) = prepare(&run)?;
            let mut trainer = Trainer::new(run.clone(), data)?;
            trainer.run(Some(&dir))?;
            let every = run.checkpoint_every();
            let mut steps: Vec<u64> = (1..=run.step_max / every).map(|k| k * every).collect();
            if steps.last() != Some(&run.step_max) {
                steps.push(run.step_max);
            }
            let models = steps
                .iter()
                .map(|&s| Ok((s, Checkpoint::load(&checkpoint_path(&dir, s))?.model)))
                .collect::<Result<Vec<_>>>()?;
            let sentences = evaluation_sequences(&run)?;
            curves.push(similarity_curve(&models, &sentences, sample, seed, run.hcd_weight_space)?);
        }
        for (a, b) in curves[0].iter().zip(&curves[1]) {
            records.push(CompareRecord {
                seed,
                step: a.step,
                mlm_fs: a.mean_fs,
                mlm_fh: a.mean_fh,
                mth_fs: b.mean_fs,
                mth_fh: b.mean_fh,
            });
        }
    }
    Ok(records)
}

/// Final-step record of each seed.
pub fn final_records(records: &[CompareRecord]) -> Vec<&CompareRecord> {
    let mut out: Vec<&CompareRecord> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some(last) if last.seed == r.seed => {
                if r.step > last.step {
                    *last = r;
                }
            }
            _ => out.push(r),
        }
    }
    out
}
