use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use super::dataset::SyntheticDataset;
use super::train::{train, TrainConfig};
use crate::error::Result;
use crate::model::ModelConfig;

/// The cumulative arms, in table order: name and (das, convpos, convffn).
pub const ARMS: [(&str, (bool, bool, bool)); 4] = [
    ("baseline", (false, false, false)),
    ("+das", (true, false, false)),
    ("+convpos", (true, true, false)),
    ("+convffn", (true, true, true)),
];

/// Equal training budget for every arm.
#[derive(Clone, Debug)]
pub struct AblationBudget {
    pub steps: u64,
    pub seeds: Vec<u64>,
    pub hyper: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub config: ModelConfig,
    pub config_hash: String,
    pub params: u64,
    /// Final validation accuracy, one per seed.
    pub accuracy: Vec<f64>,
    pub seconds: Vec<f64>,
}

impl AblationRow {
    pub fn median_accuracy(&self) -> f64 {
        median(&self.accuracy)
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    match s.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => s[n / 2],
        n => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub steps: u64,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("ablation: {} steps per arm, seeds {:?}\n", self.steps, self.seeds);
        let _ = writeln!(s, "{:<10} {:>16} {:>8} {:>9} {:>9}  per-seed", "arm", "config", "params", "median%", "sec/arm");
        for r in &self.rows {
            let per: Vec<String> = r.accuracy.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
            let secs = r.seconds.iter().sum::<f64>() / r.seconds.len().max(1) as f64;
            let _ = writeln!(
                s,
                "{:<10} {:>16} {:>8} {:>9.2} {:>9.1}  {}",
                r.name,
                r.config_hash,
                r.params,
                100.0 * r.median_accuracy(),
                secs,
                per.join(" ")
            );
        }
        s
    }

    /// One line per arm and seed.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,config_hash,seed,steps,val_accuracy,seconds\n");
        for r in &self.rows {
            for ((seed, acc), sec) in self.seeds.iter().zip(&r.accuracy).zip(&r.seconds) {
                let _ = writeln!(s, "{},{},{},{},{:?},{:.3}", r.name, r.config_hash, seed, self.steps, acc, sec);
            }
        }
        s
    }
}

/// Trains each arm once per seed with the same step budget and data.
///
/// `on_run` is called after every finished run with (arm, seed, accuracy).
pub fn ablation_run(
    base: &ModelConfig,
    data: &SyntheticDataset,
    budget: &AblationBudget,
    out: Option<&Path>,
    mut on_run: impl FnMut(&str, u64, f64),
) -> Result<AblationReport> {
    let mut rows = vec![];
    for (name, (das, pos, ffn)) in ARMS {
        let config = base.clone().with_toggles(das, pos, ffn);
        let mut row = AblationRow {
            name: name.to_string(),
            config_hash: config.hash(),
            params: crate::model::count_params(&config),
            config: config.clone(),
            accuracy: vec![],
            seconds: vec![],
        };
        for &seed in &budget.seeds {
            let hyper = TrainConfig {
                seed,
                max_steps: Some(budget.steps),
                ..budget.hyper.clone()
            };
            let dir = out.map(|d| d.join(format!("{}-seed{seed}", name.trim_start_matches('+'))));
            let t = Instant::now();
            let state = train(config.clone(), data, hyper, dir.as_deref())?;
            let acc = state.last_val().map_or(0.0, |m| m.accuracy);
            row.seconds.push(t.elapsed().as_secs_f64());
            row.accuracy.push(acc);
            on_run(name, seed, acc);
        }
        rows.push(row);
    }
    let report = AblationReport {
        steps: budget.steps,
        seeds: budget.seeds.clone(),
        rows,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.txt"), report.to_table())?;
        std::fs::write(dir.join("ablation.csv"), report.to_csv())?;
    }
    Ok(report)
}
