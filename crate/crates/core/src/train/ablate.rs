use std::fmt;
use std::str::FromStr;

use super::config::RunConfig;
use super::embed::{embed_samples, evaluate_embeddings};
use super::run::{EpochLog, Trainer};
use crate::error::{PirtError, Result};
use crate::retrieval::{EmbeddingRecord, EvalReport, ScoreMode};
use crate::synth::{Dataset, Split};

/// A trained model's metrics log and its query and gallery embeddings.
pub struct TrainedRun {
    pub logs: Vec<EpochLog>,
    pub queries: Vec<EmbeddingRecord>,
    pub gallery: Vec<EmbeddingRecord>,
}

impl TrainedRun {
    pub fn evaluate(&self, config: &RunConfig) -> Result<EvalReport> {
        evaluate_embeddings(&self.queries, &self.gallery, &config.matching)
    }
}

/// Trains `config` on `dataset` in memory, then embeds both test splits.
pub fn train_and_embed(config: &RunConfig, dataset: &Dataset) -> Result<TrainedRun> {
    let mut trainer = Trainer::new(config.clone(), dataset.clone())?;
    let mut logs = Vec::with_capacity(config.schedule.epochs);
    while !trainer.done() {
        logs.push(trainer.run_epoch()?);
    }
    let queries = dataset.split(Split::Query);
    let gallery = dataset.split(Split::Gallery);
    let Trainer { model, store, .. } = &mut trainer;
    let queries = embed_samples(model, store, &config.pose, &queries)?;
    let gallery = embed_samples(model, store, &config.pose, &gallery)?;
    Ok(TrainedRun { logs, queries, gallery })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Baseline, +pose, +pose+intra, full.
    Components,
    /// One to four inter-part transformer units.
    Units,
    /// The four confidence combinations at matching time.
    ScoreMode,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Components => "components",
            Axis::Units => "units",
            Axis::ScoreMode => "score_mode",
        })
    }
}

impl FromStr for Axis {
    type Err = PirtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Axis::Components),
            "units" => Ok(Axis::Units),
            "score_mode" => Ok(Axis::ScoreMode),
            _ => Err(PirtError::Config(format!(
                "unknown ablation axis {s:?} (expected components, units or score_mode)"
            ))),
        }
    }
}

/// The training variants of `axis` derived from `base`.
pub fn variants(base: &RunConfig, axis: Axis) -> Result<Vec<(String, RunConfig)>> {
    let with = |pose: bool, intra: bool, inter: bool| {
        let mut c = base.clone();
        c.model.use_pose = pose;
        c.model.use_intra = intra;
        c.model.use_inter = inter;
        c
    };
    match axis {
        Axis::Components => Ok(vec![
            ("baseline".into(), with(false, false, false)),
            ("+P".into(), with(true, false, false)),
            ("+P+Intra".into(), with(true, true, false)),
            ("full".into(), with(true, true, true)),
        ]),
        Axis::Units => {
            if !base.model.use_inter {
                return Err(PirtError::Config("the units axis needs model.inter = true".into()));
            }
            Ok((1..=4)
                .map(|n| {
                    let mut c = base.clone();
                    c.model.units = n;
                    (format!("units={n}"), c)
                })
                .collect())
        }
        Axis::ScoreMode => {
            if !base.model.use_pose {
                return Err(PirtError::Config("the score_mode axis needs model.pose = true".into()));
            }
            Ok(ScoreMode::ALL
                .iter()
                .map(|&m| {
                    let mut c = base.clone();
                    c.matching.score_mode = m;
                    (m.to_string(), c)
                })
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    /// Per seed, in the table's seed order.
    pub map: Vec<f64>,
    pub cmc1: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationRow {
    pub fn median_map(&self) -> f64 {
        median(&self.map)
    }

    pub fn median_cmc1(&self) -> f64 {
        median(&self.cmc1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub axis: Axis,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant");
        for s in &self.seeds {
            out += &format!(",map_seed{s},cmc1_seed{s}");
        }
        out += ",median_map,median_cmc1\n";
        for r in &self.rows {
            out += &r.variant;
            for (m, c) in r.map.iter().zip(&r.cmc1) {
                out += &format!(",{m},{c}");
            }
            out += &format!(",{},{}\n", r.median_map(), r.median_cmc1());
        }
        out
    }

    /// Fixed-width table with percentages.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<10}", self.axis.to_string());
        for s in &self.seeds {
            out += &format!(" {:>14}", format!("seed {s} mAP/R1"));
        }
        out += &format!(" {:>16}\n", "median mAP/R1");
        for r in &self.rows {
            out += &format!("{:<10}", r.variant);
            for (m, c) in r.map.iter().zip(&r.cmc1) {
                out += &format!(" {:>14}", format!("{:.1}/{:.1}", 100.0 * m, 100.0 * c));
            }
            out += &format!(
                " {:>16}\n",
                format!("{:.1}/{:.1}", 100.0 * r.median_map(), 100.0 * r.median_cmc1())
            );
        }
        out
    }
}

/// Trains and evaluates every variant of `axis` under each seed. Score-mode
/// variants share one trained model per seed since they differ only at
/// matching time.
pub fn ablate(
    base: &RunConfig,
    dataset: &Dataset,
    axis: Axis,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(PirtError::Config("ablation needs at least one seed".into()));
    }
    let variants = variants(base, axis)?;
    let mut rows: Vec<AblationRow> = variants
        .iter()
        .map(|(name, _)| AblationRow {
            variant: name.clone(),
            map: Vec::new(),
            cmc1: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        let mut shared: Option<TrainedRun> = None;
        for (row, (name, config)) in rows.iter_mut().zip(&variants) {
            let mut config = config.clone();
            config.seed = seed;
            let run = match (axis, shared.take()) {
                (Axis::ScoreMode, Some(run)) => run,
                _ => train_and_embed(&config, dataset)?,
            };
            let report = run.evaluate(&config)?;
            progress(&format!(
                "{axis} {name} seed {seed}: mAP {:.4} CMC@1 {:.4}",
                report.map,
                report.rank(1)
            ));
            row.map.push(report.map);
            row.cmc1.push(report.rank(1));
            if axis == Axis::ScoreMode {
                shared = Some(run);
            }
        }
    }
    Ok(AblationTable {
        axis,
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn variant_rows_mirror_the_tables() {
        let base = RunConfig::default();
        let names = |a| variants(&base, a).unwrap().into_iter().map(|(n, _)| n).collect::<Vec<_>>();
        assert_eq!(names(Axis::Components), ["baseline", "+P", "+P+Intra", "full"]);
        assert_eq!(names(Axis::Units), ["units=1", "units=2", "units=3", "units=4"]);
        assert_eq!(names(Axis::ScoreMode), ["QG", "Q", "G", "none"]);
        let base = variants(&base, Axis::Components).unwrap().remove(0).1;
        assert!(matches!(variants(&base, Axis::ScoreMode), Err(PirtError::Config(_))));
        assert!(matches!(variants(&base, Axis::Units), Err(PirtError::Config(_))));
    }
}
