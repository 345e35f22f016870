use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EpisodeRow;
use crate::error::{Error, Result};

/// Mean and sample standard deviation across agent seeds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self::default();
        }
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

/// Aggregated metrics of one algorithm/handler pair. Flat so it exports as one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub algorithm: String,
    pub handler: String,
    pub seeds: usize,
    pub episodes: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub steps_mean: f64,
    pub steps_std: f64,
    pub solved_mean: f64,
    pub solved_std: f64,
    pub collided_mean: f64,
    pub collided_std: f64,
    pub allowed_fraction_mean: f64,
    pub allowed_fraction_std: f64,
    pub interval_count_mean: f64,
    pub interval_count_std: f64,
    pub interval_len_mean: f64,
    pub interval_len_mean_std: f64,
    pub interval_len_min: f64,
    pub interval_len_min_std: f64,
    pub interval_len_max: f64,
    pub interval_len_max_std: f64,
    pub interval_len_var: f64,
    pub interval_len_var_std: f64,
}

/// `return ± std / steps ± std / solved%`, the layout of the published result tables.
pub fn format_triple(row: &MetricsRow) -> String {
    format!(
        "{:.2} ± {:.2} / {:.2} ± {:.2} / {:.2}%",
        row.return_mean,
        row.return_std,
        row.steps_mean,
        row.steps_std,
        100.0 * row.solved_mean
    )
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Per-seed episode means, then mean ± sample std across seeds, one row per
/// algorithm/handler pair (sorted by name).
pub fn compute_metrics(rows: &[EpisodeRow]) -> Result<Vec<MetricsRow>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no episode rows".into()));
    }
    let mut groups: BTreeMap<(&str, &str), BTreeMap<u64, Vec<&EpisodeRow>>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.algorithm.as_str(), r.handler.as_str()))
            .or_default()
            .entry(r.agent_seed)
            .or_default()
            .push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((algorithm, handler), seeds)| {
            let per_seed = |f: &dyn Fn(&EpisodeRow) -> f64| {
                let xs: Vec<f64> = seeds.values().map(|eps| mean(eps.iter().map(|r| f(r)))).collect();
                Stat::of(&xs)
            };
            let ret = per_seed(&|r| r.episode_return);
            let steps = per_seed(&|r| r.steps as f64);
            let solved = per_seed(&|r| f64::from(u8::from(r.solved)));
            let collided = per_seed(&|r| f64::from(u8::from(r.collided)));
            let frac = per_seed(&|r| r.allowed_fraction);
            let count = per_seed(&|r| r.interval_count_mean);
            let len_mean = per_seed(&|r| r.interval_len_mean);
            let len_min = per_seed(&|r| r.interval_len_min);
            let len_max = per_seed(&|r| r.interval_len_max);
            let len_var = per_seed(&|r| r.interval_len_var);
            MetricsRow {
                algorithm: algorithm.to_string(),
                handler: handler.to_string(),
                seeds: seeds.len(),
                episodes: seeds.values().map(Vec::len).sum(),
                return_mean: ret.mean,
                return_std: ret.std,
                steps_mean: steps.mean,
                steps_std: steps.std,
                solved_mean: solved.mean,
                solved_std: solved.std,
                collided_mean: collided.mean,
                collided_std: collided.std,
                allowed_fraction_mean: frac.mean,
                allowed_fraction_std: frac.std,
                interval_count_mean: count.mean,
                interval_count_std: count.std,
                interval_len_mean: len_mean.mean,
                interval_len_mean_std: len_mean.std,
                interval_len_min: len_min.mean,
                interval_len_min_std: len_min.std,
                interval_len_max: len_max.mean,
                interval_len_max_std: len_max.std,
                interval_len_var: len_var.mean,
                interval_len_var_std: len_var.std,
            }
        })
        .collect())
}

/// Steps at the first iteration boundary whose solved fraction exceeds `threshold`.
pub fn time_to_threshold(solved_fractions: &[f64], iteration_steps: u64, threshold: f64) -> Option<u64> {
    solved_fractions
        .iter()
        .position(|&f| f > threshold)
        .map(|i| (i as u64 + 1) * iteration_steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, ret: f64, steps: usize, solved: bool) -> EpisodeRow {
        EpisodeRow {
            algorithm: "ppo".into(),
            handler: "continuous_masking".into(),
            agent_seed: seed,
            env_seed: 0,
            episode_return: ret,
            steps,
            solved,
            collided: false,
            allowed_fraction: 1.0,
            interval_count_mean: 1.0,
            interval_len_mean: 220.0,
            interval_len_min: 220.0,
            interval_len_max: 220.0,
            interval_len_var: 0.0,
        }
    }

    #[test]
    fn table_format() {
        let rows: Vec<EpisodeRow> = [(0, 115.03), (1, 115.16), (2, 115.29)]
            .iter()
            .flat_map(|&(s, r)| (0..40).map(move |_| row(s, r, 15, true)))
            .collect();
        let m = compute_metrics(&rows).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(format_triple(&m[0]), "115.16 ± 0.13 / 15.00 ± 0.00 / 100.00%");
        assert_eq!((m[0].seeds, m[0].episodes), (3, 120));
    }

    #[test]
    fn all_failures() {
        let rows: Vec<EpisodeRow> = (0..6).map(|s| row(s, -30.0, 40, false)).collect();
        let m = compute_metrics(&rows).unwrap();
        assert_eq!(m[0].solved_mean, 0.0);
        assert_eq!(m[0].steps_mean, 40.0);
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn seeds_are_averaged_before_aggregation() {
        // Seed 0 has 3 episodes, seed 1 has 1: the overall mean weights seeds equally.
        let rows = vec![
            row(0, 0.0, 40, false),
            row(0, 0.0, 40, false),
            row(0, 0.0, 40, false),
            row(1, 100.0, 10, true),
        ];
        let m = compute_metrics(&rows).unwrap();
        assert_eq!(m[0].return_mean, 50.0);
        assert_eq!(m[0].solved_mean, 0.5);
    }

    #[test]
    fn threshold_crossing() {
        assert_eq!(time_to_threshold(&[0.1, 0.5, 0.85, 0.9], 2000, 0.8), Some(6000));
        assert_eq!(time_to_threshold(&[0.1, 0.8, 0.8], 2000, 0.8), None);
        assert_eq!(time_to_threshold(&[0.0, 0.0, 0.05], 2000, 0.0), Some(6000));
    }
}
