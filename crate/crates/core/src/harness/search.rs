use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{train_seed, ExperimentConfig, DEFAULT_ITERATION_STEPS};
use crate::agents::{AgentHyperparams, Algorithm, HandlerKind};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::rng::{stream, Role};

/// Distribution of one hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSpec {
    Uniform {
        low: f64,
        high: f64,
    },
    LogUniform {
        low: f64,
        high: f64,
    },
    /// Inclusive integer range.
    Int {
        low: i64,
        high: i64,
    },
    Choice(Vec<Value>),
}

impl ParamSpec {
    fn validate(&self, name: &str) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("{name}: {msg}")));
        match self {
            Self::Uniform { low, high } if !(low <= high && low.is_finite() && high.is_finite()) => {
                bad("needs finite low <= high")
            }
            Self::LogUniform { low, high } if !(*low > 0.0 && low <= high && high.is_finite()) => {
                bad("needs 0 < low <= high")
            }
            Self::Int { low, high } if low > high => bad("needs low <= high"),
            Self::Choice(values) if values.is_empty() => bad("empty choice list"),
            _ => Ok(()),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match self {
            Self::Uniform { low, high } => Value::from(low + (high - low) * rng.random::<f64>()),
            Self::LogUniform { low, high } => {
                let (a, b) = (low.ln(), high.ln());
                Value::from((a + (b - a) * rng.random::<f64>()).exp())
            }
            Self::Int { low, high } => Value::from(rng.random_range(*low..=*high)),
            Self::Choice(values) => values[rng.random_range(0..values.len())].clone(),
        }
    }
}

/// Parameter name (dot paths reach nested fields, e.g. `epsilon.initial`) to distribution.
pub type SearchSpace = BTreeMap<String, ParamSpec>;

/// One sampled configuration: parameter name to value.
pub type Candidate = BTreeMap<String, Value>;

/// Draws `n` candidates uniformly from the space.
pub fn sample_candidates(space: &SearchSpace, n: usize, seed: u64) -> Result<Vec<Candidate>> {
    if space.is_empty() || n == 0 {
        return Err(Error::EmptySearchSpace);
    }
    for (name, spec) in space {
        spec.validate(name)?;
    }
    let mut rng = stream(seed, Role::Search);
    Ok((0..n)
        .map(|_| space.iter().map(|(k, s)| (k.clone(), s.sample(&mut rng))).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalvingConfig {
    /// Reduction factor: the top `1/eta` of each rung is promoted.
    pub eta: usize,
    /// Budget of the first rung, in environment steps.
    pub min_budget: u64,
    /// Per-configuration budget cap.
    pub cap: u64,
}

impl Default for HalvingConfig {
    fn default() -> Self {
        Self {
            eta: 2,
            min_budget: 20 * DEFAULT_ITERATION_STEPS,
            cap: 150_000,
        }
    }
}

/// One synchronous rung: every survivor trained to `budget` and scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub budget: u64,
    /// Indices into [`SearchResult::candidates`].
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: usize,
    pub best_score: f64,
    pub candidates: Vec<Candidate>,
    pub rungs: Vec<Rung>,
}

impl SearchResult {
    pub fn best_candidate(&self) -> &Candidate {
        &self.candidates[self.best]
    }
}

/// Synchronous successive halving. Higher scores are better; ties favor the earlier candidate.
pub fn successive_halving<F>(candidates: Vec<Candidate>, cfg: &HalvingConfig, mut evaluate: F) -> Result<SearchResult>
where
    F: FnMut(&Candidate, u64) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(Error::EmptySearchSpace);
    }
    if cfg.eta < 2 || cfg.min_budget == 0 || cfg.cap < cfg.min_budget {
        return Err(Error::InvalidArgument(
            "halving needs eta >= 2 and 0 < min_budget <= cap".into(),
        ));
    }
    let mut survivors: Vec<usize> = (0..candidates.len()).collect();
    let mut budget = cfg.min_budget;
    let mut rungs = Vec::new();
    loop {
        let scores = survivors
            .iter()
            .map(|&i| evaluate(&candidates[i], budget))
            .collect::<Result<Vec<f64>>>()?;
        log::info!("rung {}: {} candidates at {budget} steps", rungs.len(), survivors.len());
        let mut order: Vec<usize> = (0..survivors.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        rungs.push(Rung {
            budget,
            candidates: survivors.clone(),
            scores: scores.clone(),
        });
        if survivors.len() == 1 {
            return Ok(SearchResult {
                best: survivors[0],
                best_score: scores[0],
                candidates,
                rungs,
            });
        }
        let keep = survivors.len().div_ceil(cfg.eta);
        let mut promoted: Vec<usize> = order[..keep].iter().map(|&k| survivors[k]).collect();
        promoted.sort_unstable();
        survivors = promoted;
        budget = (budget * cfg.eta as u64).min(cfg.cap);
    }
}

/// Random sampling followed by successive halving.
pub fn halving_search<F>(
    space: &SearchSpace,
    n: usize,
    seed: u64,
    cfg: &HalvingConfig,
    evaluate: F,
) -> Result<SearchResult>
where
    F: FnMut(&Candidate, u64) -> Result<f64>,
{
    successive_halving(sample_candidates(space, n, seed)?, cfg, evaluate)
}

fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("{path}: not an object at {part}")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), v);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown hyperparameter {path}")))?;
    }
    Ok(())
}

fn get_path<'a>(root: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(root, |cur, part| cur.get(part))
}

/// Applies a candidate's values to a hyperparameter set. Unknown names are rejected.
pub fn with_overrides(base: &AgentHyperparams, cand: &Candidate) -> Result<AgentHyperparams> {
    let mut v = serde_json::to_value(base)?;
    for (k, val) in cand {
        set_path(&mut v, k, val.clone())?;
    }
    let hp: AgentHyperparams = serde_json::from_value(v)?;
    let back = serde_json::to_value(&hp)?;
    for (k, val) in cand {
        let stored = get_path(&back, k);
        let same = match (stored, val) {
            (Some(a), b) if a == b => true,
            (Some(a), b) => a.as_f64().is_some() && a.as_f64() == b.as_f64(),
            _ => false,
        };
        if !same {
            return Err(Error::InvalidArgument(format!("unknown hyperparameter {k}")));
        }
    }
    hp.validate()?;
    Ok(hp)
}

fn default_candidates() -> usize {
    8
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3]
}

fn default_score_window() -> usize {
    100
}

/// Search definition as read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpec {
    pub algorithm: Algorithm,
    pub handler: HandlerKind,
    #[serde(default)]
    pub env: EnvConfig,
    /// Values not being searched; defaults to the preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<AgentHyperparams>,
    pub params: SearchSpace,
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    /// Agent seeds each configuration is trained on; scores are averaged.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub search_seed: u64,
    #[serde(default)]
    pub halving: HalvingConfig,
    /// Scores use the mean return of each seed's last `score_window` episodes.
    #[serde(default = "default_score_window")]
    pub score_window: usize,
}

impl SearchSpec {
    pub fn experiment(&self, hp: AgentHyperparams, budget: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(self.algorithm, self.handler, self.seeds.clone(), budget);
        cfg.env = self.env.clone();
        cfg.hyperparams = Some(hp);
        cfg
    }

    pub fn base_hyperparams(&self) -> Result<AgentHyperparams> {
        let mut cfg = ExperimentConfig::new(self.algorithm, self.handler, vec![0], 1);
        cfg.env = self.env.clone();
        cfg.hyperparams = self.base.clone();
        cfg.resolved_hyperparams()
    }

    pub fn run(&self) -> Result<SearchResult> {
        halving_search(
            &self.params,
            self.candidates,
            self.search_seed,
            &self.halving,
            training_evaluator(self)?,
        )
    }
}

/// Scores a candidate by training it on every seed of the spec (in parallel) and averaging
/// the late-training returns.
pub fn training_evaluator(spec: &SearchSpec) -> Result<impl FnMut(&Candidate, u64) -> Result<f64> + '_> {
    if spec.seeds.is_empty() || spec.score_window == 0 {
        return Err(Error::InvalidArgument(
            "search needs seeds and a positive score window".into(),
        ));
    }
    let base = spec.base_hyperparams()?;
    Ok(move |cand: &Candidate, budget: u64| {
        let cfg = spec.experiment(with_overrides(&base, cand)?, budget);
        let per_seed = spec
            .seeds
            .par_iter()
            .map(|&s| {
                let run = train_seed(&cfg, s)?;
                let tail = &run.episodes[run.episodes.len().saturating_sub(spec.score_window)..];
                Ok(tail.iter().map(|r| r.episode_return).sum::<f64>() / tail.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(per_seed.iter().sum::<f64>() / per_seed.len() as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn numbered(n: usize) -> Vec<Candidate> {
        (0..n).map(|i| Candidate::from([("x".to_string(), json!(i))])).collect()
    }

    fn x(c: &Candidate) -> f64 {
        c["x"].as_f64().unwrap()
    }

    #[test]
    fn rung_sizes_halve() {
        let cfg = HalvingConfig {
            eta: 2,
            min_budget: 10,
            cap: 1000,
        };
        let res = successive_halving(numbered(8), &cfg, |c, _| Ok(x(c))).unwrap();
        let sizes: Vec<usize> = res.rungs.iter().map(|r| r.candidates.len()).collect();
        assert_eq!(sizes, [8, 4, 2, 1]);
        let budgets: Vec<u64> = res.rungs.iter().map(|r| r.budget).collect();
        assert_eq!(budgets, [10, 20, 40, 80]);
        assert_eq!(res.best, 7);
        assert_eq!(res.rungs[1].candidates, [4, 5, 6, 7]);
    }

    #[test]
    fn budget_is_capped() {
        let cfg = HalvingConfig::default();
        let res = successive_halving(numbered(16), &cfg, |c, _| Ok(-x(c))).unwrap();
        let budgets: Vec<u64> = res.rungs.iter().map(|r| r.budget).collect();
        assert_eq!(budgets, [40_000, 80_000, 150_000, 150_000, 150_000]);
        assert_eq!(res.best, 0);
    }

    #[test]
    fn single_candidate_runs_one_rung() {
        let cands = numbered(1);
        let res = successive_halving(cands.clone(), &HalvingConfig::default(), |_, _| Ok(1.0)).unwrap();
        assert_eq!(res.rungs.len(), 1);
        assert_eq!(res.best_candidate(), &cands[0]);
    }

    #[test]
    fn odd_counts_and_ties() {
        let cfg = HalvingConfig {
            eta: 2,
            min_budget: 1,
            cap: 100,
        };
        let res = successive_halving(numbered(5), &cfg, |_, _| Ok(0.0)).unwrap();
        let sizes: Vec<usize> = res.rungs.iter().map(|r| r.candidates.len()).collect();
        assert_eq!(sizes, [5, 3, 2, 1]);
        assert_eq!(res.best, 0);
    }

    #[test]
    fn empty_space_is_an_error() {
        assert!(matches!(
            sample_candidates(&SearchSpace::new(), 4, 0),
            Err(Error::EmptySearchSpace)
        ));
        assert!(successive_halving(Vec::new(), &HalvingConfig::default(), |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn sampling_respects_ranges() {
        let space: SearchSpace = serde_json::from_value(json!({
            "lr": {"log_uniform": {"low": 1e-5, "high": 1e-2}},
            "clip": {"uniform": {"low": 0.1, "high": 0.4}},
            "batch": {"int": {"low": 32, "high": 512}},
            "hidden": {"choice": [[64, 64], [256, 256]]}
        }))
        .unwrap();
        let cands = sample_candidates(&space, 200, 3).unwrap();
        assert_eq!(cands, sample_candidates(&space, 200, 3).unwrap());
        for c in &cands {
            let lr = c["lr"].as_f64().unwrap();
            assert!((1e-5..=1e-2).contains(&lr));
            assert!((0.1..=0.4).contains(&c["clip"].as_f64().unwrap()));
            assert!((32..=512).contains(&c["batch"].as_i64().unwrap()));
            assert!(c["hidden"].is_array());
        }
    }

    #[test]
    fn overrides_apply_and_reject_unknown_names() {
        let base = crate::agents::preset(Algorithm::Dqn, HandlerKind::DiscreteMasking, false).unwrap();
        let cand = Candidate::from([
            ("lr".to_string(), json!(1e-3)),
            ("epsilon.initial".to_string(), json!(0.5)),
            ("hidden".to_string(), json!([32, 32])),
        ]);
        let AgentHyperparams::Dqn(p) = with_overrides(&base, &cand).unwrap() else {
            panic!()
        };
        assert_eq!((p.lr, p.epsilon.initial, p.hidden), (1e-3, 0.5, vec![32, 32]));
        let bad = Candidate::from([("learning_rate".to_string(), json!(1e-3))]);
        assert!(with_overrides(&base, &bad).is_err());
    }

    #[test]
    fn training_evaluator_scores_candidates() {
        let spec: SearchSpec = serde_json::from_value(json!({
            "algorithm": "dqn",
            "handler": "discrete_masking",
            "params": {"lr": {"log_uniform": {"low": 1e-4, "high": 1e-3}}},
            "candidates": 2,
            "seeds": [0, 1],
            "halving": {"eta": 2, "min_budget": 80, "cap": 160}
        }))
        .unwrap();
        let res = spec.run().unwrap();
        assert_eq!(res.rungs.len(), 2);
        assert!(res.best_score.is_finite());
        assert_eq!(res, spec.run().unwrap());
    }
}
