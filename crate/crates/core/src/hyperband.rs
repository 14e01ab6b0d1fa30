//! Successive halving and the Hyperband bracket schedule, with budgets in
//! training epochs and validation loss as the objective.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::hyperspace::{HyperConfig, HyperSpace};

/// Result of training one trial up to a cumulative budget.
#[derive(Debug, Clone)]
pub struct Evaluation<S> {
    pub loss: f64,
    /// Cumulative epochs the trainer reports as consumed.
    pub epochs: usize,
    pub state: S,
}

/// A trial that could not produce a validation loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialFailure {
    pub diagnostic: String,
    /// Cumulative epochs consumed before the failure, when known.
    pub epochs: Option<usize>,
}

impl TrialFailure {
    pub fn new(diagnostic: impl Into<String>, epochs: Option<usize>) -> Self {
        Self {
            diagnostic: diagnostic.into(),
            epochs,
        }
    }
}

/// Trains a configuration to a cumulative epoch budget, optionally resuming
/// from the state returned by a previous call for the same trial.
pub trait Evaluator: Sync {
    type State: Send;

    fn evaluate(
        &self,
        id: usize,
        config: &HyperConfig,
        budget: usize,
        resume: Option<Self::State>,
    ) -> std::result::Result<Evaluation<Self::State>, TrialFailure>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Alive,
    Eliminated,
    Failed,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub budget: usize,
    pub epochs: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub id: usize,
    pub bracket: Option<usize>,
    pub config: HyperConfig,
    pub epochs: usize,
    pub rungs: Vec<Rung>,
    pub status: TrialStatus,
    pub diagnostic: Option<String>,
}

impl TrialRecord {
    pub fn new(id: usize, bracket: Option<usize>, config: HyperConfig) -> Self {
        Self {
            id,
            bracket,
            config,
            epochs: 0,
            rungs: Vec::new(),
            status: TrialStatus::Alive,
            diagnostic: None,
        }
    }

    /// Validation loss at the last completed rung, unless the trial failed.
    pub fn final_loss(&self) -> Option<f64> {
        match self.status {
            TrialStatus::Failed => None,
            _ => self.rungs.last().map(|r| r.loss),
        }
    }
}

/// One line of the trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub bracket: Option<usize>,
    pub trial: usize,
    pub rung: usize,
    pub budget: usize,
    pub epochs: usize,
    pub val_loss: Option<f64>,
    pub wall_time_s: f64,
    pub status: TrialStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostic: Option<String>,
    pub config: HyperConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RungPlan {
    pub count: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: usize,
    pub n: usize,
    pub r: usize,
    pub eta: usize,
    pub rungs: Vec<RungPlan>,
}

fn check_eta_budget(eta: usize, max_budget: usize) -> Result<()> {
    if eta < 2 {
        return Err(CoreError::InvalidSearch(format!("eta must be at least 2, got {eta}")));
    }
    if max_budget == 0 {
        return Err(CoreError::InvalidSearch("R must be at least 1".into()));
    }
    Ok(())
}

/// Rung table of successive halving started with `n` configs at budget `r0`.
pub fn rung_table(n: usize, r0: usize, eta: usize, max_budget: usize) -> Vec<RungPlan> {
    let mut rungs = Vec::new();
    let (mut count, mut budget) = (n, r0.min(max_budget));
    loop {
        rungs.push(RungPlan { count, budget });
        if count <= 1 || budget >= max_budget {
            return rungs;
        }
        count = count.div_ceil(eta);
        budget = budget.saturating_mul(eta).min(max_budget);
    }
}

/// Largest `s` with `eta^s <= R`.
pub fn s_max(max_budget: usize, eta: usize) -> usize {
    let (mut s, mut p) = (0, eta);
    while p <= max_budget {
        s += 1;
        p = p.saturating_mul(eta);
    }
    s
}

/// Canonical Hyperband brackets, from the most exploratory down to `s = 0`.
pub fn bracket_schedule(max_budget: usize, eta: usize) -> Result<Vec<Bracket>> {
    check_eta_budget(eta, max_budget)?;
    let top = s_max(max_budget, eta);
    Ok((0..=top)
        .rev()
        .map(|s| {
            let pow = eta.pow(s as u32);
            let n = ((top + 1) * pow).div_ceil(s + 1);
            let r = (max_budget / pow).max(1);
            Bracket {
                s,
                n,
                r,
                eta,
                rungs: rung_table(n, r, eta, max_budget),
            }
        })
        .collect())
}

/// Trials of one successive-halving run, best first, with the log and the
/// evaluator states of the trials that finished alive.
#[derive(Debug)]
pub struct HalvingOutcome<S> {
    pub ranked: Vec<TrialRecord>,
    pub log: Vec<LogRecord>,
    pub states: Vec<(usize, S)>,
    /// Budget of a round in which every trial failed.
    pub all_failed_at: Option<usize>,
}

fn rank_key(t: &TrialRecord) -> (bool, f64, usize) {
    match t.final_loss() {
        Some(l) => (false, l, t.id),
        None => (true, f64::INFINITY, t.id),
    }
}

fn rank(trials: &mut [TrialRecord]) {
    trials.sort_by(|a, b| {
        let (ka, kb) = (rank_key(a), rank_key(b));
        ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.cmp(&kb.2))
    });
}

fn halving<E: Evaluator>(
    mut trials: Vec<TrialRecord>,
    r0: usize,
    eta: usize,
    max_budget: usize,
    evaluator: &E,
) -> HalvingOutcome<E::State> {
    trials.sort_by_key(|t| t.id);
    let mut log = Vec::new();
    let mut states: Vec<Option<E::State>> = trials.iter().map(|_| None).collect();
    let mut alive: Vec<usize> = (0..trials.len()).collect();
    let mut budget = r0.min(max_budget);
    let mut rung = 0;
    let mut all_failed_at = None;
    loop {
        let jobs: Vec<(usize, Option<E::State>)> = alive.iter().map(|&i| (i, states[i].take())).collect();
        let results: Vec<_> = jobs
            .into_par_iter()
            .map(|(i, resume)| {
                let start = Instant::now();
                let r = evaluator.evaluate(trials[i].id, &trials[i].config, budget, resume);
                (i, r, start.elapsed().as_secs_f64())
            })
            .collect();
        let mut survivors = Vec::new();
        for (i, result, wall) in results {
            let t = &mut trials[i];
            match result {
                Ok(ev) if ev.loss.is_finite() => {
                    t.epochs = ev.epochs;
                    t.rungs.push(Rung {
                        budget,
                        epochs: ev.epochs,
                        loss: ev.loss,
                    });
                    states[i] = Some(ev.state);
                    survivors.push(i);
                }
                Ok(ev) => {
                    t.epochs = ev.epochs;
                    t.status = TrialStatus::Failed;
                    t.diagnostic = Some(format!("non-finite validation loss {}", ev.loss));
                }
                Err(f) => {
                    t.epochs = f.epochs.unwrap_or(t.epochs);
                    t.status = TrialStatus::Failed;
                    t.diagnostic = Some(f.diagnostic);
                }
            }
            log.push(LogRecord {
                bracket: t.bracket,
                trial: t.id,
                rung,
                budget,
                epochs: t.epochs,
                val_loss: t.final_loss(),
                wall_time_s: wall,
                status: t.status,
                diagnostic: t.diagnostic.clone(),
                config: t.config.clone(),
            });
            log::info!(
                "bracket {:?} trial {} rung {rung} budget {budget}: epochs {} loss {:?} ({:.1}s){}",
                t.bracket,
                t.id,
                t.epochs,
                t.final_loss(),
                wall,
                t.diagnostic.as_deref().map(|d| format!(" failed: {d}")).unwrap_or_default()
            );
        }
        if survivors.is_empty() {
            all_failed_at = Some(budget);
            break;
        }
        if survivors.len() == 1 || budget >= max_budget {
            for &i in &survivors {
                trials[i].status = TrialStatus::Complete;
            }
            break;
        }
        let keep = alive.len().div_ceil(eta).min(survivors.len());
        survivors.sort_by(|&a, &b| {
            let (la, lb) = (trials[a].rungs.last().unwrap().loss, trials[b].rungs.last().unwrap().loss);
            la.total_cmp(&lb).then(trials[a].id.cmp(&trials[b].id))
        });
        for &i in &survivors[keep..] {
            trials[i].status = TrialStatus::Eliminated;
            states[i] = None;
        }
        survivors.truncate(keep);
        survivors.sort_unstable();
        alive = survivors;
        budget = budget.saturating_mul(eta).min(max_budget);
        rung += 1;
    }
    let states = trials
        .iter()
        .zip(states)
        .filter(|(t, _)| t.status == TrialStatus::Complete)
        .filter_map(|(t, s)| s.map(|s| (t.id, s)))
        .collect();
    rank(&mut trials);
    HalvingOutcome {
        ranked: trials,
        log,
        states,
        all_failed_at,
    }
}

/// Trains survivors to cumulative budgets `min(r0 * eta^k, R)`, keeping the
/// best `ceil(count / eta)` after each round (ties to the lower id) until one
/// trial remains or the budget reaches `R`. Survivors resume from their state.
pub fn successive_halving<E: Evaluator>(
    trials: Vec<TrialRecord>,
    r0: usize,
    eta: usize,
    max_budget: usize,
    evaluator: &E,
) -> Result<HalvingOutcome<E::State>> {
    check_eta_budget(eta, max_budget)?;
    if trials.is_empty() || r0 == 0 {
        return Err(CoreError::InvalidSearch("need at least one config and r0 >= 1".into()));
    }
    let out = halving(trials, r0, eta, max_budget, evaluator);
    match out.all_failed_at {
        Some(budget) => Err(CoreError::AllTrialsFailed { budget }),
        None => Ok(out),
    }
}

#[derive(Debug)]
pub struct SearchOutcome<S> {
    pub best: TrialRecord,
    /// Evaluator state of the best trial when it finished alive.
    pub best_state: Option<S>,
    /// All trials in id order.
    pub trials: Vec<TrialRecord>,
    pub brackets: Vec<Bracket>,
    pub failed_brackets: Vec<usize>,
    pub log: Vec<LogRecord>,
    /// Infeasible draws discarded while sampling.
    pub rejected_samples: usize,
}

impl<S> SearchOutcome<S> {
    /// Sum of trainer-reported epochs over all trials.
    pub fn total_epochs(&self) -> usize {
        self.trials.iter().map(|t| t.epochs).sum()
    }
}

fn sample_trials(
    space: &HyperSpace,
    rng: &mut ChaCha8Rng,
    count: usize,
    first_id: usize,
    bracket: Option<usize>,
    rejected: &mut usize,
) -> Result<Vec<TrialRecord>> {
    (0..count)
        .map(|k| {
            let s = space.sample_config(rng)?;
            *rejected += s.rejected;
            Ok(TrialRecord::new(first_id + k, bracket, s.config))
        })
        .collect()
}

struct Collector<S> {
    best: Option<(TrialRecord, Option<S>)>,
    trials: Vec<TrialRecord>,
    log: Vec<LogRecord>,
    failed: Vec<usize>,
}

impl<S> Collector<S> {
    fn new() -> Self {
        Self {
            best: None,
            trials: Vec::new(),
            log: Vec::new(),
            failed: Vec::new(),
        }
    }

    fn absorb(&mut self, label: usize, out: HalvingOutcome<S>) {
        self.log.extend(out.log);
        if out.all_failed_at.is_some() {
            self.failed.push(label);
        } else if let Some(top) = out.ranked.first() {
            let better = match &self.best {
                None => true,
                Some((b, _)) => rank_key(top).1 < rank_key(b).1,
            };
            if better {
                let state = out.states.into_iter().find(|(id, _)| *id == top.id).map(|(_, s)| s);
                self.best = Some((top.clone(), state));
            }
        }
        self.trials.extend(out.ranked);
    }

    fn finish(mut self, brackets: Vec<Bracket>, rejected: usize) -> Result<SearchOutcome<S>> {
        self.trials.sort_by_key(|t| t.id);
        let (best, best_state) = self
            .best
            .ok_or(CoreError::AllTrialsFailed { budget: 0 })?;
        Ok(SearchOutcome {
            best,
            best_state,
            trials: self.trials,
            brackets,
            failed_brackets: self.failed,
            log: self.log,
            rejected_samples: rejected,
        })
    }
}

/// Runs every bracket of the canonical schedule with freshly sampled
/// configurations and returns the global argmin of final validation loss.
/// A bracket whose trials all fail is recorded and skipped.
pub fn hyperband<E: Evaluator>(
    space: &HyperSpace,
    max_budget: usize,
    eta: usize,
    evaluator: &E,
    seed: u64,
) -> Result<SearchOutcome<E::State>> {
    let brackets = bracket_schedule(max_budget, eta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejected = 0;
    let mut next_id = 0;
    let mut collector = Collector::new();
    for b in &brackets {
        let trials = sample_trials(space, &mut rng, b.n, next_id, Some(b.s), &mut rejected)?;
        next_id += b.n;
        collector.absorb(b.s, halving(trials, b.r, eta, max_budget, evaluator));
    }
    collector.finish(brackets, rejected)
}

/// `trial_count` independent samples each trained to `budget_each`.
pub fn random_search_baseline<E: Evaluator>(
    space: &HyperSpace,
    trial_count: usize,
    budget_each: usize,
    evaluator: &E,
    seed: u64,
) -> Result<SearchOutcome<E::State>> {
    if trial_count == 0 || budget_each == 0 {
        return Err(CoreError::InvalidSearch("trial_count and budget_each must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejected = 0;
    let trials = sample_trials(space, &mut rng, trial_count, 0, None, &mut rejected)?;
    let mut collector = Collector::new();
    collector.absorb(0, halving(trials, budget_each, 2, budget_each, evaluator));
    collector.finish(Vec::new(), rejected)
}

/// Final recommendation with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub trial: usize,
    pub val_loss: f64,
    pub epochs: usize,
    pub config: HyperConfig,
    pub seed: u64,
    pub max_budget: usize,
    pub eta: usize,
    pub total_epochs: usize,
    pub num_trials: usize,
}

impl Recommendation {
    pub fn from_outcome<S>(out: &SearchOutcome<S>, seed: u64, max_budget: usize, eta: usize) -> Self {
        Self {
            trial: out.best.id,
            val_loss: out.best.final_loss().unwrap_or(f64::NAN),
            epochs: out.best.epochs,
            config: out.best.config.clone(),
            seed,
            max_budget,
            eta,
            total_epochs: out.total_epochs(),
            num_trials: out.trials.len(),
        }
    }
}

/// Newline-delimited JSON, one record per line.
pub fn write_trial_log(path: impl AsRef<Path>, log: &[LogRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in log {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_trial_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperspace::bcnn_config;

    /// loss(id, b) = terminal[id] + 1 / b; fails for ids in `failing`.
    struct Curve {
        terminal: Vec<f64>,
        failing: Vec<usize>,
    }

    impl Evaluator for Curve {
        type State = usize;

        fn evaluate(&self, id: usize, _: &HyperConfig, budget: usize, resume: Option<usize>) -> std::result::Result<Evaluation<usize>, TrialFailure> {
            if self.failing.contains(&id) {
                return Err(TrialFailure::new(format!("trial {id} diverged"), Some(budget)));
            }
            assert!(resume.is_none_or(|e| e < budget));
            Ok(Evaluation {
                loss: self.terminal[id % self.terminal.len()] + 1.0 / budget as f64,
                epochs: budget,
                state: budget,
            })
        }
    }

    fn trials(n: usize) -> Vec<TrialRecord> {
        (0..n).map(|i| TrialRecord::new(i, None, bcnn_config(1).unwrap())).collect()
    }

    #[test]
    fn brackets_for_r8_eta2() {
        let b = bracket_schedule(8, 2).unwrap();
        let triples: Vec<_> = b.iter().map(|b| (b.s, b.n, b.r)).collect();
        assert_eq!(triples, vec![(3, 8, 1), (2, 6, 2), (1, 4, 4), (0, 4, 8)]);
        let counts: Vec<_> = b[0].rungs.iter().map(|r| (r.count, r.budget)).collect();
        assert_eq!(counts, vec![(8, 1), (4, 2), (2, 4), (1, 8)]);
    }

    #[test]
    fn degenerate_budget() {
        let b = bracket_schedule(1, 3).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!((b[0].s, b[0].n, b[0].r), (0, 1, 1));
        assert!(bracket_schedule(0, 2).is_err());
        assert!(bracket_schedule(8, 1).is_err());
    }

    #[test]
    fn halving_keeps_best_half() {
        let ev = Curve {
            terminal: vec![0.8, 0.1, 0.5, 0.3, 0.9, 0.2, 0.7, 0.4],
            failing: vec![],
        };
        let out = successive_halving(trials(8), 1, 2, 8, &ev).unwrap();
        assert_eq!(out.ranked[0].id, 1);
        assert_eq!(out.ranked[0].status, TrialStatus::Complete);
        assert_eq!(out.ranked[0].epochs, 8);
        let per_rung: Vec<usize> = (0..4).map(|k| out.log.iter().filter(|r| r.rung == k).count()).collect();
        assert_eq!(per_rung, vec![8, 4, 2, 1]);
        assert_eq!(out.states, vec![(1, 8)]);
    }

    #[test]
    fn ties_go_to_lower_id() {
        let ev = Curve {
            terminal: vec![0.5; 4],
            failing: vec![],
        };
        let out = successive_halving(trials(4), 1, 2, 4, &ev).unwrap();
        assert_eq!(out.ranked[0].id, 0);
        let second_rung: Vec<usize> = out.log.iter().filter(|r| r.rung == 1).map(|r| r.trial).collect();
        assert_eq!(second_rung, vec![0, 1]);
    }

    #[test]
    fn single_config_trains_once() {
        let ev = Curve {
            terminal: vec![0.5],
            failing: vec![],
        };
        let out = successive_halving(trials(1), 3, 2, 8, &ev).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.ranked[0].epochs, 3);
    }

    #[test]
    fn failures_are_eliminated() {
        let ev = Curve {
            terminal: vec![0.1, 0.2, 0.3, 0.4],
            failing: vec![0],
        };
        let out = successive_halving(trials(4), 1, 2, 4, &ev).unwrap();
        let failed = out.ranked.iter().find(|t| t.id == 0).unwrap();
        assert_eq!(failed.status, TrialStatus::Failed);
        assert!(failed.diagnostic.as_deref().unwrap().contains("diverged"));
        assert_eq!(failed.epochs, 1);
        assert_eq!(out.ranked[0].id, 1);
        assert_eq!(out.ranked.last().unwrap().id, 0);

        let all = Curve {
            terminal: vec![0.1],
            failing: vec![0, 1, 2],
        };
        assert!(matches!(successive_halving(trials(3), 1, 2, 4, &all), Err(CoreError::AllTrialsFailed { budget: 1 })));
    }

    #[test]
    fn hyperband_skips_failed_bracket_and_finds_argmin() {
        // R = 4, eta = 2: brackets (s, n, r) = (2, 4, 1), (1, 3, 2), (0, 3, 4); ids 0..10.
        let ev = Curve {
            terminal: vec![0.3, 0.6, 0.9, 0.2, 0.5, 0.8, 0.1, 0.4, 0.7, 0.5],
            failing: vec![0, 1, 2, 3],
        };
        let out = hyperband(&HyperSpace::new(2).unwrap(), 4, 2, &ev, 5).unwrap();
        assert_eq!(out.failed_brackets, vec![2]);
        assert_eq!(out.best.id, 6);
        assert_eq!(out.best_state, Some(4));
        assert_eq!(out.trials.len(), 10);
        let min = out.trials.iter().filter_map(|t| t.final_loss()).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best.final_loss(), Some(min));
    }

    #[test]
    fn random_search_returns_exhaustive_argmin() {
        let ev = Curve {
            terminal: vec![0.4, 0.3, 0.9, 0.05, 0.6],
            failing: vec![],
        };
        let out = random_search_baseline(&HyperSpace::new(3).unwrap(), 5, 6, &ev, 1).unwrap();
        assert_eq!(out.best.id, 3);
        assert_eq!(out.total_epochs(), 30);
        assert!(out.trials.iter().all(|t| t.status == TrialStatus::Complete));
    }

    #[test]
    fn log_round_trips_through_ndjson() {
        let ev = Curve {
            terminal: vec![0.4, 0.3],
            failing: vec![1],
        };
        let out = successive_halving(trials(2), 1, 2, 2, &ev).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.ndjson");
        write_trial_log(&path, &out.log).unwrap();
        assert_eq!(read_trial_log(&path).unwrap(), out.log);
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), out.log.len());
    }
}
