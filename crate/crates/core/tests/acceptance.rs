//! Acceptance criteria, one PASS/FAIL line each. Set `IQBAND_CRITERIA=1,2,3`
//! to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use iqband_core::harness::{
    hyperopt_at, run_bcnn_sweep, run_generalization_matrix, train_twin, ExperimentPlan, OcnnRun, SnrData,
    TrainingEvaluator, SNR_GRID,
};
use iqband_core::hyperband::*;
use iqband_core::hyperspace::{bcnn_config, build_model, validate_config, HyperConfig, HyperSpace, NUM_CLASSES};
use iqband_core::preprocess::{minmax_normalize, split_indices, window_streams, NormScope, SplitRatios};
use iqband_core::signal::build_dataset;
use iqband_nn::gradcheck::{check_gradients, param_sample, random_spec};
use iqband_nn::{train, Layer, LearnConfig, Mode, Network, OptimizerKind, TensorSet, TrainData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut kinds = std::collections::BTreeSet::new();
    let shapes = 60;
    for k in 0..shapes {
        let spec = random_spec(&mut rng);
        for l in &spec.layers {
            kinds.insert(l.kind());
        }
        let net = Network::<f64>::new(&spec, k).map_err(|e| e.to_string())?;
        let n = rng.random_range(1..=12);
        let x: Vec<f64> = (0..n * net.input_size()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..net.num_classes())).collect();
        let mode = if k % 2 == 0 { Mode::Train } else { Mode::Eval };
        let idx = param_sample(&net, 400);
        let r = check_gradients(&net, &x, &labels, mode, k ^ 0xbeef, 1e-5, &idx).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error);
        ensure!(r.max_rel_error < 1e-4, "shape {k} ({}): rel error {}", spec.summary(), r.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    for kind in ["conv", "dropout", "maxpool", "flatten", "dense", "softmax"] {
        ensure!(kinds.contains(kind), "layer type {kind} never drawn");
    }
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("{shapes} shapes, max rel error {worst:.2e}, {secs:.1}s"))
}

/// loss(c, b) = terminal_c + 1/b; counts every epoch trained.
struct Synthetic {
    terminals: Vec<f64>,
    consumed: AtomicUsize,
}

impl Synthetic {
    fn new(terminals: Vec<f64>) -> Self {
        Self {
            terminals,
            consumed: AtomicUsize::new(0),
        }
    }
}

impl Evaluator for Synthetic {
    type State = usize;

    fn evaluate(&self, id: usize, _: &HyperConfig, budget: usize, resume: Option<usize>) -> Result<Evaluation<usize>, TrialFailure> {
        self.consumed.fetch_add(budget - resume.unwrap_or(0), Ordering::SeqCst);
        Ok(Evaluation {
            loss: self.terminals[id % self.terminals.len()] + 1.0 / budget as f64,
            epochs: budget,
            state: budget,
        })
    }
}

fn brute_force_halving(terminals: &[f64], n: usize, r0: usize, eta: usize, max: usize) -> Vec<(usize, Vec<usize>)> {
    let loss = |id: usize, b: usize| terminals[id] + 1.0 / b as f64;
    let mut alive: Vec<usize> = (0..n).collect();
    let mut b = r0;
    let mut trace = vec![];
    loop {
        trace.push((b, alive.clone()));
        if alive.len() == 1 || b >= max {
            return trace;
        }
        let mut ranked = alive.clone();
        ranked.sort_by(|&x, &y| loss(x, b).partial_cmp(&loss(y, b)).unwrap().then(x.cmp(&y)));
        ranked.truncate(alive.len().div_ceil(eta));
        ranked.sort_unstable();
        alive = ranked;
        b = (b * eta).min(max);
    }
}

fn trace_of(log: &[LogRecord]) -> Vec<(usize, Vec<usize>)> {
    let mut trace: Vec<(usize, Vec<usize>)> = vec![];
    for r in log {
        if trace.len() == r.rung {
            trace.push((r.budget, vec![]));
        }
        trace[r.rung].1.push(r.trial);
    }
    trace
}

fn criterion_2() -> Check {
    let terminals = vec![0.52, 0.13, 0.88, 0.41, 0.07, 0.66, 0.29, 0.95];
    let c = bcnn_config(1).map_err(|e| e.to_string())?;
    let trials: Vec<_> = (0..8).map(|id| TrialRecord::new(id, None, c.clone())).collect();
    let ev = Synthetic::new(terminals.clone());
    let out = successive_halving(trials, 1, 2, 8, &ev).map_err(|e| e.to_string())?;
    let got = trace_of(&out.log);
    let want = brute_force_halving(&terminals, 8, 1, 2, 8);
    let sizes: Vec<String> = got.iter().map(|(b, ids)| format!("{}@{b}", ids.len())).collect();
    ensure!(got == want, "trace {got:?} != oracle {want:?}");
    ensure!(sizes == ["8@1", "4@2", "2@4", "1@8"], "rounds {sizes:?}");
    Ok(format!("rounds {}", sizes.join(" -> ")))
}

fn criterion_3() -> Check {
    let brackets: Vec<_> = bracket_schedule(8, 2)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|b| (b.s, b.n, b.r))
        .collect();
    ensure!(brackets == [(3, 8, 1), (2, 6, 2), (1, 4, 4), (0, 4, 8)], "brackets {brackets:?}");
    let terminals: Vec<f64> = (0..101).map(|i| ((i * 43) % 101) as f64 / 101.0).collect();
    let ev = Synthetic::new(terminals);
    let space = HyperSpace::new(4).map_err(|e| e.to_string())?;
    let out = hyperband(&space, 8, 2, &ev, 3).map_err(|e| e.to_string())?;
    let mut last = vec![0; out.trials.len()];
    for r in &out.log {
        last[r.trial] = r.epochs;
    }
    let logged: usize = last.iter().sum();
    let reported = ev.consumed.load(Ordering::SeqCst);
    ensure!(logged == reported && out.total_epochs() == reported, "logged {logged}, records {}, trainer {reported}", out.total_epochs());
    let best = out.best.final_loss().unwrap();
    for t in &out.trials {
        let l = t.final_loss().unwrap();
        ensure!(best < l || (best == l && out.best.id <= t.id), "trial {} ({l}) beats winner {} ({best})", t.id, out.best.id);
    }
    Ok(format!("{brackets:?}, {reported} epochs, winner trial {} loss {best:.4}", out.best.id))
}

fn criterion_4() -> Check {
    let s = sweep().as_ref()?;
    let i = s.index(10.0);
    let (o, data) = (&s.runs[i], &s.data[i]);
    let start = Instant::now();
    let bcnn = run_bcnn_sweep(&s.plan, std::slice::from_ref(data), &s.plan.bcnn_n).map_err(|e| e.to_string())?;
    let best = bcnn.iter().max_by(|a, b| a.test.accuracy.total_cmp(&b.test.accuracy)).unwrap();
    let secs = s.secs[i] + start.elapsed().as_secs_f64();
    let ocnn = o.run.test.accuracy;
    let bcnn_all = bcnn.iter().map(|r| format!("{} {:.4}", r.model_id, r.test.accuracy)).collect::<Vec<_>>().join(", ");
    let detail = format!(
        "OCNN {ocnn:.4} ({} configs, {}) vs BCNN [{bcnn_all}], {:.0} min on {} core(s)",
        o.recommendation.num_trials,
        o.run.built.spec.summary(),
        secs / 60.0,
        rayon::current_num_threads()
    );
    ensure!(o.recommendation.num_trials <= 50, "{detail}: too many configs");
    ensure!(ocnn >= 0.9, "{detail}: below 90%");
    ensure!(ocnn >= best.test.accuracy, "{detail}: BCNN wins");
    ensure!(secs < 7200.0, "{detail}: over two hours");
    Ok(detail)
}

/// Desk-scale search at every grid SNR, shared by criteria 4 to 6.
struct Sweep {
    plan: ExperimentPlan,
    data: Vec<SnrData>,
    runs: Vec<OcnnRun>,
    secs: Vec<f64>,
}

impl Sweep {
    fn index(&self, snr: f64) -> usize {
        self.plan.snrs_db.iter().position(|&x| x == snr).unwrap()
    }
}

fn sweep() -> &'static Result<Sweep, String> {
    static SWEEP: std::sync::OnceLock<Result<Sweep, String>> = std::sync::OnceLock::new();
    SWEEP.get_or_init(|| {
        let plan = ExperimentPlan::desk_scale(SNR_GRID.to_vec());
        let mut data = vec![];
        let mut runs = vec![];
        let mut secs = vec![];
        for &snr in &plan.snrs_db {
            let start = Instant::now();
            let d = SnrData::generate(&plan, snr).map_err(|e| e.to_string())?;
            let o = hyperopt_at(&plan, &d).map_err(|e| e.to_string())?;
            eprintln!(
                "  sweep {snr:+} dB: {:.4} ({}, normalize {}) in {:.0}s",
                o.run.test.accuracy,
                o.run.built.spec.summary(),
                o.run.config.normalize,
                start.elapsed().as_secs_f64()
            );
            secs.push(start.elapsed().as_secs_f64());
            data.push(d);
            runs.push(o);
        }
        Ok(Sweep { plan, data, runs, secs })
    })
}

fn criterion_5() -> Check {
    let s = sweep().as_ref()?;
    let at = |snr: f64| s.index(snr);
    let train_idx = at(0.0);
    let winner = &s.runs[train_idx].run;
    let twin = train_twin(&s.plan, winner, &s.data[train_idx], !winner.config.normalize).map_err(|e| e.to_string())?;
    let (norm, unnorm) = if winner.config.normalize { (winner.clone(), twin) } else { (twin, winner.clone()) };
    let tests: Vec<SnrData> = [-10.0, -5.0, 0.0, 5.0, 10.0].iter().map(|&x| s.data[at(x)].clone()).collect();
    let mn = run_generalization_matrix(std::slice::from_ref(&norm), &tests, true).map_err(|e| e.to_string())?;
    let mu = run_generalization_matrix(std::slice::from_ref(&unnorm), &tests, false).map_err(|e| e.to_string())?;
    let (n, u) = (&mn.summaries[0], &mu.summaries[0]);
    let (Some(n_all), Some(n_adj), Some(u_all), Some(u_adj)) =
        (n.all_snr_accuracy, n.adjacent_snr_accuracy, u.all_snr_accuracy, u.adjacent_snr_accuracy)
    else {
        return Err("missing generalization cells".into());
    };
    let detail = format!("normalized all {n_all:.4} adjacent {n_adj:.4}; unnormalized all {u_all:.4} adjacent {u_adj:.4}");
    ensure!(mn.cells.len() == 4, "{detail}: {} cells", mn.cells.len());
    ensure!(n_all > u_all, "{detail}: normalization does not help");
    ensure!(n_adj >= n_all, "{detail}: adjacency gap reversed");
    Ok(detail)
}

fn criterion_6() -> Check {
    let s = sweep().as_ref()?;
    let acc: Vec<f64> = s.runs.iter().map(|o| o.run.test.accuracy).collect();
    let detail = acc.iter().zip(&s.plan.snrs_db).map(|(a, s)| format!("{s:+}:{a:.3}")).collect::<Vec<_>>().join(" ");
    let mut peak: f64 = 0.0;
    for (a, snr) in acc.iter().zip(&s.plan.snrs_db) {
        ensure!(*a >= peak - 0.02, "{detail}: drop at {snr} dB");
        peak = peak.max(*a);
    }
    Ok(detail)
}

fn tiny_sets(seed: u64, n: usize) -> (TensorSet<f32>, TensorSet<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = iqband_nn::Shape3::new(12, 2, 1);
    let mut make = |count: usize| {
        let labels: Vec<usize> = (0..count).map(|i| i % 3).collect();
        let data = labels
            .iter()
            .flat_map(|&l| (0..shape.size()).map(|_| rng.random_range(-1.0f32..1.0) + l as f32 * 0.3).collect::<Vec<_>>())
            .collect();
        TensorSet::new(shape, data, labels).unwrap()
    };
    (make(n), make(n / 2))
}

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut notes = vec![];

    // Window count.
    let plan = ExperimentPlan::desk_scale(vec![5.0]);
    let mut small = plan.clone();
    small.data.waveforms_per_class = 6;
    small.data.samples_per_stream = 1000;
    let ds = build_dataset(&small.data.spec_at(5.0)).map_err(|e| e.to_string())?;
    for w in [1, 7, 128, 333, 512, 1000] {
        for n in 1..=4 {
            let got = window_streams(&ds.sets[0], w, n).map_err(|e| e.to_string())?.len();
            ensure!(got == 1000 / w, "w={w}: {got} windows");
        }
    }
    notes.push("windows");

    // Normalization.
    for _ in 0..500 {
        let n = rng.random_range(1..=4);
        let rows = rng.random_range(2..64);
        let win: Vec<f32> = (0..rows * n).map(|_| rng.random_range(-1000i32..1000) as f32).collect();
        let k = rng.random_range(-3..4);
        let off = rng.random_range(-100i32..100) as f32;
        for scope in [NormScope::PerChannel, NormScope::Joint] {
            let mut a = win.clone();
            let mut b: Vec<f32> = win.iter().map(|v| v * 2f32.powi(k) + off).collect();
            minmax_normalize(&mut a, n, scope);
            ensure!(a.iter().all(|v| (0.0..=1.0).contains(v)), "out of range");
            let once = a.clone();
            minmax_normalize(&mut a, n, scope);
            ensure!(once.iter().zip(&a).all(|(x, y)| (x - y).abs() <= 1e-6), "not idempotent");
            minmax_normalize(&mut b, n, scope);
            ensure!(once.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6), "not scale invariant");
        }
    }
    notes.push("normalization");

    // Split partition and stratification.
    let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
    for seed in 0..50 {
        let s = split_indices(&labels, SplitRatios::default(), seed).map_err(|e| e.to_string())?;
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        ensure!(all == (0..300).collect::<Vec<_>>(), "not a partition");
        for part in [&s.train, &s.valid, &s.test] {
            for c in 0..3 {
                let share = part.iter().filter(|&&i| labels[i] == c).count() as f64 / part.len() as f64;
                ensure!((share - 1.0 / 3.0).abs() <= 0.02, "class {c} share {share}");
            }
        }
    }
    notes.push("split");

    // Config domains and feasibility.
    let space = HyperSpace::new(4).map_err(|e| e.to_string())?;
    for _ in 0..10_000 {
        let c = space.sample_config(&mut rng).map_err(|e| e.to_string())?.config;
        space.contains(&c).map_err(|e| e.to_string())?;
        ensure!(validate_config(&c).is_feasible(), "infeasible sample");
        let built = build_model(&c, NUM_CLASSES).map_err(|e| e.to_string())?;
        ensure!(built.spec.shapes().is_ok(), "bad spec");
        ensure!(
            built.spec.layers.iter().filter(|l| matches!(l, Layer::Conv { .. })).count() == c.conv_blocks.len(),
            "conv count"
        );
    }
    notes.push("10000 configs");

    // Survivor-count law.
    let c = bcnn_config(1).map_err(|e| e.to_string())?;
    for _ in 0..200 {
        let n = rng.random_range(1..60);
        let eta = rng.random_range(2..5);
        let terminals: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let trials: Vec<_> = (0..n).map(|id| TrialRecord::new(id, None, c.clone())).collect();
        let out = successive_halving(trials, 1, eta, 1000, &Synthetic::new(terminals)).map_err(|e| e.to_string())?;
        for (k, (_, ids)) in trace_of(&out.log).iter().enumerate() {
            let want = ((n as f64) / (eta as f64).powi(k as i32)).ceil() as usize;
            ensure!(ids.len() == want, "n={n} eta={eta} round {k}: {} alive", ids.len());
        }
    }
    notes.push("survivors");

    // Resume equals straight training.
    let (tr, va) = tiny_sets(3, 60);
    let mut cfg = bcnn_config(1).map_err(|e| e.to_string())?;
    cfg.window = 12;
    cfg.conv_blocks[0].filter_len = 3;
    cfg.conv_blocks[0].pool = 2;
    cfg.conv_blocks[0].pool_stride = 2;
    cfg.conv_blocks[0].dropout = 0.3;
    cfg.batch_size = 16;
    let built = build_model(&cfg, 3).map_err(|e| e.to_string())?;
    for opt in [OptimizerKind::Adam, OptimizerKind::Sgd, OptimizerKind::RmsProp] {
        let learn = LearnConfig {
            optimizer: opt,
            learning_rate: 1e-2,
            ..built.learn.clone()
        };
        let td = || TrainData { train: &tr, valid: &va };
        let straight = train(&built.spec, td(), &learn, 5, 9, None).map_err(|e| e.to_string())?;
        let mut m = train(&built.spec, td(), &learn, 1, 9, None).map_err(|e| e.to_string())?;
        for b in [2, 4, 5] {
            m = train(&built.spec, td(), &learn, b, 9, Some(m)).map_err(|e| e.to_string())?;
        }
        ensure!(m.history == straight.history, "{opt}: histories differ");
        ensure!(m.network.params() == straight.network.params(), "{opt}: weights differ");
    }
    notes.push("resume");

    // Determinism: manifests and trial logs across two runs.
    let mut tiny = plan.clone();
    tiny.data.waveforms_per_class = 12;
    tiny.data.samples_per_stream = 512;
    tiny.inputs_per_class = 24;
    tiny.search.max_budget = 3;
    tiny.search.eta = 3;
    let run = || -> Result<(String, Vec<LogRecord>), String> {
        let d = SnrData::generate(&tiny, 5.0).map_err(|e| e.to_string())?;
        let ev = TrainingEvaluator { data: &d, train_seed: tiny.train_seed };
        let out = hyperband(&tiny.space().unwrap(), 3, 3, &ev, tiny.search.seed).map_err(|e| e.to_string())?;
        let mut log = out.log;
        log.iter_mut().for_each(|r| r.wall_time_s = 0.0);
        Ok((d.dataset.manifest().content_hash, log))
    };
    let (a, b) = (run()?, run()?);
    ensure!(a.0 == b.0, "manifest hashes differ");
    ensure!(a.1 == b.1, "trial logs differ");
    notes.push("determinism");

    Ok(notes.join(", "))
}

fn main() -> ExitCode {
    let selected: Option<Vec<u32>> = std::env::var("IQBAND_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Check); 7] = [
        (1, "gradient suite", criterion_1),
        (2, "successive-halving oracle", criterion_2),
        (3, "hyperband schedule and accounting", criterion_3),
        (4, "end-to-end desk scale at 10 dB", criterion_4),
        (5, "normalization generalization from 0 dB", criterion_5),
        (6, "monotonic SNR trend", criterion_6),
        (7, "property suites", criterion_7),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {id} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
