use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use iqband_core::harness::{
    emit_reports, hyperopt_at, run_bcnn_sweep, run_generalization_matrix, snr_tag, train_twin,
    ExperimentPlan, ModelRun, RunReport, SnrData, SNR_GRID,
};
use iqband_core::hyperband::{write_trial_log, Recommendation};
use iqband_nn::{load_checkpoint, save_checkpoint};

#[derive(Parser)]
#[command(name = "iqband", version, about = "Multi-stream IQ classification with Hyperband-tuned CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run directory holding data, search artifacts, results and reports.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Experiment plan (JSON). Falls back to `<out>/plan.json`, then the desk-scale defaults.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Comma-separated SNR points in dB, overriding the plan.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<f64>>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the resolved experiment plan to `<out>/plan.json`.
    Plan(Common),
    /// Synthesize and store the per-SNR datasets.
    Synth(Common),
    /// Hyperband search per SNR; saves trial logs, recommendation and the retrained winner.
    Hyperopt(Common),
    /// Train the fixed BCNN baseline for each SNR and stream count.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// Stream counts to sweep, overriding the plan.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
    },
    /// Cross-SNR generalization of the searched models with and without normalization.
    Generalize(Common),
    /// Render CSV tables, plot data and the JSON summary from stored results.
    Report(Common),
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Plan(c)
        | Command::Synth(c)
        | Command::Hyperopt(c)
        | Command::Generalize(c)
        | Command::Report(c) => c.clone(),
        Command::Baseline { common, .. } => common.clone(),
    };
    if common.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let plan = resolve_plan(&common)?;
    let run = Run { out: common.out, plan };
    match cli.command {
        Command::Plan(_) => Ok(()),
        Command::Synth(_) => run.synth(),
        Command::Hyperopt(_) => run.hyperopt(),
        Command::Baseline { n, .. } => run.baseline(n),
        Command::Generalize(_) => run.generalize(),
        Command::Report(_) => run.report(),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn resolve_plan(c: &Common) -> Result<ExperimentPlan> {
    let stored = c.out.join("plan.json");
    let mut plan = match &c.plan {
        Some(p) => read_json(p)?,
        None if stored.exists() => read_json(&stored)?,
        None => ExperimentPlan::desk_scale(SNR_GRID.to_vec()),
    };
    if let Some(snrs) = &c.snr {
        plan.snrs_db = snrs.clone();
    }
    plan.validate()?;
    write_json(&stored, &plan)?;
    Ok(plan)
}

struct Run {
    out: PathBuf,
    plan: ExperimentPlan,
}

impl Run {
    fn data(&self, snr: f64) -> Result<SnrData> {
        let dir = self.out.join("data").join(snr_tag(snr));
        Ok(SnrData::cached(&self.plan, snr, &dir)?)
    }

    fn search_dir(&self, snr: f64) -> PathBuf {
        self.out.join("hyperopt").join(snr_tag(snr))
    }

    fn result_path(&self, kind: &str, snr: Option<f64>) -> PathBuf {
        let name = match snr {
            Some(s) => format!("{kind}_{}.json", snr_tag(s)),
            None => format!("{kind}.json"),
        };
        self.out.join("results").join(name)
    }

    fn synth(&self) -> Result<()> {
        for &snr in &self.plan.snrs_db {
            let d = self.data(snr)?;
            println!("{} {} sets, hash {}", snr_tag(snr), d.dataset.sets.len(), d.dataset.content_hash);
        }
        Ok(())
    }

    fn hyperopt(&self) -> Result<()> {
        for &snr in &self.plan.snrs_db {
            let data = self.data(snr)?;
            let start = Instant::now();
            let o = hyperopt_at(&self.plan, &data)?;
            let dir = self.search_dir(snr);
            fs::create_dir_all(&dir)?;
            write_trial_log(dir.join("trials.ndjson"), &o.log)?;
            write_json(&dir.join("recommendation.json"), &o.recommendation)?;
            save_checkpoint(&o.run.model, dir.join("model.ckpt"))?;
            let mut report = RunReport::new(&self.plan, std::slice::from_ref(&data));
            report.add_ocnn(std::slice::from_ref(&o));
            write_json(&self.result_path("ocnn", Some(snr)), &report)?;
            println!(
                "{}: trial {} val_loss {:.4} test accuracy {:.4} ({} trials, {} epochs, {:.0}s)\n  {}",
                snr_tag(snr),
                o.recommendation.trial,
                o.recommendation.val_loss,
                o.run.test.accuracy,
                o.recommendation.num_trials,
                o.recommendation.total_epochs,
                start.elapsed().as_secs_f64(),
                o.run.built.spec.summary()
            );
        }
        Ok(())
    }

    fn baseline(&self, n: Option<Vec<usize>>) -> Result<()> {
        let n_values = n.unwrap_or_else(|| self.plan.bcnn_n.clone());
        for &snr in &self.plan.snrs_db {
            let data = self.data(snr)?;
            let runs = run_bcnn_sweep(&self.plan, std::slice::from_ref(&data), &n_values)?;
            for r in &runs {
                println!(
                    "{} {}: test accuracy {:.4} after {} epochs",
                    snr_tag(snr),
                    r.model_id,
                    r.test.accuracy,
                    r.model.epochs_consumed()
                );
            }
            let mut report = RunReport::new(&self.plan, std::slice::from_ref(&data));
            report.add_models(&runs);
            write_json(&self.result_path("bcnn", Some(snr)), &report)?;
        }
        Ok(())
    }

    fn load_ocnn(&self, data: &SnrData) -> Result<ModelRun> {
        let dir = self.search_dir(data.snr_db);
        let rec: Recommendation = read_json(&dir.join("recommendation.json"))
            .with_context(|| format!("no search result for {}; run `iqband hyperopt` first", snr_tag(data.snr_db)))?;
        let model = load_checkpoint(dir.join("model.ckpt"))?;
        Ok(ModelRun::restore("ocnn", &rec.config, model, data)?)
    }

    fn generalize(&self) -> Result<()> {
        if self.plan.snrs_db.len() < 2 {
            bail!("generalization needs at least two SNR points");
        }
        let data = self
            .plan
            .snrs_db
            .iter()
            .map(|&s| self.data(s))
            .collect::<Result<Vec<_>>>()?;
        let mut by_setting: [Vec<ModelRun>; 2] = [Vec::new(), Vec::new()];
        let mut report = RunReport::new(&self.plan, &data);
        for d in &data {
            let winner = self.load_ocnn(d)?;
            let twin = train_twin(&self.plan, &winner, d, !winner.config.normalize)?;
            report.add_models(std::slice::from_ref(&twin));
            let norm = winner.config.normalize as usize;
            by_setting[norm].push(winner);
            by_setting[1 - norm].push(twin);
        }
        for normalize in [true, false] {
            let m = run_generalization_matrix(&by_setting[normalize as usize], &data, normalize)?;
            for s in &m.summaries {
                println!(
                    "normalize={normalize} train {}: all-SNR {}, adjacent {}",
                    snr_tag(s.train_snr_db),
                    fmt_acc(s.all_snr_accuracy),
                    fmt_acc(s.adjacent_snr_accuracy)
                );
            }
            report.generalization.push(m);
        }
        write_json(&self.result_path("generalization", None), &report)
    }

    fn report(&self) -> Result<()> {
        let dir = self.out.join("results");
        let mut paths: Vec<_> = fs::read_dir(&dir)
            .with_context(|| format!("no results under {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut report = RunReport::new(&self.plan, &[]);
        for p in &paths {
            report.merge(read_json(p)?);
        }
        report.ocnn_settings.sort_by(|a, b| a.train_snr_db.total_cmp(&b.train_snr_db));
        for p in emit_reports(&report, self.out.join("report"))? {
            println!("{}", p.display());
        }
        Ok(())
    }
}
