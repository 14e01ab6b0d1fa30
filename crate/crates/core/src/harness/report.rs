use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{dataset_hashes, ExperimentPlan, GeneralizationMatrix, ModelRun, OcnnRun, ResultRow, SnrData};
use crate::error::Result;

/// File-name friendly SNR label, e.g. `snr-5`, `snr+10`.
pub fn snr_tag(db: f64) -> String {
    format!("snr{db:+}")
}

/// One row of the per-SNR OCNN settings table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingsRow {
    pub train_snr_db: f64,
    pub n: usize,
    pub w: usize,
    pub conv_blocks: usize,
    pub fc_layers: usize,
    pub normalize: bool,
    pub optimizer: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub trial: usize,
    pub val_loss: f64,
    pub search_epochs: usize,
    pub num_trials: usize,
    pub test_accuracy: f64,
    pub arch: String,
}

impl SettingsRow {
    pub fn from_ocnn(o: &OcnnRun) -> Self {
        let c = &o.run.config;
        Self {
            train_snr_db: o.run.train_snr_db,
            n: c.streams,
            w: c.window,
            conv_blocks: c.conv_blocks.len(),
            fc_layers: c.fc_layers.len(),
            normalize: c.normalize,
            optimizer: o.run.built.learn.optimizer.to_string(),
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            trial: o.recommendation.trial,
            val_loss: o.recommendation.val_loss,
            search_epochs: o.recommendation.total_epochs,
            num_trials: o.recommendation.num_trials,
            test_accuracy: o.run.test.accuracy,
            arch: o.run.built.spec.summary(),
        }
    }
}

/// Everything the report files are rendered from. Contains no timings, so a
/// seeded re-run renders byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub plan: ExperimentPlan,
    pub dataset_hashes: BTreeMap<String, String>,
    pub ocnn_settings: Vec<SettingsRow>,
    pub rows: Vec<ResultRow>,
    pub generalization: Vec<GeneralizationMatrix>,
}

impl RunReport {
    pub fn new(plan: &ExperimentPlan, data: &[SnrData]) -> Self {
        Self {
            plan: plan.clone(),
            dataset_hashes: dataset_hashes(data),
            ocnn_settings: Vec::new(),
            rows: Vec::new(),
            generalization: Vec::new(),
        }
    }

    pub fn add_ocnn(&mut self, runs: &[OcnnRun]) {
        for o in runs {
            self.ocnn_settings.push(SettingsRow::from_ocnn(o));
            self.rows.push(o.run.row(o.run.train_snr_db, &o.run.test));
        }
    }

    pub fn add_models(&mut self, runs: &[ModelRun]) {
        self.rows.extend(runs.iter().map(|r| r.row(r.train_snr_db, &r.test)));
    }

    /// Merges another partial report from the same plan.
    pub fn merge(&mut self, other: RunReport) {
        self.dataset_hashes.extend(other.dataset_hashes);
        self.ocnn_settings.extend(other.ocnn_settings);
        self.rows.extend(other.rows);
        self.generalization.extend(other.generalization);
    }

    fn sorted_rows(&self) -> Vec<&ResultRow> {
        let mut rows: Vec<_> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            a.model
                .cmp(&b.model)
                .then(a.train_snr_db.total_cmp(&b.train_snr_db))
                .then(a.test_snr_db.total_cmp(&b.test_snr_db))
        });
        rows
    }
}

fn accuracy_csv(r: &RunReport) -> String {
    let mut s = String::from("model,train_snr_db,test_snr_db,n,w,accuracy,loss\n");
    for row in r.sorted_rows() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6}",
            row.model, row.train_snr_db, row.test_snr_db, row.n, row.w, row.accuracy, row.loss
        );
    }
    s
}

fn settings_csv(r: &RunReport) -> String {
    let mut s = String::from(
        "train_snr_db,n,w,conv_blocks,fc_layers,normalize,optimizer,learning_rate,batch_size,trial,val_loss,search_epochs,num_trials,test_accuracy,arch\n",
    );
    for x in &r.ocnn_settings {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:e},{},{},{:.6},{},{},{:.6},\"{}\"",
            x.train_snr_db,
            x.n,
            x.w,
            x.conv_blocks,
            x.fc_layers,
            x.normalize,
            x.optimizer,
            x.learning_rate,
            x.batch_size,
            x.trial,
            x.val_loss,
            x.search_epochs,
            x.num_trials,
            x.test_accuracy,
            x.arch
        );
    }
    s
}

fn generalization_csv(r: &RunReport) -> (String, String) {
    let mut cells = String::from("normalize,train_snr_db,test_snr_db,accuracy,loss\n");
    let mut summary = String::from("normalize,train_snr_db,all_snr_accuracy,adjacent_snr_accuracy\n");
    for m in &r.generalization {
        for c in &m.cells {
            let _ = writeln!(
                cells,
                "{},{},{},{:.6},{:.6}",
                m.normalize, c.train_snr_db, c.test_snr_db, c.accuracy, c.loss
            );
        }
        for g in &m.summaries {
            let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            let _ = writeln!(
                summary,
                "{},{},{},{}",
                m.normalize,
                g.train_snr_db,
                cell(g.all_snr_accuracy),
                cell(g.adjacent_snr_accuracy)
            );
        }
    }
    (cells, summary)
}

/// Whitespace-separated accuracy-vs-SNR series, one column per model.
fn plot_data(r: &RunReport) -> String {
    let mut models: Vec<&str> = r.rows.iter().map(|x| x.model.as_str()).collect();
    models.sort_unstable();
    models.dedup();
    let mut snrs: Vec<f64> = r.rows.iter().map(|x| x.test_snr_db).collect();
    snrs.sort_by(f64::total_cmp);
    snrs.dedup();
    let mut s = format!("# snr_db {}\n", models.join(" "));
    for snr in snrs {
        let _ = write!(s, "{snr}");
        for m in &models {
            match r
                .rows
                .iter()
                .find(|x| x.model == *m && x.test_snr_db == snr && x.train_snr_db == snr)
            {
                Some(x) => {
                    let _ = write!(s, " {:.6}", x.accuracy);
                }
                None => s.push_str(" nan"),
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct Summary<'a> {
    report: &'a RunReport,
    files: BTreeMap<&'a str, String>,
}

/// Writes the CSV tables, plot data and `summary.json` (the report plus a
/// SHA-256 of every other file) into `dir`, returning the written paths.
pub fn emit_reports(report: &RunReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (gen_cells, gen_summary) = generalization_csv(report);
    let files = [
        ("accuracy.csv", accuracy_csv(report)),
        ("ocnn_settings.csv", settings_csv(report)),
        ("generalization.csv", gen_cells),
        ("generalization_summary.csv", gen_summary),
        ("accuracy_vs_snr.dat", plot_data(report)),
    ];
    let mut written = Vec::new();
    let mut hashes = BTreeMap::new();
    for (name, body) in &files {
        let path = dir.join(name);
        fs::write(&path, body)?;
        hashes.insert(*name, hex(&Sha256::digest(body.as_bytes())));
        written.push(path);
    }
    let summary = Summary {
        report,
        files: hashes,
    };
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")?;
    written.push(path);
    Ok(written)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
