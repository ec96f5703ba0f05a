// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluate a suite of SAEs end to end from one configuration file.
//!
//! Every (SAE, checkpoint) combination yields one [`EvalRecord`]. Output
//! files depend only on the configuration, store and checkpoint bytes and the
//! judge cache: never on the worker count or the output location.
//!
//! Layout of `output_dir`:
//!
//! ```text
//! store.bin                   generated store (synthetic configs only)
//! checkpoints/<idx>_<id>.bin  every evaluated SAE not loaded from disk
//! runs/<k>-<id>.json          one single-record report per combination
//! report.json                 all records
//! report.csv                  all records, one row per (record, N, metric)
//! failures.json               failed combinations (empty list on success)
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::read_file;
use crate::error::{Error, Result};
use crate::judge::{Judge, JudgeConfig};
use crate::report::{emit_report, EvalRecord, Evaluations, Provenance, ReportFormat};
use crate::sae::{load_sae, save_sae, sparsity_metrics, train_sae, SaeKind, SaeModel, TrainConfig};
use crate::scr::{run_scr, ScrConfig, ScrMethod};
use crate::store::{generate_synthetic, load_store, save_store, ActivationStore, GroundTruth, SyntheticSpec};
use crate::tpp::{run_tpp, TppConfig};

/// Where the SAEs of a sweep come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum SaeSource {
    /// A checkpoint file.
    Checkpoint { path: PathBuf },
    /// The ground-truth dictionary of a synthetic store.
    Oracle {
        dict_size: usize,
        #[serde(default)]
        seed: u64,
    },
    /// An untrained SAE.
    Random {
        kind: SaeKind,
        expansion_factor: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Train on the sweep's store; every listed checkpoint is evaluated.
    Train {
        kind: SaeKind,
        #[serde(default = "TrainConfig::desk")]
        train: TrainConfig,
        #[serde(default)]
        seed: u64,
        /// Subset of `train.checkpoint_fractions` to evaluate; all when absent.
        #[serde(default)]
        fractions: Option<Vec<f64>>,
    },
}

/// A full sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Store file; exclusive with `synthetic`.
    #[serde(default)]
    pub store: Option<PathBuf>,
    /// Generate the store instead of loading it.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    pub saes: Vec<SaeSource>,
    /// SCR settings; SCR is skipped when absent. `method` is ignored in
    /// favour of `scr_methods`.
    #[serde(default)]
    pub scr: Option<ScrConfig>,
    #[serde(default = "default_scr_methods")]
    pub scr_methods: Vec<ScrMethod>,
    /// TPP settings; TPP is skipped when absent.
    #[serde(default)]
    pub tpp: Option<TppConfig>,
    /// Also run judge-filtered TPP.
    #[serde(default)]
    pub tpp_judge: bool,
    /// Needed when any judge-based method is enabled.
    #[serde(default)]
    pub judge: Option<JudgeConfig>,
    /// Overrides the N sweep of both SCR and TPP.
    #[serde(default)]
    pub n_sweep: Option<Vec<usize>>,
    /// Overrides the probe seed of both SCR and TPP.
    #[serde(default)]
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    /// Worker pool size; all logical cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Stamp records with wall-clock start and end times. Off by default
    /// because it makes reports differ between runs.
    #[serde(default)]
    pub timestamps: bool,
}

fn default_scr_methods() -> Vec<ScrMethod> {
    vec![ScrMethod::SpuriousInformed]
}

impl SweepConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_file(path.as_ref())?)
    }

    /// Check the configuration; every referenced path must exist.
    pub fn validate(&self) -> Result<()> {
        match (&self.store, &self.synthetic) {
            (Some(p), None) if !p.is_file() => {
                return Err(Error::config(format!("store {} does not exist", p.display())));
            }
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::config("exactly one of `store` and `synthetic` must be set")),
        }
        if self.saes.is_empty() {
            return Err(Error::config("the sweep lists no SAEs"));
        }
        for s in &self.saes {
            match s {
                SaeSource::Checkpoint { path } if !path.is_file() => {
                    return Err(Error::config(format!("checkpoint {} does not exist", path.display())));
                }
                SaeSource::Oracle { .. } if self.synthetic.is_none() => {
                    return Err(Error::config("an oracle SAE needs a `synthetic` store"));
                }
                SaeSource::Train {
                    train,
                    fractions: Some(f),
                    ..
                } => {
                    if let Some(x) = f.iter().find(|x| !train.checkpoint_fractions.contains(x)) {
                        return Err(Error::config(format!("fraction {x} is not a configured checkpoint")));
                    }
                }
                _ => {}
            }
        }
        if self.scr.is_none() && self.tpp.is_none() {
            return Err(Error::config("enable at least one of `scr` and `tpp`"));
        }
        let needs_judge =
            self.tpp_judge || (self.scr.is_some() && self.scr_methods.contains(&ScrMethod::JudgeFiltered));
        if needs_judge && self.judge.is_none() {
            return Err(Error::config("judge-based methods need a `judge` section"));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the configuration with the output location and pool size
    /// cleared, so those two never change the reports.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.workers = None;
        Ok(sha256_hex(&serde_json::to_vec(&c)?))
    }
}

/// A combination that could not be evaluated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub combination: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub records: Vec<EvalRecord>,
    pub failures: Vec<Failure>,
}

impl SweepOutcome {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_file(path)?))
}

fn log(stage: &str, combination: &str, started: Instant) {
    eprintln!(
        "stage={stage} combination={combination} duration_ms={}",
        started.elapsed().as_millis()
    );
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// One SAE to evaluate with the path its provenance should name.
struct Job {
    label: String,
    model: SaeModel,
    /// Path as recorded in reports: the configured path or a path relative
    /// to `output_dir`.
    recorded_path: String,
    digest: String,
}

fn persisted(model: SaeModel, label: String, out: &Path) -> Result<Job> {
    let rel = format!("checkpoints/{}.bin", file_stem(&label));
    let path = out.join(&rel);
    save_sae(&model, &path)?;
    Ok(Job {
        label,
        recorded_path: rel,
        digest: file_digest(&path)?,
        model,
    })
}

fn build_jobs(
    source: &SaeSource,
    index: usize,
    store: &ActivationStore,
    truth: Option<&GroundTruth>,
    out: &Path,
) -> Result<Vec<Job>> {
    let label = |m: &SaeModel| format!("{index}:{}", m.id());
    match source {
        SaeSource::Checkpoint { path } => {
            let model = load_sae(path)?;
            Ok(vec![Job {
                label: label(&model),
                recorded_path: path.display().to_string(),
                digest: file_digest(path)?,
                model,
            }])
        }
        SaeSource::Oracle { dict_size, seed } => {
            let truth = truth.ok_or_else(|| Error::config("an oracle SAE needs a synthetic store"))?;
            let model = SaeModel::oracle(truth, *dict_size, *seed)?;
            Ok(vec![persisted(model.clone(), label(&model), out)?])
        }
        SaeSource::Random {
            kind,
            expansion_factor,
            seed,
        } => {
            let mut model = SaeModel::random_init(kind.clone(), store.dim(), *expansion_factor, *seed)?;
            model.info.name = "random".into();
            Ok(vec![persisted(model.clone(), label(&model), out)?])
        }
        SaeSource::Train {
            kind,
            train,
            seed,
            fractions,
        } => {
            let started = Instant::now();
            let checkpoints = train_sae(store, kind, train, *seed)?;
            log("train", &format!("{index}:{}-s{seed}", kind.tag()), started);
            checkpoints
                .into_iter()
                .filter(|c| fractions.as_ref().is_none_or(|f| f.contains(&c.fraction)))
                .map(|c| persisted(c.model.clone(), label(&c.model), out))
                .collect()
        }
    }
}

/// Wall-clock time as Unix seconds.
fn unix_seconds() -> String {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
        .to_string()
}

struct Context<'a> {
    config: &'a SweepConfig,
    store: &'a ActivationStore,
    judge: Option<&'a Judge>,
    store_path: String,
    store_digest: String,
    config_digest: String,
}

fn evaluate(ctx: &Context<'_>, job: &Job) -> Result<EvalRecord> {
    let started_at = ctx.config.timestamps.then(unix_seconds);
    let started = Instant::now();
    let cfg = ctx.config;
    let metrics = sparsity_metrics(&job.model, ctx.store)?;
    let mut evals = Evaluations::default();
    if let Some(scr) = &cfg.scr {
        let mut scr = scr.clone();
        if let Some(n) = &cfg.n_sweep {
            scr.n_sweep = n.clone();
        }
        if let Some(s) = cfg.seed {
            scr.seed = s;
        }
        let require_spurious = cfg.judge.as_ref().is_some_and(|j| j.require_spurious_related);
        for method in &cfg.scr_methods {
            scr.method = *method;
            let report = run_scr(ctx.store, &job.model, &scr, ctx.judge.map(|j| (j, require_spurious)))?;
            match method {
                ScrMethod::SpuriousInformed => evals.scr_spurious = Some(report),
                ScrMethod::JudgeFiltered => evals.scr_judge = Some(report),
            }
        }
    }
    if let Some(tpp) = &cfg.tpp {
        let mut tpp = tpp.clone();
        if let Some(n) = &cfg.n_sweep {
            tpp.n_sweep = n.clone();
        }
        if let Some(s) = cfg.seed {
            tpp.seed = s;
        }
        evals.tpp = Some(run_tpp(ctx.store, &job.model, &tpp, None)?);
        if cfg.tpp_judge {
            evals.tpp_judge = Some(run_tpp(ctx.store, &job.model, &tpp, ctx.judge)?);
        }
    }
    let provenance = Provenance {
        store: ctx.store_path.clone(),
        store_sha256: ctx.store_digest.clone(),
        sae: job.recorded_path.clone(),
        sae_sha256: job.digest.clone(),
        config_sha256: ctx.config_digest.clone(),
    };
    let mut record = EvalRecord::build(&job.model, metrics, provenance, evals);
    record.started_at = started_at;
    record.finished_at = cfg.timestamps.then(unix_seconds);
    log("evaluate", &job.label, started);
    Ok(record)
}

/// Run every combination of `config` on a pool of `config.workers` threads
/// and write the report files. Failed combinations are listed in the outcome
/// and in `failures.json`; the others are still reported.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepOutcome> {
    config.validate()?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(out, e))?;
    std::fs::create_dir_all(out.join("runs")).map_err(|e| Error::io(out, e))?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = config.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;

    let started = Instant::now();
    let (store, truth, store_path) = match (&config.store, &config.synthetic) {
        (Some(p), _) => (load_store(p)?, None, p.display().to_string()),
        (None, Some(spec)) => {
            let (store, truth) = generate_synthetic(spec)?;
            save_store(&store, out.join("store.bin"))?;
            (store, Some(truth), "store.bin".to_owned())
        }
        (None, None) => unreachable!("validated"),
    };
    let store_digest = file_digest(&config.store.clone().unwrap_or_else(|| out.join("store.bin")))?;
    log("store", &store_path, started);

    let judge = match &config.judge {
        Some(j) => Some(Judge::from_config(j, store.attributes())?),
        None => None,
    };
    let ctx = Context {
        config,
        store: &store,
        judge: judge.as_ref(),
        store_path,
        store_digest,
        config_digest: config.digest()?,
    };

    let built: Vec<(usize, Result<Vec<Job>>)> = pool.install(|| {
        config
            .saes
            .par_iter()
            .enumerate()
            .map(|(i, s)| (i, build_jobs(s, i, &store, truth.as_ref(), out)))
            .collect()
    });
    let mut failures = Vec::new();
    let mut jobs = Vec::new();
    for (i, r) in built {
        match r {
            Ok(js) => jobs.extend(js),
            Err(e) => failures.push(Failure {
                combination: format!("{i}:{}", source_label(&config.saes[i])),
                error: e.to_string(),
            }),
        }
    }

    let results: Vec<Result<EvalRecord>> = pool.install(|| jobs.par_iter().map(|j| evaluate(&ctx, j)).collect());
    let mut records = Vec::new();
    for (k, (job, r)) in jobs.iter().zip(results).enumerate() {
        match r {
            Ok(rec) => {
                let path = out.join("runs").join(format!("{k:03}-{}.json", file_stem(&rec.sae_id)));
                emit_report(std::slice::from_ref(&rec), ReportFormat::Json, path)?;
                records.push(rec);
            }
            Err(e) => failures.push(Failure {
                combination: job.label.clone(),
                error: e.to_string(),
            }),
        }
    }
    if !records.is_empty() {
        emit_report(&records, ReportFormat::Json, out.join("report.json"))?;
        emit_report(&records, ReportFormat::Csv, out.join("report.csv"))?;
    }
    let mut fail_bytes = serde_json::to_vec_pretty(&failures)?;
    fail_bytes.push(b'\n');
    crate::container::write_file_atomic(&out.join("failures.json"), &fail_bytes)?;
    Ok(SweepOutcome { records, failures })
}

fn source_label(s: &SaeSource) -> String {
    match s {
        SaeSource::Checkpoint { path } => path.display().to_string(),
        SaeSource::Oracle { seed, .. } => format!("oracle-s{seed}"),
        SaeSource::Random { kind, seed, .. } => format!("random-{}-s{seed}", kind.tag()),
        SaeSource::Train { kind, seed, .. } => format!("train-{}-s{seed}", kind.tag()),
    }
}
