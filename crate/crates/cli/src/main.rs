// SPDX-License-Identifier: MIT OR Apache-2.0

//! `saeval` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use saeval::attribution::{LatentSet, SelectionMode};
use saeval::judge::{build_judge_prompt, judge_latents, EvidenceProvider, Judge, JudgeConfig, StoreEvidence};
use saeval::probes::{probe_accuracy, save_probe, train_probe, ProbeConfig, ProbeRole, ProbeTag};
use saeval::report::{emit_report, read_runs, ReportFormat};
use saeval::sae::{load_sae, save_sae, train_sae, SaeKind, SaeModel, TrainConfig};
use saeval::scr::{run_scr, ScrConfig, ScrMethod};
use saeval::store::{
    generate_synthetic, load_store, save_store, split_train_eval, GroundTruth, ScrPair, SyntheticSpec,
};
use saeval::sweep::{run_sweep, SweepConfig};
use saeval::tpp::{run_tpp, TppConfig};
use saeval::{Error, Result};

#[derive(Parser)]
#[command(name = "saeval", version, about = "Evaluate sparse autoencoders with SCR and TPP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic activation store.
    Gen(GenArgs),
    /// Train an SAE (or build an oracle or random one) and save checkpoints.
    TrainSae(TrainSaeArgs),
    /// Train a linear probe on a store.
    TrainProbe(TrainProbeArgs),
    /// Run an evaluation.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Ask the judge about specific latents.
    Judge(JudgeArgs),
    /// Merge run reports into one JSON or CSV file.
    Report(ReportArgs),
    /// Run a full sweep from a config file.
    Sweep(SweepArgs),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Spurious correlation removal.
    Scr(ScrArgs),
    /// Targeted probe perturbation.
    Tpp(TppArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Generator spec (JSON); the desk suite when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the ground-truth features (needed for oracle SAEs).
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Standard,
    Topk,
}

#[derive(Args)]
struct TrainSaeArgs {
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "topk")]
    kind: KindArg,
    /// Active latents for TopK.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Training settings (JSON); the desk preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    l1: Option<f64>,
    #[arg(long)]
    expansion: Option<usize>,
    #[arg(long)]
    samples: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Build the oracle SAE from a ground-truth file instead of training.
    #[arg(long, conflicts_with = "store")]
    oracle: Option<PathBuf>,
    /// Oracle dictionary size.
    #[arg(long, default_value_t = 256)]
    dict_size: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainProbeArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    attribute: String,
    #[arg(long)]
    positive: String,
    /// Negative class; every other class (one-vs-rest) when absent.
    #[arg(long)]
    negative: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Spurious,
    Judge,
}

#[derive(Args)]
struct ScrArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    sae: PathBuf,
    /// SCR settings (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Class pairs (JSON list).
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Comma-separated latent counts.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Judge settings (JSON); the mock judge when absent.
    #[arg(long)]
    judge_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TppArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    sae: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    attribute: Option<String>,
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Filter latents with the judge.
    #[arg(long)]
    judge: bool,
    #[arg(long)]
    judge_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct JudgeArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    sae: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    latents: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    concepts: Vec<String>,
    #[arg(long)]
    judge_config: Option<PathBuf>,
    /// Print the prompts instead of querying the judge.
    #[arg(long)]
    print_prompt: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn read_json_or<T: DeserializeOwned>(path: Option<&PathBuf>, default: T) -> Result<T> {
    path.map_or(Ok(default), |p| read_json(p))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn judge_from(path: Option<&PathBuf>, attributes: &[saeval::store::Attribute]) -> Result<Judge> {
    let cfg: JudgeConfig = read_json_or(path, JudgeConfig::default())?;
    Judge::from_config(&cfg, attributes)
}

fn gen(a: GenArgs) -> Result<()> {
    let mut spec: SyntheticSpec = read_json_or(a.spec.as_ref(), SyntheticSpec::desk_suite(0))?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.samples {
        spec.num_samples = n;
    }
    let (store, truth) = generate_synthetic(&spec)?;
    save_store(&store, &a.out)?;
    if let Some(p) = a.truth_out {
        write_json(&truth, &p)?;
    }
    eprintln!(
        "stage=gen samples={} dim={} out={}",
        store.len(),
        store.dim(),
        a.out.display()
    );
    Ok(())
}

fn train_sae_cmd(a: TrainSaeArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let save = |m: &SaeModel| -> Result<()> {
        let path = a.out_dir.join(format!("{}.bin", m.id().replace(':', "_")));
        save_sae(m, &path)?;
        println!("{}", path.display());
        Ok(())
    };
    if let Some(truth) = &a.oracle {
        let truth: GroundTruth = read_json(truth)?;
        return save(&SaeModel::oracle(&truth, a.dict_size, a.seed)?);
    }
    let store_path = a
        .store
        .ok_or_else(|| Error::Config("--store or --oracle is required".into()))?;
    let store = load_store(&store_path)?;
    let mut cfg: TrainConfig = read_json_or(a.config.as_ref(), TrainConfig::desk())?;
    if let Some(l1) = a.l1 {
        cfg.l1_coefficient = l1;
    }
    if let Some(x) = a.expansion {
        cfg.expansion_factor = x;
    }
    if let Some(n) = a.samples {
        cfg.num_samples = n;
    }
    let kind = match a.kind {
        KindArg::Standard => SaeKind::Standard,
        KindArg::Topk => SaeKind::TopK { k: a.k },
    };
    for c in train_sae(&store, &kind, &cfg, a.seed)? {
        save(&c.model)?;
    }
    Ok(())
}

fn train_probe_cmd(a: TrainProbeArgs) -> Result<()> {
    let store = load_store(&a.store)?;
    let cfg: ProbeConfig = read_json_or(a.config.as_ref(), ProbeConfig::default())?;
    let (batch, tag) = match &a.negative {
        Some(neg) => {
            let mut ids = store.samples_with(&a.attribute, &a.positive)?;
            ids.extend(store.samples_with(&a.attribute, neg)?);
            ids.sort_unstable();
            (
                store.binary_batch(&ids, &a.attribute, &a.positive)?,
                ProbeTag::new(&a.attribute, &a.positive, neg, ProbeRole::Custom),
            )
        }
        None => {
            let part = saeval::store::partition_tpp(&store, &a.attribute, &a.positive, store.len())?;
            (
                part.batch(&store)?,
                ProbeTag::new(&a.attribute, &a.positive, "rest", ProbeRole::OneVsRest),
            )
        }
    };
    let (train, eval) = split_train_eval(batch.len(), 0.8, a.seed);
    let probe = train_probe(&batch.select(&train), &cfg, a.seed, tag)?;
    let acc = probe_accuracy(&probe, &batch.select(&eval))?;
    save_probe(&probe, &a.out)?;
    println!("{{\"probe\":\"{}\",\"heldout_accuracy\":{acc}}}", probe.trained_on.id());
    Ok(())
}

fn eval_scr(a: ScrArgs) -> Result<()> {
    let store = load_store(&a.store)?;
    let sae = load_sae(&a.sae)?;
    let mut cfg: ScrConfig = read_json_or(a.config.as_ref(), ScrConfig::default())?;
    if let Some(p) = &a.pairs {
        cfg.pairs = read_json::<Vec<ScrPair>>(p)?;
    }
    if let Some(m) = a.method {
        cfg.method = match m {
            MethodArg::Spurious => ScrMethod::SpuriousInformed,
            MethodArg::Judge => ScrMethod::JudgeFiltered,
        };
    }
    if let Some(n) = a.n {
        cfg.n_sweep = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let judge_cfg: JudgeConfig = read_json_or(a.judge_config.as_ref(), JudgeConfig::default())?;
    let judge = match cfg.method {
        ScrMethod::JudgeFiltered => Some(Judge::from_config(&judge_cfg, store.attributes())?),
        ScrMethod::SpuriousInformed => None,
    };
    let report = run_scr(
        &store,
        &sae,
        &cfg,
        judge.as_ref().map(|j| (j, judge_cfg.require_spurious_related)),
    )?;
    write_json(&report, &a.out)
}

fn eval_tpp(a: TppArgs) -> Result<()> {
    let store = load_store(&a.store)?;
    let sae = load_sae(&a.sae)?;
    let mut cfg: TppConfig = read_json_or(a.config.as_ref(), TppConfig::default())?;
    if let Some(attr) = a.attribute {
        cfg.attribute = attr;
    }
    if let Some(n) = a.n {
        cfg.n_sweep = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let judge = if a.judge {
        Some(judge_from(a.judge_config.as_ref(), store.attributes())?)
    } else {
        None
    };
    let report = run_tpp(&store, &sae, &cfg, judge.as_ref())?;
    write_json(&report, &a.out)
}

fn judge_cmd(a: JudgeArgs) -> Result<()> {
    let store = load_store(&a.store)?;
    let sae = load_sae(&a.sae)?;
    let evidence = StoreEvidence::new(&sae, &store)?;
    if a.print_prompt {
        for &l in &a.latents {
            println!("{}", build_judge_prompt(&evidence.evidence(l)?, &a.concepts).text());
        }
        return Ok(());
    }
    let judge = judge_from(a.judge_config.as_ref(), store.attributes())?;
    let set = LatentSet {
        scores: vec![0.0; a.latents.len()],
        n: a.latents.len(),
        indices: a.latents,
        mode: SelectionMode::Absolute,
    };
    let verdicts = judge_latents(&set, &evidence, &a.concepts, &judge)?;
    match &a.out {
        Some(p) => write_json(&verdicts, p),
        None => {
            println!("{}", serde_json::to_string_pretty(&verdicts)?);
            Ok(())
        }
    }
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let records = read_runs(&a.input)?;
    let format = match a.format {
        FormatArg::Json => ReportFormat::Json,
        FormatArg::Csv => ReportFormat::Csv,
    };
    emit_report(&records, format, &a.out)
}

/// Returns whether every combination succeeded.
fn sweep_cmd(a: SweepArgs) -> Result<bool> {
    let mut cfg = SweepConfig::load(&a.config)?;
    if let Some(w) = a.workers {
        cfg.workers = Some(w);
    }
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    if let Some(n) = a.n {
        cfg.n_sweep = Some(n);
    }
    if let Some(s) = a.seed {
        cfg.seed = Some(s);
    }
    let outcome = run_sweep(&cfg)?;
    for f in &outcome.failures {
        eprintln!("stage=failed combination={} error={:?}", f.combination, f.error);
    }
    eprintln!(
        "stage=done records={} failures={} out={}",
        outcome.records.len(),
        outcome.failures.len(),
        cfg.output_dir.display()
    );
    Ok(outcome.succeeded())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a).map(|_| true),
        Command::TrainSae(a) => train_sae_cmd(a).map(|_| true),
        Command::TrainProbe(a) => train_probe_cmd(a).map(|_| true),
        Command::Eval(EvalCommand::Scr(a)) => eval_scr(a).map(|_| true),
        Command::Eval(EvalCommand::Tpp(a)) => eval_tpp(a).map(|_| true),
        Command::Judge(a) => judge_cmd(a).map(|_| true),
        Command::Report(a) => report_cmd(a).map(|_| true),
        Command::Sweep(a) => sweep_cmd(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
