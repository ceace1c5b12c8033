// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end. Every subcommand writes its outputs and a
//! manifest into `<out-dir>/<subcommand>-<hash>/` and prints that path.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::concept::{exact_match, planted_concept_tasks, sweep_layers};
use crate::data::{self, Dataset, DEFAULT_PROMPT_LEN};
use crate::error::{Error, Result};
use crate::experts::{identify, select_samples, ExpertSet, SetLabel, DEFAULT_SAMPLE_BUDGET, DOMAIN_TAU};
use crate::intervene::{
    run_intervened_batch, InterventionConfig, InterventionPreset, PreparedIntervention, Strategy,
    DEFAULT_DELTA_STD,
};
use crate::model::{HookBundle, Model, PlantedSpec, ToyMoEConfig};
use crate::report::{csv, merge_runs, RunDir};
use crate::routing::RoutingRecord;
use crate::stats::{divergence_profile, FrequencyAccumulator, GiniAccumulator, PromptRouting};
use crate::trace::{open_trace, validate, TraceHeader, TraceWriter};

#[derive(Debug, Parser)]
#[command(name = "moe-lens", version, about = "MoE routing analysis and interventions")]
pub struct Cli {
    /// Root under which run directories are created.
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the toy model over a generated dataset and write a trace.
    Simulate(SimulateArgs),
    /// Per-layer statistics from traces.
    Analyze(AnalyzeArgs),
    /// Threshold activation-frequency differences into an expert set.
    Identify(IdentifyArgs),
    /// Run the toy model with a routing intervention.
    Intervene(InterveneArgs),
    /// Layer sweep of the hidden-state concept edit.
    Concept(ConceptArgs),
    /// Scan a trace and report every violation.
    ValidateTrace(ValidateArgs),
    /// Merge run directories into one JSON document.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Built-in preset or `<name>.json` under `$MOE_LENS_PRESET_DIR`.
    #[arg(long)]
    pub preset: String,
    #[arg(long)]
    pub seed: u64,
    /// Planted specification (JSON); the standard one when omitted.
    #[arg(long)]
    pub planted_spec: Option<PathBuf>,
    /// Use a randomly initialized model instead of a planted one.
    #[arg(long, conflicts_with = "planted_spec")]
    pub unplanted: bool,
}

impl ModelArgs {
    fn build(&self) -> Result<Model> {
        let config = ToyMoEConfig::preset(&self.preset, self.seed)?;
        if self.unplanted {
            return Model::build(config);
        }
        let spec = self.spec(&config)?;
        Model::planted(config, spec)
    }

    fn spec(&self, config: &ToyMoEConfig) -> Result<PlantedSpec> {
        match &self.planted_spec {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Ok(serde_json::from_str(&text)?)
            }
            None => Ok(PlantedSpec::standard(config)),
        }
    }

    fn inputs(&self) -> Vec<PathBuf> {
        self.planted_spec.iter().cloned().collect()
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, default_value = "domain-text")]
    pub dataset: Dataset,
    #[arg(long)]
    pub num_samples: usize,
    #[arg(long, default_value_t = DEFAULT_PROMPT_LEN)]
    pub prompt_len: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub samples: SampleArgs,
    /// Omit router logits from the trace.
    #[arg(long)]
    pub no_logits: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeKind {
    Gini,
    Freq,
    Jsd,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub kind: AnalyzeKind,
    #[arg(long)]
    pub trace: PathBuf,
    /// Image-side trace paired with `--trace` by sample id (jsd only).
    #[arg(long)]
    pub paired: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelArg {
    Domain,
    Visual,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    /// Trace of the specialized data (domain or image).
    #[arg(long)]
    pub domain: PathBuf,
    /// Trace of the reference data (general or text).
    #[arg(long)]
    pub general: PathBuf,
    #[arg(long, default_value_t = DOMAIN_TAU)]
    pub tau: f64,
    #[arg(long, value_enum, default_value = "domain")]
    pub label: LabelArg,
    /// Samples drawn from each trace.
    #[arg(long, default_value_t = DEFAULT_SAMPLE_BUDGET)]
    pub sample_budget: usize,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InterveneArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub samples: SampleArgs,
    /// Expert set JSON from `identify`.
    #[arg(long, visible_alias = "experts")]
    pub targets: PathBuf,
    #[arg(long, default_value = "soft")]
    pub strategy: Strategy,
    /// Defaults to the preset's configured strength.
    #[arg(long, conflicts_with = "lambda_sweep")]
    pub lambda: Option<f64>,
    /// Comma-separated strengths, one run each.
    #[arg(long, value_delimiter = ',')]
    pub lambda_sweep: Option<Vec<f64>>,
    /// Inclusive `lo:hi`; defaults to the preset's configured layers.
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long, default_value_t = DEFAULT_DELTA_STD)]
    pub delta_std: f64,
}

#[derive(Debug, Args)]
pub struct ConceptArgs {
    #[arg(long)]
    pub preset: String,
    #[arg(long)]
    pub seed: u64,
    /// Planted specification (JSON); the standard one with no modality
    /// offset when omitted.
    #[arg(long)]
    pub planted_spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Exit nonzero when violations are found.
    #[arg(long)]
    pub deny_violations: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories to merge.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

/// Outcome of a subcommand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    /// Nonzero only for `validate-trace --deny-violations` with violations.
    pub exit_code: i32,
}

/// Arguments recorded in the manifest: everything but the output root.
fn manifest_args(args: &[OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in args.iter().skip(1) {
        let a = a.to_string_lossy();
        if skip {
            skip = false;
            continue;
        }
        if a == "--out-dir" {
            skip = true;
            continue;
        }
        if a.starts_with("--out-dir=") {
            continue;
        }
        out.push(a.into_owned());
    }
    out
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<RunOutcome>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&args).map_err(|e| Error::Config(e.to_string()))?;
    let recorded = manifest_args(&args);
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
    match &cli.command {
        Command::Simulate(a) => simulate(&cli.out_dir, recorded, a),
        Command::Analyze(a) => analyze(&cli.out_dir, recorded, a),
        Command::Identify(a) => identify_cmd(&cli.out_dir, recorded, a),
        Command::Intervene(a) => intervene(&cli.out_dir, recorded, a),
        Command::Concept(a) => concept(&cli.out_dir, recorded, a),
        Command::ValidateTrace(a) => validate_cmd(&cli.out_dir, recorded, a),
        Command::Report(a) => report(&cli.out_dir, recorded, a),
    }
}

fn ok(run_dir: PathBuf) -> Result<RunOutcome> {
    Ok(RunOutcome {
        run_dir,
        exit_code: 0,
    })
}

fn write_forward_trace(
    path: &Path,
    header: TraceHeader,
    ids: &[String],
    records: &[crate::model::ForwardRecord],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = TraceWriter::new(BufWriter::new(file), header)?;
    for (id, rec) in ids.iter().zip(records) {
        w.write_forward(id, rec)?;
    }
    w.finish()?;
    Ok(())
}

fn simulate(root: &Path, recorded: Vec<String>, a: &SimulateArgs) -> Result<RunOutcome> {
    let model = a.model.build()?;
    let samples = generate(&model, &a.samples, a.model.seed)?;
    let seqs: Vec<_> = samples.iter().map(|s| s.prompt.clone()).collect();
    let records: Vec<_> = seqs
        .iter()
        .map(|s| model.forward(s, &mut HookBundle::empty()))
        .collect::<Result<_>>()?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let header = TraceHeader::new(&a.model.preset, model.grid(), model.config().top_k, !a.no_logits);
    let mut run = RunDir::create(root, "simulate")?;
    write_forward_trace(&run.output("trace.ndjson"), header, &ids, &records)?;
    ok(run.commit(recorded, Some(a.model.seed), Some(a.model.preset.clone()), &a.model.inputs())?)
}

fn generate(model: &Model, a: &SampleArgs, seed: u64) -> Result<Vec<data::Sample>> {
    let task = model.planted_task().ok_or_else(|| Error::Capability {
        operation: "sample generation".into(),
        requirement: "a planted model".into(),
    });
    match task {
        Ok(task) => data::samples(task, a.dataset, seed, a.num_samples, a.prompt_len),
        // unplanted models get uniformly random prompts over the vocabulary
        Err(_) => {
            let vocab = model.config().vocab_size;
            (0..a.num_samples as u64)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i);
                    let tokens: Vec<usize> = (0..a.prompt_len)
                        .map(|_| rand::Rng::random_range(&mut rng, 0..vocab))
                        .collect();
                    let last = *tokens.last().ok_or_else(|| {
                        Error::Config("prompt_len must be positive".into())
                    })?;
                    Ok(data::Sample {
                        id: format!("random-{i}"),
                        index: i,
                        dataset: a.dataset,
                        prompt: crate::model::TokenSequence::prompt(tokens, a.dataset.modality(), 1),
                        answer: last,
                    })
                })
                .collect()
        }
    }
}

fn analyze(root: &Path, recorded: Vec<String>, a: &AnalyzeArgs) -> Result<RunOutcome> {
    let mut inputs = vec![a.trace.clone()];
    let mut run = RunDir::create(root, "analyze")?;
    match a.kind {
        AnalyzeKind::Gini => {
            let reader = open_trace(&a.trace)?;
            let mut acc = GiniAccumulator::new(reader.header().grid());
            for item in reader {
                acc.push(&item?.1)?;
            }
            let rows = acc
                .finish()?
                .into_iter()
                .enumerate()
                .map(|(l, g)| vec![l.to_string(), g.to_string()]);
            run.write("gini.csv", &csv(&["layer", "gini"], rows))?;
        }
        AnalyzeKind::Freq => {
            let reader = open_trace(&a.trace)?;
            let label = reader.header().model_label.clone();
            let mut acc = FrequencyAccumulator::new(reader.header().grid());
            for item in reader {
                acc.push(&item?.1)?;
            }
            let table = acc.finish(&label)?;
            run.write("freq.json", &(serde_json::to_string_pretty(&table)? + "\n"))?;
        }
        AnalyzeKind::Jsd => {
            let paired = a.paired.as_ref().ok_or_else(|| {
                Error::Config("jsd needs --paired <image trace>".into())
            })?;
            inputs.push(paired.clone());
            let text = prompt_routing_by_sample(&a.trace)?;
            let image = prompt_routing_by_sample(paired)?;
            let mut pairs = Vec::with_capacity(text.len());
            for (id, t) in &text {
                let i = image.get(id).ok_or_else(|| Error::MissingPair(id.clone()))?;
                pairs.push((t.clone(), i.clone()));
            }
            if let Some(id) = image.keys().find(|id| !text.contains_key(*id)) {
                return Err(Error::MissingPair(id.clone()));
            }
            let profile = divergence_profile(&pairs)?;
            let rows = profile
                .per_layer
                .iter()
                .enumerate()
                .map(|(l, d)| vec![l.to_string(), d.to_string()]);
            run.write("jsd.csv", &csv(&["layer", "jsd"], rows))?;
            run.write("jsd.json", &(serde_json::to_string_pretty(&profile)? + "\n"))?;
        }
    }
    ok(run.commit(recorded, None, None, &inputs)?)
}

fn prompt_routing_by_sample(path: &Path) -> Result<BTreeMap<String, PromptRouting>> {
    let reader = open_trace(path)?;
    let grid = reader.header().grid();
    let mut out: BTreeMap<String, PromptRouting> = BTreeMap::new();
    for item in reader {
        let (id, rec) = item?;
        out.entry(id).or_insert_with(|| PromptRouting::new(grid)).push(&rec)?;
    }
    Ok(out)
}

/// Records of `budget` sample ids drawn uniformly (seeded) from the trace.
fn budgeted_frequency(
    path: &Path,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<crate::stats::ActivationFrequencyTable> {
    let mut ids = std::collections::BTreeSet::new();
    let grid = {
        let reader = open_trace(path)?;
        let grid = reader.header().grid();
        for item in reader {
            ids.insert(item?.0);
        }
        grid
    };
    let ids: Vec<String> = ids.into_iter().collect();
    let chosen = select_samples(ids.len(), budget, rng)?;
    let keep: std::collections::BTreeSet<&str> = chosen.iter().map(|&i| ids[i].as_str()).collect();
    let reader = open_trace(path)?;
    let label = reader.header().model_label.clone();
    let mut acc = FrequencyAccumulator::new(grid);
    for item in reader {
        let (id, rec): (String, RoutingRecord) = item?;
        if keep.contains(id.as_str()) {
            acc.push(&rec)?;
        }
    }
    let digest = crate::report::sha256_file(path)?;
    Ok(acc.finish(&format!("{label}@{}", &digest[..12]))?.with_sample_count(budget))
}

fn identify_cmd(root: &Path, recorded: Vec<String>, a: &IdentifyArgs) -> Result<RunOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let dom = budgeted_frequency(&a.domain, a.sample_budget, &mut rng)?;
    let gen = budgeted_frequency(&a.general, a.sample_budget, &mut rng)?;
    let label = match a.label {
        LabelArg::Domain => SetLabel::Domain,
        LabelArg::Visual => SetLabel::Visual,
    };
    let set = identify(&dom, &gen, a.tau, label)?;
    let mut run = RunDir::create(root, "identify")?;
    run.write("expert_set.json", &set.to_json()?)?;
    ok(run.commit(recorded, Some(a.seed), None, &[a.domain.clone(), a.general.clone()])?)
}

fn parse_layers(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("layers `{text}` is not `lo:hi`"));
    let (lo, hi) = text.split_once(':').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

fn intervene(root: &Path, recorded: Vec<String>, a: &InterveneArgs) -> Result<RunOutcome> {
    let model = a.model.build()?;
    let preset = InterventionPreset::for_model(&a.model.preset);
    let layers = match (&a.layers, preset) {
        (Some(text), _) => parse_layers(text)?,
        (None, Some(p)) => p.layers,
        (None, None) => (0, model.config().num_layers - 1),
    };
    let targets = ExpertSet::load(&a.targets)?;
    let lambdas = match (&a.lambda_sweep, a.lambda, preset) {
        (Some(sweep), _, _) => sweep.clone(),
        (None, Some(l), _) => vec![l],
        (None, None, Some(p)) => vec![p.lambda],
        (None, None, None) => {
            return Err(Error::Config("no preset lambda; pass --lambda".into()))
        }
    };
    if lambdas.is_empty() {
        return Err(Error::Config("empty --lambda-sweep".into()));
    }
    let samples = generate(&model, &a.samples, a.model.seed)?;
    let seqs: Vec<_> = samples.iter().map(|s| s.prompt.clone()).collect();
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let mut run = RunDir::create(root, "intervene")?;
    let mut rows = Vec::with_capacity(lambdas.len());
    let mut audits = BTreeMap::new();
    for &lambda in &lambdas {
        let mut cfg = InterventionConfig::new(a.strategy, lambda, layers, a.model.seed, targets.clone());
        cfg.delta_std = a.delta_std;
        let prepared = PreparedIntervention::new(cfg, model.grid())?;
        let (records, audit) = run_intervened_batch(&model, &prepared, &seqs)?;
        let accuracy = if samples.is_empty() {
            f64::NAN
        } else {
            data::task_accuracy(&samples, &records)?
        };
        let (mut hit, mut calls) = (0u64, 0u64);
        for r in records.iter().flat_map(|r| &r.routing_records) {
            let t = prepared.targets_at(r.layer);
            if t.is_empty() {
                continue;
            }
            calls += 1;
            hit += r.topk_indices.iter().filter(|i| t.contains(i)).count() as u64;
        }
        let coverage = if calls == 0 { 0.0 } else { hit as f64 / calls as f64 };
        rows.push(vec![
            format!("{:?}", a.strategy).to_lowercase(),
            lambda.to_string(),
            accuracy.to_string(),
            coverage.to_string(),
        ]);
        let header = TraceHeader::new(&a.model.preset, model.grid(), model.config().top_k, true);
        write_forward_trace(&run.output(&format!("trace-lambda-{lambda}.ndjson")), header, &ids, &records)?;
        audits.insert(
            lambda.to_string(),
            serde_json::json!({
                "applied_set": prepared.applied_set,
                "adjusted_calls_per_layer": audit.adjusted_calls_per_layer,
            }),
        );
    }
    run.write(
        "results.csv",
        &csv(&["strategy", "lambda", "accuracy", "targets_in_topk_per_call"], rows),
    )?;
    run.write("audit.json", &(serde_json::to_string_pretty(&audits)? + "\n"))?;
    let mut inputs = a.model.inputs();
    inputs.push(a.targets.clone());
    ok(run.commit(recorded, Some(a.model.seed), Some(a.model.preset.clone()), &inputs)?)
}

fn concept(root: &Path, recorded: Vec<String>, a: &ConceptArgs) -> Result<RunOutcome> {
    let config = ToyMoEConfig::preset(&a.preset, a.seed)?;
    let spec = match &a.planted_spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)?
        }
        None => PlantedSpec::standard(&config).with_offset_strength(0.0),
    };
    let model = Model::planted(config, spec)?;
    let tasks = planted_concept_tasks(&model, a.alpha)?;
    let sweep = sweep_layers(&model, &tasks, exact_match)?;
    let mut run = RunDir::create(root, "concept")?;
    run.write("sweep.csv", &sweep.to_csv())?;
    let inputs: Vec<PathBuf> = a.planted_spec.iter().cloned().collect();
    ok(run.commit(recorded, Some(a.seed), Some(a.preset.clone()), &inputs)?)
}

fn validate_cmd(root: &Path, recorded: Vec<String>, a: &ValidateArgs) -> Result<RunOutcome> {
    let file = File::open(&a.trace).map_err(|e| Error::io(&a.trace, e))?;
    let report = validate(file);
    for v in &report.violations {
        log::warn!("line {}: {}: {}", v.line, v.field, v.message);
    }
    let mut run = RunDir::create(root, "validate-trace")?;
    run.write("validation.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let exit_code = i32::from(a.deny_violations && !report.is_valid());
    Ok(RunOutcome {
        run_dir: run.commit(recorded, None, None, &[a.trace.clone()])?,
        exit_code,
    })
}

fn report(root: &Path, recorded: Vec<String>, a: &ReportArgs) -> Result<RunOutcome> {
    let merged = merge_runs(&a.runs)?;
    let inputs: Vec<PathBuf> = a.runs.iter().map(|d| d.join(crate::report::MANIFEST_FILE)).collect();
    let mut run = RunDir::create(root, "report")?;
    run.write("report.json", &(serde_json::to_string_pretty(&merged)? + "\n"))?;
    ok(run.commit(recorded, None, None, &inputs)?)
}
