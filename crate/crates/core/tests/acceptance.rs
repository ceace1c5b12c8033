// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use moe_lens::concept::{
    apply_concept_edit, exact_match, extract_concept_vectors, planted_concept_tasks, sweep_layers,
};
use moe_lens::data::{samples, task_accuracy, Dataset, Sample};
use moe_lens::experts::{identify, select_samples, ExpertSet, SetLabel, DOMAIN_TAU};
use moe_lens::intervene::{
    hard_adjustment, run_intervened_batch, InterventionConfig, InterventionPreset,
    PreparedIntervention, Strategy, DEFAULT_DELTA_STD,
};
use moe_lens::model::{HookBundle, Model, PlantedSpec, TokenSequence, ToyMoEConfig};
use moe_lens::routing::{select_top_k, softmax, ExpertId, RoutingRecord};
use moe_lens::stats::{
    activation_frequency, divergence_profile, frequency_difference, gini, gini_profile, jsd,
    PromptRouting,
};
use moe_lens::trace::{read_trace, validate, write_trace, TraceHeader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ANALYTIC_TOLERANCE: f64 = 1e-9;
const ANALYTIC_BUDGET: Duration = Duration::from_secs(1);
const TOPK_SUM_TOLERANCE: f64 = 1e-9;
const RANDOM_TRACES: u64 = 100;
const SEEDS: u64 = 20;
const RECOVERY_BUDGET: Duration = Duration::from_secs(30);
const LAMBDA_SWEEP: [f64; 4] = [0.0, 0.2, 0.5, 1.0];
const HARD_CALLS: usize = 100_000;
const HARD_MIN_RATE: f64 = 0.999;
const SOFT_MIN_ACCURACY: f64 = 0.95;
const RANDOM_BAND: f64 = 0.05;
const DISTRACTION_BUDGET: Duration = Duration::from_secs(120);
const COLLINEARITY_TOLERANCE: f64 = 1e-12;
const ROUNDTRIP_RECORDS: usize = 10_000;
const MUTATION_CASES: usize = 20;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn planted_desk(seed: u64) -> (Model, PlantedSpec) {
    let cfg = ToyMoEConfig::desk(seed);
    let spec = PlantedSpec::standard(&cfg);
    (Model::planted(cfg, spec.clone()).unwrap(), spec)
}

fn forward_all(model: &Model, set: &[Sample]) -> Vec<moe_lens::model::ForwardRecord> {
    set.iter()
        .map(|s| model.forward(&s.prompt, &mut HookBundle::empty()).unwrap())
        .collect()
}

fn statistics_analytic_values() -> Outcome {
    let start = Instant::now();
    let cases: [(&str, f64, f64); 6] = [
        ("gini(uniform)", gini(&[0.25; 4]).unwrap(), 0.0),
        ("gini(one-hot, E=4)", gini(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.75),
        ("gini([.5,.5,0,0])", gini(&[0.5, 0.5, 0.0, 0.0]).unwrap(), 0.5),
        ("jsd(p,p)", jsd(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0),
        ("jsd(disjoint)", jsd(&[0.5, 0.5, 0.0, 0.0], &[0.0, 0.0, 0.5, 0.5]).unwrap(), 1.0),
        // scipy.spatial.distance.jensenshannon(..., base=2) ** 2
        ("jsd([.5,.5],[1,0])", jsd(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.3112781244591328),
    ];
    let elapsed = start.elapsed();
    for (name, got, want) in cases {
        ensure((got - want).abs() <= ANALYTIC_TOLERANCE, || format!("{name} = {got}, expected {want}"))?;
    }
    ensure(elapsed < ANALYTIC_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("6 values within {ANALYTIC_TOLERANCE:e}, {elapsed:?}"))
}

fn trace_roundtrip(header: TraceHeader, records: &[(String, RoutingRecord)]) -> Vec<(String, RoutingRecord)> {
    let mut bytes = Vec::new();
    write_trace(&mut bytes, header, records.iter().map(|(id, r)| (id.as_str(), r))).unwrap();
    read_trace(&bytes[..]).unwrap().map(Result::unwrap).collect()
}

fn random_forward_records(seed: u64) -> (Model, Vec<(String, RoutingRecord)>) {
    let presets = ["desk", "llama-like", "kimi-like"];
    let cfg = ToyMoEConfig::preset(presets[(seed % 3) as usize], seed).unwrap();
    let model = Model::build(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.config().vocab_size;
    let mut out = Vec::new();
    for s in 0..rng.random_range(1..4) {
        let len = rng.random_range(1..6);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let seq = if rng.random_bool(0.5) {
            TokenSequence::text(tokens, rng.random_range(0..3))
        } else {
            TokenSequence::image(tokens, rng.random_range(0..3))
        };
        let rec = model.forward(&seq, &mut HookBundle::empty()).unwrap();
        out.extend(rec.routing_records.into_iter().map(|r| (format!("s{s}"), r)));
    }
    (model, out)
}

fn structural_topk_sums() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..RANDOM_TRACES {
        let (model, records) = random_forward_records(seed);
        let k = model.config().top_k as f64;
        let header = TraceHeader::new("random", model.grid(), model.config().top_k, true);
        let back = trace_roundtrip(header, &records);
        let table = activation_frequency(model.grid(), back.iter().map(|(_, r)| r), "random").unwrap();
        let n = table.token_count as f64;
        for (l, row) in table.values.iter().enumerate() {
            let total: f64 = row.iter().map(|phi| phi * n).sum();
            let err = (total - k * n).abs();
            worst = worst.max(err);
            ensure(err <= TOPK_SUM_TOLERANCE, || {
                format!("trace {seed} layer {l}: {total} vs {}", k * n)
            })?;
        }
    }
    Ok(format!("{RANDOM_TRACES} traces, max deviation {worst:e}"))
}

fn identify_planted(seed: u64) -> (ExpertSet, BTreeSet<ExpertId>) {
    let (model, spec) = planted_desk(seed);
    let task = model.planted_task().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = |dataset: Dataset| {
        let pool = samples(task, dataset, seed, 40, 3).unwrap();
        let chosen = select_samples(pool.len(), 20, &mut rng).unwrap();
        let picked: Vec<Sample> = chosen.into_iter().map(|i| pool[i].clone()).collect();
        let recs = forward_all(&model, &picked);
        activation_frequency(
            model.grid(),
            recs.iter().flat_map(|r| &r.routing_records),
            dataset.label(),
        )
        .unwrap()
        .with_sample_count(picked.len())
    };
    let dom = table(Dataset::DomainText);
    let gen = table(Dataset::GeneralText);
    let set = identify(&dom, &gen, DOMAIN_TAU, SetLabel::Domain).unwrap();
    (set, spec.planted_experts.into_iter().collect())
}

fn planted_recovery() -> Outcome {
    let start = Instant::now();
    for seed in 0..SEEDS {
        let (set, planted) = identify_planted(seed);
        let found = set.member_set();
        let tp = found.intersection(&planted).count() as f64;
        let precision = if found.is_empty() { 0.0 } else { tp / found.len() as f64 };
        let recall = tp / planted.len() as f64;
        ensure(precision == 1.0 && recall == 1.0, || {
            format!("seed {seed}: precision {precision}, recall {recall}")
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < RECOVERY_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{SEEDS} seeds exact at tau={DOMAIN_TAU}, {elapsed:?}"))
}

fn planted_set(model: &Model, spec: &PlantedSpec) -> ExpertSet {
    ExpertSet::new(
        SetLabel::Domain,
        DOMAIN_TAU,
        spec.planted_experts.iter().copied(),
        ("planted".into(), "planted".into()),
        20,
        model.grid(),
    )
    .unwrap()
}

fn soft_identity_and_monotonicity() -> Outcome {
    for seed in 0..SEEDS {
        let (model, spec) = planted_desk(seed);
        let task = model.planted_task().unwrap();
        let set = samples(task, Dataset::DomainImage, seed, 50, 3).unwrap();
        let seqs: Vec<TokenSequence> = set.iter().map(|s| s.prompt.clone()).collect();
        let baseline = forward_all(&model, &set);
        let targets = planted_set(&model, &spec);
        let last = model.config().num_layers - 1;
        let mut prev = -1.0;
        for lambda in LAMBDA_SWEEP {
            let cfg = InterventionConfig::new(Strategy::Soft, lambda, (0, last), seed, targets.clone());
            let prepared = PreparedIntervention::new(cfg, model.grid()).unwrap();
            let (recs, _) = run_intervened_batch(&model, &prepared, &seqs).unwrap();
            if lambda == 0.0 {
                let same = recs.iter().zip(&baseline).all(|(a, b)| a.bit_identical(b));
                ensure(same, || format!("seed {seed}: lambda=0 differs from baseline"))?;
            }
            let (mut hits, mut slots) = (0usize, 0usize);
            for r in recs.iter().flat_map(|r| &r.routing_records) {
                let t = prepared.targets_at(r.layer);
                slots += t.len();
                hits += r.topk_indices.iter().filter(|i| t.contains(i)).count();
            }
            let freq = hits as f64 / slots as f64;
            ensure(freq >= prev, || format!("seed {seed}: frequency fell to {freq} at lambda={lambda}"))?;
            prev = freq;
        }
    }
    Ok(format!("{SEEDS} seeds, lambda in {LAMBDA_SWEEP:?}"))
}

fn hard_topk_guarantee() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut regime_calls, mut regime_hits, mut all_hits) = (0usize, 0usize, 0usize);
    for _ in 0..HARD_CALLS {
        let e = 16;
        let k = rng.random_range(1..=4);
        let c = rng.random_range(1..=k);
        let logits: Vec<f64> = (0..e).map(|_| rng.random_range(-3.0..3.0)).collect();
        let targets = rand::seq::index::sample(&mut rng, e, c).into_vec();
        let adj = hard_adjustment(&logits, &targets, &mut rng, DEFAULT_DELTA_STD).unwrap();
        let (top, _) = select_top_k(&softmax(&adj.logits), k);
        let hit = targets.iter().all(|t| top.contains(t));
        all_hits += usize::from(hit);
        if adj.deltas.iter().all(|&(_, d)| d >= 0.0) {
            regime_calls += 1;
            regime_hits += usize::from(hit);
        }
    }
    let rate = regime_hits as f64 / regime_calls as f64;
    let overall = all_hits as f64 / HARD_CALLS as f64;
    ensure(rate >= HARD_MIN_RATE, || format!("rate {rate} over {regime_calls} calls"))?;
    Ok(format!(
        "{rate} over {regime_calls} calls with non-negative noise (all {HARD_CALLS} calls: {overall:.4})"
    ))
}

fn distraction_recovery() -> Outcome {
    let start = Instant::now();
    let preset = InterventionPreset::for_model("desk").unwrap();
    let mut summary = (0.0, 0.0, 0.0);
    for seed in 0..SEEDS {
        let (model, spec) = planted_desk(seed);
        let task = model.planted_task().unwrap();
        let set = samples(task, Dataset::DomainImage, seed, 100, 3).unwrap();
        let seqs: Vec<TokenSequence> = set.iter().map(|s| s.prompt.clone()).collect();
        let base = task_accuracy(&set, &forward_all(&model, &set)).unwrap();
        let targets = planted_set(&model, &spec);
        let run = |strategy| {
            let cfg = InterventionConfig::new(strategy, preset.lambda, preset.layers, seed, targets.clone());
            let prepared = PreparedIntervention::new(cfg, model.grid()).unwrap();
            let (recs, _) = run_intervened_batch(&model, &prepared, &seqs).unwrap();
            task_accuracy(&set, &recs).unwrap()
        };
        let soft = run(Strategy::Soft);
        let random = run(Strategy::Random);
        ensure(soft >= SOFT_MIN_ACCURACY, || format!("seed {seed}: soft {soft} (baseline {base})"))?;
        ensure((random - base).abs() <= RANDOM_BAND, || {
            format!("seed {seed}: random {random} vs baseline {base}")
        })?;
        summary.0 += base / SEEDS as f64;
        summary.1 += soft / SEEDS as f64;
        summary.2 += random / SEEDS as f64;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < DISTRACTION_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "mean baseline {:.3}, soft {:.3}, random {:.3} over {SEEDS} seeds, {elapsed:?}",
        summary.0, summary.1, summary.2
    ))
}

fn concept_edit_and_transition() -> Outcome {
    let (model, _) = planted_desk(4);
    let bank = extract_concept_vectors(
        &model,
        &TokenSequence::text(vec![1], 0),
        &TokenSequence::text(vec![2], 0),
        0,
    )
    .unwrap();
    for l in bank.layers() {
        let src = &bank.per_layer_src[&l];
        let out = apply_concept_edit(src, &bank, l, 1.0).unwrap();
        ensure(out == bank.per_layer_tgt[&l], || format!("layer {l}: h_src edit is not h_tgt"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for l in bank.layers() {
        let h: Vec<f64> = (0..model.config().hidden_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let alphas = [0.3, 1.1, 2.7];
        let ys: Vec<Vec<f64>> = alphas.iter().map(|&a| apply_concept_edit(&h, &bank, l, a).unwrap()).collect();
        for i in 0..h.len() {
            let lhs = (ys[2][i] - ys[0][i]) * (alphas[1] - alphas[0]);
            let rhs = (ys[1][i] - ys[0][i]) * (alphas[2] - alphas[0]);
            worst = worst.max((lhs - rhs).abs());
        }
    }
    ensure(worst <= COLLINEARITY_TOLERANCE, || format!("collinearity residual {worst:e}"))?;
    for seed in 0..5 {
        let cfg = ToyMoEConfig::desk(seed);
        let spec = PlantedSpec::standard(&cfg).with_offset_strength(0.0);
        let align = spec.alignment_layer;
        let model = Model::planted(cfg, spec).unwrap();
        let tasks = planted_concept_tasks(&model, 1.0).unwrap();
        let sweep = sweep_layers(&model, &tasks, exact_match).unwrap();
        for (&l, &r) in &sweep.per_layer_success_rate {
            let want = if l < align { 0.0 } else { 1.0 };
            ensure(r == want, || format!("seed {seed} layer {l}: rate {r}, designed {want}"))?;
        }
    }
    Ok(format!("exact substitution, collinearity residual {worst:e}, transition at the alignment layer on 5 seeds"))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn mutations(lines: &[String]) -> Vec<(&'static str, Vec<u8>)> {
    let join = |ls: &[String]| (ls.join("\n") + "\n").into_bytes();
    let edit = |idx: usize, f: &dyn Fn(&mut serde_json::Value)| {
        let mut ls = lines.to_vec();
        let mut v: serde_json::Value = serde_json::from_str(&ls[idx]).unwrap();
        f(&mut v);
        ls[idx] = v.to_string();
        join(&ls)
    };
    let replace = |idx: usize, text: &str| {
        let mut ls = lines.to_vec();
        ls[idx] = text.to_owned();
        join(&ls)
    };
    let mut out: Vec<(&'static str, Vec<u8>)> = vec![
        ("weight sum 0.9", edit(3, &|v| {
            let w = v["topk"][0]["weight"].as_f64().unwrap();
            v["topk"][0]["weight"] = serde_json::json!(w - 0.1);
        })),
        ("index out of range", edit(4, &|v| v["topk"][0]["index"] = serde_json::json!(99))),
        ("layer out of range", edit(5, &|v| v["layer"] = serde_json::json!(17))),
        ("negative weight", edit(6, &|v| {
            v["topk"][0]["weight"] = serde_json::json!(-0.5);
            v["topk"][1]["weight"] = serde_json::json!(1.5);
        })),
        ("topk too short", edit(7, &|v| {
            v["topk"] = serde_json::json!([{"index": 0, "weight": 1.0}]);
        })),
        ("repeated expert", edit(8, &|v| {
            let i = v["topk"][0]["index"].clone();
            v["topk"][1]["index"] = i;
        })),
        ("logits wrong length", edit(9, &|v| {
            v["logits"].as_array_mut().unwrap().pop();
        })),
        ("logits missing", edit(10, &|v| {
            v.as_object_mut().unwrap().remove("logits");
        })),
        ("unknown field", edit(11, &|v| v["extra"] = serde_json::json!(1))),
        ("missing sample id", edit(12, &|v| {
            v.as_object_mut().unwrap().remove("sample_id");
        })),
        ("bad phase", edit(13, &|v| v["phase"] = serde_json::json!("decode"))),
        ("weight as string", edit(14, &|v| v["topk"][0]["weight"] = serde_json::json!("0.5"))),
        ("line cut mid-record", {
            let mut ls = lines.to_vec();
            let cut = ls[15].len() / 2;
            ls[15].truncate(cut);
            join(&ls)
        }),
        ("empty line", replace(16, "")),
        ("duplicated record", {
            let mut ls = lines.to_vec();
            ls.insert(17, ls[17].clone());
            join(&ls)
        }),
        ("truncation marker", {
            let mut ls = lines.to_vec();
            ls.push(r#"{"truncated":true,"reason":"writer failed"}"#.into());
            join(&ls)
        }),
        ("unsupported version", edit(0, &|v| v["format_version"] = serde_json::json!(2))),
        ("zero experts in header", edit(0, &|v| v["experts_per_layer"] = serde_json::json!(0))),
        ("deleted record", {
            let mut ls = lines.to_vec();
            ls.remove(18);
            join(&ls)
        }),
        ("prompt after generation", {
            // last record of the first sample is generation; relabel it
            let idx = lines
                .iter()
                .rposition(|l| l.contains("\"sample_id\":\"s0\"") && l.contains("generation"))
                .unwrap();
            let mut ls = lines.to_vec();
            ls[idx] = ls[idx].replace("\"generation\"", "\"prompt\"");
            join(&ls)
        }),
    ];
    let mut bad_utf8 = join(lines);
    let pos = bad_utf8.iter().position(|&b| b == b'\n').unwrap() + 3;
    bad_utf8[pos] = 0xff;
    out.push(("invalid utf-8", bad_utf8));
    out
}

fn trace_roundtrip_and_mutations() -> Outcome {
    let mut records = Vec::new();
    let model = Model::build(ToyMoEConfig::desk(21)).unwrap();
    let grid = model.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut sample = 0;
    while records.len() < ROUNDTRIP_RECORDS {
        let len = rng.random_range(1..8);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..8)).collect();
        let gen = rng.random_range(0..3);
        for (tag, seq) in [("t", TokenSequence::text(tokens.clone(), gen)), ("i", TokenSequence::image(tokens, gen))] {
            let id = format!("{tag}{sample}");
            let rec = model.forward(&seq, &mut HookBundle::empty()).unwrap();
            records.extend(rec.routing_records.into_iter().map(|r| (id.clone(), r)));
        }
        sample += 1;
    }
    let header = TraceHeader::new("desk", grid, model.config().top_k, true);
    let back = trace_roundtrip(header.clone(), &records);
    ensure(back.len() == records.len(), || "record count changed".into())?;
    let stats = |rs: &[(String, RoutingRecord)]| {
        let all = || rs.iter().map(|(_, r)| r);
        let text = || rs.iter().filter(|(id, _)| id.starts_with('t')).map(|(_, r)| r);
        let image = || rs.iter().filter(|(id, _)| id.starts_with('i')).map(|(_, r)| r);
        let g = gini_profile(grid, all()).unwrap();
        let ft = activation_frequency(grid, text(), "text").unwrap();
        let fi = activation_frequency(grid, image(), "image").unwrap();
        let diff = frequency_difference(&fi, &ft).unwrap();
        let mut pairs = Vec::new();
        for s in 0..sample {
            let pick = |p: &str| {
                let id = format!("{p}{s}");
                PromptRouting::from_records(grid, rs.iter().filter(|(i, _)| *i == id).map(|(_, r)| r)).unwrap()
            };
            pairs.push((pick("t"), pick("i")));
        }
        let div = divergence_profile(&pairs).unwrap();
        let mut out = vec![bits(&g), bits(&div.per_layer)];
        for t in [&ft, &fi] {
            out.extend(t.values.iter().map(|r| bits(r)));
        }
        out.extend(diff.values.iter().map(|r| bits(r)));
        out
    };
    ensure(stats(&records) == stats(&back), || "statistics differ after round-trip".into())?;

    let small: Vec<(String, RoutingRecord)> = records
        .iter()
        .filter(|(id, _)| ["t0", "i0", "t1"].contains(&id.as_str()))
        .cloned()
        .collect();
    let mut bytes = Vec::new();
    write_trace(&mut bytes, header, small.iter().map(|(id, r)| (id.as_str(), r))).unwrap();
    ensure(validate(&bytes[..]).is_valid(), || "clean trace reported violations".into())?;
    let s0: Vec<(String, RoutingRecord)> = small.iter().filter(|(i, _)| i == "t0").cloned().collect();
    ensure(s0.iter().any(|(_, r)| r.phase == moe_lens::routing::Phase::Generation), || {
        "mutation base needs a generated token".into()
    })?;
    let text = String::from_utf8(bytes).unwrap();
    let text = text.replace("\"sample_id\":\"t0\"", "\"sample_id\":\"s0\"");
    let lines: Vec<String> = text.lines().map(str::to_owned).collect();
    ensure(lines.len() > 20, || "mutation base too short".into())?;
    let cases = mutations(&lines);
    let missed: Vec<&str> = cases
        .iter()
        .filter(|(_, data)| validate(&data[..]).is_valid())
        .map(|(name, _)| *name)
        .collect();
    ensure(cases.len() >= MUTATION_CASES, || format!("only {} mutation cases", cases.len()))?;
    ensure(missed.is_empty(), || format!("undetected: {missed:?}"))?;
    Ok(format!(
        "{} records bit-identical, {}/{} mutations flagged",
        records.len(),
        cases.len(),
        cases.len()
    ))
}

fn moe_lens(root: &Path, args: &[&str]) -> Result<PathBuf, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_moe-lens"))
        .arg("--out-dir")
        .arg(root)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(PathBuf::from(String::from_utf8_lossy(&out.stdout).trim()))
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

/// Runs the whole pipeline under `root`; returns (subcommand label, run dir).
fn pipeline(root: &Path) -> Result<Vec<(String, PathBuf)>, String> {
    let mut runs = Vec::new();
    let sim = |dataset: &str, extra: &[&str]| -> Result<PathBuf, String> {
        let mut args = vec!["simulate", "--preset", "desk", "--seed", "5", "--num-samples", "30", "--dataset", dataset];
        args.extend_from_slice(extra);
        moe_lens(root, &args)
    };
    let dom = sim("domain-text", &[])?;
    let gen = sim("general-text", &[])?;
    let img = sim("domain-image", &[])?;
    let nolog = sim("domain-text", &["--no-logits"])?;
    runs.extend([
        ("simulate domain-text".to_string(), dom.clone()),
        ("simulate general-text".into(), gen.clone()),
        ("simulate domain-image".into(), img.clone()),
        ("simulate --no-logits".into(), nolog),
    ]);
    let t = |d: &Path| d.join("trace.ndjson").display().to_string();
    let gini = moe_lens(root, &["analyze", "gini", "--trace", &t(&dom)])?;
    let freq = moe_lens(root, &["analyze", "freq", "--trace", &t(&dom)])?;
    let jsd = moe_lens(root, &["analyze", "jsd", "--trace", &t(&dom), "--paired", &t(&img)])?;
    let ident = moe_lens(root, &["identify", "--domain", &t(&dom), "--general", &t(&gen), "--seed", "1"])?;
    let set = ident.join("expert_set.json").display().to_string();
    let common = ["--preset", "desk", "--seed", "5", "--num-samples", "30", "--dataset", "domain-image", "--experts", &set];
    let iv = |extra: &[&str]| {
        let mut args = vec!["intervene"];
        args.extend_from_slice(&common);
        args.extend_from_slice(extra);
        moe_lens(root, &args)
    };
    let soft = iv(&["--lambda-sweep", "0,0.2,0.5,1.0"])?;
    let hard = iv(&["--strategy", "hard", "--layers", "1:2"])?;
    let random = iv(&["--strategy", "random", "--lambda", "0.5"])?;
    let concept = moe_lens(root, &["concept", "--preset", "desk", "--seed", "5"])?;
    let valid = moe_lens(root, &["validate-trace", "--trace", &t(&dom)])?;
    let d = |p: &Path| p.display().to_string();
    let report = moe_lens(root, &["report", &d(&gini), &d(&freq), &d(&jsd)])?;
    runs.extend([
        ("analyze gini".to_string(), gini),
        ("analyze freq".into(), freq),
        ("analyze jsd".into(), jsd),
        ("identify".into(), ident),
        ("intervene soft sweep".into(), soft),
        ("intervene hard".into(), hard),
        ("intervene random".into(), random),
        ("concept".into(), concept),
        ("validate-trace".into(), valid),
        ("report".into(), report),
    ]);
    Ok(runs)
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().join("a");
    let first = pipeline(&root)?;
    let snapshot: Vec<_> = first.iter().map(|(_, d)| dir_contents(d)).collect();
    let again = pipeline(&root)?;
    let mut compared = 0;
    for (((name, d1), (_, d2)), before) in first.iter().zip(&again).zip(&snapshot) {
        ensure(d1 == d2, || format!("{name}: rerun produced a different directory"))?;
        let after = dir_contents(d2);
        ensure(&after == before, || format!("{name}: rerun changed its outputs"))?;
        compared += after.len();
    }
    // runs without input files are independent of the output root
    let other = pipeline(&tmp.path().join("b"))?;
    for ((name, da), (_, db)) in first.iter().zip(&other) {
        if name.starts_with("simulate") || name == "concept" {
            ensure(da.file_name() == db.file_name(), || format!("{name}: directory name depends on root"))?;
            ensure(dir_contents(da) == dir_contents(db), || format!("{name}: outputs depend on root"))?;
        }
    }
    Ok(format!("{} runs, {compared} files byte-identical across reruns", first.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("statistics analytic values", statistics_analytic_values),
        ("structural top-k frequency sums", structural_topk_sums),
        ("planted expert recovery", planted_recovery),
        ("soft intervention identity and monotonicity", soft_identity_and_monotonicity),
        ("hard intervention top-k guarantee", hard_topk_guarantee),
        ("distraction recovery", distraction_recovery),
        ("concept edit algebra and sweep transition", concept_edit_and_transition),
        ("trace round-trip and mutation suite", trace_roundtrip_and_mutations),
        ("cli determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
