// SPDX-License-Identifier: MIT OR Apache-2.0

//! Write a gzip trace, validate it, read it back and recompute statistics.

use std::fs::File;
use std::io::BufWriter;

use flate2::write::GzEncoder;
use moe_lens::data::{samples, Dataset};
use moe_lens::model::{HookBundle, Model, PlantedSpec, ToyMoEConfig};
use moe_lens::stats::gini_profile;
use moe_lens::trace::{open_trace, validate, TraceHeader, TraceWriter};

fn main() -> moe_lens::Result<()> {
    let config = ToyMoEConfig::desk(2);
    let model = Model::planted(config.clone(), PlantedSpec::standard(&config))?;
    let task = model.planted_task().expect("planted");
    let dir = std::env::temp_dir().join("moe-lens-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("trace.ndjson.gz");

    let gz = GzEncoder::new(BufWriter::new(File::create(&path)?), flate2::Compression::default());
    let header = TraceHeader::new("desk", model.grid(), config.top_k, true);
    let mut writer = TraceWriter::new(gz, header)?;
    let mut records = Vec::new();
    for s in samples(task, Dataset::DomainText, 2, 25, 3)? {
        let rec = model.forward(&s.prompt, &mut HookBundle::empty())?;
        writer.write_forward(&s.id, &rec)?;
        records.extend(rec.routing_records);
    }
    let lines = writer.lines();
    writer.finish()?.finish()?;
    println!("wrote {lines} lines to {}", path.display());

    let report = validate(File::open(&path)?);
    println!(
        "{} records, {} samples, {} prompt / {} generation, {} violations",
        report.records,
        report.samples,
        report.prompt_records,
        report.generation_records,
        report.violations.len()
    );

    let back: Vec<_> = open_trace(&path)?.map(|r| r.map(|(_, rec)| rec)).collect::<Result<_, _>>()?;
    let before = gini_profile(model.grid(), &records)?;
    let after = gini_profile(model.grid(), &back)?;
    println!("gini identical after round-trip: {}", before == after);
    Ok(())
}
