// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gini specialization and Top-K activation frequency on planted data.

use moe_lens::data::{samples, Dataset};
use moe_lens::model::{HookBundle, Model, PlantedSpec, ToyMoEConfig};
use moe_lens::stats::{activation_frequency, frequency_difference, gini_profile};

fn main() -> moe_lens::Result<()> {
    let config = ToyMoEConfig::desk(3);
    let model = Model::planted(config.clone(), PlantedSpec::standard(&config))?;
    let task = model.planted_task().expect("planted");
    let grid = model.grid();

    let mut tables = Vec::new();
    for dataset in [Dataset::DomainText, Dataset::GeneralText] {
        let mut records = Vec::new();
        for s in samples(task, dataset, 3, 50, 3)? {
            records.extend(model.forward(&s.prompt, &mut HookBundle::empty())?.routing_records);
        }
        let gini = gini_profile(grid, &records)?;
        println!("{:<13} gini per layer {:.3?}", dataset.label(), gini);
        tables.push(activation_frequency(grid, &records, dataset.label())?);
    }
    let diff = frequency_difference(&tables[0], &tables[1])?;
    for (l, row) in diff.values.iter().enumerate() {
        println!("layer {l} dPhi {:+.2?}", row);
    }
    Ok(())
}
