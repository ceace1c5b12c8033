// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer sweep of the image-position concept edit.

use moe_lens::concept::{exact_match, planted_concept_tasks, sweep_layers};
use moe_lens::model::{Model, PlantedSpec, ToyMoEConfig};

fn main() -> moe_lens::Result<()> {
    let mut config = ToyMoEConfig::qwen_like(0);
    config.num_layers = 12;
    let mut spec = PlantedSpec::standard(&config).with_offset_strength(0.0);
    spec.alignment_layer = 5;
    let model = Model::planted(config, spec)?;
    let tasks = planted_concept_tasks(&model, 1.0)?;
    let sweep = sweep_layers(&model, &tasks, exact_match)?;
    eprintln!("{} instances, alignment at layer 5", sweep.trials);
    print!("{}", sweep.to_csv());
    Ok(())
}
