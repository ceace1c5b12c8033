// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer JSD between text and image renderings of the same prompts.

use moe_lens::data::{samples, Dataset};
use moe_lens::model::{HookBundle, Model, PlantedSpec, ToyMoEConfig};
use moe_lens::stats::{divergence_profile, PromptRouting};

fn main() -> moe_lens::Result<()> {
    let config = ToyMoEConfig::desk(5);
    let model = Model::planted(config.clone(), PlantedSpec::standard(&config))?;
    let task = model.planted_task().expect("planted");
    let grid = model.grid();

    let text = samples(task, Dataset::DomainText, 5, 30, 4)?;
    let image = samples(task, Dataset::DomainImage, 5, 30, 4)?;
    let mut pairs = Vec::new();
    for (t, i) in text.iter().zip(&image) {
        assert_eq!(t.id, i.id);
        let rt = model.forward(&t.prompt, &mut HookBundle::empty())?;
        let ri = model.forward(&i.prompt, &mut HookBundle::empty())?;
        pairs.push((
            PromptRouting::from_records(grid, &rt.routing_records)?,
            PromptRouting::from_records(grid, &ri.routing_records)?,
        ));
    }
    let profile = divergence_profile(&pairs)?;
    println!("layer,jsd");
    for (l, d) in profile.per_layer.iter().enumerate() {
        println!("{l},{d:.4}");
    }
    Ok(())
}
