// SPDX-License-Identifier: MIT OR Apache-2.0

//! Build a planted toy model and look at its routing.
//!
//! ```text
//! cargo run --example planted_model -- [seed]
//! ```

use moe_lens::model::{HookBundle, Model, PlantedSpec, TokenSequence, ToyMoEConfig};

fn main() -> moe_lens::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let config = ToyMoEConfig::desk(seed);
    let spec = PlantedSpec::standard(&config);
    println!("planted experts: {:?}", spec.planted_experts);
    println!("visual experts:  {:?}", spec.visual_experts);
    println!("domain tokens:   {:?}", spec.domain_token_ids);

    let model = Model::planted(config, spec)?;
    let task = model.planted_task().expect("planted");
    for (name, seq) in [
        ("domain text ", TokenSequence::text(vec![1], 1)),
        ("general text", TokenSequence::text(vec![6], 1)),
        ("domain image", TokenSequence::image(vec![1], 1)),
    ] {
        let rec = model.forward(&seq, &mut HookBundle::empty())?;
        let routes: Vec<String> = rec
            .routing_records
            .iter()
            .filter(|r| r.token_position == 0)
            .map(|r| format!("L{}{:?}", r.layer, r.topk_indices))
            .collect();
        println!(
            "{name}: {}  -> {:?} (task answer {:?})",
            routes.join(" "),
            rec.first_generated(),
            task.answer(seq.token_ids[0]),
        );
    }
    Ok(())
}
