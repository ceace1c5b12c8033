// SPDX-License-Identifier: MIT OR Apache-2.0

//! Architecture presets and their intervention settings.

use moe_lens::intervene::InterventionPreset;
use moe_lens::model::{ToyMoEConfig, PRESET_NAMES};

fn main() -> moe_lens::Result<()> {
    println!("{:<11} {:>6} {:>7} {:>3} {:>6}  layers   lambda", "preset", "layers", "experts", "k", "shared");
    for name in PRESET_NAMES {
        let c = ToyMoEConfig::preset(name, 0)?;
        let p = InterventionPreset::for_model(name).expect("built-in preset");
        println!(
            "{name:<11} {:>6} {:>7} {:>3} {:>6}  {:>2}..={:<3}  {}",
            c.num_layers,
            c.num_routed_experts_per_layer,
            c.top_k,
            c.num_shared_experts_per_layer,
            p.layers.0,
            p.layers.1,
            p.lambda
        );
    }
    Ok(())
}
