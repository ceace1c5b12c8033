// SPDX-License-Identifier: MIT OR Apache-2.0

//! Soft, hard and random routing interventions in the distraction regime.

use moe_lens::data::{samples, task_accuracy, Dataset};
use moe_lens::experts::{ExpertSet, SetLabel, DOMAIN_TAU};
use moe_lens::intervene::{
    run_intervened_batch, InterventionConfig, InterventionPreset, PreparedIntervention, Strategy,
};
use moe_lens::model::{Model, PlantedSpec, TokenSequence, ToyMoEConfig};

fn main() -> moe_lens::Result<()> {
    let seed = 1;
    let config = ToyMoEConfig::desk(seed);
    let spec = PlantedSpec::standard(&config);
    let model = Model::planted(config, spec.clone())?;
    let task = model.planted_task().expect("planted");
    let preset = InterventionPreset::for_model("desk").expect("desk preset");

    let targets = ExpertSet::new(
        SetLabel::Domain,
        DOMAIN_TAU,
        spec.planted_experts.iter().copied(),
        ("planted".into(), "planted".into()),
        20,
        model.grid(),
    )?;
    let set = samples(task, Dataset::DomainImage, seed, 200, 3)?;
    let seqs: Vec<TokenSequence> = set.iter().map(|s| s.prompt.clone()).collect();

    println!("strategy,lambda,accuracy,adjusted_calls");
    let runs = [
        (Strategy::Soft, 0.0),
        (Strategy::Soft, 0.2),
        (Strategy::Soft, 0.5),
        (Strategy::Soft, 1.0),
        (Strategy::Hard, 0.0),
        (Strategy::Random, preset.lambda),
    ];
    for (strategy, lambda) in runs {
        let cfg = InterventionConfig::new(strategy, lambda, preset.layers, seed, targets.clone());
        let prepared = PreparedIntervention::new(cfg, model.grid())?;
        let (records, audit) = run_intervened_batch(&model, &prepared, &seqs)?;
        println!(
            "{strategy:?},{lambda},{:.3},{:?}",
            task_accuracy(&set, &records)?,
            audit.adjusted_calls_per_layer
        );
    }
    Ok(())
}
