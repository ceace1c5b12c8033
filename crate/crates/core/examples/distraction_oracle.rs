// SPDX-License-Identifier: MIT OR Apache-2.0

//! Brute-force sweep over the modality offset strength: distracted
//! baseline, soft recovery and random control accuracy per strength.
//! The standard planted strength sits inside the band where the baseline
//! collapses, soft restores the task and random does not.

use moe_lens::data::{samples, task_accuracy, Dataset};
use moe_lens::experts::{ExpertSet, SetLabel, DOMAIN_TAU};
use moe_lens::intervene::{
    run_intervened_batch, InterventionConfig, InterventionPreset, PreparedIntervention, Strategy,
};
use moe_lens::model::{HookBundle, Model, PlantedSpec, TokenSequence, ToyMoEConfig};

fn main() -> moe_lens::Result<()> {
    let preset = InterventionPreset::for_model("desk").expect("desk preset");
    let seeds = 0..10u64;
    let standard = {
        let c = ToyMoEConfig::desk(0);
        PlantedSpec::standard(&c).modality_offset_strength
    };
    println!("strength,baseline,soft,random");
    for step in 0..=16 {
        let strength = 0.25 * step as f64;
        let (mut base, mut soft, mut random) = (0.0, 0.0, 0.0);
        for seed in seeds.clone() {
            let config = ToyMoEConfig::desk(seed);
            let spec = PlantedSpec::standard(&config).with_offset_strength(strength);
            let model = Model::planted(config, spec.clone())?;
            let task = model.planted_task().expect("planted");
            let set = samples(task, Dataset::DomainImage, seed, 100, 3)?;
            let seqs: Vec<TokenSequence> = set.iter().map(|s| s.prompt.clone()).collect();
            let plain: Vec<_> = seqs
                .iter()
                .map(|s| model.forward(s, &mut HookBundle::empty()))
                .collect::<Result<_, _>>()?;
            base += task_accuracy(&set, &plain)?;
            let targets = ExpertSet::new(
                SetLabel::Domain,
                DOMAIN_TAU,
                spec.planted_experts.iter().copied(),
                ("planted".into(), "planted".into()),
                20,
                model.grid(),
            )?;
            for (strategy, acc) in [(Strategy::Soft, &mut soft), (Strategy::Random, &mut random)] {
                let cfg = InterventionConfig::new(strategy, preset.lambda, preset.layers, seed, targets.clone());
                let prepared = PreparedIntervention::new(cfg, model.grid())?;
                let (recs, _) = run_intervened_batch(&model, &prepared, &seqs)?;
                *acc += task_accuracy(&set, &recs)?;
            }
        }
        let n = seeds.clone().count() as f64;
        println!("{strength:.2},{:.3},{:.3},{:.3}", base / n, soft / n, random / n);
    }
    println!("# standard strength {standard:.4}");
    Ok(())
}
