// SPDX-License-Identifier: MIT OR Apache-2.0

//! Domain and visual expert identification from 20 sampled examples.

use moe_lens::data::{samples, Dataset};
use moe_lens::experts::{
    identify, layer_histogram, overlap, select_samples, SetLabel, DEFAULT_SAMPLE_BUDGET,
    DOMAIN_TAU, VISUAL_TAU,
};
use moe_lens::model::{HookBundle, Model, PlantedSpec, ToyMoEConfig};
use moe_lens::stats::{activation_frequency, ActivationFrequencyTable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> moe_lens::Result<()> {
    let seed = 9;
    let config = ToyMoEConfig::desk(seed);
    let spec = PlantedSpec::standard(&config);
    let model = Model::planted(config, spec.clone())?;
    let task = model.planted_task().expect("planted");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut table = |dataset: Dataset| -> moe_lens::Result<ActivationFrequencyTable> {
        let pool = samples(task, dataset, seed, 100, 3)?;
        let mut records = Vec::new();
        for i in select_samples(pool.len(), DEFAULT_SAMPLE_BUDGET, &mut rng)? {
            records.extend(model.forward(&pool[i].prompt, &mut HookBundle::empty())?.routing_records);
        }
        Ok(activation_frequency(model.grid(), &records, dataset.label())?
            .with_sample_count(DEFAULT_SAMPLE_BUDGET))
    };
    let domain_text = table(Dataset::DomainText)?;
    let general_text = table(Dataset::GeneralText)?;
    let domain_image = table(Dataset::DomainImage)?;

    let domain = identify(&domain_text, &general_text, DOMAIN_TAU, SetLabel::Domain)?;
    let visual = identify(&domain_image, &domain_text, VISUAL_TAU, SetLabel::Visual)?;
    println!("domain experts: {:?}", domain.members);
    println!("planted:        {:?}", spec.planted_experts);
    println!("visual experts: {:?}", visual.members);
    println!("overlap:        {:?}", overlap(&domain, &visual)?.members);
    let hist = layer_histogram(&visual, Some(&domain))?;
    println!("visual per layer {:?}", hist.counts);
    print!("{}", domain.to_json()?);
    Ok(())
}
