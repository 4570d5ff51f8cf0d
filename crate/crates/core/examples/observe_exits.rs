//! Hooks into every layer of a decode to print the confidence cascade of
//! each generated token.

use eevo::decoder::{generate_observed, TokenStep};
use eevo::dvp::PrunedVocab;
use eevo::{init_random_with, DecodeMode, ExitPolicy, InitScheme, ModelConfig, StopCondition};

fn main() -> eevo::Result<()> {
    let weights = init_random_with(ModelConfig::default(), 2, InitScheme::Scaled)?;
    let policy = ExitPolicy::default();
    let mut pruned_layers = 0;
    let mut observer = |_: usize, _: &[f32], pv: Option<&PrunedVocab>| pruned_layers += usize::from(pv.is_some());
    let mut on_step = |t: usize, s: &TokenStep| {
        let cascade: Vec<String> = s.confidences.iter().map(|(l, c)| format!("{l}:{c:.2}")).collect();
        println!("token {t:>2} -> {:>3} exit {} [{}]", s.token, s.exit_layer, cascade.join(" "));
    };
    generate_observed(
        &weights,
        &[3, 1, 4],
        &policy,
        DecodeMode::Dvp,
        StopCondition::new(12),
        &mut on_step,
        &mut observer,
    )?;
    println!("layers evaluated on the pruned vocabulary: {pruned_layers}");
    Ok(())
}
