//! Searches a (pruning exit, pruned size) grid for the cheapest point whose
//! output stays within an agreement budget of full decoding.

use eevo::analysis::{calibrate, GridPoint};
use eevo::{init_random_with, ExitPolicy, InitScheme, ModelConfig, StopCondition};

fn main() -> eevo::Result<()> {
    let config = ModelConfig {
        n_layers: 6,
        d_model: 32,
        d_vocab: 512,
        ..ModelConfig::default()
    };
    let weights = init_random_with(config, 8, InitScheme::Scaled)?;
    let prompts: Vec<Vec<u32>> = (0..8).map(|i| vec![i * 17 % 512, i * 31 % 512, 3]).collect();
    let template = ExitPolicy {
        schedule: eevo::ThresholdSchedule::Static { lambda: 0.4 },
        max_new_tokens: 12,
        ..ExitPolicy::default()
    };
    let grid = GridPoint::product(&[1, 2, 3], &[64, 256, 384, 512]);
    let report = calibrate(&weights, &prompts, &grid, 0.1, &template, StopCondition::new(12))?;

    println!("p    K  score  conf_flops  feasible");
    for r in &report.grid {
        println!(
            "{}  {:>3}  {:.3}  {:>10}  {}",
            r.prune_exit, r.prune_size, r.score, r.confidence_flops, r.feasible
        );
    }
    println!(
        "chosen p={} K={} (baseline confidence FLOPs {})",
        report.chosen.prune_exit, report.chosen.prune_size, report.baseline_confidence_flops
    );
    Ok(())
}
