//! Compares the FLOPs ledger of full and pruned decoding on a model with a
//! large vocabulary, next to the closed-form confidence cost.

use eevo::flops::{expected_confidence_flops, Category};
use eevo::{generate, init_random_with, DecodeMode, ExitPolicy, InitScheme, ModelConfig, StopCondition};

fn main() -> eevo::Result<()> {
    let config = ModelConfig {
        n_layers: 24,
        d_model: 32,
        d_vocab: 6400,
        n_heads: 4,
        d_ff: 64,
        max_seq: 64,
    };
    let weights = init_random_with(config, 24, InitScheme::Scaled)?;
    let policy = ExitPolicy {
        schedule: eevo::ThresholdSchedule::Static { lambda: 0.99 },
        ..ExitPolicy::default()
    };
    let prompt = [1, 2, 3, 4];

    let mut projection = Vec::new();
    for mode in [DecodeMode::Full, DecodeMode::Dvp] {
        let run = generate(&weights, &prompt, &policy, mode, StopCondition::new(24))?;
        let closed = expected_confidence_flops(&policy, mode, &run.exit_layers(), config.d_vocab, config.d_model);
        println!("{mode} (avg exit {:.2}):", run.avg_exit());
        for c in Category::ALL {
            println!("  {:<22} {:>12}", c.name(), run.ledger.get(c));
        }
        println!("  {:<22} {:>12}", "closed-form projection", closed.projection);
        println!("  {:<22} {:>12.0}", "flops per token", run.ledger.flops_per_token());
        projection.push(run.ledger.get(Category::ConfidenceProjection));
    }
    println!(
        "confidence projection ratio full/dvp: {:.2}x",
        projection[0] as f64 / projection[1] as f64
    );
    Ok(())
}
