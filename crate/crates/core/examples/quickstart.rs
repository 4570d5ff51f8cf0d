//! Seeds a small model and decodes the same prompt in full-vocabulary and
//! pruned mode.

use eevo::{generate, init_random_with, DecodeMode, ExitPolicy, InitScheme, ModelConfig, StopCondition};

fn main() -> eevo::Result<()> {
    let weights = init_random_with(ModelConfig::default(), 7, InitScheme::Scaled)?;
    let policy = ExitPolicy::default();
    let prompt = [12, 40, 7, 300];

    for mode in [DecodeMode::Full, DecodeMode::Dvp] {
        let run = generate(&weights, &prompt, &policy, mode, StopCondition::new(policy.max_new_tokens))?;
        println!("{mode}:");
        println!("  tokens      {:?}", run.tokens);
        println!("  exit layers {:?}", run.exit_layers());
        println!(
            "  avg exit {:.2} / {}, {:.0} FLOPs per token",
            run.avg_exit(),
            weights.config().n_layers,
            run.ledger.flops_per_token()
        );
    }
    Ok(())
}
