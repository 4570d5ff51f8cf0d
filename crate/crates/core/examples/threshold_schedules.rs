//! Prints static and decaying exit thresholds over a generation horizon and
//! their effect on average exit depth.

use eevo::policy::threshold_at;
use eevo::{generate, init_random_with, DecodeMode, ExitPolicy, InitScheme, ModelConfig, StopCondition, ThresholdSchedule};

fn main() -> eevo::Result<()> {
    let n = 32;
    let schedules = [
        ThresholdSchedule::Static { lambda: 0.9 },
        ThresholdSchedule::Decaying { lambda: 0.9, tau: 4.0 },
    ];
    for s in &schedules {
        let values = (0..n).step_by(4).map(|t| threshold_at(s, t, n)).collect::<eevo::Result<Vec<_>>>()?;
        println!("{s:?}: {values:.3?}");
    }

    let weights = init_random_with(ModelConfig::default(), 5, InitScheme::Scaled)?;
    for schedule in schedules {
        let policy = ExitPolicy {
            schedule,
            max_new_tokens: n,
            ..ExitPolicy::default()
        };
        let run = generate(&weights, &[9, 9, 1], &policy, DecodeMode::Dvp, StopCondition::new(n))?;
        println!("{schedule:?}: avg exit {:.2}", run.avg_exit());
    }
    Ok(())
}
