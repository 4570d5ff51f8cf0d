//! Measures how early the final-layer token reaches a low rank among the
//! logits of every layer, and prints the per-layer summary as CSV.

use eevo::analysis::{rank_summary, rank_trace};
use eevo::{init_random_with, InitScheme, ModelConfig};

fn main() -> eevo::Result<()> {
    let weights = init_random_with(ModelConfig::default(), 11, InitScheme::Scaled)?;
    let prompts: [&[u32]; 3] = [&[5, 9, 13], &[100, 2], &[7, 7, 7, 7]];
    let traces = prompts
        .iter()
        .map(|p| rank_trace(&weights, p, 16))
        .collect::<eevo::Result<Vec<_>>>()?;
    let summary = rank_summary(&traces, &[1, 10, 64, 100])?;
    print!("{}", summary.to_csv());
    let l = weights.config().n_layers;
    for layer in 1..=l {
        if summary.coverage(layer, 64) == Some(1.0) {
            println!("the final token is inside the top 64 from layer {layer} on every step");
            break;
        }
    }
    Ok(())
}
