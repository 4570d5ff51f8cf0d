//! Builds a pruned vocabulary from one layer's logits and shows that later
//! projections onto it reproduce the full logits of the kept rows exactly,
//! while the renormalized confidence can only go up.

use eevo::dvp::prune;
use eevo::math::{matvec, softmax};
use eevo::model::{forward_all, KvCache};
use eevo::policy::{confidence_from_logits, ConfidenceMeasure};
use eevo::{init_random_with, InitScheme, ModelConfig};

fn main() -> eevo::Result<()> {
    let weights = init_random_with(ModelConfig::default(), 3, InitScheme::Scaled)?;
    let w = weights.unembedding();
    let mut cache = KvCache::new(weights.config());
    let states = forward_all(&weights, 42, &mut cache, 0)?;

    let p = 2;
    let pruned = prune(w, &matvec(w, &states[p - 1])?, 64, p)?;
    println!("kept {} of {} tokens at layer {p}", pruned.len(), w.rows());

    for (i, h) in states.iter().enumerate().skip(p) {
        let full = matvec(w, h)?;
        let local = pruned.project(h)?;
        let exact = pruned
            .token_ids()
            .iter()
            .zip(&local)
            .all(|(&id, x)| x.to_bits() == full[id as usize].to_bits());
        let m = ConfidenceMeasure::Top2Diff;
        println!(
            "layer {}: rows bit-exact={exact} top2-diff full {:.4} pruned {:.4} (max prob {:.4})",
            i + 1,
            confidence_from_logits(&full, m)?,
            confidence_from_logits(&local, m)?,
            softmax(&full)?.iter().cloned().fold(0.0, f32::max),
        );
    }
    Ok(())
}
