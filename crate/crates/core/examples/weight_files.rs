//! Saves a model, loads it back and shows the errors reported for damaged
//! files.

use eevo::model::{load_weights, parse_weights, save_weights};
use eevo::{init_random_with, InitScheme, ModelConfig};

fn main() -> eevo::Result<()> {
    let weights = init_random_with(ModelConfig::default(), 1, InitScheme::Scaled)?;
    let path = std::env::temp_dir().join("eevo-example.eevo");
    save_weights(&weights, &path)?;
    let back = load_weights(&path)?;
    println!("{}: {} bytes, identical after reload: {}", path.display(), weights.to_bytes().len(), back == weights);

    let bytes = weights.to_bytes();
    let mut magic = bytes.clone();
    magic[0] = b'X';
    let mut layers = bytes.clone();
    layers[8..12].copy_from_slice(&0u32.to_le_bytes());
    let damaged: [(&str, &[u8]); 3] = [("bad magic", &magic), ("zero layers", &layers), ("truncated", &bytes[..100])];
    for (what, b) in damaged {
        match parse_weights(b) {
            Ok(_) => println!("{what}: unexpectedly accepted"),
            Err(e) => println!("{what}: {e}"),
        }
    }
    std::fs::remove_file(path)?;
    Ok(())
}
