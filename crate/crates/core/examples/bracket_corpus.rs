//! Writes train/valid/test splits of the synthetic bracket corpus.
//!
//! cargo run --release --example bracket_corpus -- OUT_DIR [TRAIN_TOKENS] [SEED] [BRACKET_TYPES] [FILLERS] [SUCCESSOR_PROB]

use std::fs;
use std::path::PathBuf;

use lstmn::synthetic::{bracket_corpus, BracketSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("bracket-data", String::as_str));
    let tokens: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(50_000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    fs::create_dir_all(&out).expect("create output directory");
    let mut spec = BracketSpec::default();
    if let Some(types) = args.get(3).and_then(|s| s.parse().ok()) {
        spec.bracket_types = types;
    }
    if let Some(fillers) = args.get(4).and_then(|s| s.parse().ok()) {
        spec.fillers = fillers;
    }
    if let Some(p) = args.get(5).and_then(|s| s.parse().ok()) {
        spec.successor_prob = p;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, size) in [
        ("train", tokens),
        ("valid", tokens / 10),
        ("test", tokens / 10),
    ] {
        let text: String = bracket_corpus(&mut rng, &spec, size)
            .iter()
            .map(|s| s.join(" ") + "\n")
            .collect();
        fs::write(out.join(format!("{name}.txt")), text).expect("write split");
    }
}
