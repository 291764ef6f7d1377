//! Writes a planted synthetic corpus. With no arguments this regenerates the
//! bundled fixture:
//!
//!     cargo run --example make_fixture -- [OUT] [IMAGES] [SEED]
use std::path::PathBuf;

use capgen::synth::{generate, SynthConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("fixtures/synthetic50.jsonl"));
    let images = args.next().map_or(50, |s| s.parse().expect("IMAGES must be a number"));
    let seed = args.next().map_or(2015, |s| s.parse().expect("SEED must be a number"));
    let corpus = generate(&SynthConfig { images, seed, ..Default::default() }).expect("valid synthetic corpus");
    corpus.dataset.write(&out).expect("write fixture");
    eprintln!("wrote {} images to {}", corpus.dataset.len(), out.display());
}
