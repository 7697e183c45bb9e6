//! Writes a directory of synthetic PNG training images.
//!
//! `cargo run --release --example synth_data -- DIR [COUNT] [SIZE] [SEED]`

use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(dir) = args.first().map(PathBuf::from) else {
        eprintln!("usage: synth_data DIR [COUNT] [SIZE] [SEED]");
        std::process::exit(1);
    };
    let arg = |i: usize, default: u64| args.get(i).map_or(default, |s| s.parse().expect("integer argument"));
    let (n, size, seed) = (arg(1, 200), arg(2, 64), arg(3, 7));
    cae_admm::trainer::dataset::write_synthetic_dataset(&dir, n as usize, size as u32, seed).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        std::process::exit(2);
    });
}
