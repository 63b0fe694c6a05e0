//! The whole experiment end to end on the small preset: corpus, the three
//! systems and both ablations, evaluation and few-shot finetuning.
//!
//! `cargo run --example reproduce -p pivot-align [-- <out dir>]`
//!
//! The full-size run is `pivot-align reproduce`.

use std::path::PathBuf;

use pivot_align::pipeline::reproduce;
use pivot_align::RunConfig;

fn main() -> pivot_align::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("pivot-align-reproduce"));
    let summary = reproduce(&RunConfig::small(), &out, &mut std::io::stderr())?;
    print!("{}", summary.to_csv());
    println!("manifest: {}", out.join("manifest.json").display());
    Ok(())
}
