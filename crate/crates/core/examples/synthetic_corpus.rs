//! Writes a synthetic corpus (PPM images plus `manifest.jsonl`).
//!
//! Usage: `cargo run --example synthetic_corpus -- <dir> [count] [size] [seed]`

use std::path::PathBuf;
use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(dir) = args.first().map(PathBuf::from) else {
        eprintln!("usage: synthetic_corpus <dir> [count] [size] [seed]");
        return ExitCode::from(1);
    };
    let arg = |i: usize, default: u64| args.get(i).map_or(Ok(default), |s| s.parse::<u64>());
    let (Ok(count), Ok(size), Ok(seed)) = (arg(1, 64), arg(2, 64), arg(3, 7)) else {
        eprintln!("count, size and seed must be non-negative integers");
        return ExitCode::from(1);
    };
    match textstyle::synthetic::write_corpus(&dir, count as usize, size as usize, seed) {
        Ok(samples) => {
            println!("wrote {} samples to {}", samples.len(), dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
