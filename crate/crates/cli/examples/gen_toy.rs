//! Regenerate the toy corpora: `cargo run -p tlm-cli --example gen_toy [DIR]`.
//!
//! Writes into `data/toy` by default and prints `sha256  path` lines for
//! the files written, in the format of `data/toy/SHA256SUMS`.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/toy"));
    let files = match tlm_core::toy::write_corpora(&dir) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    };
    for rel in files {
        let bytes = std::fs::read(dir.join(&rel)).expect("file just written");
        let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        println!("{digest}  {}", rel.display());
    }
}
