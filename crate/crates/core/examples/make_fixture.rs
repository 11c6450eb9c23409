//! Writes the canonical agentic/linear pair as an import bundle.
//!
//! ```text
//! cargo run -p goalmeter --example make_fixture -- crates/core/tests/fixtures/canonical
//! ```

use std::path::PathBuf;

use goalmeter::fixtures::seed_canonical;
use goalmeter::store::Store;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .ok_or("usage: make_fixture <out-dir>")?;
    std::fs::create_dir_all(&out)?;
    let mut store = Store::open_in_memory()?;
    seed_canonical(&mut store)?;
    store.export_bundle(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
