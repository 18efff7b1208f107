//! Recall@K with self-exclusion, written as CSV and JSON.
//!
//! Run with `cargo run --example retrieval_eval -- [OUT_DIR]`.

use std::path::PathBuf;

use xbm::data::synth_clusters;
use xbm::eval::{recall_at_k, RetrievalSet};

fn main() -> xbm::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().display().to_string()));
    // raw features, normalized, used directly as embeddings
    let data = synth_clusters(20, 10, 16, 1.0, 0.3, 7)?;
    let embeddings = data.features().normalize_rows()?;
    let all = RetrievalSet {
        embeddings: &embeddings,
        labels: data.labels(),
        ids: data.ids(),
    };
    let report = recall_at_k(all, all, &[1, 5, 10, 50], true)?;
    print!("{}", report.to_csv());
    report.write_csv(&out.join("recall.csv"))?;
    report.write_json(&out.join("recall.json"))?;
    println!("wrote {}/recall.{{csv,json}}", out.display());
    Ok(())
}
