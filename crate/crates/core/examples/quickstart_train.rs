//! Train with and without the cross-batch memory on synthetic clusters and
//! compare held-out Recall@K.
//!
//! Run with `cargo run --release --example quickstart_train`.

use xbm::config::DataConfig;
use xbm::eval::evaluate_heldout;
use xbm::train::{train, TrainConfig};

fn main() -> xbm::Result<()> {
    let data = DataConfig::default().load()?;
    let heldout = data.heldout.as_ref().expect("synthetic data has a held-out split");
    println!(
        "{} training instances in {} classes, {} held-out queries",
        data.train.len(),
        data.train.num_classes(),
        heldout.len()
    );

    for enabled in [false, true] {
        let mut config = TrainConfig::default();
        config.xbm.enabled = enabled;
        let out = train(&data.train, &config)?;
        let report = evaluate_heldout(&out.net, &data.train, heldout, &[1, 2, 4, 8])?;
        let last = out.log.last().expect("at least one iteration");
        println!(
            "{:<8} final loss {:.4}  {}",
            if enabled { "xbm" } else { "baseline" },
            last.loss,
            report
                .ks
                .iter()
                .zip(&report.recall)
                .map(|(k, r)| format!("R@{k} {:.1}%", 100.0 * r))
                .collect::<Vec<_>>()
                .join("  ")
        );
    }
    Ok(())
}
