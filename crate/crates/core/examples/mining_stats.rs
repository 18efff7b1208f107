//! Valid negatives found in the memory versus in the mini-batch.
//!
//! Run with `cargo run --release --example mining_stats`.

use xbm::config::DataConfig;
use xbm::eval::{mining_report, MiningSample};
use xbm::train::{train, TrainConfig};

fn main() -> xbm::Result<()> {
    let data = DataConfig::default().load()?;
    let config = TrainConfig {
        iterations: 1000,
        lr_decay_at: vec![800],
        ..TrainConfig::default()
    };
    let out = train(&data.train, &config)?;
    let samples: Vec<MiningSample> = out.log.iter().map(MiningSample::from).collect();
    let rows = mining_report(&samples, 100);
    println!("{:>6} {:>10} {:>10}", "iter", "mean_mem", "mean_batch");
    for r in rows.iter().filter(|r| (r.iter + 1) % 100 == 0) {
        println!("{:>6} {:>10.1} {:>10.2}", r.iter, r.mean_mem, r.mean_batch);
    }
    println!("\nwarm-up ends at iteration {}; memory holds {} entries", config.warmup_iterations, out.memory.map_or(0, |m| m.len()));
    Ok(())
}
