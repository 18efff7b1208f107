//! Feature drift of probe embeddings over a training run.
//!
//! Run with `cargo run --release --example drift_analysis`.

use xbm::config::DataConfig;
use xbm::drift::{drift_experiment, DriftPlan};
use xbm::train::TrainConfig;

fn main() -> xbm::Result<()> {
    let data = DataConfig::default().load()?;
    let config = TrainConfig::default();
    let plan = DriftPlan::every(&DriftPlan::PAPER_STEPS, 250, config.iterations);
    let (report, _) = drift_experiment(&data.train, &config, &plan)?;

    println!("{:>6} {:>12} {:>12} {:>12}", "t", "dt=10", "dt=100", "dt=1000");
    for &t in &plan.eval_iters {
        let cell = |dt| report.mean_at(t, dt).map_or("-".to_string(), |d| format!("{d:.2e}"));
        println!("{t:>6} {:>12} {:>12} {:>12}", cell(10), cell(100), cell(1000));
    }
    println!("\nlearning rate drops at iteration {:?}", config.lr_decay_at);
    Ok(())
}
