//! Run files with overrides, as used by the `xbm` command line.
//!
//! Run with `cargo run --example run_file`.

use xbm::config::RunConfig;

fn main() -> xbm::Result<()> {
    let text = "iterations = 500\nwarmup_iterations = 50\n[xbm]\nmemory_ratio = 0.5\n";
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| xbm::Error::Config(e.to_string()))?;
    xbm::config::apply_override(&mut table, "loss.scheme=ms")?;
    xbm::config::apply_override(&mut table, "p=8")?;
    let config = RunConfig::from_table(table)?;
    config.validate()?;
    println!(
        "scheme {}, batch {}x{}, memory ratio {}, {} iterations",
        config.train.loss.scheme, config.train.p, config.train.k, config.train.xbm.memory_ratio, config.train.iterations
    );

    match RunConfig::from_toml_str("[xbm]\nratio = 0.5\n") {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
