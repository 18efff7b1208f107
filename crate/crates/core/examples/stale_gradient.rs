//! Gradient error of a single negative pair when its partner embedding is
//! stale, relative to how far the partner has drifted.
//!
//! Run with `cargo run --example stale_gradient`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xbm::drift::{stale_pair_check, stale_pair_sweep};
use xbm::tensor::{embed_one, EmbeddingNet};

fn main() -> xbm::Result<()> {
    let net = EmbeddingNet::init(&[8, 32, 16], 3)?;
    let x_i = [0.4, -0.3, 1.0, 0.2, -0.8, 0.5, 0.1, -0.6];
    let x_j = [-0.2, 0.9, 0.3, -0.5, 0.4, 0.0, 0.7, 0.2];
    let v_j = embed_one(&net, &x_j)?;

    // the error is quadratic in the size of the perturbation
    let delta: Vec<f64> = (0..16).map(|k| 0.02 * ((k % 5) as f64 - 2.0)).collect();
    for scale in [1.0, 0.5, 0.25] {
        let stale: Vec<f64> = v_j.iter().zip(&delta).map(|(v, d)| v + scale * d).collect();
        let r = stale_pair_check(&net, &x_i, &v_j, &stale)?;
        println!("scale {scale:<5} epsilon {:.3e}  grad error {:.3e}  ratio {:.5}", r.epsilon, r.grad_error_sq, r.ratio);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let records = stale_pair_sweep(&net, &x_i, &v_j, 1000, 0.1, &mut rng)?;
    let c = records.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let mean = records.iter().map(|r| r.ratio).sum::<f64>() / records.len() as f64;
    println!("\n{} random stale vectors: ratio mean {mean:.4}, max {c:.4}", records.len());
    Ok(())
}
