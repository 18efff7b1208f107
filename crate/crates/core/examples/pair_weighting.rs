//! Pair weights of the three loss schemes on a hand-made batch.
//!
//! Run with `cargo run --example pair_weighting`.

use xbm::losses::{pair_loss, pair_weights, similarity, LossHyperparams, PairSide, Scheme};
use xbm::tensor::{l2_normalize, DenseMatrix};

fn main() -> xbm::Result<()> {
    // two classes, two instances each; instance 2 sits close to class 0
    let rows = [
        l2_normalize(&[1.0, 0.1, 0.0])?,
        l2_normalize(&[0.9, -0.2, 0.1])?,
        l2_normalize(&[0.8, 0.5, 0.0])?,
        l2_normalize(&[0.0, 1.0, 0.3])?,
    ];
    let e = DenseMatrix::from_rows(&rows)?;
    let labels = [0, 0, 1, 1];
    let ids = [0, 1, 2, 3];
    let batch = PairSide::new(&e, &labels, &ids)?;

    let sim = similarity(batch, batch)?;
    println!("similarities:");
    for i in 0..sim.anchors() {
        let row: Vec<String> = (0..sim.others()).map(|j| format!("{:+.3}", sim.get(i, j))).collect();
        println!("  {}", row.join("  "));
    }

    for scheme in Scheme::ALL {
        let h = LossHyperparams::with_scheme(scheme);
        let w = pair_weights(&sim, &h)?;
        let r = pair_loss(batch, batch, &h)?;
        println!("\n{scheme}: loss {:.4}, valid negatives {}, valid positives {}", r.loss, r.valid_negative_count, r.valid_positive_count);
        for i in 0..w.values().rows() {
            let row: Vec<String> = (0..w.values().cols()).map(|j| format!("{:.3}", w.get(i, j))).collect();
            println!("  {}", row.join("  "));
        }
    }
    Ok(())
}
