//! The cross-batch memory as a FIFO, and its loss against the in-batch loss.
//!
//! Run with `cargo run --example memory_queue`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbm::losses::{pair_loss, LossHyperparams, PairSide};
use xbm::memory::XbmState;
use xbm::tensor::{l2_normalize, DenseMatrix};
use xbm::Label;

fn batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> xbm::Result<DenseMatrix> {
    let rows = (0..n)
        .map(|_| l2_normalize(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
        .collect::<xbm::Result<Vec<_>>>()?;
    DenseMatrix::from_rows(&rows)
}

fn main() -> xbm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = LossHyperparams {
        lambda_contrastive: 0.0,
        ..LossHyperparams::default()
    };
    let mut memory = XbmState::new(12, 4, 100)?;
    let mut next_id = 0;
    for iteration in 0..5 {
        let e = batch(&mut rng, 4, 4)?;
        let labels: Vec<Label> = vec![0, 0, 1, 1];
        let ids: Vec<usize> = (next_id..next_id + 4).collect();
        next_id += 4;

        memory.update(&e, &labels, &ids, iteration)?;
        let anchors = PairSide::new(&e, &labels, &ids)?;
        let with_memory = memory.loss(anchors, &h)?;
        let in_batch = pair_loss(anchors, anchors, &h)?;
        println!(
            "iter {iteration}: memory ids {:?}\n        valid negatives {} from memory vs {} in batch, loss {:.3} vs {:.3}",
            memory.ids(),
            with_memory.valid_negative_count,
            in_batch.valid_negative_count,
            with_memory.loss,
            in_batch.loss
        );
    }
    Ok(())
}
