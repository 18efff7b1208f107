//! Synthetic data, delimited text, binary matrices and checkpoints.
//!
//! Run with `cargo run --example data_io`.

use xbm::data::{
    load_checkpoint, load_delimited, load_matrix, save_checkpoint, save_delimited, save_matrix,
    synth_clusters, DelimitedSchema,
};
use xbm::tensor::EmbeddingNet;

fn main() -> xbm::Result<()> {
    let dir = std::env::temp_dir().join("xbm-data-io");
    std::fs::create_dir_all(&dir).map_err(|e| xbm::Error::Config(e.to_string()))?;

    let data = synth_clusters(5, 4, 3, 2.0, 0.1, 1)?;
    println!("{} instances, {} classes, dim {}", data.len(), data.num_classes(), data.dim());

    let csv = dir.join("data.csv");
    save_delimited(&csv, &data)?;
    let back = load_delimited(&csv, &DelimitedSchema::default())?;
    println!("delimited round trip equal: {}", back == data);
    println!("{}", std::fs::read_to_string(&csv).unwrap_or_default().lines().take(3).collect::<Vec<_>>().join("\n"));

    let bin = dir.join("features.bin");
    save_matrix(&bin, data.features())?;
    println!("matrix round trip bit-exact: {}", &load_matrix(&bin)? == data.features());

    let net = EmbeddingNet::init(&[3, 8, 4], 0)?;
    let ckpt = dir.join("net.bin");
    save_checkpoint(&ckpt, &net)?;
    println!("checkpoint round trip equal: {}", load_checkpoint(&ckpt)? == net);
    println!("files in {}", dir.display());
    Ok(())
}
