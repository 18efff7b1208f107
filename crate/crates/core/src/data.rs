//! Datasets and on-disk formats.
//!
//! # Binary matrix layout
//!
//! ```text
//! offset  size        field
//! 0       4           magic  b"XBMM"
//! 4       4           format version, u32 little-endian (currently 1)
//! 8       8           rows, u64 little-endian
//! 16      8           cols, u64 little-endian
//! 24      8*rows*cols values, f64 little-endian, row-major
//! ```
//!
//! # Checkpoints
//!
//! One line of JSON (`{"format":"xbm-checkpoint","version":1,"layers":[[out,in],..]}`)
//! terminated by `\n`, followed for each layer by its weight matrix
//! (`out x in`) and its bias (`1 x out`), both as binary matrix blocks.
//!
//! # Embedding snapshots
//!
//! CSV with header `id,label,iter,e0,e1,..`, one row per stored embedding.
//! Floats are written in shortest round-trip form, so reading a snapshot
//! back gives bit-identical values.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{l2_normalize, DenseMatrix, EmbeddingNet, Linear};
use crate::Label;

/// Features with labels, ids `0..N` and a class index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: DenseMatrix,
    labels: Vec<Label>,
    ids: Vec<usize>,
    class_index: BTreeMap<Label, Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(features: DenseMatrix, labels: Vec<Label>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let mut class_index: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
        for (id, &label) in labels.iter().enumerate() {
            class_index.entry(label).or_default().push(id);
        }
        Ok(Self {
            ids: (0..labels.len()).collect(),
            features,
            labels,
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Label -> ids of that class, in increasing id order.
    pub fn class_index(&self) -> &BTreeMap<Label, Vec<usize>> {
        &self.class_index
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    /// Features of the given instances, in order.
    pub fn rows(&self, ids: &[usize]) -> DenseMatrix {
        self.features.gather_rows(ids)
    }

    pub fn labels_of(&self, ids: &[usize]) -> Vec<Label> {
        ids.iter().map(|&i| self.labels[i]).collect()
    }

    /// Splits every class into its first `train_per_class` instances and the
    /// rest. Both halves are renumbered `0..n`.
    pub fn split_per_class(&self, train_per_class: usize) -> Result<(Self, Self)> {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for ids in self.class_index.values() {
            if ids.len() <= train_per_class {
                return Err(Error::Config(format!(
                    "class has {} instances, cannot keep {train_per_class} for training and hold out the rest",
                    ids.len()
                )));
            }
            train.extend_from_slice(&ids[..train_per_class]);
            held.extend_from_slice(&ids[train_per_class..]);
        }
        train.sort_unstable();
        held.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&held)?))
    }

    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        Self::new(self.rows(ids), self.labels_of(ids))
    }

    /// `self` followed by `other`, renumbered.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::new(self.features.vstack(&other.features)?, labels)
    }
}

/// Gaussian clusters around class centers on a sphere.
///
/// Class `c` gets a center drawn uniformly on the sphere of radius
/// `center_scale`; each of its `per_class` instances is that center plus
/// isotropic noise with standard deviation `noise_sigma`. Instances are laid
/// out class by class.
pub fn synth_clusters(
    num_classes: usize,
    per_class: usize,
    d_in: usize,
    center_scale: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes == 0 || per_class == 0 || d_in == 0 {
        return Err(Error::Config(format!(
            "synthetic data needs positive counts, got {num_classes} classes x {per_class} of dim {d_in}"
        )));
    }
    if !(center_scale.is_finite() && center_scale > 0.0) {
        return Err(Error::Config(format!("center_scale must be > 0, got {center_scale}")));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(num_classes * per_class * d_in);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let center = loop {
            let g: Vec<f64> = (0..d_in).map(|_| std_normal.sample(&mut rng)).collect();
            if let Ok(u) = l2_normalize(&g) {
                break u;
            }
        };
        for _ in 0..per_class {
            for &c in &center {
                data.push(c * center_scale + noise_sigma * std_normal.sample(&mut rng));
            }
            labels.push(class as Label);
        }
    }
    LabeledDataset::new(
        DenseMatrix::new(num_classes * per_class, d_in, data)?,
        labels,
    )
}

/// Column layout of a delimited dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelimitedSchema {
    /// Zero-based column holding the integer label; every other column is a
    /// feature.
    pub label_column: usize,
    pub has_header: bool,
}

impl Default for DelimitedSchema {
    fn default() -> Self {
        Self {
            label_column: 0,
            has_header: true,
        }
    }
}

/// Reads a comma-separated dataset.
pub fn load_delimited(path: &Path, schema: &DelimitedSchema) -> Result<LabeledDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse {
                line,
                msg: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {w} fields, found {}", record.len()),
                })
            }
            _ => {}
        }
        if schema.label_column >= record.len() {
            return Err(Error::Parse {
                line,
                msg: format!(
                    "label column {} missing from {} fields",
                    schema.label_column,
                    record.len()
                ),
            });
        }
        for (col, field) in record.iter().enumerate() {
            if col == schema.label_column {
                let label: i64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("label `{field}` is not an integer"),
                })?;
                let label = Label::try_from(label).map_err(|_| Error::Parse {
                    line,
                    msg: format!("label {label} is out of range (must be >= 0)"),
                })?;
                labels.push(label);
            } else {
                let value: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("feature column {col}: `{field}` is not a number"),
                })?;
                if !value.is_finite() {
                    return Err(Error::Parse {
                        line,
                        msg: format!("feature column {col} is not finite"),
                    });
                }
                data.push(value);
            }
        }
    }
    let cols = width.map_or(0, |w| w - 1);
    LabeledDataset::new(DenseMatrix::new(labels.len(), cols, data)?, labels)
}

/// Writes a dataset as `label,f0,f1,..` with a header row.
pub fn save_delimited(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    atomic_write(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["label".to_string()];
        header.extend((0..dataset.dim()).map(|i| format!("f{i}")));
        out.write_record(&header).map_err(csv_to_io)?;
        for (row, label) in dataset.features().iter_rows().zip(dataset.labels()) {
            let mut rec = vec![label.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            out.write_record(&rec).map_err(csv_to_io)?;
        }
        out.flush()
    })
}

fn csv_to_io(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

const MATRIX_MAGIC: &[u8; 4] = b"XBMM";
const MATRIX_VERSION: u32 = 1;

pub fn write_matrix<W: Write>(w: &mut W, m: &DenseMatrix) -> io::Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for x in m.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Format(format!("reading {what}: {e}")),
    })
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<DenseMatrix> {
    let mut header = [0u8; 24];
    read_exact_or_format(r, &mut header, "matrix header")?;
    if &header[..4] != MATRIX_MAGIC {
        return Err(Error::Format("bad matrix magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != MATRIX_VERSION {
        return Err(Error::Format(format!("unsupported matrix version {version}")));
    }
    let rows = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(header[16..24].try_into().expect("8 bytes"));
    let count = rows
        .checked_mul(cols)
        .and_then(|n| usize::try_from(n).ok())
        .filter(|n| n.checked_mul(8).is_some())
        .ok_or_else(|| Error::Format(format!("implausible matrix shape {rows}x{cols}")))?;
    let mut data = Vec::with_capacity(count.min(1 << 24));
    let mut buf = [0u8; 8];
    for _ in 0..count {
        read_exact_or_format(r, &mut buf, "matrix payload")?;
        data.push(f64::from_le_bytes(buf));
    }
    DenseMatrix::new(rows as usize, cols as usize, data)
        .map_err(|e| Error::Format(format!("invalid matrix payload: {e}")))
}

pub fn save_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    atomic_write(path, |w| write_matrix(w, m))
}

/// Loads a matrix file; trailing bytes after the payload are a format error.
pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let m = read_matrix(&mut r)?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(m),
        Ok(_) => Err(Error::Format(format!(
            "{}: payload longer than header shape {}x{}",
            path.display(),
            m.rows(),
            m.cols()
        ))),
        Err(e) => Err(Error::io(path, e)),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    layers: Vec<[usize; 2]>,
}

const CHECKPOINT_FORMAT: &str = "xbm-checkpoint";

pub fn save_checkpoint(path: &Path, net: &EmbeddingNet) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        layers: net
            .layers()
            .iter()
            .map(|l| [l.output_dim(), l.input_dim()])
            .collect(),
    };
    let line = serde_json::to_string(&header).expect("header serializes");
    atomic_write(path, |w| {
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        for layer in net.layers() {
            write_matrix(w, layer.weight())?;
            let bias = DenseMatrix::new(1, layer.bias().len(), layer.bias().to_vec())
                .map_err(io::Error::other)?;
            write_matrix(w, &bias)?;
        }
        Ok(())
    })
}

pub fn load_checkpoint(path: &Path) -> Result<EmbeddingNet> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        read_exact_or_format(&mut r, &mut byte, "checkpoint header")?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 1 << 20 {
            return Err(Error::Format("checkpoint header too long".into()));
        }
    }
    let header: CheckpointHeader = serde_json::from_slice(&line)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(Error::Format(format!(
            "not a version 1 checkpoint: {} v{}",
            header.format, header.version
        )));
    }
    let mut layers = Vec::with_capacity(header.layers.len());
    for [out, inp] in header.layers {
        let w = read_matrix(&mut r)?;
        let b = read_matrix(&mut r)?;
        if w.shape() != (out, inp) || b.shape() != (1, out) {
            return Err(Error::Format(format!(
                "layer blocks {}x{} / {}x{} disagree with header {out}x{inp}",
                w.rows(),
                w.cols(),
                b.rows(),
                b.cols()
            )));
        }
        layers.push(Linear::new(w, b.into_data())?);
    }
    EmbeddingNet::from_layers(layers).map_err(|e| Error::Format(e.to_string()))
}

/// One stored embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRow {
    pub id: usize,
    pub label: Label,
    pub iteration: usize,
    pub embedding: Vec<f64>,
}

pub fn write_snapshot_csv<'a, I>(path: &Path, rows: I) -> Result<()>
where
    I: IntoIterator<Item = &'a SnapshotRow>,
{
    let rows: Vec<&SnapshotRow> = rows.into_iter().collect();
    let dim = rows.first().map_or(0, |r| r.embedding.len());
    if rows.iter().any(|r| r.embedding.len() != dim) {
        return Err(Error::Shape("snapshot rows differ in dimension".into()));
    }
    atomic_write(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string(), "label".into(), "iter".into()];
        header.extend((0..dim).map(|i| format!("e{i}")));
        out.write_record(&header).map_err(csv_to_io)?;
        for r in &rows {
            let mut rec = vec![r.id.to_string(), r.label.to_string(), r.iteration.to_string()];
            rec.extend(r.embedding.iter().map(f64::to_string));
            out.write_record(&rec).map_err(csv_to_io)?;
        }
        out.flush()
    })
}

pub fn read_snapshot_csv(path: &Path) -> Result<Vec<SnapshotRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |what: &str| Error::Parse {
            line,
            msg: format!("bad {what}"),
        };
        if record.len() < 3 {
            return Err(bad("row width"));
        }
        let embedding = record
            .iter()
            .skip(3)
            .map(|f| f.parse::<f64>().map_err(|_| bad("embedding value")))
            .collect::<Result<Vec<_>>>()?;
        rows.push(SnapshotRow {
            id: record[0].parse().map_err(|_| bad("id"))?,
            label: record[1].parse().map_err(|_| bad("label"))?,
            iteration: record[2].parse().map_err(|_| bad("iter"))?,
            embedding,
        });
    }
    Ok(rows)
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes through a temporary sibling file and renames it into place, so a
/// reader never observes a partially written file.
pub fn atomic_write<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> io::Result<()>,
{
    let tmp = temp_path(path);
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    let outcome = fill(&mut w).and_then(|_| w.flush());
    if let Err(e) = outcome {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Picks `count` distinct indices below `n`, seeded.
pub(crate) fn sample_without_replacement<R: Rng>(rng: &mut R, n: usize, count: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, count).into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn zero_noise_gives_identical_class_members() {
        let ds = synth_clusters(3, 4, 5, 2.0, 0.0, 1).unwrap();
        for ids in ds.class_index().values() {
            for &i in ids {
                assert_eq!(ds.features().row(i), ds.features().row(ids[0]));
            }
        }
    }

    #[test]
    fn synthesis_is_seeded() {
        let a = synth_clusters(4, 3, 6, 1.0, 0.3, 9).unwrap();
        let b = synth_clusters(4, 3, 6, 1.0, 0.3, 9).unwrap();
        let c = synth_clusters(4, 3, 6, 1.0, 0.3, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn synthesis_rejects_zero_counts() {
        assert!(synth_clusters(0, 3, 2, 1.0, 0.1, 0).is_err());
        assert!(synth_clusters(3, 0, 2, 1.0, 0.1, 0).is_err());
        assert!(synth_clusters(3, 3, 0, 1.0, 0.1, 0).is_err());
    }

    /// Leave-one-out 1-NN accuracy by Euclidean distance.
    fn one_nn_accuracy(ds: &LabeledDataset) -> f64 {
        let f = ds.features();
        let mut correct = 0;
        for i in 0..ds.len() {
            let mut best = (f64::INFINITY, usize::MAX);
            for j in 0..ds.len() {
                if i == j {
                    continue;
                }
                let d: f64 = f.row(i).iter().zip(f.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            if ds.labels()[best.1] == ds.labels()[i] {
                correct += 1;
            }
        }
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn well_separated_clusters_are_nearest_neighbor_separable() {
        let ds = synth_clusters(20, 10, 16, 10.0, 0.1, 3).unwrap();
        assert!(one_nn_accuracy(&ds) > 0.99);
    }

    #[test]
    fn class_index_inverts_labels() {
        let ds = synth_clusters(5, 7, 3, 1.0, 0.5, 4).unwrap();
        let mut rebuilt = vec![None; ds.len()];
        for (&label, ids) in ds.class_index() {
            assert!(!ids.is_empty());
            for &i in ids {
                assert!(rebuilt[i].is_none());
                rebuilt[i] = Some(label);
            }
        }
        let rebuilt: Vec<Label> = rebuilt.into_iter().map(Option::unwrap).collect();
        assert_eq!(rebuilt, ds.labels());
        assert_eq!(ds.ids(), (0..ds.len()).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn split_and_concat() {
        let ds = synth_clusters(4, 5, 3, 1.0, 0.5, 4).unwrap();
        let (train, held) = ds.split_per_class(3).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(held.len(), 8);
        assert!(train.class_index().values().all(|v| v.len() == 3));
        assert_eq!(train.concat(&held).unwrap().len(), 20);
        assert!(ds.split_per_class(5).is_err());
    }

    #[test]
    fn delimited_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "label,a,b\n0,1.5,2\n1,-3,4e-1\n0,0,0\n").unwrap();
        let ds = load_delimited(&path, &DelimitedSchema::default()).unwrap();
        assert_eq!(ds.features().shape(), (3, 2));
        assert_eq!(ds.labels(), &[0, 1, 0]);
        assert_eq!(ds.features().row(1), &[-3.0, 0.4]);
    }

    #[test]
    fn delimited_label_in_last_column_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "1.0,2.0,7\n3.0,4.0,8\n").unwrap();
        let schema = DelimitedSchema {
            label_column: 2,
            has_header: false,
        };
        let ds = load_delimited(&path, &schema).unwrap();
        assert_eq!(ds.labels(), &[7, 8]);
        assert_eq!(ds.features().row(1), &[3.0, 4.0]);
    }

    #[test]
    fn delimited_text_feature_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "label,a,b\n0,1,2\n1,oops,2\n").unwrap();
        match load_delimited(&path, &DelimitedSchema::default()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("oops"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn delimited_ragged_and_negative_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "label,a,b\n0,1,2\n1,2\n").unwrap();
        assert!(matches!(
            load_delimited(&path, &DelimitedSchema::default()),
            Err(Error::Parse { line: 3, .. })
        ));
        fs::write(&path, "label,a\n-1,2\n").unwrap();
        assert!(matches!(
            load_delimited(&path, &DelimitedSchema::default()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn delimited_missing_file() {
        let err = load_delimited(Path::new("/nonexistent/x.csv"), &DelimitedSchema::default());
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    #[test]
    fn delimited_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = synth_clusters(3, 4, 5, 1.0, 0.7, 2).unwrap();
        save_delimited(&path, &ds).unwrap();
        assert_eq!(load_delimited(&path, &DelimitedSchema::default()).unwrap(), ds);
    }

    #[test]
    fn matrix_empty_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_matrix(&path, &DenseMatrix::zeros(0, 0)).unwrap();
        assert_eq!(load_matrix(&path).unwrap(), DenseMatrix::zeros(0, 0));
    }

    #[test]
    fn matrix_truncated_and_oversized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        save_matrix(&path, &m).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_matrix(&path), Err(Error::Format(_))));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0u8; 8]);
        fs::write(&path, &longer).unwrap();
        assert!(matches!(load_matrix(&path), Err(Error::Format(_))));
        fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(load_matrix(&path), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = EmbeddingNet::init(&[5, 7, 3], 11).unwrap();
        save_checkpoint(&path, &net).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, net);
        let x = DenseMatrix::from_rows(&[[0.1, 0.2, 0.3, 0.4, 0.5]]).unwrap();
        assert_eq!(back.embed(&x).unwrap(), net.embed(&x).unwrap());
    }

    #[test]
    fn snapshot_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let rows = vec![
            SnapshotRow {
                id: 3,
                label: 1,
                iteration: 10,
                embedding: l2_normalize(&[0.1, 0.7, -0.3]).unwrap(),
            },
            SnapshotRow {
                id: 8,
                label: 0,
                iteration: 11,
                embedding: l2_normalize(&[1.0 / 3.0, 2.0, 1e-9]).unwrap(),
            },
        ];
        write_snapshot_csv(&path, &rows).unwrap();
        let back = read_snapshot_csv(&path).unwrap();
        assert_eq!(back, rows);
        assert!((dot(&back[0].embedding, &back[0].embedding) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        save_matrix(&path, &DenseMatrix::identity(2)).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("x.bin")]);
    }

    proptest! {
        #[test]
        fn matrix_round_trip_is_bitwise(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..rows * cols).map(|_| rng.random_range(-1e6..1e6)).collect();
            let m = DenseMatrix::new(rows, cols, data).unwrap();
            let mut buf = Vec::new();
            write_matrix(&mut buf, &m).unwrap();
            let back = read_matrix(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            prop_assert!(back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
