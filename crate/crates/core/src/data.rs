//! Datasets: IDX ingestion, disjoint partitioning, synthetic blobs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled inputs sharing one shape, every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
    label_count: usize,
    name: String,
}

impl Dataset {
    pub fn new(
        inputs: Vec<Tensor>,
        labels: Vec<usize>,
        label_count: usize,
        name: impl Into<String>,
    ) -> Result<Dataset> {
        if inputs.len() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(first) = inputs.first() {
            for x in &inputs {
                first.check_same_shape(x)?;
                if !x.in_unit_box() {
                    return Err(Error::Data("input entries must lie in [0, 1]".into()));
                }
            }
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= label_count) {
            return Err(Error::Data(format!("label {bad} outside [0, {label_count})")));
        }
        Ok(Dataset {
            inputs,
            labels,
            label_count,
            name: name.into(),
        })
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_shape(&self) -> Option<&[usize]> {
        self.inputs.first().map(Tensor::shape)
    }

    /// The items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            label_count: self.label_count,
            name: name.into(),
        }
    }

    /// The first `n` items (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.name.clone())
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parse an IDX images payload: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Format(format!(
            "images: truncated payload ({} of {need} bytes)",
            payload.len()
        )));
    }
    Ok((count, rows, cols, &payload[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Format(format!(
            "labels: truncated payload ({} of {count} bytes)",
            payload.len()
        )));
    }
    Ok(&payload[..count])
}

/// Build a dataset from in-memory IDX image and label files. Pixels are
/// scaled by `1/255`; items are shaped `[rows, cols]`.
pub fn decode_idx(images: &[u8], labels: &[u8], name: &str) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let label_bytes = parse_idx_labels(labels)?;
    if label_bytes.len() != count {
        return Err(Error::Consistency(format!(
            "{count} images but {} labels",
            label_bytes.len()
        )));
    }
    let label_count = label_bytes.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    let inputs = pixels
        .chunks_exact((rows * cols).max(1))
        .take(count)
        .map(|px| {
            Tensor::new(
                vec![rows, cols],
                px.iter().map(|&b| b as f64 / 255.0).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = label_bytes.iter().map(|&b| b as usize).collect();
    Dataset::new(inputs, labels, label_count, name)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let name = images_path
        .as_ref()
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    decode_idx(&images, &labels, &name)
}

/// Encode `[rows, cols]` images as an IDX pair. Entries are rounded to bytes.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = match ds.input_shape() {
        Some(&[r, c]) => (r, c),
        Some(&[d]) => (1, d),
        Some(other) => {
            return Err(Error::Data(format!(
                "IDX images must be 2-D, got shape {other:?}"
            )))
        }
        None => (0, 0),
    };
    let mut images = Vec::with_capacity(16 + ds.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    for x in ds.inputs() {
        images.extend(x.data().iter().map(|v| (v * 255.0).round() as u8));
    }
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend(ds.labels().iter().map(|&y| y as u8));
    Ok((images, labels))
}

/// How to carve a dataset into disjoint per-network training sets plus a
/// validation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub part_count: usize,
    pub part_size: usize,
    pub validation_size: usize,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn needed(&self) -> usize {
        self.part_count * self.part_size + self.validation_size
    }
}

/// Index sets for a plan: `(parts, validation)`, drawn from one seeded shuffle.
pub fn partition_indices(len: usize, plan: &PartitionPlan) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    if plan.part_count == 0 || plan.part_size == 0 {
        return Err(Error::Parameter(
            "partition plan needs at least one non-empty part".into(),
        ));
    }
    if plan.needed() > len {
        return Err(Error::Size {
            needed: plan.needed(),
            available: len,
        });
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(plan.seed, "partition", 0));
    let parts = order
        .chunks_exact(plan.part_size)
        .take(plan.part_count)
        .map(<[usize]>::to_vec)
        .collect();
    let start = plan.part_count * plan.part_size;
    let validation = order[start..start + plan.validation_size].to_vec();
    Ok((parts, validation))
}

pub fn partition(ds: &Dataset, plan: &PartitionPlan) -> Result<(Vec<Dataset>, Dataset)> {
    let (parts, validation) = partition_indices(ds.len(), plan)?;
    let subsets = parts
        .iter()
        .enumerate()
        .map(|(i, idx)| ds.subset(idx, format!("{}/part{i}", ds.name)))
        .collect();
    Ok((subsets, ds.subset(&validation, format!("{}/validation", ds.name))))
}

/// Gaussian clusters around `class_count` distinct anchors in
/// `[0.15, 0.85]^dim`, clipped to the unit box.
///
/// Anchors are drawn by rejection so that no two lie closer than a minimum
/// separation, which shrinks only when it cannot be met.
pub fn synth_blobs(
    class_count: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count < 2 || dim < 2 {
        return Err(Error::Parameter(
            "synthetic blobs need at least 2 classes and 2 dimensions".into(),
        ));
    }
    if !(spread >= 0.0) {
        return Err(Error::Parameter("spread must be non-negative".into()));
    }
    let mut rng = rng::stream(seed, "blobs", 0);
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(class_count);
    let mut min_sep = 0.35 * (dim as f64).sqrt();
    let mut failures = 0;
    while anchors.len() < class_count {
        let cand: Vec<f64> = (0..dim).map(|_| rng.random_range(0.15..0.85)).collect();
        let ok = anchors.iter().all(|a| {
            a.iter().zip(&cand).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt() >= min_sep
        });
        if ok {
            anchors.push(cand);
        } else {
            failures += 1;
            if failures % 64 == 0 {
                min_sep *= 0.9;
            }
        }
    }

    let mut inputs = Vec::with_capacity(class_count * per_class);
    let mut labels = Vec::with_capacity(class_count * per_class);
    for _ in 0..per_class {
        for (class, anchor) in anchors.iter().enumerate() {
            let noise = rng::gaussian_vec(&mut rng, dim, spread);
            let x = anchor
                .iter()
                .zip(noise)
                .map(|(a, e)| (a + e).clamp(0.0, 1.0))
                .collect();
            inputs.push(Tensor::vector(x)?);
            labels.push(class);
        }
    }
    Dataset::new(inputs, labels, class_count, format!("blobs-{class_count}x{dim}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 2, 2, 2] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        images.extend_from_slice(&[0, 255, 255, 0, 255, 255, 0, 0]);
        let mut labels = Vec::new();
        for v in [IDX_LABELS_MAGIC, 2] {
            labels.extend_from_slice(&v.to_be_bytes());
        }
        labels.extend_from_slice(&[3, 7]);
        (images, labels)
    }

    #[test]
    fn decodes_hand_built_idx_pair() {
        let (images, labels) = fixture();
        let ds = decode_idx(&images, &labels, "fixture").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.inputs()[0].shape(), &[2, 2]);
        assert_eq!(ds.inputs()[0].data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(ds.inputs()[1].data(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(ds.labels(), &[3, 7]);
    }

    #[test]
    fn idx_error_paths() {
        let (images, labels) = fixture();
        // image magic passed as labels
        assert!(matches!(decode_idx(&images, &images, "x"), Err(Error::Format(_))));
        assert!(matches!(
            decode_idx(&images[..images.len() - 1], &labels, "x"),
            Err(Error::Format(_))
        ));
        assert!(matches!(decode_idx(&images, &labels[..9], "x"), Err(Error::Format(_))));
        let mut short = labels.clone();
        short[7] = 1;
        short.pop();
        assert!(matches!(decode_idx(&images, &short, "x"), Err(Error::Consistency(_))));
        assert!(matches!(decode_idx(&images[..3], &labels, "x"), Err(Error::Format(_))));
    }

    #[test]
    fn load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = fixture();
        std::fs::write(dir.path().join("img.idx"), images).unwrap();
        std::fs::write(dir.path().join("lbl.idx"), labels).unwrap();
        let ds = load_idx(dir.path().join("img.idx"), dir.path().join("lbl.idx")).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(load_idx(dir.path().join("missing"), dir.path().join("lbl.idx")).is_err());
    }

    #[test]
    fn real_mnist_test_file_if_present() {
        let dir = std::env::var("CERTVOTE_MNIST_DIR").unwrap_or_else(|_| "data/mnist".into());
        let images = Path::new(&dir).join("t10k-images-idx3-ubyte");
        let labels = Path::new(&dir).join("t10k-labels-idx1-ubyte");
        if !images.exists() || !labels.exists() {
            return;
        }
        let ds = load_idx(images, labels).unwrap();
        assert_eq!(ds.len(), 10_000);
        assert_eq!(ds.inputs()[0].shape(), &[28, 28]);
    }

    #[test]
    fn partition_examples() {
        let ds = synth_blobs(2, 5, 2, 0.1, 0).unwrap();
        let plan = PartitionPlan { part_count: 2, part_size: 3, validation_size: 4, seed: 9 };
        let (parts, val) = partition_indices(ds.len(), &plan).unwrap();
        let mut all: Vec<usize> = parts.iter().flatten().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(partition_indices(10, &plan).unwrap(), (parts, val));

        let whole = PartitionPlan { part_count: 1, part_size: 10, validation_size: 0, seed: 1 };
        let (parts, val) = partition(&ds, &whole).unwrap();
        assert_eq!(parts[0].len(), 10);
        assert!(val.is_empty());

        let over = PartitionPlan { part_count: 3, part_size: 3, validation_size: 2, seed: 0 };
        assert!(matches!(
            partition(&ds, &over),
            Err(Error::Size { needed: 11, available: 10 })
        ));
    }

    #[test]
    fn blobs_examples() {
        let ds = synth_blobs(3, 4, 5, 0.0, 2).unwrap();
        for c in 0..3 {
            let members: Vec<&Tensor> = ds
                .inputs()
                .iter()
                .zip(ds.labels())
                .filter(|(_, &y)| y == c)
                .map(|(x, _)| x)
                .collect();
            assert_eq!(members.len(), 4);
            assert!(members.iter().all(|x| *x == members[0]));
        }
        assert_eq!(synth_blobs(3, 4, 5, 0.2, 2).unwrap(), synth_blobs(3, 4, 5, 0.2, 2).unwrap());
        assert!(synth_blobs(1, 4, 5, 0.2, 2).is_err());
        assert!(synth_blobs(2, 4, 1, 0.2, 2).is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint(
            len in 1usize..200,
            parts in 1usize..6,
            size in 1usize..20,
            val in 0usize..30,
            seed in any::<u64>(),
        ) {
            let plan = PartitionPlan { part_count: parts, part_size: size, validation_size: val, seed };
            match partition_indices(len, &plan) {
                Ok((subsets, validation)) => {
                    let mut seen = std::collections::HashSet::new();
                    for i in subsets.iter().flatten().chain(&validation) {
                        prop_assert!(seen.insert(*i));
                    }
                    prop_assert_eq!(seen.len(), plan.needed());
                }
                Err(Error::Size { .. }) => prop_assert!(plan.needed() > len),
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }

        #[test]
        fn idx_scaling_round_trips(bytes in proptest::collection::vec(any::<u8>(), 6)) {
            let mut images = Vec::new();
            for v in [IDX_IMAGES_MAGIC, 1, 2, 3] {
                images.extend_from_slice(&v.to_be_bytes());
            }
            images.extend_from_slice(&bytes);
            let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
            labels.extend_from_slice(&1u32.to_be_bytes());
            labels.push(0);
            let ds = decode_idx(&images, &labels, "p").unwrap();
            for (p, b) in ds.inputs()[0].data().iter().zip(&bytes) {
                prop_assert_eq!((p * 255.0).round() as u8, *b);
            }
            let (img2, lbl2) = encode_idx(&ds).unwrap();
            prop_assert_eq!(img2, images);
            prop_assert_eq!(lbl2, labels);
        }
    }
}
