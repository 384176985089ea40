//! On-disk formats: feature files, manifests and checkpoints.

mod checkpoint;
mod features;
mod manifest;

use std::collections::BTreeMap;
use std::path::Path;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use features::{
    decode_features, encode_features, read_features, write_features, FEATURE_HEADER_LEN,
    FEATURE_MAGIC,
};
pub use manifest::{Manifest, ManifestEntry, Split, COLUMNS};

use crate::error::Result;
use crate::model::ViewFeatureSet;
use crate::synthetic::SyntheticDataset;
use crate::tensor::Matrix;

/// A loaded dataset, grouped by split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub has_subcategories: bool,
    pub num_classes: usize,
    /// Class names by label index (empty where the manifest has none).
    pub label_names: Vec<String>,
    pub splits: BTreeMap<Split, Vec<ViewFeatureSet>>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[ViewFeatureSet] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn find(&self, shape_id: &str) -> Option<&ViewFeatureSet> {
        self.splits
            .values()
            .flatten()
            .find(|s| s.shape_id == shape_id)
    }
}

/// Reads a feature file and manifest and slices each shape's rows.
pub fn load_dataset(features: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<Dataset> {
    let matrix = read_features(&features)?;
    let manifest_path = manifest.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    dataset_from_parts(&matrix, &manifest, manifest_path)
}

pub fn dataset_from_parts(matrix: &Matrix, manifest: &Manifest, origin: &Path) -> Result<Dataset> {
    manifest.validate(matrix.rows(), matrix.cols(), origin)?;
    let num_classes = manifest.num_classes();
    let mut label_names = vec![String::new(); num_classes];
    let mut splits: BTreeMap<Split, Vec<ViewFeatureSet>> = BTreeMap::new();
    for e in &manifest.entries {
        label_names[e.label].clone_from(&e.label_name);
        let idx: Vec<usize> = (e.row_start..e.row_start + e.row_count).collect();
        splits.entry(e.split).or_default().push(ViewFeatureSet {
            shape_id: e.shape_id.clone(),
            features: matrix.select_rows(&idx),
            label: e.label,
            sublabel: e.subcategory,
        });
    }
    Ok(Dataset {
        name: manifest.dataset.clone(),
        dim: manifest.dim,
        has_subcategories: manifest.has_subcategories(),
        num_classes,
        label_names,
        splits,
    })
}

/// Packs shapes into one feature matrix plus manifest, in the given order.
pub fn pack_dataset(
    name: &str,
    shapes: &[(Split, &ViewFeatureSet)],
    label_name: impl Fn(usize) -> String,
) -> Result<(Matrix, Manifest)> {
    let dim = shapes.first().map_or(0, |(_, s)| s.features.cols());
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(shapes.len());
    let mut row = 0;
    for (split, s) in shapes {
        if s.features.cols() != dim {
            return Err(crate::Error::Shape(format!(
                "shape {} has width {}, expected {dim}",
                s.shape_id,
                s.features.cols()
            )));
        }
        data.extend_from_slice(s.features.data());
        entries.push(ManifestEntry {
            shape_id: s.shape_id.clone(),
            label_name: label_name(s.label),
            label: s.label,
            subcategory: s.sublabel,
            split: *split,
            row_start: row,
            row_count: s.num_views(),
        });
        row += s.num_views();
    }
    let matrix = Matrix::from_vec(row, dim, data)?;
    let manifest = Manifest {
        dataset: name.to_string(),
        dim,
        view_size: None,
        entries,
    };
    Ok((matrix, manifest))
}

/// Writes a synthetic dataset as a feature file plus manifest.
pub fn write_synthetic(
    ds: &SyntheticDataset,
    features: impl AsRef<Path>,
    manifest: impl AsRef<Path>,
) -> Result<()> {
    let shapes: Vec<(Split, &ViewFeatureSet)> = ds
        .train
        .iter()
        .map(|s| (Split::Train, s))
        .chain(ds.test.iter().map(|s| (Split::Test, s)))
        .collect();
    let (matrix, manifest_data) = pack_dataset("synthetic", &shapes, |c| format!("class{c:02}"))?;
    write_features(features, &matrix)?;
    manifest_data.write(manifest)
}
