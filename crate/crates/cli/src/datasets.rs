use std::path::{Path, PathBuf};

use decorr_core::data::{load_cifar10, load_idx, standardize_splits, synthetic_splits, Dataset};
use decorr_core::model::{InputShape, ModelSpec};

use crate::config::{DatasetConfig, DatasetKind};
use crate::error::{missing_files, CliError};

const MNIST_FILES: [[&str; 2]; 4] = [
    ["train-images-idx3-ubyte", "train-images.idx3-ubyte"],
    ["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"],
    ["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"],
    ["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"],
];

/// Paths of the four MNIST files under `root`, accepting both the dash and
/// the dot naming.
pub fn mnist_files(root: &Path) -> Vec<PathBuf> {
    MNIST_FILES
        .iter()
        .map(|names| {
            names
                .iter()
                .map(|n| root.join(n))
                .find(|p| p.is_file())
                .unwrap_or_else(|| root.join(names[0]))
        })
        .collect()
}

pub fn cifar10_files(root: &Path) -> (Vec<PathBuf>, PathBuf) {
    let train = (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect();
    (train, root.join("test_batch.bin"))
}

/// Loads and standardizes the train and test splits.
pub fn load_splits(cfg: &DatasetConfig, root: Option<&Path>) -> Result<(Dataset, Dataset), CliError> {
    let (train, test) = match cfg.kind {
        DatasetKind::Synthetic => {
            return Ok(synthetic_splits(
                cfg.classes,
                cfg.train_per_class,
                cfg.test_per_class,
                cfg.seed,
            )?)
        }
        DatasetKind::Mnist => {
            let root = root.expect("resolved root");
            let files = mnist_files(root);
            if let Some(e) = missing_files(&files) {
                return Err(e);
            }
            let train = load_idx(&files[0], &files[1]).map_err(|e| CliError::data(root, e))?;
            let test = load_idx(&files[2], &files[3]).map_err(|e| CliError::data(root, e))?;
            (train, test)
        }
        DatasetKind::Cifar10 => {
            let root = root.expect("resolved root");
            let (train_files, test_file) = cifar10_files(root);
            let mut all = train_files.clone();
            all.push(test_file.clone());
            if let Some(e) = missing_files(&all) {
                return Err(e);
            }
            let train = load_cifar10(&train_files).map_err(|e| CliError::data(root, e))?;
            let test = load_cifar10(&[test_file]).map_err(|e| CliError::data(root, e))?;
            (train, test)
        }
    };
    let train = match cfg.train_limit {
        Some(n) => train.take(n),
        None => train,
    };
    let test = match cfg.test_limit {
        Some(n) => test.take(n),
        None => test,
    };
    if train.is_empty() || test.is_empty() {
        return Err(CliError::Config("dataset limits leave an empty split".into()));
    }
    Ok(standardize_splits(train, test)?)
}

/// Adapts a catalog spec to the dataset's image shape and class count.
pub fn fit_spec(spec: &ModelSpec, data: &Dataset) -> Result<ModelSpec, CliError> {
    let (c, h, w) = data.image_shape();
    let fitted = spec
        .clone()
        .with_input(InputShape::new(c, h, w))
        .with_classes(data.class_count());
    fitted.validate()?;
    Ok(fitted)
}
