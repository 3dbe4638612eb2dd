use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Example, ImageShape};
use crate::error::{DtsError, Result};

/// Sidecar document stored next to a dataset CSV as `<file>.meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub class_count: usize,
    #[serde(default)]
    pub seen_class_ids: Option<Vec<usize>>,
    #[serde(default)]
    pub image_shape: Option<ImageShape>,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Writes `feature_0..feature_{d-1},label` rows plus the metadata sidecar.
pub fn write_dataset_csv(
    dataset: &Dataset,
    path: &Path,
    seen_class_ids: Option<&[usize]>,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let dim = dataset.dim();
    let mut header: Vec<String> = (0..dim).map(|j| format!("feature_{j}")).collect();
    header.push("label".to_string());
    writer.write_record(&header)?;
    for ex in &dataset.examples {
        let mut record: Vec<String> = ex.input.iter().map(|v| v.to_string()).collect();
        record.push(ex.label.to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    let meta = DatasetMeta {
        name: dataset.name.clone(),
        class_count: dataset.class_count,
        seen_class_ids: seen_class_ids.map(<[usize]>::to_vec),
        image_shape: dataset.image_shape,
    };
    fs::write(meta_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta_file = meta_path(path);
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_file).map_err(|e| {
        DtsError::validation(format!("cannot read metadata {}: {}", meta_file.display(), e))
    })?)?;
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let dim = headers.len().saturating_sub(1);
    for (j, h) in headers.iter().take(dim).enumerate() {
        if h != format!("feature_{j}") {
            return Err(DtsError::validation(format!(
                "column {} is named {:?}, expected feature_{}",
                j, h, j
            )));
        }
    }
    if headers.get(dim) != Some("label") {
        return Err(DtsError::validation("last column must be named label"));
    }
    let mut examples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let parse_err = |col: usize| {
            DtsError::validation(format!("row {} column {} is not a number", row + 1, col))
        };
        let input = (0..dim)
            .map(|j| record[j].trim().parse::<f64>().map_err(|_| parse_err(j)))
            .collect::<Result<Vec<_>>>()?;
        let label = record[dim].trim().parse::<usize>().map_err(|_| parse_err(dim))?;
        examples.push(Example { input, label });
    }
    let dataset = Dataset::new(meta.name.clone(), meta.class_count, examples, meta.image_shape)?;
    Ok((dataset, meta))
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_FILES: [&str; 6] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
    "test_batch.bin",
];

/// Loads the CIFAR-10 binary archive layout (`data_batch_*.bin`,
/// `test_batch.bin`) from `dir`. Pixels are scaled to `[0, 1]` and labels
/// shifted to `1..=10`. `max_per_class` caps each class for desk-scale runs.
pub fn load_cifar10_binary(dir: &Path, max_per_class: Option<usize>) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut counts = [0usize; 10];
    let mut found = false;
    for file in CIFAR_FILES {
        let path = dir.join(file);
        if !path.exists() {
            continue;
        }
        found = true;
        let bytes = fs::read(&path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(DtsError::validation(format!(
                "{} is not a whole number of CIFAR-10 records",
                path.display()
            )));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0] as usize;
            if label >= 10 {
                return Err(DtsError::validation(format!(
                    "{} contains label {}",
                    path.display(),
                    label
                )));
            }
            if max_per_class.is_some_and(|cap| counts[label] >= cap) {
                continue;
            }
            counts[label] += 1;
            examples.push(Example {
                input: record[1..].iter().map(|&b| f64::from(b) / 255.0).collect(),
                label: label + 1,
            });
        }
    }
    if !found {
        return Err(DtsError::validation(format!(
            "no CIFAR-10 batch files under {}",
            dir.display()
        )));
    }
    Dataset::new(
        "cifar10",
        10,
        examples,
        Some(ImageShape {
            channels: 3,
            height: 32,
            width: 32,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synthetic.csv");
        let ds = generate_synthetic(&SyntheticSpec {
            k_seen: 2,
            k_unseen: 1,
            dim: 3,
            per_class: 20,
            separation: 3.0,
            noise: 1.0,
            seed: 1,
        })
        .unwrap();
        write_dataset_csv(&ds, &path, Some(&[1, 2])).unwrap();
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("feature_0,feature_1,feature_2,label\n"));
        let (back, meta) = read_dataset_csv(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(meta.seen_class_ids, Some(vec![1, 2]));
    }

    #[test]
    fn csv_without_sidecar_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bare.csv");
        fs::write(&path, "feature_0,label\n1.0,1\n").unwrap();
        assert!(matches!(read_dataset_csv(&path), Err(DtsError::Validation(_))));
    }

    #[test]
    fn cifar_binary_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for label in [0u8, 9, 0] {
            bytes.push(label);
            bytes.extend(std::iter::repeat_n(255u8, 3072));
        }
        fs::write(dir.path().join("data_batch_1.bin"), &bytes).unwrap();
        let ds = load_cifar10_binary(dir.path(), None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.examples[1].label, 10);
        assert_eq!(ds.dim(), 3072);
        assert!(ds.examples[0].input.iter().all(|&v| v == 1.0));
        let capped = load_cifar10_binary(dir.path(), Some(1)).unwrap();
        assert_eq!(capped.len(), 2);
        assert!(load_cifar10_binary(&dir.path().join("missing"), None).is_err());
    }
}
