use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::{Modality, PlantId, TreatmentLabel, DEFAULT_TEST_INDICES, EXPERIMENT_DAYS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordKey {
    pub plant: PlantId,
    pub day: u32,
    pub modality: Modality,
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} day {:02} {}", self.plant, self.day, self.modality)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordPaths {
    pub image: PathBuf,
    pub contour: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: BTreeSet<PlantId>,
    pub test: BTreeSet<PlantId>,
}

/// Split/catalog configuration, read from a small key-value (TOML) file:
///
/// ```text
/// root = "data"
/// test_indices = [5, 10, 15, 20]
/// days = 17
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub root: Option<PathBuf>,
    pub test_indices: Vec<u8>,
    pub days: u32,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            root: None,
            test_indices: DEFAULT_TEST_INDICES.to_vec(),
            days: EXPERIMENT_DAYS,
        }
    }
}

impl SplitConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Catalog of every (plant, day, modality) image found under a dataset root.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub days: u32,
    pub records: BTreeMap<RecordKey, RecordPaths>,
    pub split: Split,
    /// Missing images or annotations, one line each.
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn plants(&self) -> BTreeSet<PlantId> {
        self.records.keys().map(|k| k.plant).collect()
    }

    pub fn get(&self, plant: PlantId, day: u32, modality: Modality) -> Option<&RecordPaths> {
        self.records.get(&RecordKey {
            plant,
            day,
            modality,
        })
    }

    fn restricted(&self, plants: &BTreeSet<PlantId>) -> DatasetIndex {
        DatasetIndex {
            root: self.root.clone(),
            days: self.days,
            records: self
                .records
                .iter()
                .filter(|(k, _)| plants.contains(&k.plant))
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
            split: Split::default(),
            warnings: Vec::new(),
        }
    }
}

enum EntryKind {
    Image,
    Contour,
}

fn parse_file_name(name: &str, days: u32) -> Option<(u32, Modality, EntryKind)> {
    let mut parts = name.splitn(3, '.');
    let day_part = parts.next()?;
    let modality = match parts.next()? {
        "rgb" => Modality::Rgb,
        "thermal" => Modality::Thermal,
        _ => return None,
    };
    let rest = parts.next()?;
    if day_part.is_empty() || !day_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let day: u32 = day_part.parse().ok()?;
    if day == 0 || day > days {
        return None;
    }
    let kind = if rest == modality.extension() {
        EntryKind::Image
    } else if rest == "contour.json" {
        EntryKind::Contour
    } else {
        return None;
    };
    Some((day, modality, kind))
}

fn read_dir_sorted(path: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn file_name(path: &Path) -> &str {
    path.file_name().and_then(|n| n.to_str()).unwrap_or("")
}

/// Walks `<root>/<A..D>/<NN>/<DD>.<modality>.<ext>` and catalogs every image
/// and contour sidecar.
///
/// Unknown entries at the root level (manifests, reports) are ignored;
/// anything unexpected inside a treatment or plant directory is an error.
/// Missing images and sidecars become warnings rather than failures.
pub fn load_dataset_index(root: &Path, config: &SplitConfig) -> Result<DatasetIndex> {
    let mut images: BTreeMap<RecordKey, PathBuf> = BTreeMap::new();
    let mut contours: BTreeMap<RecordKey, PathBuf> = BTreeMap::new();
    let mut plants: BTreeSet<PlantId> = BTreeSet::new();

    for treatment_dir in read_dir_sorted(root)? {
        if !treatment_dir.is_dir() {
            continue;
        }
        let Ok(treatment) = file_name(&treatment_dir).parse::<TreatmentLabel>() else {
            continue;
        };
        for plant_dir in read_dir_sorted(&treatment_dir)? {
            let name = file_name(&plant_dir);
            if name.starts_with('.') {
                continue;
            }
            let index = (name.len() == 2 && plant_dir.is_dir())
                .then(|| name.parse::<u8>().ok())
                .flatten()
                .ok_or_else(|| Error::MalformedName(plant_dir.clone()))?;
            let plant = PlantId::new(treatment, index)
                .map_err(|_| Error::MalformedName(plant_dir.clone()))?;
            plants.insert(plant);
            for file in read_dir_sorted(&plant_dir)? {
                let name = file_name(&file);
                if name.starts_with('.') {
                    continue;
                }
                let (day, modality, kind) = parse_file_name(name, config.days)
                    .ok_or_else(|| Error::MalformedName(file.clone()))?;
                let key = RecordKey {
                    plant,
                    day,
                    modality,
                };
                let target = match kind {
                    EntryKind::Image => &mut images,
                    EntryKind::Contour => &mut contours,
                };
                if let Some(first) = target.insert(key, file.clone()) {
                    return Err(Error::DuplicateRecord {
                        key: key.to_string(),
                        first,
                        second: file,
                    });
                }
            }
        }
    }

    if images.is_empty() {
        return Err(Error::NoRecords(root.to_path_buf()));
    }

    let mut warnings = Vec::new();
    let mut records = BTreeMap::new();
    for &plant in &plants {
        for day in 1..=config.days {
            for modality in [Modality::Rgb, Modality::Thermal] {
                let key = RecordKey {
                    plant,
                    day,
                    modality,
                };
                match images.remove(&key) {
                    None => warnings.push(format!("missing image: {key}")),
                    Some(image) => {
                        let contour = contours.remove(&key);
                        if contour.is_none() {
                            warnings.push(format!("missing contour: {key}"));
                        }
                        records.insert(key, RecordPaths { image, contour });
                    }
                }
            }
        }
    }
    for w in &warnings {
        warn!("{w}");
    }

    let mut index = DatasetIndex {
        root: root.to_path_buf(),
        days: config.days,
        records,
        split: Split::default(),
        warnings,
    };
    index.split = split_plants(&index.plants(), &config.test_indices)?;
    Ok(index)
}

fn validate_test_indices(test_indices: &[u8]) -> Result<BTreeSet<u8>> {
    let mut set = BTreeSet::new();
    for &i in test_indices {
        if !(1..=super::MAX_PLANT_INDEX).contains(&i) {
            return Err(Error::Split(format!("test index {i} out of range")));
        }
        if !set.insert(i) {
            return Err(Error::Split(format!("test index {i} listed twice")));
        }
    }
    Ok(set)
}

/// Plants whose index is listed go to the test side.
pub fn split_plants(plants: &BTreeSet<PlantId>, test_indices: &[u8]) -> Result<Split> {
    let test_set = validate_test_indices(test_indices)?;
    let (test, train): (BTreeSet<PlantId>, BTreeSet<PlantId>) =
        plants.iter().partition(|p| test_set.contains(&p.index()));
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    Ok(Split { train, test })
}

/// Partitions the index by plant index, identically across treatments.
pub fn split_train_test(
    index: &DatasetIndex,
    test_indices: &[u8],
) -> Result<(DatasetIndex, DatasetIndex)> {
    let split = split_plants(&index.plants(), test_indices)?;
    let mut train = index.restricted(&split.train);
    train.split.train = split.train.clone();
    let mut test = index.restricted(&split.test);
    test.split.test = split.test.clone();
    Ok((train, test))
}
