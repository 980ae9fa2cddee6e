use std::fs;
use std::path::Path;

use stressnet::dataset::{
    load_dataset_index, split_train_test, Modality, PlantId, SplitConfig, TreatmentLabel,
};
use stressnet::Error;

/// Writes the full naming layout with empty files; the index never opens
/// them.
fn layout(root: &Path, plants: u8, days: u32) {
    for t in TreatmentLabel::ALL {
        for p in 1..=plants {
            let dir = root.join(t.to_string()).join(format!("{p:02}"));
            fs::create_dir_all(&dir).unwrap();
            for d in 1..=days {
                for name in [
                    format!("{d:02}.rgb.png"),
                    format!("{d:02}.rgb.contour.json"),
                    format!("{d:02}.thermal.pgm"),
                    format!("{d:02}.thermal.contour.json"),
                ] {
                    fs::write(dir.join(name), b"").unwrap();
                }
            }
        }
    }
}

#[test]
fn full_layout_and_default_split() {
    let dir = tempfile::tempdir().unwrap();
    layout(dir.path(), 30, 17);
    fs::write(dir.path().join("manifest.csv"), "plant\n").unwrap();
    let index = load_dataset_index(dir.path(), &SplitConfig::default()).unwrap();
    assert_eq!(index.len(), 4080);
    assert!(index.warnings.is_empty());
    assert_eq!(index.split.train.len(), 104);
    assert_eq!(index.split.test.len(), 16);
    assert!(index.split.train.is_disjoint(&index.split.test));

    let (train, test) = split_train_test(&index, &[5, 10, 15, 20]).unwrap();
    assert_eq!(train.plants().len(), 104);
    assert_eq!(test.plants().len(), 16);
    assert!(train
        .records
        .keys()
        .all(|k| !test.plants().contains(&k.plant)));
    assert_eq!(train.len() + test.len(), 4080);

    let (all, none) = split_train_test(&index, &[]).unwrap();
    assert_eq!((all.plants().len(), none.len()), (120, 0));
    let every: Vec<u8> = (1..=30).collect();
    assert!(matches!(
        split_train_test(&index, &every),
        Err(Error::EmptyTrainingSet)
    ));
    assert!(split_train_test(&index, &[5, 5]).is_err());
    assert!(split_train_test(&index, &[31]).is_err());
}

#[test]
fn missing_day_becomes_two_warnings() {
    let dir = tempfile::tempdir().unwrap();
    layout(dir.path(), 30, 17);
    let plant_dir = dir.path().join("C").join("07");
    for name in [
        "13.rgb.png",
        "13.rgb.contour.json",
        "13.thermal.pgm",
        "13.thermal.contour.json",
    ] {
        fs::remove_file(plant_dir.join(name)).unwrap();
    }
    let index = load_dataset_index(dir.path(), &SplitConfig::default()).unwrap();
    assert_eq!(index.len(), 4078);
    assert_eq!(index.warnings.len(), 2);
    let plant = PlantId::new(TreatmentLabel::C, 7).unwrap();
    assert!(index.get(plant, 13, Modality::Rgb).is_none());
    assert!(index.get(plant, 12, Modality::Thermal).is_some());
}

#[test]
fn missing_sidecar_is_a_warning_not_a_hole() {
    let dir = tempfile::tempdir().unwrap();
    layout(dir.path(), 2, 3);
    fs::remove_file(dir.path().join("A/01/02.thermal.contour.json")).unwrap();
    let cfg = SplitConfig {
        test_indices: vec![],
        days: 3,
        ..SplitConfig::default()
    };
    let index = load_dataset_index(dir.path(), &cfg).unwrap();
    assert_eq!(index.len(), 4 * 2 * 3 * 2);
    assert_eq!(index.warnings.len(), 1);
    let plant = PlantId::new(TreatmentLabel::A, 1).unwrap();
    assert!(index
        .get(plant, 2, Modality::Thermal)
        .unwrap()
        .contour
        .is_none());
}

#[test]
fn malformed_and_empty_roots() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_dataset_index(dir.path(), &SplitConfig::default()),
        Err(Error::NoRecords(_))
    ));
    layout(dir.path(), 1, 2);
    fs::write(dir.path().join("A/01/02.rgb.jpg"), b"").unwrap();
    assert!(matches!(
        load_dataset_index(dir.path(), &SplitConfig::default()),
        Err(Error::MalformedName(_))
    ));
    fs::remove_file(dir.path().join("A/01/02.rgb.jpg")).unwrap();
    fs::write(dir.path().join("A/01/2.rgb.png"), b"").unwrap();
    assert!(matches!(
        load_dataset_index(dir.path(), &SplitConfig::default()),
        Err(Error::DuplicateRecord { .. })
    ));
}
