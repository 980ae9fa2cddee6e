//! Dataset model: treatments, plant identifiers, on-disk catalog, thermal
//! decoding and contour annotations.

mod contour;
mod index;
mod source;
mod thermal;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use contour::{rasterize_contour, ContourAnnotation};
pub use index::{
    load_dataset_index, split_plants, split_train_test, DatasetIndex, RecordKey, RecordPaths,
    Split, SplitConfig,
};
pub use source::{DiskSource, ImageSource, RgbFrame, ThermalFrame};
pub use thermal::{
    decode_thermal, decode_thermal_sized, encode_celsius, read_thermal_pgm, write_thermal_pgm,
    RawThermal, TemperatureGrid, THERMAL_HEIGHT, THERMAL_WIDTH,
};

/// Number of plants per treatment in the greenhouse layout.
pub const MAX_PLANT_INDEX: u8 = 30;
/// Length of the experiment in days.
pub const EXPERIMENT_DAYS: u32 = 17;
/// Plant indices withheld for testing in every treatment.
pub const DEFAULT_TEST_INDICES: [u8; 4] = [5, 10, 15, 20];

/// Irrigation treatment. The declaration order (A..D) is also the tie-break
/// order used by every vote and nearest-centroid rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TreatmentLabel {
    A,
    B,
    C,
    D,
}

impl TreatmentLabel {
    pub const ALL: [TreatmentLabel; 4] = [
        TreatmentLabel::A,
        TreatmentLabel::B,
        TreatmentLabel::C,
        TreatmentLabel::D,
    ];

    /// Fraction of the normal commercial irrigation.
    pub fn irrigation_fraction(self) -> f64 {
        match self {
            TreatmentLabel::A => 1.0,
            TreatmentLabel::B => 0.8,
            TreatmentLabel::C => 0.6,
            TreatmentLabel::D => 0.4,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        match self {
            TreatmentLabel::A => 'A',
            TreatmentLabel::B => 'B',
            TreatmentLabel::C => 'C',
            TreatmentLabel::D => 'D',
        }
    }
}

impl fmt::Display for TreatmentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for TreatmentLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(TreatmentLabel::A),
            "B" => Ok(TreatmentLabel::B),
            "C" => Ok(TreatmentLabel::C),
            "D" => Ok(TreatmentLabel::D),
            other => Err(Error::Config(format!("unknown treatment '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlantId {
    pub treatment: TreatmentLabel,
    index: u8,
}

impl PlantId {
    pub fn new(treatment: TreatmentLabel, index: u8) -> Result<Self> {
        if !(1..=MAX_PLANT_INDEX).contains(&index) {
            return Err(Error::Precondition(format!(
                "plant index {index} outside 1..={MAX_PLANT_INDEX}"
            )));
        }
        Ok(PlantId { treatment, index })
    }

    pub fn index(&self) -> u8 {
        self.index
    }
}

impl fmt::Display for PlantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:02}", self.treatment, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Thermal,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Thermal => "thermal",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Modality::Rgb => "png",
            Modality::Thermal => "pgm",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

pub(crate) fn check_day(day: u32, days: u32) -> Result<()> {
    if day == 0 || day > days {
        return Err(Error::Precondition(format!("day {day} outside 1..={days}")));
    }
    Ok(())
}
