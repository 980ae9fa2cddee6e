//! Temperature nearest-centroid classifier: per-(treatment, day) mean
//! features, single-day prediction and a k-day majority vote.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{rasterize_contour, ImageSource, PlantId, ThermalFrame, TreatmentLabel};
use crate::imaging::{contour_band, erode, masked_mean, DEFAULT_EROSION_RADIUS};
use crate::{Error, Result};

/// Default window of the sequence classifier.
pub const SEQUENCE_DAYS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Mean over the eroded plant mask.
    PlantMean,
    /// Eroded-mask mean minus the mean of the band the erosion removed.
    PlantMinusContour,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub feature_kind: FeatureKind,
    pub erosion_radius: u32,
    /// Subtract the day's logged greenhouse temperature from every feature.
    pub ambient_correct: bool,
    /// Drop the last experiment day from fitting and evaluation.
    pub exclude_last_day: bool,
    pub sequence_days: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            feature_kind: FeatureKind::PlantMean,
            erosion_radius: DEFAULT_EROSION_RADIUS,
            ambient_correct: false,
            exclude_last_day: false,
            sequence_days: SEQUENCE_DAYS,
        }
    }
}

/// `feature - ambient`.
pub fn ambient_correct(feature: f64, ambient: f64) -> f64 {
    feature - ambient
}

/// Scalar temperature feature of one annotated thermal frame.
pub fn thermal_feature(
    frame: &ThermalFrame,
    kind: FeatureKind,
    erosion_radius: u32,
) -> Result<f64> {
    let mask = rasterize_contour(&frame.contour, frame.grid.width, frame.grid.height)?;
    let eroded = erode(&mask, erosion_radius);
    let plant = masked_mean(&frame.grid, &eroded)?;
    match kind {
        FeatureKind::PlantMean => Ok(plant),
        FeatureKind::PlantMinusContour => {
            let band = contour_band(&mask, &eroded)?;
            Ok(plant - masked_mean(&frame.grid, &band)?)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureSample {
    pub plant: PlantId,
    pub day: u32,
    pub value: f64,
}

/// Features of every available thermal frame of `plants`, sorted by plant
/// then day. Frames missing from the source are skipped with a warning.
pub fn extract_features(
    source: &dyn ImageSource,
    plants: &[PlantId],
    config: &BaselineConfig,
) -> Result<Vec<FeatureSample>> {
    let last = source.days();
    let days: Vec<u32> = (1..=last)
        .filter(|&d| !(config.exclude_last_day && d == last))
        .collect();
    let jobs: Vec<(PlantId, u32)> = plants
        .iter()
        .flat_map(|&p| days.iter().map(move |&d| (p, d)))
        .collect();
    let results: Vec<Result<Option<FeatureSample>>> = jobs
        .par_iter()
        .map(|&(plant, day)| {
            let frame = match source.thermal(plant, day) {
                Ok(f) => f,
                Err(Error::Missing(what)) => {
                    log::warn!("skipping {what}");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let mut value = thermal_feature(&frame, config.feature_kind, config.erosion_radius)?;
            if config.ambient_correct {
                let ambient = source
                    .ambient(day)
                    .ok_or_else(|| Error::Missing(format!("ambient temperature for day {day}")))?;
                value = ambient_correct(value, ambient);
            }
            Ok(Some(FeatureSample { plant, day, value }))
        })
        .collect();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Mean feature per (treatment, day).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidTable {
    pub feature_kind: FeatureKind,
    pub mean_temp: BTreeMap<(TreatmentLabel, u32), f64>,
}

/// Averages training features into centroids; every treatment must be
/// represented on every day in `days`.
pub fn fit_centroids(
    samples: &[FeatureSample],
    kind: FeatureKind,
    days: &BTreeSet<u32>,
) -> Result<CentroidTable> {
    let mut acc: BTreeMap<(TreatmentLabel, u32), (f64, usize)> = BTreeMap::new();
    for s in samples {
        let e = acc.entry((s.plant.treatment, s.day)).or_insert((0.0, 0));
        e.0 += s.value;
        e.1 += 1;
    }
    let missing: Vec<String> = TreatmentLabel::ALL
        .iter()
        .flat_map(|&t| days.iter().map(move |&d| (t, d)))
        .filter(|key| !acc.contains_key(key))
        .map(|(t, d)| format!("{t} day {d}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCells(missing.join(", ")));
    }
    Ok(CentroidTable {
        feature_kind: kind,
        mean_temp: acc
            .into_iter()
            .map(|(k, (sum, n))| (k, sum / n as f64))
            .collect(),
    })
}

/// The most frequent label; ties go to the earlier label.
pub fn majority_vote(labels: &[TreatmentLabel]) -> Option<TreatmentLabel> {
    if labels.is_empty() {
        return None;
    }
    let mut counts = [0usize; 4];
    for l in labels {
        counts[l.index()] += 1;
    }
    let mut best = 0;
    for k in 1..4 {
        if counts[k] > counts[best] {
            best = k;
        }
    }
    TreatmentLabel::from_index(best)
}

impl CentroidTable {
    pub fn days(&self) -> BTreeSet<u32> {
        self.mean_temp.keys().map(|&(_, d)| d).collect()
    }

    /// Treatment whose centroid for `day` is nearest to `feature`.
    pub fn predict_nearest(&self, day: u32, feature: f64) -> Result<TreatmentLabel> {
        let mut best: Option<(TreatmentLabel, f64)> = None;
        for t in TreatmentLabel::ALL {
            let c = self
                .mean_temp
                .get(&(t, day))
                .ok_or_else(|| Error::Missing(format!("centroid for {t} day {day}")))?;
            let dist = (feature - c).abs();
            if best.is_none_or(|(_, d)| dist < d) {
                best = Some((t, dist));
            }
        }
        Ok(best.expect("four treatments").0)
    }

    /// Majority vote of single-day predictions over the last `k` entries of
    /// `days`, which must be consecutive.
    pub fn predict_sequence(&self, days: &[(u32, f64)], k: usize) -> Result<TreatmentLabel> {
        if k == 0 || days.len() < k {
            return Err(Error::Precondition(format!(
                "sequence of {} days needs at least {k}",
                days.len()
            )));
        }
        let window = &days[days.len() - k..];
        if window.windows(2).any(|w| w[1].0 != w[0].0 + 1) {
            return Err(Error::Precondition(
                "sequence days are not consecutive".into(),
            ));
        }
        let votes = window
            .iter()
            .map(|&(d, f)| self.predict_nearest(d, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(majority_vote(&votes).expect("k >= 1"))
    }

    /// Mean over treatments of the standard deviation of that treatment's
    /// centroid across days.
    pub fn day_spread(&self) -> f64 {
        let mut total = 0.0;
        for t in TreatmentLabel::ALL {
            let v: Vec<f64> = self
                .mean_temp
                .iter()
                .filter(|((tt, _), _)| *tt == t)
                .map(|(_, &m)| m)
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            total += (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        }
        total / 4.0
    }

    /// Writes `treatment,day,mean` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(out, "treatment,day,mean").map_err(io)?;
        for ((t, d), m) in &self.mean_temp {
            writeln!(out, "{t},{d},{m:.6}").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineScore {
    pub single_day_acc: f64,
    pub single_day_n: usize,
    pub sequence_acc: f64,
    pub sequence_n: usize,
}

/// Scores single-day predictions on every test sample and k-day votes on
/// every window of k consecutive available days per plant.
pub fn evaluate(table: &CentroidTable, test: &[FeatureSample], k: usize) -> Result<BaselineScore> {
    let mut by_plant: BTreeMap<PlantId, Vec<(u32, f64)>> = BTreeMap::new();
    for s in test {
        by_plant.entry(s.plant).or_default().push((s.day, s.value));
    }
    let (mut single_hits, mut single_n, mut seq_hits, mut seq_n) = (0, 0, 0, 0);
    for (plant, mut days) in by_plant {
        days.sort_by_key(|&(d, _)| d);
        for &(d, f) in &days {
            single_n += 1;
            single_hits += usize::from(table.predict_nearest(d, f)? == plant.treatment);
        }
        if k == 0 {
            continue;
        }
        for end in k..=days.len() {
            let window = &days[end - k..end];
            if window.windows(2).any(|w| w[1].0 != w[0].0 + 1) {
                continue;
            }
            seq_n += 1;
            seq_hits += usize::from(table.predict_sequence(window, k)? == plant.treatment);
        }
    }
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(BaselineScore {
        single_day_acc: ratio(single_hits, single_n),
        single_day_n: single_n,
        sequence_acc: ratio(seq_hits, seq_n),
        sequence_n: seq_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ContourAnnotation, TemperatureGrid};
    use proptest::prelude::*;

    fn table(values: [f64; 4], day: u32) -> CentroidTable {
        CentroidTable {
            feature_kind: FeatureKind::PlantMean,
            mean_temp: TreatmentLabel::ALL
                .iter()
                .zip(values)
                .map(|(&t, v)| ((t, day), v))
                .collect(),
        }
    }

    #[test]
    fn nearest_and_tie_break() {
        let t = table([34.0, 35.0, 36.0, 37.0], 1);
        assert_eq!(t.predict_nearest(1, 36.9).unwrap(), TreatmentLabel::D);
        assert_eq!(t.predict_nearest(1, 34.5).unwrap(), TreatmentLabel::A);
        assert!(t.predict_nearest(2, 34.5).is_err());
    }

    #[test]
    fn votes() {
        use TreatmentLabel::*;
        assert_eq!(majority_vote(&[D, D, C]), Some(D));
        assert_eq!(majority_vote(&[A, B, C]), Some(A));
        assert_eq!(majority_vote(&[C, B]), Some(B));
        assert_eq!(majority_vote(&[]), None);
    }

    #[test]
    fn sequence_preconditions() {
        let mut t = table([34.0, 35.0, 36.0, 37.0], 1);
        for d in 2..=3 {
            for (k, v) in t.clone().mean_temp {
                t.mean_temp.insert((k.0, d), v);
            }
        }
        let seq = [(1, 37.0), (2, 37.0), (3, 36.0)];
        assert_eq!(t.predict_sequence(&seq, 3).unwrap(), TreatmentLabel::D);
        assert!(t.predict_sequence(&seq[..2], 3).is_err());
        assert!(t
            .predict_sequence(&[(1, 37.0), (3, 37.0), (2, 36.0)], 3)
            .is_err());
    }

    #[test]
    fn ambient_difference() {
        assert_eq!(ambient_correct(36.0, 35.0), 1.0);
        assert_eq!(ambient_correct(35.0, 35.0), 0.0);
    }

    #[test]
    fn missing_cells_listed() {
        let s = [FeatureSample {
            plant: PlantId::new(TreatmentLabel::A, 1).unwrap(),
            day: 1,
            value: 34.0,
        }];
        let err = fit_centroids(&s, FeatureKind::PlantMean, &BTreeSet::from([1])).unwrap_err();
        match err {
            Error::MissingCells(msg) => {
                assert!(
                    msg.contains("B day 1") && msg.contains("D day 1") && !msg.contains("A day")
                )
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constant_treatments_give_constant_table() {
        let mut samples = Vec::new();
        for (k, t) in TreatmentLabel::ALL.into_iter().enumerate() {
            for i in 1..=3 {
                for day in 1..=4 {
                    samples.push(FeatureSample {
                        plant: PlantId::new(t, i).unwrap(),
                        day,
                        value: 34.0 + k as f64,
                    });
                }
            }
        }
        let days = (1..=4).collect();
        let table = fit_centroids(&samples, FeatureKind::PlantMean, &days).unwrap();
        for ((t, _), v) in &table.mean_temp {
            assert_eq!(*v, 34.0 + t.index() as f64);
        }
        let score = evaluate(&table, &samples, 3).unwrap();
        assert_eq!(score.single_day_acc, 1.0);
        assert_eq!(score.sequence_n, 12 * 2);
    }

    #[test]
    fn plant_minus_contour_on_two_level_field() {
        // 20x20 square contour; the outer two rings are 30 degrees, the
        // core 36, so the difference feature is exactly 6.
        let contour = ContourAnnotation::new(vec![(5, 5), (25, 5), (25, 25), (5, 25)]).unwrap();
        let mut grid = TemperatureGrid::filled(32, 32, 30.0);
        for y in 7..23 {
            for x in 7..23 {
                grid.values[y * 32 + x] = 36.0;
            }
        }
        let frame = ThermalFrame { grid, contour };
        assert_eq!(
            thermal_feature(&frame, FeatureKind::PlantMean, 2).unwrap(),
            36.0
        );
        assert_eq!(
            thermal_feature(&frame, FeatureKind::PlantMinusContour, 2).unwrap(),
            6.0
        );
    }

    proptest! {
        #[test]
        fn shift_equivariance(
            c in proptest::array::uniform4(1920i32..2560),
            f in 1792i32..2688,
            shift in -5i32..5,
        ) {
            // values on a 1/64 grid keep every difference exact, ties included
            let c = c.map(|v| v as f64 / 64.0);
            let f = f as f64 / 64.0;
            let a = table(c, 1);
            let b = table(c.map(|v| v + shift as f64), 1);
            prop_assert_eq!(
                a.predict_nearest(1, f).unwrap(),
                b.predict_nearest(1, f + shift as f64).unwrap()
            );
        }

        #[test]
        fn identical_votes(k in 1usize..20, l in 0usize..4) {
            let label = TreatmentLabel::from_index(l).unwrap();
            prop_assert_eq!(majority_vote(&vec![label; k]), Some(label));
        }
    }
}
