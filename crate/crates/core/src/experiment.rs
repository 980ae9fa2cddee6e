//! End-to-end runs: train the per-modality models, derive the duplication
//! ratio on a validation fold of the training plants, and score every
//! requested model combination on the test plants.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{ImageSource, Modality, PlantId, Split, TreatmentLabel};
use crate::fusion::{
    accuracy_percent, collect_votes, duplication_ratio, Combo, DayAccuracy, DuplicationRatio,
    FusionModel, SequenceRow, WindowScore,
};
use crate::network::{
    train, ArchDims, EpochLog, Mode, ModelFamily, Network, NetworkSpec, Tensor, TrainConfig,
};
use crate::pipeline::{InputConfig, InputKind, TensorCache};
use crate::seed::{derive_seed, stream};
use crate::{Error, Result};

const TAG_INIT: u64 = 0x1417;
const TAG_TRAIN: u64 = 0x7a17;
const TAG_VALIDATE: u64 = 0x7a11;

/// A trainable model: modality plus input arrangement, e.g. `triplet_thermal`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModelKey {
    pub kind: InputKind,
    pub modality: Modality,
}

impl ModelKey {
    pub const ALL: [ModelKey; 4] = [
        ModelKey::new(InputKind::Single, Modality::Rgb),
        ModelKey::new(InputKind::Single, Modality::Thermal),
        ModelKey::new(InputKind::Triplet, Modality::Rgb),
        ModelKey::new(InputKind::Triplet, Modality::Thermal),
    ];

    pub const fn new(kind: InputKind, modality: Modality) -> Self {
        ModelKey { kind, modality }
    }

    fn ordinal(self) -> u64 {
        ModelKey::ALL
            .iter()
            .position(|k| *k == self)
            .expect("listed") as u64
    }
}

impl fmt::Display for ModelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.kind.tag(), self.modality.tag())
    }
}

impl FromStr for ModelKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKey::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}")))
    }
}

/// The models fused in one evaluation row; at least one side is present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ComboSpec {
    pub rgb: Option<InputKind>,
    pub thermal: Option<InputKind>,
}

impl ComboSpec {
    /// The eight rows of the sequence-length table: each model alone, then
    /// every RGB + thermal pairing.
    pub fn table() -> Vec<ComboSpec> {
        let kinds = [InputKind::Single, InputKind::Triplet];
        let mut out = Vec::with_capacity(8);
        for k in kinds {
            out.push(ComboSpec {
                rgb: Some(k),
                thermal: None,
            });
            out.push(ComboSpec {
                rgb: None,
                thermal: Some(k),
            });
        }
        for r in kinds {
            for t in kinds {
                out.push(ComboSpec {
                    rgb: Some(r),
                    thermal: Some(t),
                });
            }
        }
        out
    }

    pub fn models(&self) -> Vec<ModelKey> {
        let rgb = self.rgb.map(|k| ModelKey::new(k, Modality::Rgb));
        let thermal = self.thermal.map(|k| ModelKey::new(k, Modality::Thermal));
        rgb.into_iter().chain(thermal).collect()
    }

    pub fn is_fused(&self) -> bool {
        self.rgb.is_some() && self.thermal.is_some()
    }
}

impl fmt::Display for ComboSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.models().iter().map(ModelKey::to_string).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for ComboSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut combo = ComboSpec {
            rgb: None,
            thermal: None,
        };
        for part in s.split('+') {
            let key: ModelKey = part.trim().parse()?;
            let slot = match key.modality {
                Modality::Rgb => &mut combo.rgb,
                Modality::Thermal => &mut combo.thermal,
            };
            if slot.replace(key.kind).is_some() {
                return Err(Error::Config(format!(
                    "{s:?} names two {} models",
                    key.modality
                )));
            }
        }
        Ok(combo)
    }
}

impl TryFrom<String> for ComboSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ComboSpec> for String {
    fn from(c: ComboSpec) -> String {
        c.to_string()
    }
}

/// Architecture widths and training schedule of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub dims: ArchDims,
    pub train: TrainConfig,
}

impl ModelConfig {
    pub fn rgb() -> Self {
        ModelConfig {
            dims: ArchDims::rgb(),
            train: TrainConfig::rgb(),
        }
    }

    pub fn thermal() -> Self {
        ModelConfig {
            dims: ArchDims::thermal(),
            train: TrainConfig::thermal(),
        }
    }
}

/// Overlays a partial table onto `base`, recursing into nested tables, so
/// keys left out keep the modality's own defaults.
fn overlay(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn model_over<'de, D: serde::Deserializer<'de>>(
    d: D,
    base: ModelConfig,
) -> std::result::Result<ModelConfig, D::Error> {
    use serde::de::Error as _;
    let patch = serde_json::Value::deserialize(d)?;
    let mut merged = serde_json::to_value(base).map_err(D::Error::custom)?;
    overlay(&mut merged, patch);
    serde_json::from_value(merged).map_err(D::Error::custom)
}

fn rgb_model<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<ModelConfig, D::Error> {
    model_over(d, ModelConfig::rgb())
}

fn thermal_model<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<ModelConfig, D::Error> {
    model_over(d, ModelConfig::thermal())
}

/// How the copy counts of fused rows are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RatioMode {
    /// From integer validation accuracies of the two models.
    Auto,
    Fixed {
        p: u32,
        q: u32,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub input: InputConfig,
    #[serde(deserialize_with = "rgb_model")]
    pub rgb: ModelConfig,
    #[serde(deserialize_with = "thermal_model")]
    pub thermal: ModelConfig,
    pub combos: Vec<ComboSpec>,
    pub ratio: RatioMode,
    pub inference: Mode,
    /// Highest-indexed training plants per treatment held out to measure
    /// the accuracies behind the duplication ratio.
    pub validation_per_treatment: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            input: InputConfig::default(),
            rgb: ModelConfig::rgb(),
            thermal: ModelConfig::thermal(),
            combos: ComboSpec::table(),
            ratio: RatioMode::Auto,
            inference: Mode::InferStochastic,
            validation_per_treatment: 2,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn model_config(&self, modality: Modality) -> &ModelConfig {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Thermal => &self.thermal,
        }
    }

    /// Every model some combo needs, each once.
    pub fn required_models(&self) -> BTreeSet<ModelKey> {
        self.combos.iter().flat_map(ComboSpec::models).collect()
    }

    pub fn spec(&self, key: ModelKey) -> Result<NetworkSpec> {
        let family = match key.modality {
            Modality::Rgb => ModelFamily::RgbModel,
            Modality::Thermal => ModelFamily::ThermalModel,
        };
        let shape = self.input.shape(key.modality, key.kind);
        NetworkSpec::shallow(family, shape, self.model_config(key.modality).dims)
    }

    /// The schedule actually used for `key`: seeds mixed with the run seed,
    /// and the triplet-safe augmentation policy for triplet inputs.
    pub fn train_config(&self, key: ModelKey) -> TrainConfig {
        let mut cfg = self.model_config(key.modality).train.clone();
        cfg.seed = derive_seed(&[self.seed, TAG_TRAIN, key.ordinal(), cfg.seed]);
        if key.kind == InputKind::Triplet {
            cfg.policy = cfg.policy.for_triplet();
        }
        cfg
    }

    pub fn init_seed(&self, key: ModelKey) -> u64 {
        derive_seed(&[self.seed, TAG_INIT, key.ordinal()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.combos.is_empty() {
            return Err(Error::Config("no model combos requested".into()));
        }
        if self.ratio == RatioMode::Auto && self.validation_per_treatment == 0 {
            return Err(Error::Config(
                "automatic ratios need at least one validation plant per treatment".into(),
            ));
        }
        if let RatioMode::Fixed { p, q } = self.ratio {
            DuplicationRatio::new(p, q)?;
        }
        self.rgb.train.validate()?;
        self.thermal.train.validate()?;
        for key in self.required_models() {
            self.spec(key)?;
        }
        Ok(())
    }
}

/// Training plants split into the fitting set and the validation fold: the
/// `per_treatment` highest-indexed plants of each treatment.
pub fn validation_fold(
    train: &BTreeSet<PlantId>,
    per_treatment: usize,
) -> Result<(Vec<PlantId>, Vec<PlantId>)> {
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for t in TreatmentLabel::ALL {
        let plants: Vec<PlantId> = train.iter().filter(|p| p.treatment == t).copied().collect();
        if plants.len() <= per_treatment {
            return Err(Error::Split(format!(
                "treatment {t} has {} training plants, cannot hold out {per_treatment}",
                plants.len()
            )));
        }
        let cut = plants.len() - per_treatment;
        fit.extend_from_slice(&plants[..cut]);
        val.extend_from_slice(&plants[cut..]);
    }
    Ok((fit, val))
}

/// Every available input of `plants` for `key`, with its true label.
pub fn training_set(
    cache: &TensorCache,
    key: ModelKey,
    plants: &[PlantId],
    days: u32,
) -> Result<(Vec<Tensor<f32>>, Vec<TreatmentLabel>)> {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &plant in plants {
        for day in 1..=days {
            if !cache.contains(key.modality, plant, day) {
                continue;
            }
            xs.push(cache.input(key.modality, key.kind, plant, day)?);
            ys.push(plant.treatment);
        }
    }
    Ok((xs, ys))
}

/// Deterministic single-image accuracy of `net` on the given inputs.
pub fn accuracy(
    net: &Network<f32>,
    inputs: &[Tensor<f32>],
    labels: &[TreatmentLabel],
) -> Result<WindowScore> {
    let mut rng = stream(&[TAG_VALIDATE]);
    let mut s = WindowScore {
        correct: 0,
        total: 0,
    };
    for (x, &y) in inputs.iter().zip(labels) {
        s.total += 1;
        s.correct += usize::from(net.predict(x, Mode::InferDeterministic, &mut rng)? == y);
    }
    Ok(s)
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub network: Network<f32>,
    pub log: Vec<EpochLog>,
    /// Integer percentage on the validation fold, `None` without one.
    pub validation_accuracy: Option<u32>,
}

/// Trains `key` on `fit` and scores it on `val`.
pub fn train_model(
    config: &ExperimentConfig,
    cache: &TensorCache,
    key: ModelKey,
    fit: &[PlantId],
    val: &[PlantId],
    days: u32,
) -> Result<TrainedModel> {
    let (xs, ys) = training_set(cache, key, fit, days)?;
    let mut network = Network::new(config.spec(key)?, config.init_seed(key))?;
    log::info!("training {key} on {} images", xs.len());
    let log = train(&mut network, &xs, &ys, &config.train_config(key))?;
    let validation_accuracy = if val.is_empty() {
        None
    } else {
        let (vx, vy) = training_set(cache, key, val, days)?;
        let s = accuracy(&network, &vx, &vy)?;
        Some(accuracy_percent(s.correct, s.total))
    };
    Ok(TrainedModel {
        network,
        log,
        validation_accuracy,
    })
}

/// Scores of one combo for every sequence length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboReport {
    pub combo: ComboSpec,
    pub ratio: DuplicationRatio,
    /// Index `n - 1` holds sequence length `n`.
    pub four_class: Vec<WindowScore>,
    pub binary: Vec<WindowScore>,
    pub per_day: Vec<DayAccuracy>,
}

impl ComboReport {
    pub fn sequence_rows(&self) -> Vec<SequenceRow> {
        rows(&self.combo, &self.four_class)
    }

    pub fn binary_rows(&self) -> Vec<SequenceRow> {
        rows(&self.combo, &self.binary)
    }
}

fn rows(combo: &ComboSpec, scores: &[WindowScore]) -> Vec<SequenceRow> {
    scores
        .iter()
        .enumerate()
        .map(|(i, s)| SequenceRow {
            model_combo: combo.to_string(),
            n: i as u32 + 1,
            accuracy: s.percent(),
        })
        .collect()
}

/// The copy counts for `combo` under `mode`. Single-model rows ignore the
/// ratio and get (1, 1).
pub fn combo_ratio(
    combo: &ComboSpec,
    mode: RatioMode,
    models: &BTreeMap<ModelKey, TrainedModel>,
) -> Result<DuplicationRatio> {
    if !combo.is_fused() {
        return DuplicationRatio::new(1, 1);
    }
    match mode {
        RatioMode::Fixed { p, q } => DuplicationRatio::new(p, q),
        RatioMode::Auto => {
            let acc = |side: Option<InputKind>, modality| -> Result<u32> {
                let key = ModelKey::new(side.expect("fused"), modality);
                models
                    .get(&key)
                    .and_then(|m| m.validation_accuracy)
                    .ok_or_else(|| Error::Missing(format!("validation accuracy of {key}")))
            };
            Ok(duplication_ratio(
                acc(combo.thermal, Modality::Thermal)?,
                acc(combo.rgb, Modality::Rgb)?,
            ))
        }
    }
}

/// Collects votes of `combo` on `test` and scores every sequence length.
pub fn evaluate_combo(
    config: &ExperimentConfig,
    combo: &ComboSpec,
    models: &BTreeMap<ModelKey, TrainedModel>,
    cache: &TensorCache,
    test: &[PlantId],
    days: u32,
) -> Result<ComboReport> {
    if test.is_empty() {
        return Err(Error::Split("empty test set".into()));
    }
    let ratio = combo_ratio(combo, config.ratio, models)?;
    let model = |side: Option<InputKind>, modality| -> Result<Option<FusionModel<'_>>> {
        side.map(|kind| {
            let key = ModelKey::new(kind, modality);
            models
                .get(&key)
                .map(|m| FusionModel {
                    network: &m.network,
                    kind,
                })
                .ok_or_else(|| Error::Missing(format!("trained {key} model")))
        })
        .transpose()
    };
    let fusion = Combo {
        rgb: model(combo.rgb, Modality::Rgb)?,
        thermal: model(combo.thermal, Modality::Thermal)?,
    };
    let votes = collect_votes(
        &fusion,
        cache,
        test,
        days,
        ratio,
        config.inference,
        config.seed,
    )?;
    let four_class = (1..=days)
        .map(|n| votes.rolling_accuracy(n))
        .collect::<Result<_>>()?;
    let binary = (1..=days)
        .map(|n| votes.binary_accuracy(n))
        .collect::<Result<_>>()?;
    Ok(ComboReport {
        combo: *combo,
        ratio,
        four_class,
        binary,
        per_day: votes.per_day_accuracy()?,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub models: BTreeMap<ModelKey, TrainedModel>,
    pub reports: Vec<ComboReport>,
}

/// Trains every required model and evaluates every combo. Frames for all
/// plants in `split` are preprocessed once up front.
pub fn run_experiment(
    source: &dyn ImageSource,
    split: &Split,
    config: &ExperimentConfig,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    let days = source.days();
    let (fit, val) = validation_fold(&split.train, config.validation_per_treatment)?;
    let test: Vec<PlantId> = split.test.iter().copied().collect();
    let required = config.required_models();
    let modalities: BTreeSet<Modality> = required.iter().map(|k| k.modality).collect();
    let plants: Vec<PlantId> = split.train.union(&split.test).copied().collect();
    let modalities: Vec<Modality> = modalities.into_iter().collect();
    let cache = TensorCache::build(source, &plants, &modalities, config.input)?;
    let mut models = BTreeMap::new();
    for key in required {
        let m = train_model(config, &cache, key, &fit, &val, days)?;
        log::info!(
            "{key}: final loss {:.4}, validation accuracy {:?}%",
            m.log.last().map_or(f64::NAN, |e| e.loss),
            m.validation_accuracy
        );
        models.insert(key, m);
    }
    let reports = config
        .combos
        .iter()
        .map(|c| evaluate_combo(config, c, &models, &cache, &test, days))
        .collect::<Result<_>>()?;
    Ok(ExperimentOutcome { models, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_model_tables_keep_modality_defaults() {
        let cfg: ExperimentConfig =
            toml::from_str("[thermal.train]\nepochs = 7\n[rgb.dims]\ndense = 8\n").unwrap();
        assert_eq!(cfg.thermal.dims, ArchDims::thermal());
        assert_eq!(cfg.thermal.train.epochs, 7);
        assert_eq!(
            cfg.thermal.train.optimizer,
            TrainConfig::thermal().optimizer
        );
        assert_eq!(cfg.rgb.dims.conv, ArchDims::rgb().conv);
        assert_eq!(cfg.rgb.dims.dense, 8);
        assert_eq!(cfg.rgb.train, TrainConfig::rgb());
        assert!(toml::from_str::<ExperimentConfig>("[thermal.train]\nepoch = 7\n").is_err());
    }

    #[test]
    fn combo_names_round_trip() {
        let table = ComboSpec::table();
        assert_eq!(table.len(), 8);
        let names: BTreeSet<String> = table.iter().map(ToString::to_string).collect();
        assert_eq!(names.len(), 8);
        assert!(names.contains("single_rgb+triplet_thermal"));
        for c in table {
            assert_eq!(c.to_string().parse::<ComboSpec>().unwrap(), c);
        }
        assert!("single_rgb+triplet_rgb".parse::<ComboSpec>().is_err());
        assert!("single_lidar".parse::<ComboSpec>().is_err());
    }

    #[test]
    fn validation_fold_takes_highest_indices() {
        let train: BTreeSet<PlantId> = TreatmentLabel::ALL
            .iter()
            .flat_map(|&t| (1..=6).map(move |i| PlantId::new(t, i).unwrap()))
            .collect();
        let (fit, val) = validation_fold(&train, 2).unwrap();
        assert_eq!(fit.len(), 16);
        assert_eq!(val.len(), 8);
        assert!(val.iter().all(|p| p.index() >= 5));
        assert!(validation_fold(&train, 6).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let fixed: ExperimentConfig =
            toml::from_str("ratio = { mode = \"fixed\", p = 2, q = 3 }").unwrap();
        assert_eq!(fixed.ratio, RatioMode::Fixed { p: 2, q: 3 });
        assert!(toml::from_str::<ExperimentConfig>("ratoi = 1").is_err());
    }

    #[test]
    fn triplet_models_never_flip_horizontally() {
        let cfg = ExperimentConfig::default();
        let t = cfg.train_config(ModelKey::new(InputKind::Triplet, Modality::Rgb));
        assert_eq!(t.policy.flip_h_prob, 0.0);
        assert!(t.policy.rotation_deg <= 5.0);
        let s = cfg.train_config(ModelKey::new(InputKind::Single, Modality::Rgb));
        assert_eq!(s.policy, cfg.rgb.train.policy);
    }
}
