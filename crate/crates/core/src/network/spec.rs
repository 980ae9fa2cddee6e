use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    RgbModel,
    ThermalModel,
}

/// Height x width x channels of one network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        InputShape {
            height,
            width,
            channels,
        }
    }

    /// Native single frame, 288x384.
    pub const fn native(channels: usize) -> Self {
        Self::new(288, 384, channels)
    }

    /// Reduced desk-scale frame, 72x96 (a quarter of native per side).
    pub const fn desk(channels: usize) -> Self {
        Self::new(72, 96, channels)
    }

    /// The same frame tripled along the width (days n-2 | n-1 | n).
    pub const fn triplet(self) -> Self {
        Self::new(self.height, self.width * 3, self.channels)
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 3x3 kernel, stride 1, same padding.
    Conv2D {
        out_channels: usize,
    },
    /// 2x2 window, stride 2.
    MaxPool2D,
    Flatten,
    Dense {
        out_units: usize,
    },
    Dropout {
        rate: f64,
    },
    ReLU,
    Softmax,
}

/// Layer widths that the architectures leave free.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchDims {
    pub conv: [usize; 2],
    pub dense: usize,
    pub dropout: f64,
}

impl ArchDims {
    pub const fn rgb() -> Self {
        ArchDims {
            conv: [32, 64],
            dense: 64,
            dropout: 0.5,
        }
    }

    /// The thermal model runs its two convolutions in the opposite order.
    pub const fn thermal() -> Self {
        ArchDims {
            conv: [64, 32],
            dense: 64,
            dropout: 0.5,
        }
    }
}

impl Default for ArchDims {
    fn default() -> Self {
        Self::rgb()
    }
}

/// Activation dimensions between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: ModelFamily,
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Conv -> ReLU -> Pool, twice; Flatten; Dense -> ReLU -> Dropout;
    /// Dense(4) -> Softmax.
    pub fn shallow(name: ModelFamily, input: InputShape, dims: ArchDims) -> Result<Self> {
        let spec = NetworkSpec {
            name,
            input,
            layers: vec![
                LayerSpec::Conv2D {
                    out_channels: dims.conv[0],
                },
                LayerSpec::ReLU,
                LayerSpec::MaxPool2D,
                LayerSpec::Conv2D {
                    out_channels: dims.conv[1],
                },
                LayerSpec::ReLU,
                LayerSpec::MaxPool2D,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    out_units: dims.dense,
                },
                LayerSpec::ReLU,
                LayerSpec::Dropout { rate: dims.dropout },
                LayerSpec::Dense {
                    out_units: NUM_CLASSES,
                },
                LayerSpec::Softmax,
            ],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn rgb(input: InputShape) -> Result<Self> {
        Self::shallow(ModelFamily::RgbModel, input, ArchDims::rgb())
    }

    pub fn thermal(input: InputShape) -> Result<Self> {
        Self::shallow(ModelFamily::ThermalModel, input, ArchDims::thermal())
    }

    pub(crate) fn input_dims(&self) -> Dims {
        Dims {
            c: self.input.channels,
            h: self.input.height,
            w: self.input.width,
        }
    }

    /// Output dimensions of every layer, in order.
    pub(crate) fn layer_dims(&self) -> Result<Vec<Dims>> {
        let mut d = self.input_dims();
        if d.len() == 0 {
            return Err(Error::Shape("empty input shape".into()));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            d = match *layer {
                LayerSpec::Conv2D { out_channels } => {
                    if out_channels == 0 {
                        return Err(Error::Shape(format!("zero channels at layer {i}")));
                    }
                    Dims {
                        c: out_channels,
                        ..d
                    }
                }
                LayerSpec::MaxPool2D => {
                    if d.h < 2 || d.w < 2 {
                        return Err(Error::Shape(format!(
                            "pooling a {}x{} map at layer {i}",
                            d.h, d.w
                        )));
                    }
                    Dims {
                        c: d.c,
                        h: d.h / 2,
                        w: d.w / 2,
                    }
                }
                LayerSpec::Flatten => Dims {
                    c: d.len(),
                    h: 1,
                    w: 1,
                },
                LayerSpec::Dense { out_units } => {
                    if out_units == 0 {
                        return Err(Error::Shape(format!("zero units at layer {i}")));
                    }
                    Dims {
                        c: out_units,
                        h: 1,
                        w: 1,
                    }
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::Shape(format!("dropout rate {rate} at layer {i}")));
                    }
                    d
                }
                LayerSpec::ReLU | LayerSpec::Softmax => d,
            };
            out.push(d);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.layer_dims()?;
        let last = dims
            .last()
            .ok_or_else(|| Error::Shape("network has no layers".into()))?;
        if self.layers.last() != Some(&LayerSpec::Softmax) || last.len() != NUM_CLASSES {
            return Err(Error::Shape(format!(
                "network must end in a {NUM_CLASSES}-way softmax"
            )));
        }
        Ok(())
    }

    /// Shapes of the trainable tensors (weight, bias per conv/dense layer).
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let dims = self.layer_dims()?;
        let mut prev = self.input_dims();
        let mut shapes = Vec::new();
        for (layer, d) in self.layers.iter().zip(&dims) {
            match *layer {
                LayerSpec::Conv2D { out_channels } => {
                    shapes.push(vec![out_channels, prev.c * 9]);
                    shapes.push(vec![out_channels]);
                }
                LayerSpec::Dense { out_units } => {
                    shapes.push(vec![out_units, prev.len()]);
                    shapes.push(vec![out_units]);
                }
                _ => {}
            }
            prev = *d;
        }
        Ok(shapes)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum())
    }

    /// SHA-256 of the canonical JSON form; identifies checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(json).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_orders() {
        let rgb = NetworkSpec::rgb(InputShape::desk(3)).unwrap();
        let th = NetworkSpec::thermal(InputShape::desk(1)).unwrap();
        let convs = |s: &NetworkSpec| -> Vec<usize> {
            s.layers
                .iter()
                .filter_map(|l| match l {
                    LayerSpec::Conv2D { out_channels } => Some(*out_channels),
                    _ => None,
                })
                .collect()
        };
        assert_eq!(convs(&rgb), vec![32, 64]);
        assert_eq!(convs(&th), vec![64, 32]);
    }

    #[test]
    fn parameter_count_by_hand() {
        // 72x96x1 -> conv 64 -> pool 36x48 -> conv 32 -> pool 18x24 -> 13824 -> 64 -> 4
        let th = NetworkSpec::thermal(InputShape::desk(1)).unwrap();
        let expected = (64 * 9 + 64) + (32 * 64 * 9 + 32) + (13824 * 64 + 64) + (64 * 4 + 4);
        assert_eq!(th.param_count().unwrap(), expected);
    }

    #[test]
    fn triplet_input_shape() {
        let s = InputShape::native(1).triplet();
        assert_eq!((s.height, s.width), (288, 1152));
        let spec = NetworkSpec::thermal(s).unwrap();
        assert_eq!(spec.layer_dims().unwrap().last().unwrap().len(), 4);
    }

    #[test]
    fn hash_tracks_spec() {
        let a = NetworkSpec::rgb(InputShape::desk(3)).unwrap();
        let b = NetworkSpec::rgb(InputShape::desk(3).triplet()).unwrap();
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_specs() {
        let tiny = InputShape::new(1, 1, 1);
        assert!(NetworkSpec::rgb(tiny).is_err());
        let mut spec = NetworkSpec::rgb(InputShape::desk(3)).unwrap();
        spec.layers.pop();
        assert!(spec.validate().is_err());
    }
}
