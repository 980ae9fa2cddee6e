use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::PnmDecoder;
use image::{ColorType, ImageDecoder};

use crate::{Error, Result};

/// Native thermal sensor width in pixels.
pub const THERMAL_WIDTH: usize = 384;
/// Native thermal sensor height in pixels.
pub const THERMAL_HEIGHT: usize = 288;

/// Undecoded sensor frame: one integer per pixel, 100x degrees Celsius.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawThermal {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    pub data: Vec<u16>,
}

impl RawThermal {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} samples for a {width}x{height} frame",
                data.len()
            )));
        }
        Ok(RawThermal {
            width,
            height,
            bit_depth: 16,
            data,
        })
    }
}

/// Per-pixel temperature field in degrees Celsius, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl TemperatureGrid {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        TemperatureGrid {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Re-encodes to the sensor's integer representation.
    pub fn encode(&self) -> RawThermal {
        RawThermal {
            width: self.width,
            height: self.height,
            bit_depth: 16,
            data: self.values.iter().map(|&t| encode_celsius(t)).collect(),
        }
    }
}

/// `round(100 * t)`, saturated to the 16-bit sensor range.
pub fn encode_celsius(t: f64) -> u16 {
    (t * 100.0).round().clamp(0.0, u16::MAX as f64) as u16
}

/// Decodes a native 384x288 frame.
pub fn decode_thermal(raw: &RawThermal) -> Result<TemperatureGrid> {
    decode_thermal_sized(raw, THERMAL_WIDTH, THERMAL_HEIGHT)
}

/// Decodes a frame of an explicitly expected size (simulated sensors may use
/// a reduced canvas).
pub fn decode_thermal_sized(
    raw: &RawThermal,
    width: usize,
    height: usize,
) -> Result<TemperatureGrid> {
    if raw.bit_depth != 16 {
        return Err(Error::BitDepth(format!("{}-bit", raw.bit_depth)));
    }
    if raw.width != width || raw.height != height || raw.data.len() != width * height {
        return Err(Error::Dimensions {
            expected_w: width,
            expected_h: height,
            got_w: raw.width,
            got_h: raw.height,
        });
    }
    Ok(TemperatureGrid {
        width,
        height,
        values: raw.data.iter().map(|&v| f64::from(v) / 100.0).collect(),
    })
}

pub fn read_thermal_pgm(path: &Path) -> Result<RawThermal> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let codec = |e: image::ImageError| Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let decoder = PnmDecoder::new(BufReader::new(file)).map_err(codec)?;
    let (w, h) = decoder.dimensions();
    let color = decoder.color_type();
    if color != ColorType::L16 {
        let depth = match color {
            ColorType::L8 => "8-bit".to_string(),
            other => format!("{other:?}"),
        };
        return Err(Error::BitDepth(depth));
    }
    let mut bytes = vec![0u8; decoder.total_bytes() as usize];
    decoder.read_image(&mut bytes).map_err(codec)?;
    // the decoder hands samples back in native endianness
    let data = bytes
        .chunks_exact(2)
        .map(|b| u16::from_ne_bytes([b[0], b[1]]))
        .collect();
    RawThermal::new(w as usize, h as usize, data)
}

/// Writes a binary 16-bit graymap (P5, maxval 65535, big-endian samples).
pub fn write_thermal_pgm(path: &Path, raw: &RawThermal) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{} {}\n65535\n", raw.width, raw.height)
        .and_then(|_| {
            let bytes: Vec<u8> = raw.data.iter().flat_map(|v| v.to_be_bytes()).collect();
            out.write_all(&bytes)
        })
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}
