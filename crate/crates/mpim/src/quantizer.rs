//! Converts float CNN models into the device format: per-tensor exponent
//! bias selection, coefficient encoding, quantization error statistics, and
//! the manifest + weight blob file formats.
//!
//! A quantized model is a JSON manifest describing the layers plus a binary
//! blob of 16-bit little-endian coefficient codes in [out][in][ky][kx]
//! order. Float models use the same manifest shape with inline float biases
//! and a separate binary32 weight file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsfp::{DsfpFormat, DSFP15, DSFP9};
use crate::engine::{Activation, LayerDescriptor};
use crate::oracle::{reference_forward_float, FloatTensor};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("cannot choose a bias for an empty tensor")]
    Empty,
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("inconsistent model shape: {0}")]
    ShapeInconsistent(String),
    #[error("manifest version {0} not supported (expected {MANIFEST_VERSION})")]
    UnsupportedVersion(u32),
    #[error("manifest syntax: {0}")]
    Json(#[from] serde_json::Error),
    #[error("weight blob length mismatch: manifest declares {declared}, layers need {required}")]
    WeightLength { declared: u64, required: u64 },
    #[error("invalid {format} code {bits:#x} in layer {layer}")]
    InvalidCode {
        format: &'static str,
        bits: u16,
        layer: usize,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot read {path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
}

fn read_named(path: &Path) -> Result<Vec<u8>, QuantizerError> {
    std::fs::read(path).map_err(|source| QuantizerError::File {
        path: path.display().to_string(),
        source,
    })
}

/// Quantization error statistics for one tensor or layer.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QuantError {
    pub max_abs: f64,
    pub mean_abs: f64,
    pub saturated_count: usize,
}

/// One layer of a float model. Weights are [out][in][ky][kx] row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub pool: bool,
    pub act: Activation,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// A float CNN model: the quantizer's input.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    pub name: String,
    pub layers: Vec<FloatLayer>,
}

impl FloatModel {
    pub fn validate(&self) -> Result<(), QuantizerError> {
        let mut prev_out: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weights.len() != layer.out_ch * layer.in_ch * 9 {
                return Err(QuantizerError::ShapeInconsistent(format!(
                    "layer {i}: {} weights, expected {}",
                    layer.weights.len(),
                    layer.out_ch * layer.in_ch * 9
                )));
            }
            if layer.bias.len() != layer.out_ch {
                return Err(QuantizerError::ShapeInconsistent(format!(
                    "layer {i}: {} biases, expected {}",
                    layer.bias.len(),
                    layer.out_ch
                )));
            }
            if let Some(prev) = prev_out {
                if layer.in_ch != prev {
                    return Err(QuantizerError::ShapeInconsistent(format!(
                        "layer {i} expects {} input channels, layer {} emits {prev}",
                        layer.in_ch,
                        i - 1
                    )));
                }
            }
            prev_out = Some(layer.out_ch);
        }
        Ok(())
    }
}

/// Quantized model metadata, independent of where it is loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDescriptor {
    pub id: String,
    pub layers: Vec<LayerDescriptor>,
    pub coeff_bytes: u64,
}

/// On-disk manifest of a quantized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub version: u32,
    pub name: String,
    pub layers: Vec<LayerDescriptor>,
    /// Path of the coefficient blob, relative to the manifest file.
    pub weights_file: String,
    pub weights_len: u64,
}

impl ModelManifest {
    pub fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor {
            id: self.name.clone(),
            layers: self.layers.clone(),
            coeff_bytes: self.weights_len,
        }
    }
}

/// On-disk manifest of a float model awaiting quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloatManifest {
    pub version: u32,
    pub name: String,
    pub layers: Vec<FloatManifestLayer>,
    /// Path of the binary32 weight file, relative to the manifest.
    pub weights_f32: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloatManifestLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub pool: bool,
    pub act: Activation,
    pub bias: Vec<f32>,
}

/// Picks the exponent bias that places the largest magnitude in the top
/// binade of the format: the tightest bias that still avoids saturation.
/// An all-zero tensor gets the format's default bias.
pub fn choose_bias(values: &[f64], format: &DsfpFormat) -> Result<i32, QuantizerError> {
    if values.is_empty() {
        return Err(QuantizerError::Empty);
    }
    let mut max_abs = 0.0f64;
    for (index, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(QuantizerError::NonFinite { index, value: v });
        }
        max_abs = max_abs.max(v.abs());
    }
    if max_abs == 0.0 {
        return Ok(format.default_exp_bias);
    }
    // max_finite(b) halves per unit of bias; start from the log estimate and
    // nudge to the exact tight value
    let mut b = (format.max_finite(0) / max_abs).log2().floor() as i32;
    while format.max_finite(b) < max_abs {
        b -= 1;
    }
    while format.max_finite(b + 1) >= max_abs {
        b += 1;
    }
    Ok(b)
}

/// Encodes a tensor at the given bias and reports how lossy it was.
/// `saturated_count` counts values whose magnitude exceeds the largest
/// finite value of the format at this bias.
pub fn quantize_tensor(
    values: &[f64],
    format: &'static DsfpFormat,
    exp_bias: i32,
) -> Result<(Vec<u16>, QuantError), QuantizerError> {
    let limit = format.max_finite(exp_bias);
    let mut codes = Vec::with_capacity(values.len());
    let mut stats = QuantError::default();
    let mut total_abs = 0.0f64;
    for (index, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(QuantizerError::NonFinite { index, value: v });
        }
        let code = format.encode(v, exp_bias).expect("finite by check above");
        let err = (format.decode_bits(code, exp_bias) - v).abs();
        stats.max_abs = stats.max_abs.max(err);
        total_abs += err;
        if v.abs() > limit {
            stats.saturated_count += 1;
        }
        codes.push(code);
    }
    if !values.is_empty() {
        stats.mean_abs = total_abs / values.len() as f64;
    }
    Ok((codes, stats))
}

/// Quantizes a whole model: per-layer coefficient bias over that layer's
/// kernel weights, biases encoded at the same exponent bias, weights
/// serialized as 16-bit little-endian containers. Output activations default
/// to the activation format's standard bias; see
/// [`quantize_model_calibrated`] for data-driven output biases.
pub fn quantize_model(
    fm: &FloatModel,
) -> Result<(ModelDescriptor, Vec<u8>, Vec<QuantError>), QuantizerError> {
    quantize_with_out_biases(fm, None)
}

/// Like [`quantize_model`], but first runs `sample` through the float
/// reference forward pass and picks each layer's output bias from the
/// activations actually observed.
pub fn quantize_model_calibrated(
    fm: &FloatModel,
    sample: &FloatTensor,
) -> Result<(ModelDescriptor, Vec<u8>, Vec<QuantError>), QuantizerError> {
    let biases = calibrate_out_biases(fm, sample)?;
    quantize_with_out_biases(fm, Some(&biases))
}

/// Per-layer output exponent biases chosen from the activations the float
/// reference produces on one sample input.
pub fn calibrate_out_biases(
    fm: &FloatModel,
    sample: &FloatTensor,
) -> Result<Vec<i32>, QuantizerError> {
    fm.validate()?;
    let outputs = reference_forward_float(fm, sample).map_err(|e| {
        QuantizerError::ShapeInconsistent(format!("calibration forward pass failed: {e}"))
    })?;
    outputs
        .iter()
        .map(|t| choose_bias(&t.data, &DSFP9))
        .collect()
}

fn quantize_with_out_biases(
    fm: &FloatModel,
    out_biases: Option<&[i32]>,
) -> Result<(ModelDescriptor, Vec<u8>, Vec<QuantError>), QuantizerError> {
    fm.validate()?;
    if let Some(biases) = out_biases {
        assert_eq!(biases.len(), fm.layers.len());
    }
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(fm.layers.len());
    let mut errors = Vec::with_capacity(fm.layers.len());
    for (i, layer) in fm.layers.iter().enumerate() {
        let weights: Vec<f64> = layer.weights.iter().map(|&w| w as f64).collect();
        let biases: Vec<f64> = layer.bias.iter().map(|&b| b as f64).collect();
        let weight_exp_bias = choose_bias(&weights, &DSFP15)?;
        let (weight_codes, werr) = quantize_tensor(&weights, &DSFP15, weight_exp_bias)?;
        let (bias_codes, berr) = quantize_tensor(&biases, &DSFP15, weight_exp_bias)?;

        let n_w = weights.len();
        let n_b = biases.len();
        errors.push(QuantError {
            max_abs: werr.max_abs.max(berr.max_abs),
            mean_abs: (werr.mean_abs * n_w as f64 + berr.mean_abs * n_b as f64)
                / (n_w + n_b) as f64,
            saturated_count: werr.saturated_count + berr.saturated_count,
        });

        let weight_offset = blob.len() as u64;
        for code in weight_codes {
            blob.extend_from_slice(&code.to_le_bytes());
        }
        layers.push(LayerDescriptor {
            in_ch: layer.in_ch,
            out_ch: layer.out_ch,
            pool: layer.pool,
            act: layer.act,
            weight_offset,
            weight_exp_bias,
            out_exp_bias: out_biases.map_or(DSFP9.default_exp_bias, |b| b[i]),
            bias_codes,
        });
    }
    let descriptor = ModelDescriptor {
        id: fm.name.clone(),
        layers,
        coeff_bytes: blob.len() as u64,
    };
    Ok((descriptor, blob, errors))
}

/// Parses and validates a quantized-model manifest.
pub fn parse_manifest(bytes: &[u8]) -> Result<ModelManifest, QuantizerError> {
    let manifest: ModelManifest = serde_json::from_slice(bytes)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(QuantizerError::UnsupportedVersion(manifest.version));
    }
    let required: u64 = manifest.layers.iter().map(|l| l.weight_bytes()).sum();
    if manifest.weights_len != required {
        return Err(QuantizerError::WeightLength {
            declared: manifest.weights_len,
            required,
        });
    }
    let mut prev_out: Option<usize> = None;
    for (i, layer) in manifest.layers.iter().enumerate() {
        if layer.bias_codes.len() != layer.out_ch {
            return Err(QuantizerError::ShapeInconsistent(format!(
                "layer {i}: {} bias codes, expected {}",
                layer.bias_codes.len(),
                layer.out_ch
            )));
        }
        for &bits in &layer.bias_codes {
            if !DSFP15.is_valid(bits) {
                return Err(QuantizerError::InvalidCode {
                    format: DSFP15.name,
                    bits,
                    layer: i,
                });
            }
        }
        if let Some(prev) = prev_out {
            if layer.in_ch != prev {
                return Err(QuantizerError::ShapeInconsistent(format!(
                    "layer {i} expects {} input channels, layer {} emits {prev}",
                    layer.in_ch,
                    i - 1
                )));
            }
        }
        prev_out = Some(layer.out_ch);
    }
    Ok(manifest)
}

pub fn serialize_manifest(manifest: &ModelManifest) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(manifest).expect("manifest is serializable");
    out.push(b'\n');
    out
}

/// Reads a float model from its manifest file plus the referenced binary32
/// weight file.
pub fn load_float_model(manifest_path: &Path) -> Result<FloatModel, QuantizerError> {
    let bytes = read_named(manifest_path)?;
    let manifest: FloatManifest = serde_json::from_slice(&bytes)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(QuantizerError::UnsupportedVersion(manifest.version));
    }
    let weights_path = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.weights_f32);
    let raw = read_named(&weights_path)?;
    let total_weights: usize = manifest.layers.iter().map(|l| l.out_ch * l.in_ch * 9).sum();
    if raw.len() != total_weights * 4 {
        return Err(QuantizerError::WeightLength {
            declared: raw.len() as u64,
            required: (total_weights * 4) as u64,
        });
    }
    let mut floats = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let layers = manifest
        .layers
        .iter()
        .map(|l| FloatLayer {
            in_ch: l.in_ch,
            out_ch: l.out_ch,
            pool: l.pool,
            act: l.act,
            weights: floats.by_ref().take(l.out_ch * l.in_ch * 9).collect(),
            bias: l.bias.clone(),
        })
        .collect();
    let fm = FloatModel {
        name: manifest.name,
        layers,
    };
    fm.validate()?;
    Ok(fm)
}

/// Writes a float model as a manifest + binary32 weight file pair.
pub fn save_float_model(fm: &FloatModel, manifest_path: &Path) -> Result<(), QuantizerError> {
    fm.validate()?;
    let weights_name = format!(
        "{}.weights_f32.bin",
        manifest_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".to_string())
    );
    let manifest = FloatManifest {
        version: MANIFEST_VERSION,
        name: fm.name.clone(),
        layers: fm
            .layers
            .iter()
            .map(|l| FloatManifestLayer {
                in_ch: l.in_ch,
                out_ch: l.out_ch,
                pool: l.pool,
                act: l.act,
                bias: l.bias.clone(),
            })
            .collect(),
        weights_f32: weights_name.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    std::fs::write(manifest_path, json)?;
    let mut raw = Vec::new();
    for layer in &fm.layers {
        for w in &layer.weights {
            raw.extend_from_slice(&w.to_le_bytes());
        }
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    std::fs::write(dir.join(weights_name), raw)?;
    Ok(())
}
