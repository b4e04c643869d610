//! Independent reference implementation of the forward pass.
//!
//! Computes each layer as a direct whole-image convolution: no tiling, no
//! halos, no engine grid, no ring schedule. It shares only the code formats
//! and the exact accumulator with the engine, and it quantizes at exactly
//! the same points (post-activation, per layer), so its output is the
//! bit-level ground truth the engine must reproduce. A fully-float variant
//! measures quantization loss and drives activation-bias calibration.

use thiserror::Error;

use crate::dsfp::{WideAccumulator, DSFP15, DSFP9};
use crate::engine::{Activation, FeatureMap, LayerDescriptor};
use crate::quantizer::FloatModel;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("layer {layer} expects {expected} input channels, got {got}")]
    ChannelMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("weight blob too short: layer {layer} needs bytes up to {needed}, blob has {got}")]
    BlobTooShort {
        layer: usize,
        needed: u64,
        got: usize,
    },
    #[error("invalid {format} code {bits:#x}")]
    InvalidCode { format: &'static str, bits: u16 },
    #[error("layer {layer} has {got} bias codes for {expected} output channels")]
    BiasCount {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("pooling layer {layer} got odd dimensions {height}x{width}")]
    OddDimensions {
        layer: usize,
        height: usize,
        width: usize,
    },
    #[error("tensor shapes differ: {a} vs {b}")]
    ShapeMismatch { a: String, b: String },
    #[error("tensor data length {got} != channels*height*width = {expected}")]
    DataLength { expected: usize, got: usize },
}

/// Dense real-valued activation tensor, channel-major like `FeatureMap`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FloatTensor {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self, OracleError> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(OracleError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Decodes a feature map into real values.
    pub fn from_feature_map(fmap: &FeatureMap) -> Self {
        Self {
            channels: fmap.channels,
            height: fmap.height,
            width: fmap.width,
            data: fmap.decoded(),
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    fn shape(&self) -> String {
        format!("{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Reads kernel (out_c, in_c) of a layer from the coefficient blob.
fn kernel_codes(
    blob: &[u8],
    layer_index: usize,
    layer: &LayerDescriptor,
    out_c: usize,
    in_c: usize,
) -> Result<[u16; 9], OracleError> {
    let start = layer.weight_offset + ((out_c * layer.in_ch + in_c) * 18) as u64;
    let end = start + 18;
    if end > blob.len() as u64 {
        return Err(OracleError::BlobTooShort {
            layer: layer_index,
            needed: end,
            got: blob.len(),
        });
    }
    let mut codes = [0u16; 9];
    for (i, pair) in blob[start as usize..end as usize]
        .chunks_exact(2)
        .enumerate()
    {
        let bits = u16::from_le_bytes([pair[0], pair[1]]);
        if !DSFP15.is_valid(bits) {
            return Err(OracleError::InvalidCode {
                format: DSFP15.name,
                bits,
            });
        }
        codes[i] = bits;
    }
    Ok(codes)
}

/// Runs the quantized model directly over whole images.
///
/// Bit-identical to the engine path by construction: exact accumulation of
/// decoded codes, bias add, activation, then a single rounding to the output
/// format, then pooling on codes.
pub fn reference_forward(
    layers: &[LayerDescriptor],
    blob: &[u8],
    input: &FeatureMap,
) -> Result<FeatureMap, OracleError> {
    let mut fmap = input.clone();
    for (li, layer) in layers.iter().enumerate() {
        if fmap.channels != layer.in_ch {
            return Err(OracleError::ChannelMismatch {
                layer: li,
                expected: layer.in_ch,
                got: fmap.channels,
            });
        }
        if layer.bias_codes.len() != layer.out_ch {
            return Err(OracleError::BiasCount {
                layer: li,
                expected: layer.out_ch,
                got: layer.bias_codes.len(),
            });
        }
        let (h, w) = (fmap.height, fmap.width);
        let mut out = FeatureMap::zeros(layer.out_ch, h, w, layer.out_exp_bias);
        for o in 0..layer.out_ch {
            let (bias_m, bias_e) = DSFP15.decode_fixed(layer.bias_codes[o], layer.weight_exp_bias);
            let kernels: Vec<[u16; 9]> = (0..layer.in_ch)
                .map(|ic| kernel_codes(blob, li, layer, o, ic))
                .collect::<Result<_, _>>()?;
            for y in 0..h {
                for x in 0..w {
                    let mut acc = WideAccumulator::zero();
                    for (ic, kernel) in kernels.iter().enumerate() {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let gy = y as isize + ky as isize - 1;
                                let gx = x as isize + kx as isize - 1;
                                if gy < 0 || gy >= h as isize || gx < 0 || gx >= w as isize {
                                    continue;
                                }
                                let a = fmap.get(ic, gy as usize, gx as usize);
                                let wgt = kernel[ky * 3 + kx];
                                if a == 0 || wgt == 0 {
                                    continue;
                                }
                                acc.add_product_bits(
                                    &DSFP9,
                                    a,
                                    fmap.exp_bias,
                                    &DSFP15,
                                    wgt,
                                    layer.weight_exp_bias,
                                );
                            }
                        }
                    }
                    acc.add_fixed(bias_m as i128, bias_e);
                    let code = if layer.act == Activation::Relu && acc.signum() < 0 {
                        0
                    } else {
                        acc.encode(&DSFP9, layer.out_exp_bias)
                    };
                    out.set(o, y, x, code);
                }
            }
        }
        fmap = if layer.pool {
            pool_codes(&out, li)?
        } else {
            out
        };
    }
    Ok(fmap)
}

/// 2x2 max pooling over codes, independent of the engine's implementation
/// but with identical semantics: the first element in reading order wins
/// ties of decoded value.
fn pool_codes(fmap: &FeatureMap, layer: usize) -> Result<FeatureMap, OracleError> {
    if !fmap.height.is_multiple_of(2) || !fmap.width.is_multiple_of(2) {
        return Err(OracleError::OddDimensions {
            layer,
            height: fmap.height,
            width: fmap.width,
        });
    }
    let mut out = FeatureMap::zeros(
        fmap.channels,
        fmap.height / 2,
        fmap.width / 2,
        fmap.exp_bias,
    );
    for c in 0..fmap.channels {
        for y in 0..fmap.height / 2 {
            for x in 0..fmap.width / 2 {
                let window = [
                    fmap.get(c, 2 * y, 2 * x),
                    fmap.get(c, 2 * y, 2 * x + 1),
                    fmap.get(c, 2 * y + 1, 2 * x),
                    fmap.get(c, 2 * y + 1, 2 * x + 1),
                ];
                let mut best = window[0];
                for &code in &window[1..] {
                    if DSFP9.decode_bits(code, fmap.exp_bias)
                        > DSFP9.decode_bits(best, fmap.exp_bias)
                    {
                        best = code;
                    }
                }
                out.set(c, y, x, best);
            }
        }
    }
    Ok(out)
}

/// Runs the float model in plain f64 arithmetic.
///
/// Returns the post-activation tensor of every layer (before pooling, which
/// is where the device rounds activations to codes) and the final output
/// (after the last layer's pooling). Used for calibration and for measuring
/// quantization loss; not bit ground truth.
pub fn reference_forward_float(
    fm: &FloatModel,
    input: &FloatTensor,
) -> Result<Vec<FloatTensor>, OracleError> {
    Ok(float_pass(fm, input)?.0)
}

/// Final output of the float model on `input`.
pub fn reference_final_float(
    fm: &FloatModel,
    input: &FloatTensor,
) -> Result<FloatTensor, OracleError> {
    Ok(float_pass(fm, input)?.1)
}

fn float_pass(
    fm: &FloatModel,
    input: &FloatTensor,
) -> Result<(Vec<FloatTensor>, FloatTensor), OracleError> {
    let mut cur = input.clone();
    let mut traces = Vec::with_capacity(fm.layers.len());
    for (li, layer) in fm.layers.iter().enumerate() {
        if cur.channels != layer.in_ch {
            return Err(OracleError::ChannelMismatch {
                layer: li,
                expected: layer.in_ch,
                got: cur.channels,
            });
        }
        let (h, w) = (cur.height, cur.width);
        let mut out = FloatTensor::zeros(layer.out_ch, h, w);
        for o in 0..layer.out_ch {
            for y in 0..h {
                for x in 0..w {
                    let mut sum = layer.bias[o] as f64;
                    for ic in 0..layer.in_ch {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let gy = y as isize + ky as isize - 1;
                                let gx = x as isize + kx as isize - 1;
                                if gy < 0 || gy >= h as isize || gx < 0 || gx >= w as isize {
                                    continue;
                                }
                                let wgt = layer.weights[((o * layer.in_ch + ic) * 3 + ky) * 3 + kx];
                                sum += cur.get(ic, gy as usize, gx as usize) * wgt as f64;
                            }
                        }
                    }
                    if layer.act == Activation::Relu && sum < 0.0 {
                        sum = 0.0;
                    }
                    out.set(o, y, x, sum);
                }
            }
        }
        traces.push(out.clone());
        cur = if layer.pool {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(OracleError::OddDimensions {
                    layer: li,
                    height: h,
                    width: w,
                });
            }
            let mut pooled = FloatTensor::zeros(layer.out_ch, h / 2, w / 2);
            for c in 0..layer.out_ch {
                for y in 0..h / 2 {
                    for x in 0..w / 2 {
                        let m = out
                            .get(c, 2 * y, 2 * x)
                            .max(out.get(c, 2 * y, 2 * x + 1))
                            .max(out.get(c, 2 * y + 1, 2 * x))
                            .max(out.get(c, 2 * y + 1, 2 * x + 1));
                        pooled.set(c, y, x, m);
                    }
                }
            }
            pooled
        } else {
            out
        };
    }
    Ok((traces, cur))
}

/// Elementwise comparison of a quantized map against a real-valued tensor:
/// (max absolute difference, mean absolute difference).
pub fn error_stats(a: &FeatureMap, b: &FloatTensor) -> Result<(f64, f64), OracleError> {
    if a.channels != b.channels || a.height != b.height || a.width != b.width {
        return Err(OracleError::ShapeMismatch {
            a: format!("{}x{}x{}", a.channels, a.height, a.width),
            b: b.shape(),
        });
    }
    let decoded = a.decoded();
    let mut max_abs = 0.0f64;
    let mut total = 0.0f64;
    for (&x, &y) in decoded.iter().zip(&b.data) {
        let d = (x - y).abs();
        max_abs = max_abs.max(d);
        total += d;
    }
    let mean_abs = if decoded.is_empty() {
        0.0
    } else {
        total / decoded.len() as f64
    };
    Ok((max_abs, mean_abs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_conv_layer, EngineGrid, RingSchedule};
    use crate::memory::{DeviceMemory, MemoryKind};
    use crate::quantizer::{quantize_model, FloatLayer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_layers() -> (Vec<LayerDescriptor>, Vec<u8>) {
        let mut weights = vec![0.0f32; 9];
        weights[4] = 1.0;
        let fm = FloatModel {
            name: "id".into(),
            layers: vec![FloatLayer {
                in_ch: 1,
                out_ch: 1,
                pool: false,
                act: Activation::Relu,
                weights,
                bias: vec![0.0],
            }],
        };
        let (desc, blob, _) = quantize_model(&fm).unwrap();
        (desc.layers, blob)
    }

    #[test]
    fn identity_model_requantizes_input() {
        let (layers, blob) = identity_layers();
        let vals: Vec<f64> = (0..16).map(|i| f64::from(i) / 8.0).collect();
        let input = FeatureMap::from_values(1, 4, 4, 7, &vals).unwrap();
        let out = reference_forward(&layers, &blob, &input).unwrap();
        assert_eq!(out.codes(), input.codes());
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fm = random_model(&mut rng, 2, 3, true);
        let (desc, blob, _) = quantize_model(&fm).unwrap();
        let input = FeatureMap::zeros(fm.layers[0].in_ch, 8, 8, 7);
        let out = reference_forward(&desc.layers, &blob, &input).unwrap();
        // ReLU model with zero bias... bias may be nonzero; force zero bias
        let mut fm2 = fm;
        for l in &mut fm2.layers {
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let (desc2, blob2, _) = quantize_model(&fm2).unwrap();
        let out2 = reference_forward(&desc2.layers, &blob2, &input).unwrap();
        assert!(out2.codes().iter().all(|&c| c == 0));
        // shape is preserved either way
        assert_eq!(out.channels, desc.layers.last().unwrap().out_ch);
    }

    #[test]
    fn stats_of_identical_inputs_are_zero() {
        let vals: Vec<f64> = (0..12).map(|i| f64::from(i) * 0.25).collect();
        let fmap = FeatureMap::from_values(3, 2, 2, 7, &vals).unwrap();
        let t = FloatTensor::from_feature_map(&fmap);
        assert_eq!(error_stats(&fmap, &t).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn stats_see_constant_offset() {
        let fmap = FeatureMap::from_values(1, 2, 2, 7, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut t = FloatTensor::from_feature_map(&fmap);
        for v in &mut t.data {
            *v += 0.125;
        }
        let (max_abs, mean_abs) = error_stats(&fmap, &t).unwrap();
        assert_eq!(max_abs, 0.125);
        assert_eq!(mean_abs, 0.125);
    }

    #[test]
    fn stats_reject_shape_mismatch() {
        let fmap = FeatureMap::zeros(1, 2, 2, 7);
        let t = FloatTensor::zeros(1, 2, 3);
        assert!(matches!(
            error_stats(&fmap, &t),
            Err(OracleError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn float_trace_has_one_tensor_per_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fm = random_model(&mut rng, 3, 2, true);
        let input = FloatTensor::new(
            fm.layers[0].in_ch,
            8,
            8,
            (0..fm.layers[0].in_ch * 64)
                .map(|i| (i as f64 * 0.13).sin())
                .collect(),
        )
        .unwrap();
        let trace = reference_forward_float(&fm, &input).unwrap();
        assert_eq!(trace.len(), 3);
        // pre-pool tensors keep the incoming spatial dims of their layer
        assert_eq!((trace[0].height, trace[0].width), (8, 8));
        assert_eq!((trace[1].height, trace[1].width), (4, 4));
        let final_out = reference_final_float(&fm, &input).unwrap();
        assert_eq!((final_out.height, final_out.width), (1, 1));
    }

    fn random_model(
        rng: &mut ChaCha8Rng,
        n_layers: usize,
        max_ch: usize,
        pool_all: bool,
    ) -> FloatModel {
        let mut layers = Vec::new();
        let mut in_ch = rng.gen_range(1..=max_ch);
        for _ in 0..n_layers {
            let out_ch = rng.gen_range(1..=max_ch);
            layers.push(FloatLayer {
                in_ch,
                out_ch,
                pool: pool_all,
                act: if rng.gen_bool(0.7) {
                    Activation::Relu
                } else {
                    Activation::Identity
                },
                weights: (0..out_ch * in_ch * 9)
                    .map(|_| rng.gen_range(-2.0f32..2.0))
                    .collect(),
                bias: (0..out_ch).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            });
            in_ch = out_ch;
        }
        FloatModel {
            name: "random".into(),
            layers,
        }
    }

    /// The central cross-check: the tiled, ring-scheduled engine and this
    /// module's direct dataflow must agree bit for bit.
    #[test]
    fn engine_and_reference_agree_on_random_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
        for trial in 0..12 {
            let n_layers = rng.gen_range(1..=2);
            let fm = random_model(&mut rng, n_layers, 3, false);
            let (desc, blob, _) = quantize_model(&fm).unwrap();

            let h = rng.gen_range(3..=9);
            let w = rng.gen_range(3..=9);
            let c0 = fm.layers[0].in_ch;
            let vals: Vec<f64> = (0..c0 * h * w).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let input = FeatureMap::from_values(c0, h, w, 7, &vals).unwrap();

            let want = reference_forward(&desc.layers, &blob, &input).unwrap();

            let mut memory = DeviceMemory::new(1 << 20, 1 << 20);
            let region = memory
                .allocate(MemoryKind::Mram, blob.len() as u64, &desc.id)
                .unwrap();
            memory.write(region, 0, &blob).unwrap();

            let m = rng.gen_range(1..=2);
            let p = [2, 4][rng.gen_range(0..2)];
            let schedule = RingSchedule {
                initial_offset: rng.gen_range(0..5),
                rotate_per_round: rng.gen_range(0..5),
            };
            let mut grid = EngineGrid::new(m, p).unwrap();
            let mut got = input;
            for layer in &desc.layers {
                got =
                    run_conv_layer(&got, layer, &mut grid, &mut memory, region, &schedule).unwrap();
            }
            assert_eq!(
                got.codes(),
                want.codes(),
                "trial {trial}: engine (m={m}, p={p}) diverged from reference"
            );
        }
    }
}
