//! Functional model of the matrix processing engine grid.
//!
//! An m x m grid of engines executes one convolution layer at a time. Each
//! engine owns a p x p pixel tile plus a one-pixel halo, convolves it against
//! a 3x3 coefficient kernel, and accumulates weighted sums exactly. Between
//! input channels the clock-skew ring rotates the data buffers (tile, halo,
//! partial sums) cyclically through the grid while coefficient buffers stay
//! put. Because accumulation is exact, the output is bit-identical under any
//! ring schedule or tile assignment, and that invariance is asserted by the
//! test suite rather than assumed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsfp::{WideAccumulator, DSFP15, DSFP9};
use crate::memory::{DeviceMemory, MemoryError, RegionId};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid grid: m={m}, p={p} (need m >= 1, p >= 1 and even)")]
    InvalidGrid { m: usize, p: usize },
    #[error("feature map data length {got} != channels*height*width = {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("element {index} is not a valid {format} code: {bits:#x}")]
    InvalidCode {
        format: &'static str,
        bits: u16,
        index: usize,
    },
    #[error("layer expects {expected} input channels, feature map has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("layer has {expected} output channels but {got} bias codes")]
    BiasCount { expected: usize, got: usize },
    #[error("tile ({tile_y},{tile_x}) outside tiling of {tiles_y}x{tiles_x}")]
    TileOutOfRange {
        tile_y: usize,
        tile_x: usize,
        tiles_y: usize,
        tiles_x: usize,
    },
    #[error("max pooling needs even dimensions, got {height}x{width}")]
    OddDimensions { height: usize, width: usize },
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Nonlinearity applied after the bias add.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Everything the engine needs to execute one layer. Produced by the
/// quantizer; the field names match the model manifest keys one for one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDescriptor {
    pub in_ch: usize,
    pub out_ch: usize,
    pub pool: bool,
    pub act: Activation,
    /// Byte offset of this layer's kernels inside the model's MRAM region.
    pub weight_offset: u64,
    /// Exponent bias shared by this layer's kernel weights and bias values.
    pub weight_exp_bias: i32,
    /// Exponent bias of the activations this layer emits.
    pub out_exp_bias: i32,
    /// Per-output-channel additive bias, encoded in the coefficient format.
    pub bias_codes: Vec<u16>,
}

impl LayerDescriptor {
    /// Serialized kernel bytes: out*in kernels of nine 16-bit containers.
    pub fn weight_bytes(&self) -> u64 {
        (self.out_ch * self.in_ch * 9 * 2) as u64
    }
}

/// Channel-major activation tensor of 9-bit codes with a shared exponent
/// bias. Index order is [channel][row][column].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub exp_bias: i32,
    data: Vec<u16>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        exp_bias: i32,
        data: Vec<u16>,
    ) -> Result<Self, EngineError> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(EngineError::DataLength {
                expected,
                got: data.len(),
            });
        }
        for (index, &bits) in data.iter().enumerate() {
            if !DSFP9.is_valid(bits) {
                return Err(EngineError::InvalidCode {
                    format: DSFP9.name,
                    bits,
                    index,
                });
            }
        }
        Ok(Self {
            channels,
            height,
            width,
            exp_bias,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, exp_bias: i32) -> Self {
        Self {
            channels,
            height,
            width,
            exp_bias,
            data: vec![0; channels * height * width],
        }
    }

    /// Encodes real values into a fresh map at the given exponent bias.
    pub fn from_values(
        channels: usize,
        height: usize,
        width: usize,
        exp_bias: i32,
        values: &[f64],
    ) -> Result<Self, EngineError> {
        let expected = channels * height * width;
        if values.len() != expected {
            return Err(EngineError::DataLength {
                expected,
                got: values.len(),
            });
        }
        let data = values
            .iter()
            .map(|&v| DSFP9.encode(v, exp_bias).expect("finite activation"))
            .collect();
        Ok(Self {
            channels,
            height,
            width,
            exp_bias,
            data,
        })
    }

    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u16 {
        self.data[self.idx(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, bits: u16) {
        let i = self.idx(c, y, x);
        self.data[i] = bits;
    }

    pub fn codes(&self) -> &[u16] {
        &self.data
    }

    pub fn decode(&self, c: usize, y: usize, x: usize) -> f64 {
        DSFP9.decode_bits(self.get(c, y, x), self.exp_bias)
    }

    pub fn decoded(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|&b| DSFP9.decode_bits(b, self.exp_bias))
            .collect()
    }

    /// Raw little-endian 16-bit containers, the activation wire format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 2);
        for &code in &self.data {
            out.extend_from_slice(&code.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(
        channels: usize,
        height: usize,
        width: usize,
        exp_bias: i32,
        bytes: &[u8],
    ) -> Result<Self, EngineError> {
        let expected = channels * height * width * 2;
        if bytes.len() != expected {
            return Err(EngineError::DataLength {
                expected,
                got: bytes.len(),
            });
        }
        let data = bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Self::new(channels, height, width, exp_bias, data)
    }
}

/// One 3x3 coefficient kernel in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Kernel3x3 {
    pub weights: [u16; 9],
    pub exp_bias: i32,
}

#[derive(Debug, Clone, Default)]
pub struct EngineState {
    /// (p+2)^2 activation codes: the tile plus a one-pixel halo.
    pub input_buffer: Vec<u16>,
    /// Coefficient buffer; stays in place when the ring rotates.
    pub coeff: Option<Kernel3x3>,
    /// p^2 running weighted sums, travels with the tile.
    pub wsum: Vec<WideAccumulator>,
    /// Which tile of the tiling this engine currently holds, if any.
    pub tile: Option<(usize, usize)>,
}

/// When and how far the clock-skew ring advances during a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingSchedule {
    /// Slot offset applied when tiles are first placed onto the grid.
    pub initial_offset: usize,
    /// Rotation amount applied after each input channel pass.
    pub rotate_per_round: usize,
}

impl Default for RingSchedule {
    fn default() -> Self {
        Self {
            initial_offset: 0,
            rotate_per_round: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineGrid {
    m: usize,
    p: usize,
    pub engines: Vec<EngineState>,
}

impl EngineGrid {
    pub fn new(m: usize, p: usize) -> Result<Self, EngineError> {
        if m < 1 || p < 1 || !p.is_multiple_of(2) {
            return Err(EngineError::InvalidGrid { m, p });
        }
        let engines = (0..m * m)
            .map(|_| EngineState {
                input_buffer: vec![0; (p + 2) * (p + 2)],
                coeff: None,
                wsum: vec![WideAccumulator::zero(); p * p],
                tile: None,
            })
            .collect();
        Ok(Self { m, p, engines })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn engine_count(&self) -> usize {
        self.m * self.m
    }

    /// Advances the ring: every engine's data (input buffer, partial sums,
    /// tile assignment) moves to the engine `steps` further along the cycle.
    /// Coefficient buffers do not move.
    pub fn ring_rotate(&mut self, steps: usize) {
        let n = self.engines.len();
        let steps = steps % n;
        if steps == 0 {
            return;
        }
        let mut moving: Vec<_> = self
            .engines
            .iter_mut()
            .map(|e| {
                (
                    std::mem::take(&mut e.input_buffer),
                    std::mem::take(&mut e.wsum),
                    e.tile.take(),
                )
            })
            .collect();
        moving.rotate_right(steps);
        for (e, (buf, wsum, tile)) in self.engines.iter_mut().zip(moving) {
            e.input_buffer = buf;
            e.wsum = wsum;
            e.tile = tile;
        }
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Extracts one p x p tile of a channel with its one-pixel halo.
///
/// Halo pixels that fall outside the feature map are zero codes; halo pixels
/// inside the map come from the neighboring tiles. Tiles at the right/bottom
/// edge of a map whose dimensions are not multiples of p read zeros beyond
/// the boundary, which matches padding the map up to the tiling and cropping
/// afterwards.
pub fn pad_tile(
    fmap: &FeatureMap,
    channel: usize,
    tile_y: usize,
    tile_x: usize,
    p: usize,
) -> Result<Vec<u16>, EngineError> {
    let tiles_y = ceil_div(fmap.height, p);
    let tiles_x = ceil_div(fmap.width, p);
    if tile_y >= tiles_y || tile_x >= tiles_x {
        return Err(EngineError::TileOutOfRange {
            tile_y,
            tile_x,
            tiles_y,
            tiles_x,
        });
    }
    let side = p + 2;
    let mut tile = vec![0u16; side * side];
    for ty in 0..side {
        // halo starts one pixel before the tile origin
        let gy = (tile_y * p + ty).checked_sub(1);
        for tx in 0..side {
            let gx = (tile_x * p + tx).checked_sub(1);
            if let (Some(gy), Some(gx)) = (gy, gx) {
                if gy < fmap.height && gx < fmap.width {
                    tile[ty * side + tx] = fmap.get(channel, gy, gx);
                }
            }
        }
    }
    Ok(tile)
}

/// Accumulates one kernel pass over a padded tile into the weighted sums.
///
/// wsum[y][x] += sum over the 3x3 neighborhood of tile value times kernel
/// weight, computed exactly.
pub fn conv3x3_tile(
    tile: &[u16],
    fmap_exp_bias: i32,
    kernel: &Kernel3x3,
    wsum: &mut [WideAccumulator],
    p: usize,
) {
    debug_assert_eq!(tile.len(), (p + 2) * (p + 2));
    debug_assert_eq!(wsum.len(), p * p);
    let side = p + 2;
    for y in 0..p {
        for x in 0..p {
            let acc = &mut wsum[y * p + x];
            for ky in 0..3 {
                for kx in 0..3 {
                    let a = tile[(y + ky) * side + (x + kx)];
                    let w = kernel.weights[ky * 3 + kx];
                    if a == 0 || w == 0 {
                        continue;
                    }
                    acc.add_product_bits(&DSFP9, a, fmap_exp_bias, &DSFP15, w, kernel.exp_bias);
                }
            }
        }
    }
}

/// Adds the per-channel bias, applies the activation, and rounds each
/// weighted sum straight to an output code (single rounding step).
pub fn finalize(
    wsum: &[WideAccumulator],
    bias_code: u16,
    bias_exp_bias: i32,
    act: Activation,
    out_exp_bias: i32,
) -> Vec<u16> {
    let (bm, be) = DSFP15.decode_fixed(bias_code, bias_exp_bias);
    wsum.iter()
        .map(|acc| {
            let mut acc = *acc;
            acc.add_fixed(bm as i128, be);
            if act == Activation::Relu && acc.signum() < 0 {
                0
            } else {
                acc.encode(&DSFP9, out_exp_bias)
            }
        })
        .collect()
}

/// 2x2 max pooling. Keeps the code of the largest decoded value in each
/// window; on ties the earliest element in reading order (top-left, then
/// top-right, then bottom-left, then bottom-right) wins, so the result does
/// not depend on evaluation order.
pub fn maxpool2x2(fmap: &FeatureMap) -> Result<FeatureMap, EngineError> {
    if !fmap.height.is_multiple_of(2) || !fmap.width.is_multiple_of(2) {
        return Err(EngineError::OddDimensions {
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
        for y in 0..out.height {
            for x in 0..out.width {
                let mut best_code = fmap.get(c, 2 * y, 2 * x);
                let mut best = DSFP9.decode_bits(best_code, fmap.exp_bias);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let code = fmap.get(c, 2 * y + dy, 2 * x + dx);
                    let v = DSFP9.decode_bits(code, fmap.exp_bias);
                    if v > best {
                        best = v;
                        best_code = code;
                    }
                }
                out.set(c, y, x, best_code);
            }
        }
    }
    Ok(out)
}

fn fetch_kernel(
    memory: &mut DeviceMemory,
    region: RegionId,
    layer: &LayerDescriptor,
    out_c: usize,
    in_c: usize,
) -> Result<Kernel3x3, EngineError> {
    let kernel_index = out_c * layer.in_ch + in_c;
    let offset = layer.weight_offset + (kernel_index * 18) as u64;
    let bytes = memory.read(region, offset, 18)?;
    let mut weights = [0u16; 9];
    for (i, pair) in bytes.chunks_exact(2).enumerate() {
        let bits = u16::from_le_bytes([pair[0], pair[1]]);
        if !DSFP15.is_valid(bits) {
            return Err(EngineError::InvalidCode {
                format: DSFP15.name,
                bits,
                index: kernel_index * 9 + i,
            });
        }
        weights[i] = bits;
    }
    Ok(Kernel3x3 {
        weights,
        exp_bias: layer.weight_exp_bias,
    })
}

/// Runs one convolution layer on the grid.
///
/// Tiles are processed in batches of one grid-load. Within a batch, each
/// output channel accumulates over all input channels; the ring rotates the
/// data buffers between input-channel passes per the schedule. Weighted sums
/// stay exact until the single final rounding, so the output is bit-identical
/// for every schedule and tile assignment.
pub fn run_conv_layer(
    fmap: &FeatureMap,
    layer: &LayerDescriptor,
    grid: &mut EngineGrid,
    memory: &mut DeviceMemory,
    region: RegionId,
    schedule: &RingSchedule,
) -> Result<FeatureMap, EngineError> {
    if fmap.channels != layer.in_ch {
        return Err(EngineError::ChannelMismatch {
            expected: layer.in_ch,
            got: fmap.channels,
        });
    }
    if layer.bias_codes.len() != layer.out_ch {
        return Err(EngineError::BiasCount {
            expected: layer.out_ch,
            got: layer.bias_codes.len(),
        });
    }
    for (index, &bits) in layer.bias_codes.iter().enumerate() {
        if !DSFP15.is_valid(bits) {
            return Err(EngineError::InvalidCode {
                format: DSFP15.name,
                bits,
                index,
            });
        }
    }

    let p = grid.p;
    let n = grid.engine_count();
    let tiles_y = ceil_div(fmap.height, p);
    let tiles_x = ceil_div(fmap.width, p);
    let tiles: Vec<(usize, usize)> = (0..tiles_y)
        .flat_map(|ty| (0..tiles_x).map(move |tx| (ty, tx)))
        .collect();

    let mut out = FeatureMap::zeros(layer.out_ch, fmap.height, fmap.width, layer.out_exp_bias);

    for batch in tiles.chunks(n) {
        for o in 0..layer.out_ch {
            for e in grid.engines.iter_mut() {
                e.tile = None;
            }
            for (i, &t) in batch.iter().enumerate() {
                let slot = (i + schedule.initial_offset) % n;
                let e = &mut grid.engines[slot];
                e.tile = Some(t);
                e.wsum.fill(WideAccumulator::zero());
            }
            for ic in 0..layer.in_ch {
                let kernel = fetch_kernel(memory, region, layer, o, ic)?;
                for e in grid.engines.iter_mut() {
                    let Some((ty, tx)) = e.tile else { continue };
                    e.coeff = Some(kernel);
                    e.input_buffer = pad_tile(fmap, ic, ty, tx, p)?;
                    conv3x3_tile(&e.input_buffer, fmap.exp_bias, &kernel, &mut e.wsum, p);
                }
                grid.ring_rotate(schedule.rotate_per_round);
            }
            for e in grid.engines.iter() {
                let Some((ty, tx)) = e.tile else { continue };
                let codes = finalize(
                    &e.wsum,
                    layer.bias_codes[o],
                    layer.weight_exp_bias,
                    layer.act,
                    layer.out_exp_bias,
                );
                for y in 0..p {
                    let gy = ty * p + y;
                    if gy >= out.height {
                        break;
                    }
                    for x in 0..p {
                        let gx = tx * p + x;
                        if gx >= out.width {
                            break;
                        }
                        out.set(o, gy, gx, codes[y * p + x]);
                    }
                }
            }
        }
    }

    if layer.pool {
        maxpool2x2(&out)
    } else {
        Ok(out)
    }
}
