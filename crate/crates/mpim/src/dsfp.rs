//! Bit-exact codecs for the two domain-specific floating point (DSFP)
//! formats and the exact wide accumulator used for weighted sums.
//!
//! Both formats are IEEE-like but have no NaN or infinity encodings: the top
//! exponent is an ordinary finite binade, encoding saturates to the largest
//! finite code, and the zero exponent field holds subnormals. Each tensor
//! carries its own exponent bias, which is how the formats adapt to the
//! dynamic range of a given weight or activation tensor.

use thiserror::Error;

/// Errors from DSFP encode/validate operations.
#[derive(Debug, Error, PartialEq)]
pub enum DsfpError {
    #[error("cannot encode non-finite value {0}")]
    NonFinite(f64),
    #[error("code {bits:#x} out of range for {format} ({total} significant bits)")]
    InvalidCode {
        bits: u16,
        format: &'static str,
        total: u32,
    },
}

/// Bit layout of a DSFP format: 1 sign bit, `exp_bits` exponent bits,
/// `frac_bits` fraction bits, packed sign-high into a 16-bit container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DsfpFormat {
    pub name: &'static str,
    pub total_bits: u32,
    pub sign_bits: u32,
    pub exp_bits: u32,
    pub frac_bits: u32,
    pub default_exp_bias: i32,
}

/// 9-bit activation format: 1 sign, 4 exponent, 4 fraction bits.
pub static DSFP9: DsfpFormat = DsfpFormat {
    name: "dsfp9",
    total_bits: 9,
    sign_bits: 1,
    exp_bits: 4,
    frac_bits: 4,
    default_exp_bias: 7,
};

/// 15-bit coefficient format: 1 sign, 5 exponent, 9 fraction bits.
pub static DSFP15: DsfpFormat = DsfpFormat {
    name: "dsfp15",
    total_bits: 15,
    sign_bits: 1,
    exp_bits: 5,
    frac_bits: 9,
    default_exp_bias: 15,
};

impl DsfpFormat {
    /// Number of distinct codes (2^total_bits).
    pub fn code_count(&self) -> u32 {
        1 << self.total_bits
    }

    fn exp_field_max(&self) -> u32 {
        (1 << self.exp_bits) - 1
    }

    fn frac_field_max(&self) -> u32 {
        (1 << self.frac_bits) - 1
    }

    fn sign_mask(&self) -> u16 {
        1 << (self.total_bits - 1)
    }

    /// Magnitude bits of the largest finite code (all exponent and fraction
    /// bits set).
    pub fn max_finite_bits(&self) -> u16 {
        ((self.exp_field_max() << self.frac_bits) | self.frac_field_max()) as u16
    }

    /// Largest decodable magnitude at the given exponent bias.
    pub fn max_finite(&self, exp_bias: i32) -> f64 {
        self.decode_bits(self.max_finite_bits(), exp_bias)
    }

    /// Smallest positive (subnormal) magnitude at the given exponent bias.
    pub fn min_subnormal(&self, exp_bias: i32) -> f64 {
        self.decode_bits(1, exp_bias)
    }

    /// Splits a code into (sign, exponent field, fraction field).
    pub fn split(&self, bits: u16) -> (bool, u32, u32) {
        let sign = bits & self.sign_mask() != 0;
        let e = (bits as u32 >> self.frac_bits) & self.exp_field_max();
        let f = bits as u32 & self.frac_field_max();
        (sign, e, f)
    }

    /// Packs (sign, exponent field, fraction field) into a code.
    pub fn compose(&self, sign: bool, e: u32, f: u32) -> u16 {
        debug_assert!(e <= self.exp_field_max() && f <= self.frac_field_max());
        let mag = (e << self.frac_bits) | f;
        (mag as u16) | if sign { self.sign_mask() } else { 0 }
    }

    /// True when `bits` has no significance above `total_bits`.
    pub fn is_valid(&self, bits: u16) -> bool {
        (bits as u32) < self.code_count()
    }

    /// Decodes a raw code to its exact real value.
    ///
    /// e > 0: (-1)^s * (1 + f/2^frac) * 2^(e - bias)
    /// e = 0: (-1)^s * (f/2^frac) * 2^(1 - bias)  (subnormal)
    pub fn decode_bits(&self, bits: u16, exp_bias: i32) -> f64 {
        let (mant, exp) = self.decode_fixed(bits, exp_bias);
        mant as f64 * pow2(exp)
    }

    /// Decodes a code into exact fixed-point form `mant * 2^exp`.
    ///
    /// The sign of zero is lost here; use `split` when -0 matters.
    pub fn decode_fixed(&self, bits: u16, exp_bias: i32) -> (i64, i32) {
        debug_assert!(self.is_valid(bits));
        let (sign, e, f) = self.split(bits);
        let (mag, exp) = if e == 0 {
            (f as i64, 1 - exp_bias - self.frac_bits as i32)
        } else {
            (
                ((1u32 << self.frac_bits) + f) as i64,
                e as i32 - exp_bias - self.frac_bits as i32,
            )
        };
        (if sign { -mag } else { mag }, exp)
    }

    /// Encodes a finite value to the nearest code at the given exponent bias.
    ///
    /// Ties round to an even fraction field; magnitudes beyond the largest
    /// finite value saturate to the max-finite code of matching sign; values
    /// that round below the smallest subnormal become signed zero.
    pub fn encode(&self, value: f64, exp_bias: i32) -> Result<u16, DsfpError> {
        if !value.is_finite() {
            return Err(DsfpError::NonFinite(value));
        }
        if value == 0.0 {
            return Ok(if value.is_sign_negative() {
                self.sign_mask()
            } else {
                0
            });
        }
        let (mant, exp) = f64_to_fixed(value);
        Ok(self.encode_fixed(mant, exp, exp_bias))
    }

    /// Encodes an exact fixed-point value `mant * 2^exp` to the nearest code.
    ///
    /// This is the single rounding point shared by the float encoder and the
    /// wide accumulator, so no intermediate f64 rounding ever intervenes.
    pub fn encode_fixed(&self, mant: i128, exp: i32, exp_bias: i32) -> u16 {
        if mant == 0 {
            return 0;
        }
        let sign = mant < 0;
        let a = mant.unsigned_abs();
        let frac = self.frac_bits as i32;
        // floor(log2 |value|)
        let ue = (127 - a.leading_zeros() as i32) + exp;
        let e_max = self.exp_field_max() as i32;
        if ue > e_max - exp_bias {
            // at least one binade above the top one: saturate
            return self.max_finite_bits() | if sign { self.sign_mask() } else { 0 };
        }
        let e_star = ue + exp_bias;
        // quantum exponent of the binade holding the value
        let q = if e_star <= 0 {
            1 - exp_bias - frac
        } else {
            ue - frac
        };
        let shift = exp as i64 - q as i64;
        let k: u128 = if shift >= 0 {
            // shift is bounded by frac_bits + 1 here, no overflow possible
            a << shift
        } else {
            let t = -shift;
            if t >= 128 {
                0
            } else {
                let t = t as u32;
                let q_int = a >> t;
                let rem = a & ((1u128 << t) - 1);
                let half = 1u128 << (t - 1);
                let round_up = rem > half || (rem == half && q_int & 1 == 1);
                q_int + round_up as u128
            }
        };
        let frac_one = 1u128 << frac;
        let mag: u32 = if e_star <= 0 {
            // k <= 2^frac; k == 2^frac carries into the first normal code
            k as u32
        } else {
            // k in [2^frac, 2^(frac+1)]; the top value carries into e_star+1
            (((e_star as u32) << frac) as u128 + (k - frac_one)) as u32
        };
        let mag = mag.min(self.max_finite_bits() as u32);
        mag as u16 | if sign { self.sign_mask() } else { 0 }
    }
}

/// A validated code paired with its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DsfpCode {
    bits: u16,
    format: &'static DsfpFormat,
}

impl DsfpCode {
    pub fn new(format: &'static DsfpFormat, bits: u16) -> Result<Self, DsfpError> {
        if !format.is_valid(bits) {
            return Err(DsfpError::InvalidCode {
                bits,
                format: format.name,
                total: format.total_bits,
            });
        }
        Ok(Self { bits, format })
    }

    pub fn bits(&self) -> u16 {
        self.bits
    }

    pub fn format(&self) -> &'static DsfpFormat {
        self.format
    }

    pub fn decode(&self, exp_bias: i32) -> f64 {
        self.format.decode_bits(self.bits, exp_bias)
    }
}

/// Exact accumulator for weighted sums.
///
/// Holds `mant * 2^exp` with a 127-bit mantissa, wide enough that any
/// realistic sum of DSFP9 x DSFP15 products (up to 2^20 terms at full
/// magnitude) stays exact, making accumulation order irrelevant. Exceeding
/// the representable dynamic range (mixing exponent biases tens of binades
/// apart) panics rather than silently rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WideAccumulator {
    mant: i128,
    exp: i32,
}

impl WideAccumulator {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        self.mant == 0
    }

    /// Sign of the exact value: -1, 0, or 1.
    pub fn signum(&self) -> i32 {
        self.mant.signum() as i32
    }

    /// Adds the exact value `mant * 2^exp`.
    pub fn add_fixed(&mut self, mant: i128, exp: i32) {
        if mant == 0 {
            return;
        }
        if self.mant == 0 {
            self.mant = mant;
            self.exp = exp;
            self.normalize();
            return;
        }
        let e = self.exp.min(exp);
        let a = shl_exact(self.mant, (self.exp - e) as u32);
        let b = shl_exact(mant, (exp - e) as u32);
        self.mant = a.checked_add(b).expect("wide accumulator overflow");
        self.exp = e;
        self.normalize();
    }

    /// Adds a finite f64 exactly (every finite f64 is `m * 2^e`).
    pub fn add_f64(&mut self, value: f64) {
        assert!(value.is_finite(), "cannot accumulate non-finite {value}");
        let (m, e) = f64_to_fixed(value);
        self.add_fixed(m, e);
    }

    /// Adds the exact product of two decoded codes.
    pub fn add_product(&mut self, a: DsfpCode, bias_a: i32, w: DsfpCode, bias_w: i32) {
        let (ma, ea) = a.format.decode_fixed(a.bits, bias_a);
        let (mw, ew) = w.format.decode_fixed(w.bits, bias_w);
        self.add_fixed(ma as i128 * mw as i128, ea + ew);
    }

    /// Adds the exact product of two raw codes.
    pub(crate) fn add_product_bits(
        &mut self,
        fa: &DsfpFormat,
        a: u16,
        bias_a: i32,
        fw: &DsfpFormat,
        w: u16,
        bias_w: i32,
    ) {
        let (ma, ea) = fa.decode_fixed(a, bias_a);
        let (mw, ew) = fw.decode_fixed(w, bias_w);
        self.add_fixed(ma as i128 * mw as i128, ea + ew);
    }

    /// Nearest f64 to the exact value. Used for reporting, not for encoding.
    pub fn to_f64(&self) -> f64 {
        self.mant as f64 * pow2(self.exp)
    }

    /// Rounds the exact value directly to a code of `format`.
    pub fn encode(&self, format: &DsfpFormat, exp_bias: i32) -> u16 {
        format.encode_fixed(self.mant, self.exp, exp_bias)
    }

    fn normalize(&mut self) {
        if self.mant == 0 {
            self.exp = 0;
        } else {
            let tz = self.mant.trailing_zeros();
            self.mant >>= tz;
            self.exp += tz as i32;
        }
    }
}

/// One multiply-accumulate step: `acc + decode(a) * decode(w)`, exact.
pub fn mac(
    mut acc: WideAccumulator,
    a: DsfpCode,
    w: DsfpCode,
    bias_a: i32,
    bias_w: i32,
) -> WideAccumulator {
    acc.add_product(a, bias_a, w, bias_w);
    acc
}

fn shl_exact(m: i128, s: u32) -> i128 {
    if s == 0 {
        return m;
    }
    // keep one bit of headroom for the sign
    assert!(
        s < m.unsigned_abs().leading_zeros(),
        "wide accumulator dynamic range exceeded (shift {s})"
    );
    m << s
}

/// Exact decomposition of a finite f64 into `mant * 2^exp`.
fn f64_to_fixed(value: f64) -> (i128, i32) {
    debug_assert!(value.is_finite());
    let bits = value.to_bits();
    let sign = bits >> 63 != 0;
    let e = ((bits >> 52) & 0x7ff) as i32;
    let m = (bits & ((1u64 << 52) - 1)) as i128;
    let (mant, exp) = if e == 0 {
        (m, -1074)
    } else {
        (m | (1 << 52), e - 1075)
    };
    (if sign { -mant } else { mant }, exp)
}

/// 2^e as f64, exact over the full useful range.
fn pow2(e: i32) -> f64 {
    // f64::powi is exact for powers of two within range
    2.0f64.powi(e)
}
