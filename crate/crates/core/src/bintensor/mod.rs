//! Dense and bit-packed rank-3 tensors.
//!
//! Layout is row-major over `(y, x)` with channels innermost. A [`BitTensor`]
//! stores each pixel's channels in `ceil(channels / 64)` little-endian `u64`
//! words, channel `c` at bit `c % 64` of word `c / 64`. Bits above `channels`
//! in the last word of a pixel are always zero.
//!
//! Bit 1 stands for +1 and bit 0 for -1 whenever a tensor is read in the ±1
//! algebra ([`to_pm`]).

mod kernel;

pub(crate) use kernel::mismatch_tile;

use crate::error::{Error, Result};

pub const WORD_BITS: usize = 64;

/// Words needed to hold `bits` bits.
#[inline]
pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Mask of the valid bits in the last word of a `bits`-wide run.
#[inline]
pub fn tail_mask(bits: usize) -> u64 {
    match bits % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::shape(format!(
            "tensor dims must be positive, got {height}x{width}x{channels}"
        )));
    }
    Ok(())
}

/// Dense `height × width × channels` array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct RealTensor {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl RealTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(
            height > 0 && width > 0 && channels > 0,
            "tensor dims must be positive"
        );
        Self {
            height,
            width,
            channels,
            values: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if values.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width}x{channels} tensor",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.height && x < self.width && c < self.channels);
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.values[i] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.values[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.values[start..start + self.channels]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }
}

/// Channel-packed binary feature map.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitTensor {
    height: usize,
    width: usize,
    channels: usize,
    words_per_pixel: usize,
    words: Vec<u64>,
}

impl BitTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(
            height > 0 && width > 0 && channels > 0,
            "tensor dims must be positive"
        );
        let words_per_pixel = words_for(channels);
        Self {
            height,
            width,
            channels,
            words_per_pixel,
            words: vec![0; height * width * words_per_pixel],
        }
    }

    /// Wraps raw words, rejecting wrong lengths and dirty padding bits.
    pub fn from_words(height: usize, width: usize, channels: usize, words: Vec<u64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        let words_per_pixel = words_for(channels);
        if words.len() != height * width * words_per_pixel {
            return Err(Error::shape(format!(
                "{} words for a {height}x{width}x{channels} bit tensor (expected {})",
                words.len(),
                height * width * words_per_pixel
            )));
        }
        let t = Self {
            height,
            width,
            channels,
            words_per_pixel,
            words,
        };
        if !t.padding_clean() {
            return Err(Error::InvalidValue("padding bits set in packed words".into()));
        }
        Ok(t)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn words_per_pixel(&self) -> usize {
        self.words_per_pixel
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Number of channel bits actually stored (excludes padding).
    pub fn bit_count(&self) -> usize {
        self.height * self.width * self.channels
    }

    #[inline]
    pub fn pixel_words(&self, y: usize, x: usize) -> &[u64] {
        let start = (y * self.width + x) * self.words_per_pixel;
        &self.words[start..start + self.words_per_pixel]
    }

    #[inline]
    pub fn pixel_words_mut(&mut self, y: usize, x: usize) -> &mut [u64] {
        let start = (y * self.width + x) * self.words_per_pixel;
        &mut self.words[start..start + self.words_per_pixel]
    }

    #[inline]
    pub fn bit(&self, y: usize, x: usize, c: usize) -> bool {
        debug_assert!(c < self.channels);
        (self.pixel_words(y, x)[c / WORD_BITS] >> (c % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set_bit(&mut self, y: usize, x: usize, c: usize, on: bool) {
        assert!(c < self.channels, "channel {c} out of range");
        let w = &mut self.pixel_words_mut(y, x)[c / WORD_BITS];
        let m = 1u64 << (c % WORD_BITS);
        if on {
            *w |= m;
        } else {
            *w &= !m;
        }
    }

    /// True when every bit position at or above `channels` is zero.
    pub fn padding_clean(&self) -> bool {
        let mask = tail_mask(self.channels);
        self.words
            .chunks_exact(self.words_per_pixel)
            .all(|px| px[self.words_per_pixel - 1] & !mask == 0)
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }
}

/// Per-window argmax record of a 2×2 max-pool.
///
/// Corner codes: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndexMap {
    height: usize,
    width: usize,
    channels: usize,
    indices: Vec<u8>,
}

impl PoolIndexMap {
    pub fn new(height: usize, width: usize, channels: usize, indices: Vec<u8>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if indices.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} pool indices for {height}x{width}x{channels}",
                indices.len()
            )));
        }
        if let Some(bad) = indices.iter().find(|&&i| i > 3) {
            return Err(Error::InvalidValue(format!("pool index {bad} outside 0..=3")));
        }
        Ok(Self {
            height,
            width,
            channels,
            indices,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.indices[(y * self.width + x) * self.channels + c]
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    /// Source-pixel offset `(dy, dx)` of a corner code.
    #[inline]
    pub fn corner_offset(code: u8) -> (usize, usize) {
        ((code >> 1) as usize, (code & 1) as usize)
    }
}

/// Packs a tensor whose values are exactly 0 or 1.
pub fn pack(t: &RealTensor) -> Result<BitTensor> {
    let (h, w, c) = t.dims();
    let mut out = BitTensor::zeros(h, w, c);
    let wpp = out.words_per_pixel;
    for (px, words) in t.values.chunks_exact(c).zip(out.words.chunks_exact_mut(wpp)) {
        for (ch, &v) in px.iter().enumerate() {
            if v == 1.0 {
                words[ch / WORD_BITS] |= 1u64 << (ch % WORD_BITS);
            } else if v != 0.0 {
                return Err(Error::InvalidValue(format!(
                    "cannot pack value {v}; only 0 and 1 are allowed"
                )));
            }
        }
    }
    Ok(out)
}

fn expand(b: &BitTensor, zero: f64, one: f64) -> RealTensor {
    let (h, w, c) = b.dims();
    let mut values = Vec::with_capacity(h * w * c);
    for words in b.words.chunks_exact(b.words_per_pixel) {
        values.extend((0..c).map(|ch| {
            if (words[ch / WORD_BITS] >> (ch % WORD_BITS)) & 1 == 1 {
                one
            } else {
                zero
            }
        }));
    }
    RealTensor {
        height: h,
        width: w,
        channels: c,
        values,
    }
}

/// Expands bits to `{0, 1}` reals.
pub fn unpack(b: &BitTensor) -> RealTensor {
    expand(b, 0.0, 1.0)
}

/// Expands bits to `{-1, +1}` reals (bit 1 ↦ +1, bit 0 ↦ −1).
pub fn to_pm(b: &BitTensor) -> RealTensor {
    expand(b, -1.0, 1.0)
}

/// Number of agreeing positions among the first `valid_bits` bits of two
/// packed vectors.
pub fn xnor_popcount_dot(a_words: &[u64], w_words: &[u64], valid_bits: usize) -> Result<u32> {
    let expected = words_for(valid_bits);
    if a_words.len() != expected || w_words.len() != expected {
        return Err(Error::shape(format!(
            "xnor dot over {valid_bits} bits needs {expected} words, got {} and {}",
            a_words.len(),
            w_words.len()
        )));
    }
    if valid_bits == 0 {
        return Ok(0);
    }
    let last = expected - 1;
    let mut mismatches: u32 = a_words[..last]
        .iter()
        .zip(&w_words[..last])
        .map(|(a, w)| (a ^ w).count_ones())
        .sum();
    mismatches += ((a_words[last] ^ w_words[last]) & tail_mask(valid_bits)).count_ones();
    Ok(valid_bits as u32 - mismatches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bits(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> RealTensor {
        let v = (0..h * w * c)
            .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
            .collect();
        RealTensor::from_vec(h, w, c, v).unwrap()
    }

    #[test]
    fn pack_sets_expected_bits() {
        let t = RealTensor::from_vec(1, 1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        let b = pack(&t).unwrap();
        assert_eq!(b.words(), &[0b101]);
    }

    #[test]
    fn pack_all_zero_word_count() {
        let b = pack(&RealTensor::zeros(2, 2, 64)).unwrap();
        assert_eq!(b.words().len(), 4);
        assert!(b.words().iter().all(|&w| w == 0));
    }

    #[test]
    fn pack_rejects_non_binary() {
        let t = RealTensor::from_vec(1, 1, 2, vec![1.0, 0.5]).unwrap();
        assert!(matches!(pack(&t), Err(Error::InvalidValue(_))));
    }

    #[test]
    fn round_trip_random_4x4x100() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_bits(&mut rng, 4, 4, 100);
        let b = pack(&t).unwrap();
        assert_eq!(b.words().len(), 4 * 4 * 2);
        assert!(b.padding_clean());
        let back = unpack(&b);
        for (i, (x, y)) in t.values().iter().zip(back.values()).enumerate() {
            assert_eq!(x, y, "element {i}");
        }
    }

    #[test]
    fn round_trip_random_3x5x7() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_bits(&mut rng, 3, 5, 7);
        assert_eq!(unpack(&pack(&t).unwrap()), t);
    }

    #[test]
    fn unpack_word_boundary() {
        let mut b = BitTensor::zeros(1, 1, 66);
        b.set_bit(0, 0, 65, true);
        assert_eq!(b.words(), &[0, 0b10]);
        let u = unpack(&b);
        for c in 0..66 {
            assert_eq!(u.get(0, 0, c), if c == 65 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn to_pm_maps_bits_to_signs() {
        let b = pack(&RealTensor::from_vec(1, 1, 3, vec![1.0, 0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(to_pm(&b).values(), &[1.0, -1.0, 1.0]);
        assert!(to_pm(&BitTensor::zeros(2, 3, 5)).values().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn to_pm_is_affine_image_of_unpack() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = pack(&random_bits(&mut rng, 6, 2, 129)).unwrap();
        let u = unpack(&b);
        let pm = to_pm(&b);
        for (p, q) in pm.values().iter().zip(u.values()) {
            assert_eq!(*p, 2.0 * q - 1.0);
        }
    }

    #[test]
    fn from_words_rejects_dirty_padding() {
        assert!(BitTensor::from_words(1, 1, 3, vec![0b1000]).is_err());
        assert!(BitTensor::from_words(1, 1, 3, vec![0b0111]).is_ok());
        assert!(BitTensor::from_words(1, 2, 3, vec![0]).is_err());
        assert!(BitTensor::from_words(0, 1, 3, vec![]).is_err());
    }

    #[test]
    fn xnor_dot_small_cases() {
        assert_eq!(xnor_popcount_dot(&[0x1ff], &[0x1ff], 9).unwrap(), 9);
        // a = (1,0,1), w = (1,1,0): agreement only at position 0.
        assert_eq!(xnor_popcount_dot(&[0b101], &[0b011], 3).unwrap(), 1);
        assert!(xnor_popcount_dot(&[0, 0], &[0], 70).is_err());
    }

    #[test]
    fn xnor_dot_matches_pm_dot_512() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = pack(&random_bits(&mut rng, 1, 1, 512)).unwrap();
            let w = pack(&random_bits(&mut rng, 1, 1, 512)).unwrap();
            let pm: f64 = to_pm(&a)
                .values()
                .iter()
                .zip(to_pm(&w).values())
                .map(|(x, y)| x * y)
                .sum();
            let got = xnor_popcount_dot(a.words(), w.words(), 512).unwrap();
            assert_eq!(got as f64, (pm + 512.0) / 2.0);
        }
    }

    #[test]
    fn pool_index_map_validates() {
        assert!(PoolIndexMap::new(1, 1, 2, vec![0, 4]).is_err());
        assert!(PoolIndexMap::new(1, 1, 2, vec![3, 2]).is_ok());
        assert_eq!(PoolIndexMap::corner_offset(2), (1, 0));
        assert_eq!(PoolIndexMap::corner_offset(1), (0, 1));
    }
}
