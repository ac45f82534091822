use crate::error::{Error, Result};
use crate::tensor::Real;

/// Row-major sign bits packed into `u64` words. Bit `j` of a row lives in word
/// `j / 64` at position `j % 64`; a set bit means `+1`, a clear bit `-1`.
/// Bits past `valid_len` in the last word of each row are always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBits {
    words: Vec<u64>,
    valid_len: usize,
    rows: usize,
    words_per_row: usize,
}

/// One packed row borrowed from a [`PackedBits`].
#[derive(Debug, Clone, Copy)]
pub struct PackedRow<'a> {
    pub words: &'a [u64],
    pub valid_len: usize,
}

#[inline]
pub(crate) fn words_for(valid_len: usize) -> usize {
    valid_len.div_ceil(64)
}

/// Mask of the meaningful bits in the final word of a row.
#[inline]
pub(crate) fn tail_mask(valid_len: usize) -> u64 {
    match valid_len % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl PackedBits {
    pub fn zeros(rows: usize, valid_len: usize) -> Self {
        let wpr = words_for(valid_len);
        PackedBits {
            words: vec![0; rows * wpr],
            valid_len,
            rows,
            words_per_row: wpr,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, r: usize) -> PackedRow<'_> {
        PackedRow {
            words: &self.words[r * self.words_per_row..(r + 1) * self.words_per_row],
            valid_len: self.valid_len,
        }
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [u64] {
        &mut self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    /// Bytes held by the packed words: `rows * ceil(valid_len / 64) * 8`.
    pub fn memory_bytes(&self) -> usize {
        self.words.len() * std::mem::size_of::<u64>()
    }

    pub fn get(&self, r: usize, j: usize) -> bool {
        self.row(r).words[j / 64] >> (j % 64) & 1 == 1
    }

    /// Expands back to `±1` values, row-major.
    pub fn unpack<T: Real>(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.rows * self.valid_len);
        for r in 0..self.rows {
            for j in 0..self.valid_len {
                out.push(if self.get(r, j) { T::one() } else { -T::one() });
            }
        }
        out
    }

    /// True when every padding bit past `valid_len` is zero.
    pub fn tail_is_clean(&self) -> bool {
        if self.valid_len.is_multiple_of(64) || self.words_per_row == 0 {
            return true;
        }
        let mask = tail_mask(self.valid_len);
        (0..self.rows).all(|r| self.row(r).words[self.words_per_row - 1] & !mask == 0)
    }
}

/// Packs `rows` rows of `valid_len` values each. Values are reduced to their
/// sign first, so both `±1` inputs and raw reals are accepted.
pub fn pack_signs<T: Real>(data: &[T], rows: usize, valid_len: usize) -> Result<PackedBits> {
    if rows.checked_mul(valid_len) != Some(data.len()) {
        return Err(Error::dim(
            "pack_signs",
            format!(
                "{} values cannot form {rows} rows of valid_len {valid_len}",
                data.len()
            ),
        ));
    }
    let mut packed = PackedBits::zeros(rows, valid_len);
    if valid_len == 0 {
        return Ok(packed);
    }
    for (r, row) in data.chunks(valid_len).enumerate() {
        let words = packed.row_mut(r);
        for (j, &v) in row.iter().enumerate() {
            if v >= T::zero() {
                words[j / 64] |= 1 << (j % 64);
            }
        }
    }
    Ok(packed)
}

/// `±1` dot product of two packed rows: `2 * popcount(XNOR(a, w) & mask) - valid_len`.
pub fn xnor_popcount_dot(a: PackedRow<'_>, w: PackedRow<'_>) -> Result<i64> {
    if a.valid_len != w.valid_len || a.words.len() != w.words.len() {
        return Err(Error::dim(
            "xnor_popcount_dot",
            format!("valid_len {} vs {}", a.valid_len, w.valid_len),
        ));
    }
    Ok(dot_unchecked(a.words, w.words, a.valid_len))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[u64], w: &[u64], valid_len: usize) -> i64 {
    let (Some((a_last, a_body)), Some((w_last, w_body))) = (a.split_last(), w.split_last()) else {
        return 0;
    };
    let mut matches: u32 = a_body
        .iter()
        .zip(w_body)
        .map(|(x, y)| (!(x ^ y)).count_ones())
        .sum();
    matches += (!(a_last ^ w_last) & tail_mask(valid_len)).count_ones();
    2 * matches as i64 - valid_len as i64
}

/// Same as [`xnor_popcount_dot`] but without the tail mask. Only used to
/// inject a known fault into the verification suites.
#[doc(hidden)]
pub fn xnor_popcount_dot_unmasked(a: PackedRow<'_>, w: PackedRow<'_>) -> i64 {
    let matches: u32 = a
        .words
        .iter()
        .zip(w.words)
        .map(|(x, y)| (!(x ^ y)).count_ones())
        .sum();
    2 * matches as i64 - a.valid_len as i64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pack_definition() {
        let p = pack_signs(&[1.0f32, -1.0, 1.0], 1, 3).unwrap();
        assert_eq!(p.words(), &[0b101]);
        assert_eq!(p.valid_len(), 3);

        let ones = pack_signs(&[1.0f32; 64], 1, 64).unwrap();
        assert_eq!(ones.words(), &[u64::MAX]);
        assert!(pack_signs(&[1.0f32; 5], 2, 3).is_err());
    }

    #[test]
    fn dot_hand_cases() {
        let a = pack_signs(&[1.0f32, -1.0, 1.0], 1, 3).unwrap();
        let w = pack_signs(&[1.0f32, 1.0, -1.0], 1, 3).unwrap();
        assert_eq!(xnor_popcount_dot(a.row(0), w.row(0)).unwrap(), -1);

        for len in [1usize, 63, 64, 65, 200] {
            let row: Vec<f32> = (0..len)
                .map(|i| if i % 3 == 0 { -1.0 } else { 1.0 })
                .collect();
            let neg: Vec<f32> = row.iter().map(|v| -v).collect();
            let p = pack_signs(&row, 1, len).unwrap();
            let q = pack_signs(&neg, 1, len).unwrap();
            assert_eq!(xnor_popcount_dot(p.row(0), p.row(0)).unwrap(), len as i64);
            assert_eq!(
                xnor_popcount_dot(p.row(0), q.row(0)).unwrap(),
                -(len as i64)
            );
        }
    }

    #[test]
    fn dot_rejects_length_mismatch() {
        let a = pack_signs(&[1.0f32; 3], 1, 3).unwrap();
        let b = pack_signs(&[1.0f32; 4], 1, 4).unwrap();
        assert!(xnor_popcount_dot(a.row(0), b.row(0)).is_err());
    }

    #[test]
    fn unmasked_dot_is_wrong_on_tails() {
        let a = pack_signs(&[-1.0f32; 3], 1, 3).unwrap();
        assert_eq!(xnor_popcount_dot(a.row(0), a.row(0)).unwrap(), 3);
        assert_ne!(xnor_popcount_dot_unmasked(a.row(0), a.row(0)), 3);
    }

    #[test]
    fn footprint_accounting() {
        let p = PackedBits::zeros(10, 2048);
        assert_eq!(p.memory_bytes(), 10 * 32 * 8);
        let dense = 10 * 2048 * 4;
        assert!(dense / p.memory_bytes() >= 30);
    }

    proptest! {
        #[test]
        fn unpack_inverts_pack(rows in 1usize..4, len in 1usize..200, seed in any::<u64>()) {
            let mut state = seed;
            let data: Vec<f32> = (0..rows * len).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f32 / (1u64 << 31) as f32) * 2.0 - 1.0
            }).collect();
            let p = pack_signs(&data, rows, len).unwrap();
            prop_assert!(p.tail_is_clean());
            let signs: Vec<f32> = data.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
            prop_assert_eq!(p.unpack::<f32>(), signs);
        }

        #[test]
        fn dot_matches_brute_force(len in 1usize..300, seed in any::<u64>()) {
            let mut state = seed | 1;
            let mut bit = || { state ^= state << 13; state ^= state >> 7; state ^= state << 17; state & 1 == 1 };
            let a: Vec<f32> = (0..len).map(|_| if bit() { 1.0 } else { -1.0 }).collect();
            let w: Vec<f32> = (0..len).map(|_| if bit() { 1.0 } else { -1.0 }).collect();
            let expect: i64 = a.iter().zip(&w).map(|(x, y)| (x * y) as i64).sum();
            let pa = pack_signs(&a, 1, len).unwrap();
            let pw = pack_signs(&w, 1, len).unwrap();
            prop_assert_eq!(xnor_popcount_dot(pa.row(0), pw.row(0)).unwrap(), expect);
        }
    }
}
