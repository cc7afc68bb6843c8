//! LSB-first bit packing of unsigned codes, 1 to 8 bits wide.
//!
//! Code `i` occupies bits `i*b .. (i+1)*b` of one continuous little-endian
//! bit stream; the final byte is zero-padded.

use crate::error::{Error, Result};

pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let limit = 1u16 << bits;
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut bit = 0usize;
    for &code in codes {
        if code as u16 >= limit {
            return Err(Error::Corruption(format!("code {code} does not fit in {bits} bits")));
        }
        let byte = bit / 8;
        let shift = bit % 8;
        let wide = (code as u16) << shift;
        out[byte] |= wide as u8;
        if shift + bits as usize > 8 {
            out[byte + 1] |= (wide >> 8) as u8;
        }
        bit += bits as usize;
    }
    Ok(out)
}

pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    check_bits(bits)?;
    if bytes.len() < packed_len(count, bits) {
        return Err(Error::Corruption(format!(
            "{} bytes cannot hold {count} codes of {bits} bits",
            bytes.len()
        )));
    }
    let mask = (1u16 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let mut bit = 0usize;
    for _ in 0..count {
        let byte = bit / 8;
        let shift = bit % 8;
        let lo = bytes[byte] as u16;
        let hi = bytes.get(byte + 1).copied().unwrap_or(0) as u16;
        out.push((((lo | (hi << 8)) >> shift) & mask) as u8);
        bit += bits as usize;
    }
    Ok(out)
}

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=8).contains(&bits) {
        return Err(Error::param(format!("bit width {bits} outside 1..=8")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_bit_layout_is_low_nibble_first() {
        assert_eq!(pack_codes(&[0x1, 0xA, 0x3], 4).unwrap(), vec![0xA1, 0x03]);
    }

    #[test]
    fn two_bit_layout() {
        assert_eq!(pack_codes(&[3, 0, 1, 2], 2).unwrap(), vec![0b10_01_00_11]);
    }

    #[test]
    fn oversized_code_rejected() {
        assert!(pack_codes(&[16], 4).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(bits in 1u8..=8, raw in proptest::collection::vec(any::<u8>(), 0..300)) {
            let codes: Vec<u8> = raw.iter().map(|c| (*c as u16 % (1u16 << bits)) as u8).collect();
            let packed = pack_codes(&codes, bits).unwrap();
            prop_assert_eq!(packed.len(), packed_len(codes.len(), bits));
            prop_assert_eq!(unpack_codes(&packed, bits, codes.len()).unwrap(), codes);
        }
    }
}
