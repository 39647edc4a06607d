//! Run-length text encoding of binary masks.
//!
//! A mask is scanned in row-major order and written as space-separated decimal
//! run lengths that alternate between unset and set pixels, always starting
//! with an unset run (which may be `0`). The runs sum to `width * height`.
//! An all-zero 3x2 mask encodes as `"6"`, an all-one mask as `"0 6"`.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub fn encode(mask: &BinaryMask) -> String {
    let mut runs: Vec<usize> = Vec::new();
    let mut current = false;
    let mut count = 0usize;
    for &bit in mask.bits() {
        if bit != current {
            runs.push(count);
            count = 0;
            current = bit;
        }
        count += 1;
    }
    runs.push(count);
    runs.iter()
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn decode(text: &str, width: usize, height: usize) -> Result<BinaryMask> {
    let total = width * height;
    let mut bits = Vec::with_capacity(total);
    let mut value = false;
    for token in text.split_ascii_whitespace() {
        let run: usize = token
            .parse()
            .map_err(|_| Error::Rle(format!("run `{token}` is not a decimal count")))?;
        if bits.len() + run > total {
            return Err(Error::Rle(format!(
                "runs exceed {width}x{height} = {total} pixels"
            )));
        }
        bits.resize(bits.len() + run, value);
        value = !value;
    }
    if bits.len() != total {
        return Err(Error::Rle(format!(
            "runs cover {} of {total} pixels",
            bits.len()
        )));
    }
    BinaryMask::from_bits(width, height, bits)
}
