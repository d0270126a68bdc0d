//! Byte-exact encodings for everything that crosses the client/server
//! boundary. Round logs count bytes with these encoders, so the lengths are
//! part of the contract.
//!
//! Mask layout:
//!
//! ```text
//! u32 LE   layer count L
//! u32 LE   element count of layer 0 .. layer L-1
//! payload  binary: ceil(total / 8) bytes, layer-major, bit i of the flat
//!          sequence at byte i / 8, bit position i % 8 (LSB first)
//!          float:  total * 8 bytes, f64 LE
//! ```
//!
//! Smashed batches are `u32 count, u32 width, count*width f64, count u32
//! labels`; gradient returns are `u32 count, u32 width, count*width f64`.

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ProbMask};

pub fn mask_header_len(layers: usize) -> usize {
    4 + 4 * layers
}

pub fn binary_payload_len(total_bits: usize) -> usize {
    total_bits.div_ceil(8)
}

pub fn binary_mask_len(shape: &[usize]) -> usize {
    mask_header_len(shape.len()) + binary_payload_len(shape.iter().sum())
}

pub fn float_mask_len(shape: &[usize]) -> usize {
    mask_header_len(shape.len()) + 8 * shape.iter().sum::<usize>()
}

pub fn smashed_batch_len(count: usize, width: usize) -> usize {
    8 + 8 * count * width + 4 * count
}

pub fn gradient_batch_len(count: usize, width: usize) -> usize {
    8 + 8 * count * width
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Wire(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn write_header(out: &mut Vec<u8>, shape: &[usize]) -> Result<()> {
    put_u32(out, shape.len())?;
    for &n in shape {
        put_u32(out, n)?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Wire("truncated input".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn header(&mut self) -> Result<Vec<usize>> {
        let layers = self.u32()?;
        if layers > self.bytes.len() / 4 {
            return Err(Error::Wire(format!("implausible layer count {layers}")));
        }
        (0..layers).map(|_| self.u32()).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Wire(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_binary_mask(mask: &BinaryMask) -> Result<Vec<u8>> {
    let shape = mask.shape();
    let mut out = Vec::with_capacity(binary_mask_len(&shape));
    write_header(&mut out, &shape)?;
    let mut payload = vec![0u8; binary_payload_len(mask.total_len())];
    for (i, bit) in mask.flat().enumerate() {
        if bit {
            payload[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_binary_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let mut r = Reader { bytes, pos: 0 };
    let shape = r.header()?;
    let total: usize = shape.iter().sum();
    let payload = r.take(binary_payload_len(total))?;
    r.finish()?;
    if !total.is_multiple_of(8) && payload[total / 8] >> (total % 8) != 0 {
        return Err(Error::Wire("nonzero padding bits".into()));
    }
    let mut flat = (0..total).map(|i| payload[i / 8] >> (i % 8) & 1 == 1);
    Ok(BinaryMask {
        layers: shape
            .iter()
            .map(|&n| flat.by_ref().take(n).collect())
            .collect(),
    })
}

pub fn encode_float_mask(theta: &ProbMask) -> Result<Vec<u8>> {
    let shape = theta.shape();
    let mut out = Vec::with_capacity(float_mask_len(&shape));
    write_header(&mut out, &shape)?;
    for t in theta.flat() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_float_mask(bytes: &[u8]) -> Result<ProbMask> {
    let mut r = Reader { bytes, pos: 0 };
    let shape = r.header()?;
    let layers = shape
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| {
                    let b = r.take(8)?;
                    Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    ProbMask::new(layers)
}

pub fn encode_smashed_batch(activations: &[Vec<f64>], labels: &[usize]) -> Result<Vec<u8>> {
    if activations.len() != labels.len() {
        return Err(Error::Wire("activation and label counts differ".into()));
    }
    let width = activations.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(smashed_batch_len(activations.len(), width));
    put_u32(&mut out, activations.len())?;
    put_u32(&mut out, width)?;
    for a in activations {
        if a.len() != width {
            return Err(Error::Wire("ragged activations".into()));
        }
        for v in a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &y in labels {
        put_u32(&mut out, y)?;
    }
    Ok(out)
}

pub fn encode_gradient_batch(grads: &[Vec<f64>]) -> Result<Vec<u8>> {
    let width = grads.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(gradient_batch_len(grads.len(), width));
    put_u32(&mut out, grads.len())?;
    put_u32(&mut out, width)?;
    for g in grads {
        if g.len() != width {
            return Err(Error::Wire("ragged gradients".into()));
        }
        for v in g {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bit_order_is_lsb_first_layer_major() {
        let m = BinaryMask {
            layers: vec![vec![true, false, false], vec![false, true, true, false, false, false, false, true]],
        };
        let bytes = encode_binary_mask(&m).unwrap();
        assert_eq!(&bytes[..12], &[2, 0, 0, 0, 3, 0, 0, 0, 8, 0, 0, 0]);
        // flat bits: 1 0 0 0 1 1 0 0 | 0 0 1
        assert_eq!(&bytes[12..], &[0b0011_0001, 0b0000_0100]);
        assert_eq!(bytes.len(), binary_mask_len(&[3, 8]));
    }

    #[test]
    fn four_bit_mask_is_one_payload_byte() {
        let m = BinaryMask::ones(&[4]);
        assert_eq!(encode_binary_mask(&m).unwrap().len(), 8 + 1);
    }

    #[test]
    fn float_payload_is_sixty_four_times_binary() {
        let shape = [16, 48, 8];
        let bin = binary_mask_len(&shape) - mask_header_len(3);
        let flt = float_mask_len(&shape) - mask_header_len(3);
        assert_eq!(flt, 64 * bin);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_binary_mask(&[1, 0, 0]).is_err());
        let mut bytes = encode_binary_mask(&BinaryMask::zeros(&[3])).unwrap();
        *bytes.last_mut().unwrap() = 0b1000_0000;
        assert!(decode_binary_mask(&bytes).is_err());
        bytes.push(0);
        assert!(decode_binary_mask(&bytes).is_err());
    }

    #[test]
    fn batch_lengths() {
        let acts = vec![vec![0.5; 3]; 2];
        assert_eq!(
            encode_smashed_batch(&acts, &[1, 0]).unwrap().len(),
            smashed_batch_len(2, 3)
        );
        assert_eq!(encode_gradient_batch(&acts).unwrap().len(), gradient_batch_len(2, 3));
    }

    proptest! {
        #[test]
        fn binary_round_trip(layers in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 0..40), 0..5)) {
            let m = BinaryMask { layers };
            let bytes = encode_binary_mask(&m).unwrap();
            prop_assert_eq!(bytes.len(), binary_mask_len(&m.shape()));
            prop_assert_eq!(decode_binary_mask(&bytes).unwrap(), m);
        }

        #[test]
        fn float_round_trip(layers in proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 0..20), 0..4)) {
            let p = ProbMask::new(layers).unwrap();
            let bytes = encode_float_mask(&p).unwrap();
            prop_assert_eq!(bytes.len(), float_mask_len(&p.shape()));
            prop_assert_eq!(decode_float_mask(&bytes).unwrap(), p);
        }
    }
}
