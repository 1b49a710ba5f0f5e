//! Framing shared by the dataset and checkpoint files.
//!
//! ```text
//! magic      8 bytes
//! len        u64 little-endian, byte length of the manifest
//! manifest   UTF-8 JSON
//! floats     u64 LE count, then that many f64 LE values
//! bits       u64 LE count of bits, then ceil(count/8) bytes, LSB first
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) fn write_framed<W: Write>(
    mut w: W,
    magic: &[u8; 8],
    manifest: &[u8],
    floats: &[f64],
    bits: &[bool],
) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(manifest)?;
    w.write_all(&(floats.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(floats.len() * 8);
    for v in floats {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.write_all(&(bits.len() as u64).to_le_bytes())?;
    w.write_all(&pack_bits(bits))?;
    Ok(())
}

pub(crate) struct Framed {
    pub manifest: Vec<u8>,
    pub floats: Vec<f64>,
    pub bits: Vec<bool>,
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_framed<R: Read>(mut r: R, magic: &[u8; 8]) -> Result<Framed> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let len = read_u64(&mut r)? as usize;
    let mut manifest = vec![0u8; len];
    r.read_exact(&mut manifest)?;
    let n = read_u64(&mut r)? as usize;
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)?;
    let floats = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let nbits = read_u64(&mut r)? as usize;
    let mut packed = vec![0u8; nbits.div_ceil(8)];
    r.read_exact(&mut packed)?;
    Ok(Framed {
        manifest,
        floats,
        bits: unpack_bits(&packed, nbits),
    })
}

pub(crate) fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub(crate) fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn framing_round_trip(floats in proptest::collection::vec(-1e6f64..1e6, 0..40),
                              bits in proptest::collection::vec(any::<bool>(), 0..70)) {
            let mut buf = Vec::new();
            write_framed(&mut buf, b"TESTMAG1", b"{\"a\":1}", &floats, &bits).unwrap();
            let f = read_framed(&buf[..], b"TESTMAG1").unwrap();
            prop_assert_eq!(f.manifest, b"{\"a\":1}".to_vec());
            prop_assert_eq!(f.floats, floats);
            prop_assert_eq!(f.bits, bits);
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut buf = Vec::new();
        write_framed(&mut buf, b"TESTMAG1", b"{}", &[], &[]).unwrap();
        assert!(read_framed(&buf[..], b"OTHERMAG").is_err());
    }
}
