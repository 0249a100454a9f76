//! SVF volume files: `magic "SVF1" | dtype u8 | ndim u8 | extents u32 LE |
//! raw row-major payload`. Dtype 0 is f32 intensities, 1 is u8 labels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SVF1";

#[derive(Debug, Clone, PartialEq)]
pub enum SvfPayload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvfVolume {
    pub extents: Vec<usize>,
    pub payload: SvfPayload,
}

impl SvfVolume {
    pub fn numel(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn f32_volume(extents: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::checked(extents, SvfPayload::F32(data))
    }

    pub fn label_volume(extents: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::checked(extents, SvfPayload::U8(data))
    }

    fn checked(extents: Vec<usize>, payload: SvfPayload) -> Result<Self> {
        let numel: usize = extents.iter().product();
        let len = match &payload {
            SvfPayload::F32(d) => d.len(),
            SvfPayload::U8(d) => d.len(),
        };
        if extents.is_empty() || extents.len() > 255 || numel != len {
            return Err(Error::Data(format!(
                "SVF extents {:?} do not match payload of {} values",
                extents, len
            )));
        }
        Ok(SvfVolume { extents, payload })
    }
}

pub fn write_svf(path: impl AsRef<Path>, vol: &SvfVolume) -> Result<()> {
    let path = path.as_ref();
    let io_err = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        let code: u8 = match vol.payload {
            SvfPayload::F32(_) => 0,
            SvfPayload::U8(_) => 1,
        };
        w.write_all(&[code, vol.extents.len() as u8])?;
        for &e in &vol.extents {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        match &vol.payload {
            SvfPayload::F32(d) => {
                for &v in d {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            SvfPayload::U8(d) => w.write_all(d)?,
        }
        w.flush()
    })()
    .map_err(io_err)
}

pub fn read_svf(path: impl AsRef<Path>) -> Result<SvfVolume> {
    let path = path.as_ref();
    let io_err = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(io_err)?;
    if &head[..4] != MAGIC {
        return Err(Error::Data(format!("{}: bad SVF magic", path.display())));
    }
    let (code, ndim) = (head[4], head[5] as usize);
    let mut extents = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf).map_err(io_err)?;
        extents.push(u32::from_le_bytes(buf) as usize);
    }
    let numel: usize = extents.iter().product();
    let payload = match code {
        0 => {
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf).map_err(io_err)?;
                data.push(f32::from_le_bytes(buf));
            }
            SvfPayload::F32(data)
        }
        1 => {
            let mut data = vec![0u8; numel];
            r.read_exact(&mut data).map_err(io_err)?;
            SvfPayload::U8(data)
        }
        other => {
            return Err(Error::Data(format!(
                "{}: unknown SVF dtype code {other}",
                path.display()
            )))
        }
    };
    SvfVolume::checked(extents, payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bitwise_exact(
            d in 1usize..5, h in 1usize..5, w in 1usize..5, seed in 0u64..500
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dir = tempfile::tempdir().unwrap();

            let data: Vec<f32> = (0..d * h * w).map(|_| rng.gen::<f32>()).collect();
            let vol = SvfVolume::f32_volume(vec![d, h, w], data).unwrap();
            let p = dir.path().join("v.svf");
            write_svf(&p, &vol).unwrap();
            prop_assert_eq!(read_svf(&p).unwrap(), vol);

            let labels: Vec<u8> = (0..d * h * w).map(|_| rng.gen_range(0..4)).collect();
            let lab = SvfVolume::label_volume(vec![d, h, w], labels).unwrap();
            let p2 = dir.path().join("l.svf");
            write_svf(&p2, &lab).unwrap();
            prop_assert_eq!(read_svf(&p2).unwrap(), lab);
        }
    }

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.svf");
        let vol = SvfVolume::label_volume(vec![2, 3], vec![0, 1, 2, 3, 4, 5]).unwrap();
        write_svf(&p, &vol).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"SVF1");
        assert_eq!(bytes[4], 1); // u8 labels
        assert_eq!(bytes[5], 2); // ndim
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &3u32.to_le_bytes());
        assert_eq!(&bytes[14..], &[0, 1, 2, 3, 4, 5]);
        assert_eq!(bytes.len(), 4 + 1 + 1 + 2 * 4 + 6);
    }

    #[test]
    fn bad_magic_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.svf");
        std::fs::write(&p, b"XXXX\x00\x01\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_svf(&p), Err(Error::Data(_))));
    }
}
