//! The "CFQ1" quadruplet container.
//!
//! ```text
//! file   = "CFQ1" | version u32 | count u32 | resolution u32 | record*
//! record = identity_seed u64 | ref_frame u32 | tgt_frame u32
//!        | x_ref (H·W·3) | x_tgt (H·W·3) | d_ref (H·W·9) | d_tgt (H·W·9)
//!        | params_ref (33) | params_tgt (33) | crc32(payload) u32
//! ```
//!
//! All integers and floats are little-endian; images are row-major HWC
//! float32 in the channel order of `ControlMaps`. The CRC covers every byte
//! of the record before it.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::quadruplet::{QuadMeta, Quadruplet};
use crate::facegen::params::PARAM_DIM;
use crate::facegen::render::check_resolution;
use crate::facegen::{ControlMaps, FaceParams, CONTROL_CHANNELS};
use crate::raster::Raster;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CFQ1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Bytes per record at resolution `res`, checksum included.
pub fn record_len(res: usize) -> usize {
    let floats = res * res * (3 + 3 + 2 * CONTROL_CHANNELS) + 2 * PARAM_DIM;
    8 + 4 + 4 + 4 * floats + 4
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn encode_record(q: &Quadruplet, out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&q.meta.identity_seed.to_le_bytes());
    out.extend_from_slice(&q.meta.ref_frame.to_le_bytes());
    out.extend_from_slice(&q.meta.tgt_frame.to_le_bytes());
    put_f32s(out, &q.x_ref.data);
    put_f32s(out, &q.x_tgt.data);
    put_f32s(out, &q.d_ref.data.data);
    put_f32s(out, &q.d_tgt.data.data);
    put_f32s(out, &q.meta.params_ref.to_vec());
    put_f32s(out, &q.meta.params_tgt.to_vec());
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

fn check_sample(i: usize, q: &Quadruplet, res: usize) -> Result<()> {
    let ok = q.x_ref.res == res
        && q.x_tgt.res == res
        && q.d_ref.res() == res
        && q.d_tgt.res() == res
        && q.x_ref.channels == 3
        && q.x_tgt.channels == 3;
    if ok {
        Ok(())
    } else {
        Err(Error::shape(format!("sample {i} does not match resolution {res}")))
    }
}

/// Serialises a whole container.
pub fn encode(res: usize, samples: &[Quadruplet]) -> Result<Vec<u8>> {
    check_resolution(res)?;
    let count = u32::try_from(samples.len()).map_err(|_| Error::contract("too many samples"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + samples.len() * record_len(res));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&(res as u32).to_le_bytes());
    for (i, q) in samples.iter().enumerate() {
        check_sample(i, q, res)?;
        encode_record(q, &mut out);
    }
    Ok(out)
}

/// Parsed header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub count: usize,
    pub res: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(None, "file shorter than header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(None, "bad magic"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(Error::format(None, format!("unsupported version {version}")));
    }
    let res = word(12) as usize;
    check_resolution(res).map_err(|_| Error::format(None, format!("bad resolution {res}")))?;
    Ok(Header {
        count: word(8) as usize,
        res,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> &[u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().expect("4 bytes"))
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().expect("8 bytes"))
    }

    fn f32s(&mut self, n: usize) -> Vec<f32> {
        self.take(4 * n)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    }
}

/// Decodes one record whose bytes (checksum included) are `rec`.
fn decode_record(index: usize, rec: &[u8], res: usize) -> Result<Quadruplet> {
    debug_assert_eq!(rec.len(), record_len(res));
    let (payload, crc_bytes) = rec.split_at(rec.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(Error::format(Some(index), "checksum mismatch"));
    }
    let mut c = Cursor { bytes: payload, pos: 0 };
    let identity_seed = c.u64();
    let ref_frame = c.u32();
    let tgt_frame = c.u32();
    let px = res * res;
    let x_ref = Raster::new(res, 3, c.f32s(px * 3))?;
    let x_tgt = Raster::new(res, 3, c.f32s(px * 3))?;
    let d_ref = ControlMaps::new(Raster::new(res, CONTROL_CHANNELS, c.f32s(px * CONTROL_CHANNELS))?)?;
    let d_tgt = ControlMaps::new(Raster::new(res, CONTROL_CHANNELS, c.f32s(px * CONTROL_CHANNELS))?)?;
    let params_ref = FaceParams::from_slice(&c.f32s(PARAM_DIM));
    let params_tgt = FaceParams::from_slice(&c.f32s(PARAM_DIM));
    Ok(Quadruplet {
        x_ref,
        x_tgt,
        d_ref,
        d_tgt,
        meta: QuadMeta {
            identity_seed,
            ref_frame,
            tgt_frame,
            params_ref,
            params_tgt,
        },
    })
}

/// Parses a whole container. Any damaged record fails the whole read.
pub fn decode(bytes: &[u8]) -> Result<(Header, Vec<Quadruplet>)> {
    let header = parse_header(bytes)?;
    let len = record_len(header.res);
    let body = &bytes[HEADER_LEN..];
    let expected = header.count.checked_mul(len).ok_or_else(|| Error::format(None, "count overflow"))?;
    if body.len() < expected {
        let record = body.len() / len;
        return Err(Error::format(
            Some(record),
            format!("truncated: {} of {} records present", record, header.count),
        ));
    }
    if body.len() > expected {
        return Err(Error::format(None, "trailing bytes after last record"));
    }
    let samples = body
        .chunks_exact(len)
        .enumerate()
        .map(|(i, rec)| decode_record(i, rec, header.res))
        .collect::<Result<Vec<_>>>()?;
    Ok((header, samples))
}

/// Writes via a temporary sibling file and a rename, so readers never see a
/// half-written container.
pub fn write_container(path: &Path, res: usize, samples: &[Quadruplet]) -> Result<()> {
    let bytes = encode(res, samples)?;
    let tmp = tmp_path(path);
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

pub fn read_container(path: &Path) -> Result<(Header, Vec<Quadruplet>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Writes `samples` to `path` and reads them back.
pub fn dataset_roundtrip(samples: &[Quadruplet], path: &Path) -> Result<Vec<Quadruplet>> {
    let res = samples.first().map_or(16, Quadruplet::res);
    write_container(path, res, samples)?;
    Ok(read_container(path)?.1)
}

/// Random access to the records of a container without loading it whole.
#[derive(Debug)]
pub struct ContainerReader {
    file: File,
    path: PathBuf,
    header: Header,
}

impl ContainerReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut head = [0u8; HEADER_LEN];
        file.read_exact(&mut head)
            .map_err(|_| Error::format(None, "file shorter than header"))?;
        let header = parse_header(&head)?;
        let size = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
        let expected = HEADER_LEN + header.count * record_len(header.res);
        if size < expected {
            let record = (size - HEADER_LEN) / record_len(header.res);
            return Err(Error::format(Some(record), "truncated"));
        }
        if size > expected {
            return Err(Error::format(None, "trailing bytes after last record"));
        }
        Ok(ContainerReader {
            file,
            path: path.to_path_buf(),
            header,
        })
    }

    pub fn header(&self) -> Header {
        self.header
    }

    pub fn len(&self) -> usize {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn read(&mut self, index: usize) -> Result<Quadruplet> {
        if index >= self.header.count {
            return Err(Error::contract(format!(
                "record {index} out of range for {} records",
                self.header.count
            )));
        }
        let len = record_len(self.header.res);
        let mut buf = vec![0u8; len];
        self.file
            .seek(SeekFrom::Start((HEADER_LEN + index * len) as u64))
            .and_then(|_| self.file.read_exact(&mut buf))
            .map_err(|e| Error::io(&self.path, e))?;
        decode_record(index, &buf, self.header.res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_quadruplet, generate_trajectory};

    fn samples(n: u64) -> Vec<Quadruplet> {
        (0..n)
            .map(|i| build_quadruplet(&generate_trajectory(i, 4).unwrap(), i, false, 16).unwrap())
            .collect()
    }

    #[test]
    fn record_length_matches_encoding() {
        let s = samples(2);
        assert_eq!(encode(16, &s).unwrap().len(), HEADER_LEN + 2 * record_len(16));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = encode(16, &samples(1)).unwrap();
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::Format { record: None, .. })));
        let mut b = encode(16, &samples(1)).unwrap();
        b[4] = 9;
        assert!(matches!(decode(&b), Err(Error::Format { record: None, .. })));
    }

    #[test]
    fn corrupt_record_is_named() {
        let mut b = encode(16, &samples(3)).unwrap();
        let at = HEADER_LEN + record_len(16) + 100;
        b[at] ^= 0x40;
        assert!(matches!(decode(&b), Err(Error::Format { record: Some(1), .. })));
    }

    #[test]
    fn mismatched_resolution_is_rejected() {
        assert!(encode(32, &samples(1)).is_err());
    }
}
