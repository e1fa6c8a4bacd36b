//! The `NVOL1` container: a short text header followed by a raw payload.
//!
//! ```text
//! NVOL1
//! dims: X Y Z
//! spacing: sx sy sz
//! channels: c
//! data: f32-le | u8
//!
//! <payload, x-fastest, channel-planar>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{FieldRole, VectorField, Volume};
use crate::metrics::Mask;

pub const VOLUME_MAGIC: &str = "NVOL1";

/// Largest payload accepted by the reader, in elements.
const MAX_ELEMENTS: usize = 1 << 34;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32-le",
            Payload::U8(_) => "u8",
        }
    }
}

/// A decoded file before it is given a meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct RawVolume {
    /// Grid extent ordered `[z, y, x]`.
    pub extent: [usize; 3],
    /// Spacing ordered `[z, y, x]`, in mm.
    pub spacing: [f64; 3],
    pub channels: usize,
    pub payload: Payload,
}

fn fmt_err(ctx: &str, location: String, msg: impl Into<String>) -> Error {
    Error::Format {
        context: ctx.to_string(),
        location,
        msg: msg.into(),
    }
}

fn header_line<R: BufRead>(r: &mut R, ctx: &str, line_no: usize, offset: &mut usize) -> Result<String> {
    let mut buf = Vec::new();
    let n = r.read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Err(fmt_err(ctx, format!("line {line_no}"), "unexpected end of header"));
    }
    *offset += n;
    if buf.last() == Some(&b'\n') {
        buf.pop();
    }
    String::from_utf8(buf).map_err(|_| fmt_err(ctx, format!("line {line_no}"), "header is not UTF-8"))
}

fn field<'a>(line: &'a str, key: &str, ctx: &str, line_no: usize) -> Result<Vec<&'a str>> {
    let rest = line
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix(':'))
        .ok_or_else(|| fmt_err(ctx, format!("line {line_no}"), format!("expected `{key}:`, found {line:?}")))?;
    Ok(rest.split_whitespace().collect())
}

fn numbers<T: std::str::FromStr>(parts: &[&str], want: usize, key: &str, ctx: &str, line_no: usize) -> Result<Vec<T>> {
    if parts.len() != want {
        return Err(fmt_err(
            ctx,
            format!("line {line_no}"),
            format!("`{key}` needs {want} values, found {}", parts.len()),
        ));
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| fmt_err(ctx, format!("line {line_no}"), format!("bad `{key}` value {p:?}")))
        })
        .collect()
}

/// Decodes a complete `NVOL1` stream. `ctx` names the source in diagnostics.
pub fn read_raw<R: Read>(r: R, ctx: &str) -> Result<RawVolume> {
    let mut r = BufReader::new(r);
    let mut offset = 0;
    let magic = header_line(&mut r, ctx, 1, &mut offset)?;
    if magic != VOLUME_MAGIC {
        return Err(fmt_err(ctx, "line 1".into(), format!("expected magic {VOLUME_MAGIC}, found {magic:?}")));
    }
    let l = header_line(&mut r, ctx, 2, &mut offset)?;
    let dims: Vec<usize> = numbers(&field(&l, "dims", ctx, 2)?, 3, "dims", ctx, 2)?;
    let l = header_line(&mut r, ctx, 3, &mut offset)?;
    let sp: Vec<f64> = numbers(&field(&l, "spacing", ctx, 3)?, 3, "spacing", ctx, 3)?;
    let l = header_line(&mut r, ctx, 4, &mut offset)?;
    let channels: usize = numbers(&field(&l, "channels", ctx, 4)?, 1, "channels", ctx, 4)?[0];
    let l = header_line(&mut r, ctx, 5, &mut offset)?;
    let kind = field(&l, "data", ctx, 5)?;
    let elem = match kind.as_slice() {
        ["f32-le"] => 4,
        ["u8"] => 1,
        _ => return Err(fmt_err(ctx, "line 5".into(), format!("unknown data type in {l:?}"))),
    };
    let blank = header_line(&mut r, ctx, 6, &mut offset)?;
    if !blank.is_empty() {
        return Err(fmt_err(ctx, "line 6".into(), "expected a blank line before the payload"));
    }
    if dims.iter().any(|&d| d == 0) || channels == 0 {
        return Err(fmt_err(ctx, "line 2".into(), "dims and channels must be positive"));
    }
    if sp.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(fmt_err(ctx, "line 3".into(), "spacing must be positive and finite"));
    }
    let count = dims
        .iter()
        .try_fold(channels, |acc, &d| acc.checked_mul(d))
        .filter(|&c| c <= MAX_ELEMENTS)
        .ok_or_else(|| fmt_err(ctx, "line 2".into(), "extent overflows the supported payload size"))?;
    let bytes = count * elem;
    let mut buf = Vec::with_capacity(bytes);
    r.by_ref().take(bytes as u64).read_to_end(&mut buf)?;
    if buf.len() < bytes {
        return Err(fmt_err(
            ctx,
            format!("byte {}", offset + buf.len()),
            format!("truncated payload: expected {bytes} bytes, found {}", buf.len()),
        ));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(fmt_err(
            ctx,
            format!("byte {}", offset + bytes),
            format!("trailing data after the {bytes}-byte payload"),
        ));
    }
    let payload = if elem == 4 {
        Payload::F32(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    } else {
        Payload::U8(buf)
    };
    Ok(RawVolume {
        extent: [dims[2], dims[1], dims[0]],
        spacing: [sp[2], sp[1], sp[0]],
        channels,
        payload,
    })
}

pub fn write_raw<W: Write>(w: W, raw: &RawVolume) -> Result<()> {
    let n: usize = raw.extent.iter().product::<usize>() * raw.channels;
    if raw.payload.len() != n {
        return Err(Error::shape("write_volume", "payload", n, raw.payload.len()));
    }
    let mut w = BufWriter::new(w);
    let [z, y, x] = raw.extent;
    let [sz, sy, sx] = raw.spacing;
    writeln!(w, "{VOLUME_MAGIC}")?;
    writeln!(w, "dims: {x} {y} {z}")?;
    writeln!(w, "spacing: {sx} {sy} {sz}")?;
    writeln!(w, "channels: {}", raw.channels)?;
    writeln!(w, "data: {}", raw.payload.tag())?;
    writeln!(w)?;
    match &raw.payload {
        Payload::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Payload::U8(v) => w.write_all(v)?,
    }
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<RawVolume> {
    let f = File::open(path)?;
    read_raw(f, &path.display().to_string())
}

fn create(path: &Path, raw: &RawVolume) -> Result<()> {
    write_raw(File::create(path)?, raw)
}

fn expect_f32(raw: RawVolume, channels: usize, ctx: &str) -> Result<([usize; 3], [f64; 3], Vec<f32>)> {
    if raw.channels != channels {
        return Err(fmt_err(ctx, "line 4".into(), format!("expected {channels} channel(s), found {}", raw.channels)));
    }
    match raw.payload {
        Payload::F32(v) => {
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(fmt_err(ctx, format!("element {i}"), "non-finite value"));
            }
            Ok((raw.extent, raw.spacing, v))
        }
        Payload::U8(_) => Err(fmt_err(ctx, "line 5".into(), "expected f32-le data")),
    }
}

pub fn volume_from_raw(raw: RawVolume, ctx: &str) -> Result<Volume> {
    let (extent, spacing, data) = expect_f32(raw, 1, ctx)?;
    Volume::new(extent, spacing, data)
}

pub fn field_from_raw(raw: RawVolume, role: FieldRole, ctx: &str) -> Result<VectorField> {
    let (extent, spacing, data) = expect_f32(raw, 3, ctx)?;
    VectorField::new(extent, role, data)?.with_spacing(spacing)
}

pub fn mask_from_raw(raw: RawVolume, ctx: &str) -> Result<Mask> {
    if raw.channels != 1 {
        return Err(fmt_err(ctx, "line 4".into(), format!("expected 1 channel, found {}", raw.channels)));
    }
    let data = match raw.payload {
        Payload::U8(v) => v.into_iter().map(|b| b != 0).collect(),
        Payload::F32(v) => v.into_iter().map(|x| x >= 0.5).collect(),
    };
    Mask::new(raw.extent, data)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    volume_from_raw(open(path)?, &path.display().to_string())
}

pub fn read_field(path: &Path, role: FieldRole) -> Result<VectorField> {
    field_from_raw(open(path)?, role, &path.display().to_string())
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    mask_from_raw(open(path)?, &path.display().to_string())
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    create(
        path,
        &RawVolume {
            extent: v.extent(),
            spacing: v.spacing(),
            channels: 1,
            payload: Payload::F32(v.data().to_vec()),
        },
    )
}

pub fn write_field(path: &Path, phi: &VectorField) -> Result<()> {
    create(
        path,
        &RawVolume {
            extent: phi.extent(),
            spacing: phi.spacing(),
            channels: 3,
            payload: Payload::F32(phi.data().to_vec()),
        },
    )
}

pub fn write_mask(path: &Path, m: &Mask, spacing: [f64; 3]) -> Result<()> {
    create(
        path,
        &RawVolume {
            extent: m.extent(),
            spacing,
            channels: 1,
            payload: Payload::U8(m.data().iter().map(|&b| b as u8).collect()),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(raw: &RawVolume) -> Vec<u8> {
        let mut buf = Vec::new();
        write_raw(&mut buf, raw).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bitwise() {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| (i as f32 * 0.37).sin() * 1e-3 + f32::EPSILON).collect();
        let raw = RawVolume {
            extent: [2, 3, 4],
            spacing: [2.5, 1.0 / 3.0, 0.1],
            channels: 1,
            payload: Payload::F32(data),
        };
        let back = read_raw(encode(&raw).as_slice(), "mem").unwrap();
        assert_eq!(back, raw);
    }

    #[test]
    fn single_zero_voxel_has_four_byte_payload() {
        let v = Volume::filled([1, 1, 1], 0.0);
        let raw = RawVolume {
            extent: v.extent(),
            spacing: v.spacing(),
            channels: 1,
            payload: Payload::F32(v.data().to_vec()),
        };
        let bytes = encode(&raw);
        let header = b"NVOL1\ndims: 1 1 1\nspacing: 1 1 1\nchannels: 1\ndata: f32-le\n\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len() - header.len(), 4);
    }

    #[test]
    fn channel_count_must_match_payload() {
        let raw = RawVolume {
            extent: [2, 2, 2],
            spacing: [1.0; 3],
            channels: 1,
            payload: Payload::F32(vec![0.5; 8]),
        };
        let text = String::from_utf8_lossy(&encode(&raw)).replace("channels: 1", "channels: 3");
        let err = read_raw(text.as_bytes(), "mem").unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn malformed_headers_report_their_line() {
        let cases = [
            ("NVOL2\n", "line 1"),
            ("NVOL1\ndims: 2 2\n", "line 2"),
            ("NVOL1\ndims: 2 2 2\nspacing: 1 x 1\n", "line 3"),
            ("NVOL1\ndims: 2 2 2\nspacing: 1 1 1\nchannels: 1\ndata: f64\n\n", "line 5"),
            ("NVOL1\ndims: 2 2 2\nspacing: 1 1 1\nchannels: 1\ndata: u8\nx\n", "line 6"),
            ("NVOL1\ndims: 2 2 2\nspacing: 1 -1 1\nchannels: 1\ndata: u8\n\n", "line 3"),
        ];
        for (text, loc) in cases {
            let err = read_raw(text.as_bytes(), "mem").unwrap_err();
            assert!(err.to_string().contains(loc), "{text:?}: {err}");
        }
    }

    #[test]
    fn overflowing_extent_is_rejected() {
        let text = format!("NVOL1\ndims: {} {} 2\nspacing: 1 1 1\nchannels: 3\ndata: f32-le\n\n", usize::MAX / 2, 4);
        let err = read_raw(text.as_bytes(), "mem").unwrap_err();
        assert!(err.to_string().contains("overflow"), "{err}");
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = b"NVOL1\ndims: 1 1 1\nspacing: 1 1 1\nchannels: 1\ndata: u8\n\n".to_vec();
        bytes.extend([1, 2]);
        let err = read_raw(bytes.as_slice(), "mem").unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn files_round_trip_for_each_kind() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::from_fn([3, 4, 5], |z, y, x| (z * 100 + y * 10 + x) as f32 * 0.1)
            .with_spacing([3.0, 2.0, 1.5])
            .unwrap();
        let p = dir.path().join("v.nvol");
        write_volume(&p, &v).unwrap();
        assert_eq!(read_volume(&p).unwrap(), v);

        let phi = VectorField::from_fn([3, 4, 5], FieldRole::Displacement, |z, y, x| {
            [x as f32 * 0.1, -(y as f32), z as f32 / 7.0]
        });
        let p = dir.path().join("phi.nvol");
        write_field(&p, &phi).unwrap();
        assert_eq!(read_field(&p, FieldRole::Displacement).unwrap(), phi);
        assert!(read_volume(&p).is_err());

        let m = Mask::from_fn([3, 4, 5], |z, y, x| (z + y + x) % 3 == 0);
        let p = dir.path().join("m.nvol");
        write_mask(&p, &m, [1.0; 3]).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
        assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, 60 + 55);
    }
}
