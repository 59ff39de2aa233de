//! Framed binary messages between the sketching device and the server.
//!
//! A frame is a 1-byte tag, a 4-byte little-endian payload length, then the
//! payload. Scalars are 8-byte little-endian (`u64` or `f64`); every array
//! is preceded by its dimensions as 4-byte little-endian counts. Text (only
//! in `Error`) is a 4-byte byte count followed by UTF-8.

use std::io::{Read, Write};

use ndarray::Array2;

use crate::bounds::BoundingBox;
use crate::clomp::MixtureModel;
use crate::error::{Error, Result};
use crate::rff::{Provenance, C64};
use crate::sketch::Sketch;

/// Largest payload accepted from the wire.
pub const MAX_PAYLOAD: usize = 1 << 30;
pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Tag {
    Hello = 1,
    ProbeResponses = 2,
    DeltaN = 3,
    ScaleGrid = 4,
    Sketch = 5,
    Box = 6,
    Centroids = 7,
    Error = 8,
    EntropyReport = 9,
}

impl Tag {
    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            1 => Tag::Hello,
            2 => Tag::ProbeResponses,
            3 => Tag::DeltaN,
            4 => Tag::ScaleGrid,
            5 => Tag::Sketch,
            6 => Tag::Box,
            7 => Tag::Centroids,
            8 => Tag::Error,
            9 => Tag::EntropyReport,
            other => return Err(Error::Protocol(format!("unknown tag {other}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SketchMode {
    /// Explicit frequency matrix on the device.
    Matrix,
    /// Simulated optical device, calibrated by the server.
    Opu,
}

impl SketchMode {
    fn code(self) -> u64 {
        match self {
            SketchMode::Matrix => 0,
            SketchMode::Opu => 1,
        }
    }

    fn from_code(v: u64) -> Result<Self> {
        match v {
            0 => Ok(SketchMode::Matrix),
            1 => Ok(SketchMode::Opu),
            _ => Err(Error::Protocol(format!("unknown sketch mode {v}"))),
        }
    }
}

/// Session parameters proposed by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct Hello {
    pub version: u64,
    pub mode: SketchMode,
    pub num_frequencies: u64,
    pub k: u64,
    pub bins: u64,
    pub frequency_seed: u64,
    pub calibration_repeats: u64,
    pub send_all: bool,
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropySummary {
    pub selected: u64,
    pub bins: u64,
    pub scales: Vec<f64>,
    pub entropies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    /// `M × (D' + 1)` probe responses; empty in matrix mode.
    ProbeResponses(Array2<f64>),
    DeltaN(Vec<f64>),
    ScaleGrid(Vec<f64>),
    Sketch(Sketch),
    Box(BoundingBox),
    Centroids(MixtureModel),
    Error(String),
    EntropyReport(EntropySummary),
}

impl Message {
    pub fn tag(&self) -> Tag {
        match self {
            Message::Hello(_) => Tag::Hello,
            Message::ProbeResponses(_) => Tag::ProbeResponses,
            Message::DeltaN(_) => Tag::DeltaN,
            Message::ScaleGrid(_) => Tag::ScaleGrid,
            Message::Sketch(_) => Tag::Sketch,
            Message::Box(_) => Tag::Box,
            Message::Centroids(_) => Tag::Centroids,
            Message::Error(_) => Tag::Error,
            Message::EntropyReport(_) => Tag::EntropyReport,
        }
    }

    /// Number of 8-byte values in the payload.
    pub fn payload_reals(&self) -> usize {
        match self {
            Message::Hello(h) => 8 + h.scales.len(),
            Message::ProbeResponses(a) => a.len(),
            Message::DeltaN(v) | Message::ScaleGrid(v) => v.len(),
            Message::Sketch(s) => 4 + 2 * s.len(),
            Message::Box(b) => 2 * b.dim(),
            Message::Centroids(m) => m.k() * m.dim() + m.k(),
            Message::Error(_) => 0,
            Message::EntropyReport(e) => 2 + e.scales.len() + e.entropies.len(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut p = Vec::new();
        match self {
            Message::Hello(h) => {
                for v in [
                    h.version,
                    h.mode.code(),
                    h.num_frequencies,
                    h.k,
                    h.bins,
                    h.frequency_seed,
                    h.calibration_repeats,
                    u64::from(h.send_all),
                ] {
                    put_u64(&mut p, v);
                }
                put_array(&mut p, &h.scales)?;
            }
            Message::ProbeResponses(a) => {
                put_count(&mut p, a.nrows())?;
                put_count(&mut p, a.ncols())?;
                for v in a.iter() {
                    put_f64(&mut p, *v);
                }
            }
            Message::DeltaN(v) | Message::ScaleGrid(v) => put_array(&mut p, v)?,
            Message::Sketch(s) => {
                put_f64(&mut p, s.scale());
                put_u64(&mut p, s.sample_count());
                put_u64(&mut p, s.provenance().tag());
                put_u64(&mut p, s.frequency_seed());
                put_count(&mut p, s.len())?;
                for z in s.values() {
                    put_f64(&mut p, z.re);
                    put_f64(&mut p, z.im);
                }
            }
            Message::Box(b) => {
                put_array(&mut p, b.lo())?;
                put_array(&mut p, b.hi())?;
            }
            Message::Centroids(m) => {
                put_count(&mut p, m.k())?;
                put_count(&mut p, m.dim())?;
                for v in m.centroids().iter() {
                    put_f64(&mut p, *v);
                }
                put_array(&mut p, m.weights())?;
            }
            Message::Error(text) => {
                put_count(&mut p, text.len())?;
                p.extend_from_slice(text.as_bytes());
            }
            Message::EntropyReport(e) => {
                put_u64(&mut p, e.selected);
                put_u64(&mut p, e.bins);
                put_array(&mut p, &e.scales)?;
                put_array(&mut p, &e.entropies)?;
            }
        }
        if p.len() > MAX_PAYLOAD {
            return Err(Error::Protocol(format!("payload of {} bytes exceeds limit", p.len())));
        }
        let mut frame = Vec::with_capacity(5 + p.len());
        frame.push(self.tag() as u8);
        frame.extend_from_slice(&(p.len() as u32).to_le_bytes());
        frame.extend_from_slice(&p);
        Ok(frame)
    }

    /// Decodes one complete frame. Trailing bytes are an error.
    pub fn decode(frame: &[u8]) -> Result<Self> {
        if frame.len() < 5 {
            return Err(Error::Protocol("truncated frame header".into()));
        }
        let tag = Tag::from_byte(frame[0])?;
        let len = u32::from_le_bytes(frame[1..5].try_into().expect("4 bytes")) as usize;
        if frame.len() - 5 != len {
            return Err(Error::Protocol(format!("length prefix {len} but {} payload bytes", frame.len() - 5)));
        }
        Self::decode_payload(tag, &frame[5..])
    }

    fn decode_payload(tag: Tag, payload: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: payload, pos: 0 };
        let msg = match tag {
            Tag::Hello => {
                let version = c.u64()?;
                if version != PROTOCOL_VERSION {
                    return Err(Error::Protocol(format!("unsupported protocol version {version}")));
                }
                Message::Hello(Hello {
                    version,
                    mode: SketchMode::from_code(c.u64()?)?,
                    num_frequencies: c.u64()?,
                    k: c.u64()?,
                    bins: c.u64()?,
                    frequency_seed: c.u64()?,
                    calibration_repeats: c.u64()?,
                    send_all: match c.u64()? {
                        0 => false,
                        1 => true,
                        v => return Err(Error::Protocol(format!("bad flag {v}"))),
                    },
                    scales: c.array()?,
                })
            }
            Tag::ProbeResponses => {
                let rows = c.count()?;
                let cols = c.count()?;
                let n = rows
                    .checked_mul(cols)
                    .ok_or_else(|| Error::Protocol("probe matrix dimensions overflow".into()))?;
                let data = c.f64s(n)?;
                Message::ProbeResponses(Array2::from_shape_vec((rows, cols), data).expect("checked length"))
            }
            Tag::DeltaN => Message::DeltaN(c.array()?),
            Tag::ScaleGrid => Message::ScaleGrid(c.array()?),
            Tag::Sketch => {
                let scale = c.f64()?;
                let count = c.u64()?;
                let provenance = Provenance::from_tag(c.u64()?).map_err(|e| Error::Protocol(e.to_string()))?;
                let seed = c.u64()?;
                let m = c.count()?;
                let raw = c.f64s(m.checked_mul(2).ok_or_else(|| Error::Protocol("sketch too long".into()))?)?;
                let values = raw.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect();
                Message::Sketch(
                    Sketch::new(values, scale, count, provenance, seed).map_err(|e| Error::Protocol(e.to_string()))?,
                )
            }
            Tag::Box => {
                let lo = c.array()?;
                let hi = c.array()?;
                Message::Box(BoundingBox::new(lo, hi).map_err(|e| Error::Protocol(e.to_string()))?)
            }
            Tag::Centroids => {
                let k = c.count()?;
                let d = c.count()?;
                let n = k.checked_mul(d).ok_or_else(|| Error::Protocol("centroid dimensions overflow".into()))?;
                let flat = c.f64s(n)?;
                let weights = c.array()?;
                let centroids = Array2::from_shape_vec((k, d), flat).expect("checked length");
                Message::Centroids(MixtureModel::new(centroids, weights).map_err(|e| Error::Protocol(e.to_string()))?)
            }
            Tag::Error => {
                let n = c.count()?;
                let bytes = c.bytes(n)?;
                Message::Error(
                    String::from_utf8(bytes.to_vec()).map_err(|_| Error::Protocol("error text is not UTF-8".into()))?,
                )
            }
            Tag::EntropyReport => Message::EntropyReport(EntropySummary {
                selected: c.u64()?,
                bins: c.u64()?,
                scales: c.array()?,
                entropies: c.array()?,
            }),
        };
        if c.pos != payload.len() {
            return Err(Error::Protocol(format!("{} trailing payload bytes", payload.len() - c.pos)));
        }
        Ok(msg)
    }
}

fn put_u64(p: &mut Vec<u8>, v: u64) {
    p.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(p: &mut Vec<u8>, v: f64) {
    p.extend_from_slice(&v.to_le_bytes());
}

fn put_count(p: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Protocol(format!("count {n} does not fit in 32 bits")))?;
    p.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_array(p: &mut Vec<u8>, v: &[f64]) -> Result<()> {
    put_count(p, v.len())?;
    for x in v {
        put_f64(p, *x);
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Protocol(format!(
                "payload ends early: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn count(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| Error::Protocol("array too long".into()))?;
        let raw = self.bytes(bytes)?;
        Ok(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect())
    }

    fn array(&mut self) -> Result<Vec<f64>> {
        let n = self.count()?;
        self.f64s(n)
    }
}

/// Writes one frame and flushes.
pub fn send<W: Write + ?Sized>(w: &mut W, msg: &Message) -> Result<()> {
    w.write_all(&msg.encode()?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. A clean end of stream before the header is reported as
/// a protocol error naming the peer hang-up.
pub fn recv<R: Read + ?Sized>(r: &mut R) -> Result<Message> {
    let mut header = [0u8; 5];
    r.read_exact(&mut header).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Protocol("peer closed the connection".into()),
        _ => Error::Io(e),
    })?;
    let tag = Tag::from_byte(header[0])?;
    let len = u32::from_le_bytes(header[1..5].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("payload length {len} exceeds limit")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Protocol(format!("stream ended inside a {len}-byte payload")),
        _ => Error::Io(e),
    })?;
    Message::decode_payload(tag, &payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn round_trip(m: &Message) {
        let bytes = m.encode().unwrap();
        assert_eq!(&Message::decode(&bytes).unwrap(), m);
        let mut r = bytes.as_slice();
        assert_eq!(&recv(&mut r).unwrap(), m);
    }

    #[test]
    fn every_message_round_trips() {
        let hello = Hello {
            version: PROTOCOL_VERSION,
            mode: SketchMode::Opu,
            num_frequencies: 50,
            k: 3,
            bins: 32,
            frequency_seed: 9,
            calibration_repeats: 2,
            send_all: true,
            scales: vec![0.01, 0.1, 1.0],
        };
        let sk = Sketch::new(vec![C64::new(0.5, -0.25), C64::new(-1.0, 0.0)], 0.1, 10, Provenance::Device, 4).unwrap();
        let msgs = vec![
            Message::Hello(hello),
            Message::ProbeResponses(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]),
            Message::ProbeResponses(Array2::zeros((0, 0))),
            Message::DeltaN(vec![0.3, 0.7]),
            Message::ScaleGrid(vec![]),
            Message::Sketch(sk),
            Message::Box(BoundingBox::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap()),
            Message::Centroids(MixtureModel::new(array![[1.0, 2.0], [3.0, 4.0]], vec![0.25, 0.75]).unwrap()),
            Message::Error("calibration failed: row 3".into()),
            Message::EntropyReport(EntropySummary {
                selected: 1,
                bins: 32,
                scales: vec![0.1, 1.0],
                entropies: vec![1.5, 2.5],
            }),
        ];
        for m in &msgs {
            round_trip(m);
        }
    }

    #[test]
    fn framing_layout() {
        let bytes = Message::DeltaN(vec![1.0]).encode().unwrap();
        assert_eq!(bytes[0], Tag::DeltaN as u8);
        assert_eq!(u32::from_le_bytes(bytes[1..5].try_into().unwrap()), 12);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(bytes[9..17].try_into().unwrap()), 1.0);
    }

    #[test]
    fn malformed_frames_are_rejected() {
        let good = Message::DeltaN(vec![1.0, 2.0]).encode().unwrap();
        let mut bad_tag = good.clone();
        bad_tag[0] = 200;
        assert!(matches!(Message::decode(&bad_tag), Err(Error::Protocol(_))));

        let mut long_prefix = good.clone();
        long_prefix[1] = 0xff;
        assert!(matches!(Message::decode(&long_prefix), Err(Error::Protocol(_))));
        let mut r = long_prefix.as_slice();
        assert!(matches!(recv(&mut r), Err(Error::Protocol(_))));

        let mut big_count = good.clone();
        big_count[5..9].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(Message::decode(&big_count), Err(Error::Protocol(_))));

        let mut huge = vec![Tag::Sketch as u8];
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        let mut r = huge.as_slice();
        assert!(matches!(recv(&mut r), Err(Error::Protocol(_))));

        assert!(matches!(Message::decode(&good[..3]), Err(Error::Protocol(_))));
        let mut r: &[u8] = &[];
        assert!(matches!(recv(&mut r), Err(Error::Protocol(_))));
    }

    #[test]
    fn payload_real_counts() {
        let m = Message::ProbeResponses(Array2::zeros((4, 9)));
        assert_eq!(m.payload_reals(), 36);
        let b = Message::Box(BoundingBox::unit(3));
        assert_eq!(b.payload_reals(), 6);
    }
}
