//! Wire framing.
//!
//! ```text
//! "SCM1" | u32 LE header_len | header | u64 LE body_len | body
//! ```
//!
//! Every connection opens with a hello frame naming the sender and the link
//! it belongs to; all later frames are message parts.

use std::io::{self, Read, Write};
use std::time::Instant;

use crate::codec::Reader;

pub const FRAME_MAGIC: [u8; 4] = *b"SCM1";
/// Fixed bytes around header and body.
pub const FRAME_OVERHEAD: u64 = 4 + 4 + 8;
const MAX_HEADER: u32 = 64 * 1024;
const MAX_BODY: u64 = 1 << 36;

const TAG_HELLO: u8 = 0;
const TAG_PART: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    pub sender: u32,
    pub group: u64,
    pub conn_index: u32,
    pub conn_count: u32,
}

/// One contiguous chunk of a message. Part 0 carries the envelope header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartHeader {
    pub seq: u64,
    pub index: u32,
    pub count: u32,
    pub offset: u64,
    pub total: u64,
    pub envelope: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameHeader {
    Hello(Hello),
    Part(PartHeader),
}

impl FrameHeader {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        match self {
            FrameHeader::Hello(h) => {
                out.push(TAG_HELLO);
                out.extend_from_slice(&h.sender.to_le_bytes());
                out.extend_from_slice(&h.group.to_le_bytes());
                out.extend_from_slice(&h.conn_index.to_le_bytes());
                out.extend_from_slice(&h.conn_count.to_le_bytes());
            }
            FrameHeader::Part(p) => {
                out.push(TAG_PART);
                out.extend_from_slice(&p.seq.to_le_bytes());
                out.extend_from_slice(&p.index.to_le_bytes());
                out.extend_from_slice(&p.count.to_le_bytes());
                out.extend_from_slice(&p.offset.to_le_bytes());
                out.extend_from_slice(&p.total.to_le_bytes());
                out.extend_from_slice(&(p.envelope.len() as u32).to_le_bytes());
                out.extend_from_slice(&p.envelope);
            }
        }
        out
    }

    pub fn decode(b: &[u8]) -> io::Result<Self> {
        let bad = |what: &str| io::Error::new(io::ErrorKind::InvalidData, format!("bad frame header: {what}"));
        let mut r = Reader::new(b);
        let short = |_| bad("truncated");
        let h = match r.u8().map_err(short)? {
            TAG_HELLO => FrameHeader::Hello(Hello {
                sender: r.u32().map_err(short)?,
                group: r.u64().map_err(short)?,
                conn_index: r.u32().map_err(short)?,
                conn_count: r.u32().map_err(short)?,
            }),
            TAG_PART => {
                let seq = r.u64().map_err(short)?;
                let index = r.u32().map_err(short)?;
                let count = r.u32().map_err(short)?;
                let offset = r.u64().map_err(short)?;
                let total = r.u64().map_err(short)?;
                let env_len = r.u32().map_err(short)? as usize;
                let envelope = r.take(env_len).map_err(short)?.to_vec();
                if count == 0 || index >= count || offset > total {
                    return Err(bad("inconsistent part numbering"));
                }
                FrameHeader::Part(PartHeader {
                    seq,
                    index,
                    count,
                    offset,
                    total,
                    envelope,
                })
            }
            _ => return Err(bad("unknown tag")),
        };
        if r.remaining() != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(h)
    }
}

/// Writes one frame and returns its size on the wire.
pub fn write_frame<W: Write>(w: &mut W, header: &[u8], body: &[u8]) -> io::Result<u64> {
    let mut prefix = Vec::with_capacity(8 + header.len() + 8);
    prefix.extend_from_slice(&FRAME_MAGIC);
    prefix.extend_from_slice(&(header.len() as u32).to_le_bytes());
    prefix.extend_from_slice(header);
    prefix.extend_from_slice(&(body.len() as u64).to_le_bytes());
    w.write_all(&prefix)?;
    w.write_all(body)?;
    Ok(prefix.len() as u64 + body.len() as u64)
}

/// A frame as read off a socket.
#[derive(Debug)]
pub struct RawFrame {
    /// When the first bytes of the frame were available.
    pub arrived: Instant,
    pub header: Vec<u8>,
    pub body: Vec<u8>,
}

impl RawFrame {
    pub fn wire_len(&self) -> u64 {
        FRAME_OVERHEAD + self.header.len() as u64 + self.body.len() as u64
    }
}

/// Reads one frame; `Ok(None)` on a clean end of stream between frames.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<RawFrame>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut magic[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let arrived = Instant::now();
    if magic != FRAME_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad frame magic"));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let hlen = u32::from_le_bytes(len4);
    if hlen > MAX_HEADER {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame header too large"));
    }
    let mut header = vec![0u8; hlen as usize];
    r.read_exact(&mut header)?;
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let blen = u64::from_le_bytes(len8);
    if blen > MAX_BODY {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame body too large"));
    }
    let mut body = vec![0u8; blen as usize];
    r.read_exact(&mut body)?;
    Ok(Some(RawFrame { arrived, header, body }))
}
