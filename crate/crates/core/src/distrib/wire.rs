//! Frame codec for the worker protocol.
//!
//! A frame is `[u32 LE payload length][u8 kind][payload]` with kinds 1=Task,
//! 2=Result, 3=Shutdown, 4=Heartbeat. Every payload opens with a `u16`
//! version and a `u64` task id. Tensors are a `u8` rank, `u32` dimensions
//! and row-major little-endian `f64` values.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use super::{BlockResult, BlockTask, Payload, Phase};
use crate::error::{Error, Result};
use crate::images::{ImageSet, Preprocessing};
use crate::kernel_grad::Sides;
use crate::kernels::{Family, KernelKind, KernelSpec};

pub const PROTOCOL_VERSION: u16 = 1;

/// Largest payload accepted from the wire.
pub const MAX_PAYLOAD: usize = 1 << 30;

pub const KIND_TASK: u8 = 1;
pub const KIND_RESULT: u8 = 2;
pub const KIND_SHUTDOWN: u8 = 3;
pub const KIND_HEARTBEAT: u8 = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Task(BlockTask),
    Result(BlockResult),
    /// A Result frame reporting that the task could not be computed.
    Failure { task_id: u64, reason: String },
    Shutdown,
    Heartbeat,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::ProtocolError(msg.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, dims: &[usize], values: impl Iterator<Item = f64>) {
        self.u8(dims.len() as u8);
        for &d in dims {
            self.u32(d as u32);
        }
        for v in values {
            self.f64(v);
        }
    }

    fn matrix(&mut self, m: &DMatrix<f64>) {
        let (r, c) = m.shape();
        self.tensor(&[r, c], (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])));
    }

    fn images(&mut self, x: &ImageSet) {
        match x.tag() {
            Preprocessing::Raw => self.u8(0),
            Preprocessing::Standard => self.u8(1),
            Preprocessing::Zca { lambda } => {
                self.u8(2);
                self.f64(lambda);
            }
        }
        let (h, w, c) = x.shape();
        self.tensor(&[x.len(), h, w, c], x.pixels().iter().copied());
    }

    fn spec(&mut self, s: &KernelSpec) {
        self.u8(match s.family {
            Family::Fc => 0,
            Family::ConvVec => 1,
            Family::ConvNet => 2,
        });
        self.u32(s.depth as u32);
        self.f64(s.weight_variance);
        self.f64(s.bias_variance);
        self.u8(match s.kind {
            KernelKind::Nngp => 0,
            KernelKind::Ntk => 1,
        });
        self.u32(s.filter_size as u32);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad("payload ends early"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("offset overflows"))
    }

    fn tensor(&mut self, rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let got = self.u8()? as usize;
        if got != rank {
            return Err(bad(format!("expected a rank-{rank} tensor, got rank {got}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let d = self.u32()? as usize;
            count = count.checked_mul(d).ok_or_else(|| bad("tensor size overflows"))?;
            dims.push(d);
        }
        if count > (self.buf.len() - self.pos) / 8 {
            return Err(bad("tensor larger than the payload"));
        }
        let values = (0..count).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok((dims, values))
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let (d, v) = self.tensor(2)?;
        Ok(DMatrix::from_row_slice(d[0], d[1], &v))
    }

    fn vector(&mut self) -> Result<Vec<f64>> {
        Ok(self.tensor(1)?.1)
    }

    fn images(&mut self) -> Result<ImageSet> {
        let tag = match self.u8()? {
            0 => Preprocessing::Raw,
            1 => Preprocessing::Standard,
            2 => Preprocessing::Zca { lambda: self.f64()? },
            t => return Err(bad(format!("unknown preprocessing tag {t}"))),
        };
        let (d, v) = self.tensor(4)?;
        ImageSet::new(d[0], d[1], d[2], d[3], v, tag).map_err(|e| bad(e.to_string()))
    }

    fn spec(&mut self) -> Result<KernelSpec> {
        let family = match self.u8()? {
            0 => Family::Fc,
            1 => Family::ConvVec,
            2 => Family::ConvNet,
            f => return Err(bad(format!("unknown family {f}"))),
        };
        let depth = self.u32()? as usize;
        let weight_variance = self.f64()?;
        let bias_variance = self.f64()?;
        let kind = match self.u8()? {
            0 => KernelKind::Nngp,
            1 => KernelKind::Ntk,
            k => return Err(bad(format!("unknown kernel kind {k}"))),
        };
        let filter_size = self.u32()? as usize;
        let spec = KernelSpec {
            family,
            depth,
            weight_variance,
            bias_variance,
            kind,
            filter_size,
        };
        spec.validate().map_err(|e| bad(e.to_string()))?;
        Ok(spec)
    }
}

/// Serializes a message as one complete frame.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u16(PROTOCOL_VERSION);
    let kind = match msg {
        Message::Task(t) => {
            w.u64(t.task_id);
            w.u8(match t.phase {
                Phase::Forward => 1,
                Phase::Backward => 2,
            });
            w.u8(match t.sides {
                Sides::Both => 0,
                Sides::X => 1,
                Sides::Y => 2,
            });
            w.u64(t.coords.0 as u64);
            w.u64(t.coords.1 as u64);
            w.spec(&t.spec);
            w.images(&t.x_block);
            w.images(&t.y_block);
            match &t.cotangent {
                None => w.u8(0),
                Some(ct) => {
                    w.u8(1);
                    w.matrix(ct);
                }
            }
            KIND_TASK
        }
        Message::Result(r) => {
            w.u64(r.task_id);
            w.u8(0);
            w.u32(r.worker_id);
            w.u64(r.elapsed_ms);
            match &r.payload {
                Payload::Kernel(k) => {
                    w.u8(1);
                    w.matrix(k);
                }
                Payload::Gradients { x, y } => {
                    w.u8(2);
                    w.tensor(&[x.len()], x.iter().copied());
                    w.tensor(&[y.len()], y.iter().copied());
                }
            }
            KIND_RESULT
        }
        Message::Failure { task_id, reason } => {
            w.u64(*task_id);
            w.u8(1);
            w.u32(reason.len() as u32);
            w.0.extend_from_slice(reason.as_bytes());
            KIND_RESULT
        }
        Message::Shutdown => {
            w.u64(0);
            KIND_SHUTDOWN
        }
        Message::Heartbeat => {
            w.u64(0);
            KIND_HEARTBEAT
        }
    };
    let payload = w.0;
    let mut frame = Vec::with_capacity(payload.len() + 5);
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.push(kind);
    frame.extend_from_slice(&payload);
    frame
}

/// Parses the payload of a frame of the given kind.
pub fn decode_payload(kind: u8, payload: &[u8]) -> Result<Message> {
    let mut r = Reader { buf: payload, pos: 0 };
    let version = r.u16()?;
    if version != PROTOCOL_VERSION {
        return Err(bad(format!("protocol version {version}, expected {PROTOCOL_VERSION}")));
    }
    let task_id = r.u64()?;
    let msg = match kind {
        KIND_TASK => {
            let phase = match r.u8()? {
                1 => Phase::Forward,
                2 => Phase::Backward,
                p => return Err(bad(format!("unknown phase {p}"))),
            };
            let sides = match r.u8()? {
                0 => Sides::Both,
                1 => Sides::X,
                2 => Sides::Y,
                s => return Err(bad(format!("unknown sides {s}"))),
            };
            let coords = (r.usize()?, r.usize()?);
            let spec = r.spec()?;
            let x_block = r.images()?;
            let y_block = r.images()?;
            let cotangent = match r.u8()? {
                0 => None,
                1 => Some(r.matrix()?),
                f => return Err(bad(format!("bad cotangent flag {f}"))),
            };
            let task = BlockTask {
                task_id,
                phase,
                spec,
                x_block,
                y_block,
                cotangent,
                sides,
                coords,
            };
            task.validate().map_err(|e| bad(e.to_string()))?;
            Message::Task(task)
        }
        KIND_RESULT => match r.u8()? {
            0 => {
                let worker_id = r.u32()?;
                let elapsed_ms = r.u64()?;
                let payload = match r.u8()? {
                    1 => Payload::Kernel(r.matrix()?),
                    2 => Payload::Gradients {
                        x: r.vector()?,
                        y: r.vector()?,
                    },
                    p => return Err(bad(format!("unknown result payload {p}"))),
                };
                Message::Result(BlockResult {
                    task_id,
                    payload,
                    worker_id,
                    elapsed_ms,
                })
            }
            1 => {
                let len = r.u32()? as usize;
                let reason = String::from_utf8_lossy(r.take(len)?).into_owned();
                Message::Failure { task_id, reason }
            }
            s => return Err(bad(format!("unknown result status {s}"))),
        },
        KIND_SHUTDOWN => Message::Shutdown,
        KIND_HEARTBEAT => Message::Heartbeat,
        k => return Err(bad(format!("unknown message kind {k}"))),
    };
    if r.pos != payload.len() {
        return Err(bad(format!("{} trailing payload bytes", payload.len() - r.pos)));
    }
    Ok(msg)
}

/// Decodes the first frame in `buf`, returning it with the bytes consumed.
pub fn decode(buf: &[u8]) -> Result<(Message, usize)> {
    if buf.len() < 5 {
        return Err(bad("frame header ends early"));
    }
    let len = u32::from_le_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(bad(format!("payload of {len} bytes exceeds the limit")));
    }
    let end = 5 + len;
    if buf.len() < end {
        return Err(bad("frame ends early"));
    }
    Ok((decode_payload(buf[4], &buf[5..end])?, end))
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; I/O errors (including timeouts) pass through as
/// [`Error::Io`].
pub fn read_message(r: &mut impl Read) -> Result<Message> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)?;
    let len = u32::from_le_bytes(head[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(bad(format!("payload of {len} bytes exceeds the limit")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    decode_payload(head[4], &payload)
}
