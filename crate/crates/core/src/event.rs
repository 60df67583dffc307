//! Event streams, temporal slicing, voxel-grid encoding, and the blind-time
//! sampling protocol (motion scale / time slice).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One brightness-change event. Timestamps are integer microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub u: u16,
    pub v: u16,
    pub t: i64,
    pub p: i8,
}

/// Time-ordered events from one sensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates bounds, polarity and timestamp order.
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if e.u >= width || e.v >= height {
                return Err(Error::invalid(format!(
                    "event {i} at ({}, {}) outside {width}x{height} sensor",
                    e.u, e.v
                )));
            }
            if e.p != 1 && e.p != -1 {
                return Err(Error::invalid(format!("event {i} has polarity {}", e.p)));
            }
            if i > 0 && e.t < events[i - 1].t {
                return Err(Error::invalid(format!("event {i} timestamp decreases")));
            }
        }
        Ok(EventStream {
            width,
            height,
            events,
        })
    }

    pub fn empty(width: u16, height: u16) -> Self {
        EventStream {
            width,
            height,
            events: Vec::new(),
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Apply `t -> scale * t + offset` to every timestamp (`scale > 0`).
    pub fn affine_time(&self, scale: i64, offset: i64) -> Result<Self> {
        if scale <= 0 {
            return Err(Error::invalid("time scale must be positive"));
        }
        let events = self
            .events
            .iter()
            .map(|e| Event {
                t: e.t * scale + offset,
                ..*e
            })
            .collect();
        Ok(EventStream { events, ..*self })
    }

    pub fn with_negated_polarity(&self) -> Self {
        let events = self.events.iter().map(|e| Event { p: -e.p, ..*e }).collect();
        EventStream { events, ..*self }
    }
}

/// Events with `tau - dtau <= t < tau`, order preserved.
pub fn slice_stream(stream: &EventStream, tau: i64, dtau: i64) -> Result<EventStream> {
    if dtau <= 0 {
        return Err(Error::invalid(format!("slice duration must be positive, got {dtau}")));
    }
    Ok(slice_range(stream, tau - dtau, tau))
}

fn slice_range(stream: &EventStream, start: i64, end: i64) -> EventStream {
    let ev = &stream.events;
    let lo = ev.partition_point(|e| e.t < start);
    let hi = ev.partition_point(|e| e.t < end).max(lo);
    EventStream {
        events: ev[lo..hi].to_vec(),
        ..*stream
    }
}

/// B-bin spatio-temporal event histogram with bilinear splatting.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub bins: usize,
    /// Shape (bins, height, width).
    pub data: Tensor,
}

/// Triangular kernel k(a) = max(0, 1 - |a|) support: the two integer cells
/// around `x` with their weights.
fn kernel_taps(x: f64) -> [(i64, f64); 2] {
    let x0 = x.floor();
    let f = x - x0;
    [(x0 as i64, 1.0 - f), (x0 as i64 + 1, f)]
}

/// Encodes `stream` into a (bins, height, width) grid. Timestamps are
/// normalized to [0, bins-1] over the stream's own first/last event; a
/// degenerate span puts all temporal mass in bin 0.
pub fn build_voxel_grid(stream: &EventStream, bins: usize, width: usize, height: usize) -> Result<VoxelGrid> {
    if bins < 1 {
        return Err(Error::invalid("voxel grid needs at least one bin"));
    }
    let mut data = vec![0.0; bins * height * width];
    let ev = stream.events();
    if let (Some(first), Some(last)) = (ev.first(), ev.last()) {
        let span = last.t - first.t;
        let scale = (bins - 1) as f64;
        for e in ev {
            // Integer differences convert exactly, so any positive affine
            // time map leaves the quotient (and the grid) bit-identical.
            let b = if span > 0 {
                scale * ((e.t - first.t) as f64 / span as f64)
            } else {
                0.0
            };
            let p = e.p as f64;
            for (bi, wb) in kernel_taps(b) {
                if wb == 0.0 || bi < 0 || bi >= bins as i64 {
                    continue;
                }
                for (vi, wv) in kernel_taps(e.v as f64) {
                    if wv == 0.0 || vi < 0 || vi >= height as i64 {
                        continue;
                    }
                    for (ui, wu) in kernel_taps(e.u as f64) {
                        if wu == 0.0 || ui < 0 || ui >= width as i64 {
                            continue;
                        }
                        let idx = (bi as usize * height + vi as usize) * width + ui as usize;
                        data[idx] += p * wu * wv * wb;
                    }
                }
            }
        }
    }
    Ok(VoxelGrid {
        bins,
        data: Tensor::new(vec![bins, height, width], data)?,
    })
}

/// Query time, lookback and the evaluation protocol's scale parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlindWindow {
    pub tau: i64,
    pub dtau: i64,
    pub motion_scale: u32,
    pub time_slice: u32,
}

impl BlindWindow {
    pub fn validate(&self) -> Result<()> {
        if self.dtau <= 0 || self.motion_scale < 1 || self.time_slice < 1 {
            return Err(Error::invalid(format!("invalid blind window {self:?}")));
        }
        Ok(())
    }

    /// Start of the accumulation window, `tau - motion_scale * dtau`.
    pub fn start(&self) -> i64 {
        self.tau - self.motion_scale as i64 * self.dtau
    }
}

/// Voxel grid over the last `motion_scale * dtau` microseconds before `tau`.
pub fn accumulate_motion_scaled(stream: &EventStream, window: &BlindWindow, bins: usize) -> Result<VoxelGrid> {
    window.validate()?;
    let slice = slice_stream(stream, window.tau, window.motion_scale as i64 * window.dtau)?;
    build_voxel_grid(&slice, bins, stream.width as usize, stream.height as usize)
}

/// Evaluation instants `start + j * (end - start) / time_slice` for
/// `j = 1..=time_slice`; the last coincides with `end`. Integer division
/// rounds toward `start`.
pub fn blind_time_instants(start: i64, end: i64, time_slice: u32) -> Result<Vec<i64>> {
    if end <= start {
        return Err(Error::invalid(format!("blind interval [{start}, {end}] has non-positive span")));
    }
    if time_slice < 1 {
        return Err(Error::invalid("time slice must be at least 1"));
    }
    let span = (end - start) as i128;
    Ok((1..=time_slice as i128)
        .map(|j| start + (j * span / time_slice as i128) as i64)
        .collect())
}

const BINARY_MAGIC: &[u8; 4] = b"EVT1";

/// Binary event file: `EVT1`, then LE `W: u16, H: u16, count: u64`, then
/// records `t: u64, u: u16, v: u16, p: i8`.
pub fn encode_binary(stream: &EventStream) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + stream.len() * 13);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in stream.events() {
        if e.t < 0 {
            return Err(Error::invalid("binary event files store unsigned timestamps"));
        }
        out.extend_from_slice(&(e.t as u64).to_le_bytes());
        out.extend_from_slice(&e.u.to_le_bytes());
        out.extend_from_slice(&e.v.to_le_bytes());
        out.push(e.p as u8);
    }
    Ok(out)
}

pub fn decode_binary(bytes: &[u8]) -> Result<EventStream> {
    let bad = |m: &str| Error::Format(format!("event file: {m}"));
    if bytes.len() < 16 || &bytes[..4] != BINARY_MAGIC {
        return Err(bad("missing EVT1 header"));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[16..];
    if body.len() as u64 != count * 13 {
        return Err(bad(&format!("header announces {count} records, body has {} bytes", body.len())));
    }
    let events = body
        .chunks_exact(13)
        .map(|r| Event {
            t: u64::from_le_bytes(r[..8].try_into().expect("8 bytes")) as i64,
            u: u16::from_le_bytes([r[8], r[9]]),
            v: u16::from_le_bytes([r[10], r[11]]),
            p: r[12] as i8,
        })
        .collect();
    EventStream::new(width, height, events)
}

/// CSV with header `t_us,u,v,p`.
pub fn encode_csv(stream: &EventStream) -> String {
    let mut s = String::from("t_us,u,v,p\n");
    for e in stream.events() {
        s.push_str(&format!("{},{},{},{}\n", e.t, e.u, e.v, e.p));
    }
    s
}

/// CSV files do not carry the sensor size, so it is supplied by the caller.
pub fn decode_csv(text: &str, width: u16, height: u16) -> Result<EventStream> {
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("t_us,u,v,p") => {}
        other => return Err(Error::Format(format!("event CSV header {other:?}"))),
    }
    let mut events = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let parse_err = || Error::Format(format!("event CSV line {}: {line:?}", n + 2));
        if f.len() != 4 {
            return Err(parse_err());
        }
        events.push(Event {
            t: f[0].trim().parse().map_err(|_| parse_err())?,
            u: f[1].trim().parse().map_err(|_| parse_err())?,
            v: f[2].trim().parse().map_err(|_| parse_err())?,
            p: f[3].trim().parse().map_err(|_| parse_err())?,
        });
    }
    EventStream::new(width, height, events)
}

/// Reads a binary (`EVT1`) or CSV event file; CSV needs `sensor` dims.
pub fn read_events(path: &Path, sensor: Option<(u16, u16)>) -> Result<EventStream> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        return decode_binary(&bytes);
    }
    let (w, h) = sensor.ok_or_else(|| Error::invalid("CSV event files need the sensor size"))?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Format("event CSV is not UTF-8".into()))?;
    decode_csv(&text, w, h)
}

pub fn write_events_binary(path: &Path, stream: &EventStream) -> Result<()> {
    let bytes = encode_binary(stream)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
