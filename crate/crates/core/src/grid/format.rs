//! Binary occupancy dump.
//!
//! ```text
//! 0   magic "OGRD"
//! 4   version u16 (1)
//! 6   h, w, d u16
//! 12  resolution f32
//! 16  origin x, y, z f32
//! 28  flags u16 (bit 0: flow follows, bit 1: instance ids follow)
//! 30  reserved u16
//! 32  h*w*d label bytes
//!     [3*h*w*d f32 flow]
//!     [h*w*d u16 instance ids]
//! ```
//! All little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{FlowGrid, GridConfig, InstanceGrid, SemanticGrid};

pub const DUMP_MAGIC: &[u8; 4] = b"OGRD";
const VERSION: u16 = 1;
const FLAG_FLOW: u16 = 1;
const FLAG_INSTANCES: u16 = 2;

/// Contents of one dump file.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDump {
    pub semantic: SemanticGrid,
    pub flow: Option<FlowGrid>,
    pub instances: Option<InstanceGrid>,
}

pub fn write_dump<W: Write>(
    mut out: W,
    semantic: &SemanticGrid,
    flow: Option<&FlowGrid>,
    instances: Option<&InstanceGrid>,
) -> Result<()> {
    let cfg = semantic.config();
    if let Some(f) = flow {
        cfg.check_same(f.config(), "dump flow")?;
    }
    if let Some(i) = instances {
        cfg.check_same(i.config(), "dump instances")?;
    }
    let (h, w, d) = cfg.dims();
    let mut header = Vec::with_capacity(32);
    header.extend_from_slice(DUMP_MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    for n in [h, w, d] {
        header.extend_from_slice(&(n as u16).to_le_bytes());
    }
    header.extend_from_slice(&(cfg.resolution() as f32).to_le_bytes());
    for o in cfg.origin() {
        header.extend_from_slice(&(o as f32).to_le_bytes());
    }
    let mut flags = 0u16;
    if flow.is_some() {
        flags |= FLAG_FLOW;
    }
    if instances.is_some() {
        flags |= FLAG_INSTANCES;
    }
    header.extend_from_slice(&flags.to_le_bytes());
    header.extend_from_slice(&0u16.to_le_bytes());
    debug_assert_eq!(header.len(), 32);
    out.write_all(&header)?;
    out.write_all(semantic.labels())?;
    if let Some(f) = flow {
        let mut buf = Vec::with_capacity(4 * f.vectors().len());
        for v in f.vectors() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    if let Some(i) = instances {
        let mut buf = Vec::with_capacity(2 * i.ids().len());
        for v in i.ids() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn read_dump<R: Read>(mut input: R) -> Result<GridDump> {
    let mut header = [0u8; 32];
    input
        .read_exact(&mut header)
        .map_err(|e| Error::Format(format!("short header: {e}")))?;
    if &header[0..4] != DUMP_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u16_at(&header, 4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let (h, w, d) = (
        u16_at(&header, 6) as f64,
        u16_at(&header, 8) as f64,
        u16_at(&header, 10) as f64,
    );
    let res = f32_at(&header, 12) as f64;
    let origin = [
        f32_at(&header, 16) as f64,
        f32_at(&header, 20) as f64,
        f32_at(&header, 24) as f64,
    ];
    let flags = u16_at(&header, 28);
    let cfg = GridConfig::new(
        (origin[0], origin[0] + h * res),
        (origin[1], origin[1] + w * res),
        (origin[2], origin[2] + d * res),
        res,
    )?;
    let n = cfg.len();
    let mut labels = vec![0u8; n];
    input
        .read_exact(&mut labels)
        .map_err(|e| Error::Format(format!("truncated labels: {e}")))?;
    let semantic = SemanticGrid::new(cfg, labels)?;
    let flow = if flags & FLAG_FLOW != 0 {
        let mut buf = vec![0u8; 12 * n];
        input
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated flow: {e}")))?;
        let v = buf.chunks_exact(4).map(|c| f32_at(c, 0)).collect();
        Some(FlowGrid::new(cfg, v)?)
    } else {
        None
    };
    let instances = if flags & FLAG_INSTANCES != 0 {
        let mut buf = vec![0u8; 2 * n];
        input
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated instances: {e}")))?;
        let v = buf.chunks_exact(2).map(|c| u16_at(c, 0)).collect();
        Some(InstanceGrid::new(cfg, v)?)
    } else {
        None
    };
    Ok(GridDump {
        semantic,
        flow,
        instances,
    })
}

pub fn write_dump_file(
    path: impl AsRef<Path>,
    semantic: &SemanticGrid,
    flow: Option<&FlowGrid>,
    instances: Option<&InstanceGrid>,
) -> Result<()> {
    let mut buf = Vec::new();
    write_dump(&mut buf, semantic, flow, instances)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_dump_file(path: impl AsRef<Path>) -> Result<GridDump> {
    let bytes = std::fs::read(path)?;
    read_dump(bytes.as_slice())
}
