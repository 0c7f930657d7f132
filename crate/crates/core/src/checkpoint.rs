//! Binary model checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "PGRUCKPT"
//! version      u32      1
//! kind         u8       0 = classic, 1 = implicit
//! dt           f64
//! num_layers   u32
//! input_dim    u32
//! hidden_dim   u32
//! num_classes  u32
//! per layer    12 f64 tensors, row-major, in the order
//!              W_ir W_iz W_in W_hr W_hz W_hn b_ir b_hr b_iz b_hz b_in b_hn
//!              (layer 0 reads input_dim features, the rest hidden_dim)
//! head         W (num_classes x hidden_dim), then b (num_classes)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gru::{CellKind, GruStack};
use crate::training::{ClassifierHead, Model};

pub const MAGIC: &[u8; 8] = b"PGRUCKPT";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match model.kind {
        CellKind::Classic => 0,
        CellKind::Implicit => 1,
    });
    out.extend_from_slice(&model.dt.to_le_bytes());
    for d in [
        model.stack.num_layers(),
        model.stack.input_dim(),
        model.stack.hidden_dim(),
        model.head.num_classes(),
    ] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let tensors = model
        .stack
        .layers()
        .iter()
        .flat_map(|p| p.tensors())
        .chain(model.head.tensors());
    for t in tensors {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = match r.take(1)?[0] {
        0 => CellKind::Classic,
        1 => CellKind::Implicit,
        k => return Err(Error::Checkpoint(format!("unknown cell kind {k}"))),
    };
    let dt = r.f64()?;
    let layers = r.u32()? as usize;
    let input = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let classes = r.u32()? as usize;
    if layers == 0 || input == 0 || hidden == 0 || classes == 0 {
        return Err(Error::Checkpoint("zero dimension in header".into()));
    }
    // refuse headers whose tensors cannot fit in the remaining bytes before allocating
    let per_layer = |i: usize| 3usize.saturating_mul(hidden).saturating_mul(i.saturating_add(hidden).saturating_add(2));
    let needed = per_layer(input)
        .saturating_add((layers - 1).saturating_mul(per_layer(hidden)))
        .saturating_add(classes.saturating_mul(hidden.saturating_add(1)));
    if needed > bytes.len() / 8 {
        return Err(Error::Checkpoint(format!("header dimensions exceed file size ({} bytes)", bytes.len())));
    }
    let mut stack = GruStack::zeros(layers, input, hidden);
    let mut head = ClassifierHead::zeros(hidden, classes);
    let tensors = stack
        .layers_mut()
        .iter_mut()
        .flat_map(|p| p.tensors_mut())
        .chain(head.tensors_mut());
    for t in tensors {
        for v in t.iter_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Model { stack, head, kind, dt })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&fs::read(path)?)
}
