//! The `CONDUF01` on-disk container.
//!
//! Little-endian throughout. File = `[magic 8B][version u32][kind u8]`
//! `[section count u32]` followed by sections, each
//! `[tag u16][byte length u64][payload][crc32 u32]`. The CRC covers the
//! payload bytes. Section tags: 0x0001 layout, 0x0002 values,
//! 0x0003 trigger, 0x0004 prototypes, 0x0005 session header.
//!
//! Save followed by load is bit-exact for every field; any length or
//! checksum inconsistency surfaces as `CorruptSection`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::fusion_core::{SessionState, UnifiedDelta};
use crate::routing::{Prototype, PrototypeSet};
use crate::tensor_store::{Dtype, FlatVector, StoreError, TensorLayout};
use crate::triggers::{PackedMask, TaskTrigger};

pub const MAGIC: [u8; 8] = *b"CONDUF01";
pub const VERSION: u32 = 1;

const TAG_LAYOUT: u16 = 0x0001;
const TAG_VALUES: u16 = 0x0002;
const TAG_TRIGGER: u16 = 0x0003;
const TAG_PROTOTYPES: u16 = 0x0004;
const TAG_SESSION_HEADER: u16 = 0x0005;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    BaseModel,
    DeltaModel,
    SessionState,
    PrototypeBundle,
}

impl ContainerKind {
    pub fn tag(self) -> u8 {
        match self {
            ContainerKind::BaseModel => 0,
            ContainerKind::DeltaModel => 1,
            ContainerKind::SessionState => 2,
            ContainerKind::PrototypeBundle => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ContainerKind::BaseModel),
            1 => Some(ContainerKind::DeltaModel),
            2 => Some(ContainerKind::SessionState),
            3 => Some(ContainerKind::PrototypeBundle),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ContainerKind::BaseModel => "base-model",
            ContainerKind::DeltaModel => "delta-model",
            ContainerKind::SessionState => "session-state",
            ContainerKind::PrototypeBundle => "prototype-bundle",
        }
    }
}

/// Typed payload of one container file.
#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    BaseModel(FlatVector),
    DeltaModel(FlatVector),
    SessionState(SessionState),
    PrototypeBundle(Vec<PrototypeSet>),
}

impl Container {
    pub fn kind(&self) -> ContainerKind {
        match self {
            Container::BaseModel(_) => ContainerKind::BaseModel,
            Container::DeltaModel(_) => ContainerKind::DeltaModel,
            Container::SessionState(_) => ContainerKind::SessionState,
            Container::PrototypeBundle(_) => ContainerKind::PrototypeBundle,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Container, StoreError> {
        Container::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, StoreError> {
        let sections: Vec<(u16, Vec<u8>)> = match self {
            Container::BaseModel(v) | Container::DeltaModel(v) => vec![
                (TAG_LAYOUT, encode_layout(v.layout())?),
                (TAG_VALUES, encode_values(v)),
            ],
            Container::SessionState(state) => {
                let mut sections = vec![
                    (TAG_SESSION_HEADER, encode_session_header(state)),
                    (TAG_LAYOUT, encode_layout(state.unified.vec.layout())?),
                    (TAG_VALUES, encode_values(&state.unified.vec)),
                ];
                for trigger in &state.triggers {
                    sections.push((TAG_TRIGGER, encode_trigger(trigger)));
                }
                for set in &state.prototypes {
                    sections.push((TAG_PROTOTYPES, encode_prototypes(set)?));
                }
                sections
            }
            Container::PrototypeBundle(sets) => sets
                .iter()
                .map(|s| Ok((TAG_PROTOTYPES, encode_prototypes(s)?)))
                .collect::<Result<Vec<_>, StoreError>>()?,
        };

        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind().tag());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (tag, payload) in &sections {
            out.extend_from_slice(&tag.to_le_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
            out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container, StoreError> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 8] = r
            .take(8)
            .map_err(|_| StoreError::CorruptSection("file shorter than magic".to_string()))?
            .try_into()
            .expect("slice of length 8");
        if magic != MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let version = r.u32().map_err(corrupt("version"))?;
        if version != VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let kind = ContainerKind::from_tag(r.u8().map_err(corrupt("kind"))?)
            .ok_or_else(|| StoreError::CorruptSection("unknown container kind".to_string()))?;
        let section_count = r.u32().map_err(corrupt("section count"))? as usize;

        // Counts come from untrusted bytes; grow as sections actually parse.
        let mut sections = Vec::new();
        for i in 0..section_count {
            let tag = r.u16().map_err(corrupt("section tag"))?;
            let len = r.u64().map_err(corrupt("section length"))? as usize;
            let payload = r.take(len).map_err(|_| {
                StoreError::CorruptSection(format!("section {i} truncated (declared {len} bytes)"))
            })?;
            let stored_crc = r.u32().map_err(corrupt("section checksum"))?;
            let actual_crc = crc32fast::hash(payload);
            if stored_crc != actual_crc {
                return Err(StoreError::CorruptSection(format!(
                    "section {i} checksum mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})"
                )));
            }
            sections.push((tag, payload));
        }
        if !r.is_empty() {
            return Err(StoreError::CorruptSection(
                "trailing bytes after final section".to_string(),
            ));
        }
        assemble(kind, &sections)
    }
}

fn corrupt(what: &'static str) -> impl Fn(()) -> StoreError {
    move |_| StoreError::CorruptSection(format!("file truncated reading {what}"))
}

// ── Section encoders ───────────────────────────────────────────────────

fn encode_layout(layout: &TensorLayout) -> Result<Vec<u8>, StoreError> {
    let mut out = Vec::new();
    for e in layout.entries() {
        if e.name.len() > u16::MAX as usize {
            return Err(StoreError::CorruptSection(format!(
                "tensor name '{}' too long for the container format",
                &e.name[..32]
            )));
        }
        if e.dims.len() > u8::MAX as usize {
            return Err(StoreError::CorruptSection(format!(
                "tensor '{}' has too many dims for the container format",
                e.name
            )));
        }
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    Ok(out)
}

fn encode_values(v: &FlatVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + v.len() * v.dtype().size_bytes() as usize);
    out.push(v.dtype().tag());
    match v.dtype() {
        Dtype::R32 => {
            for &x in v.values() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Dtype::R64 => {
            for &x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

fn encode_trigger(t: &TaskTrigger) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + t.mask.as_bytes().len());
    out.extend_from_slice(&t.task_id.to_le_bytes());
    out.extend_from_slice(&t.lambda.to_le_bytes());
    out.extend_from_slice(&(t.mask.bit_len() as u64).to_le_bytes());
    out.extend_from_slice(t.mask.as_bytes());
    out
}

fn encode_prototypes(set: &PrototypeSet) -> Result<Vec<u8>, StoreError> {
    let mut out = Vec::new();
    out.extend_from_slice(&set.task_id.to_le_bytes());
    out.extend_from_slice(&(set.prototypes.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.feature_dim() as u32).to_le_bytes());
    for p in &set.prototypes {
        if p.label.len() > u16::MAX as usize {
            return Err(StoreError::CorruptSection(
                "category label too long for the container format".to_string(),
            ));
        }
        out.extend_from_slice(&(p.label.len() as u16).to_le_bytes());
        out.extend_from_slice(p.label.as_bytes());
        for &x in &p.vector {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn encode_session_header(state: &SessionState) -> Vec<u8> {
    let mut out = Vec::with_capacity(36);
    out.extend_from_slice(&(state.unified.task_count as u32).to_le_bytes());
    out.extend_from_slice(&state.base_hash);
    out
}

// ── Section decoders ───────────────────────────────────────────────────

fn decode_layout(payload: &[u8]) -> Result<TensorLayout, StoreError> {
    let mut r = Reader::new(payload);
    let mut shapes: Vec<(String, Vec<u32>)> = Vec::new();
    while !r.is_empty() {
        let name_len = r.u16().map_err(corrupt("layout name length"))? as usize;
        let name_bytes = r
            .take(name_len)
            .map_err(|_| StoreError::CorruptSection("layout name truncated".to_string()))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| StoreError::CorruptSection("layout name is not UTF-8".to_string()))?
            .to_string();
        let ndim = r.u8().map_err(corrupt("layout ndim"))? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32().map_err(corrupt("layout dim"))?);
        }
        shapes.push((name, dims));
    }
    TensorLayout::new(&shapes)
        .map_err(|e| StoreError::CorruptSection(format!("invalid layout section: {e}")))
}

fn decode_values(payload: &[u8], layout: Arc<TensorLayout>) -> Result<FlatVector, StoreError> {
    let mut r = Reader::new(payload);
    let dtype = Dtype::from_tag(r.u8().map_err(corrupt("values dtype"))?)
        .ok_or_else(|| StoreError::CorruptSection("unknown values dtype".to_string()))?;
    let elem = dtype.size_bytes() as usize;
    let remaining = r.remaining();
    if !remaining.is_multiple_of(elem) || remaining / elem != layout.total_len() {
        return Err(StoreError::CorruptSection(format!(
            "values section holds {remaining} bytes but the layout needs {} elements of {elem} bytes",
            layout.total_len()
        )));
    }
    let mut values = Vec::with_capacity(layout.total_len());
    match dtype {
        Dtype::R32 => {
            for _ in 0..layout.total_len() {
                let b: [u8; 4] = r.take(4).expect("length checked").try_into().unwrap();
                values.push(f32::from_le_bytes(b) as f64);
            }
        }
        Dtype::R64 => {
            for _ in 0..layout.total_len() {
                let b: [u8; 8] = r.take(8).expect("length checked").try_into().unwrap();
                values.push(f64::from_le_bytes(b));
            }
        }
    }
    FlatVector::new(layout, values, dtype)
}

fn decode_trigger(payload: &[u8]) -> Result<TaskTrigger, StoreError> {
    let mut r = Reader::new(payload);
    let task_id = r.u32().map_err(corrupt("trigger task id"))?;
    let lambda = f64::from_le_bytes(
        r.take(8)
            .map_err(|_| StoreError::CorruptSection("trigger rescaler truncated".to_string()))?
            .try_into()
            .unwrap(),
    );
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(StoreError::CorruptSection(format!(
            "trigger rescaler {lambda} is not a finite non-negative value"
        )));
    }
    let bit_len = r.u64().map_err(corrupt("trigger bit length"))? as usize;
    let packed = r.take_rest();
    let mask = PackedMask::from_raw(packed.to_vec(), bit_len).ok_or_else(|| {
        StoreError::CorruptSection(format!(
            "trigger mask holds {} bytes for {bit_len} bits or has dirty padding",
            packed.len()
        ))
    })?;
    Ok(TaskTrigger::new(mask, lambda, task_id))
}

fn decode_prototypes(payload: &[u8]) -> Result<PrototypeSet, StoreError> {
    let mut r = Reader::new(payload);
    let task_id = r.u32().map_err(corrupt("prototype task id"))?;
    let count = r.u32().map_err(corrupt("prototype category count"))? as usize;
    let dim = r.u32().map_err(corrupt("prototype feature dim"))? as usize;
    if count.saturating_mul(dim).saturating_mul(4) > payload.len() {
        return Err(StoreError::CorruptSection(format!(
            "prototype section declares {count} categories of dim {dim} in {} bytes",
            payload.len()
        )));
    }
    let mut prototypes = Vec::with_capacity(count);
    for _ in 0..count {
        let label_len = r.u16().map_err(corrupt("prototype label length"))? as usize;
        let label_bytes = r
            .take(label_len)
            .map_err(|_| StoreError::CorruptSection("prototype label truncated".to_string()))?;
        let label = std::str::from_utf8(label_bytes)
            .map_err(|_| StoreError::CorruptSection("prototype label is not UTF-8".to_string()))?
            .to_string();
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            let b: [u8; 4] = r
                .take(4)
                .map_err(|_| StoreError::CorruptSection("prototype vector truncated".to_string()))?
                .try_into()
                .unwrap();
            vector.push(f32::from_le_bytes(b));
        }
        prototypes.push(Prototype { label, vector });
    }
    if !r.is_empty() {
        return Err(StoreError::CorruptSection(
            "trailing bytes in prototype section".to_string(),
        ));
    }
    PrototypeSet::new(task_id, prototypes)
        .map_err(|e| StoreError::CorruptSection(format!("invalid prototype section: {e}")))
}

fn assemble(kind: ContainerKind, sections: &[(u16, &[u8])]) -> Result<Container, StoreError> {
    match kind {
        ContainerKind::BaseModel | ContainerKind::DeltaModel => {
            let [(TAG_LAYOUT, layout_payload), (TAG_VALUES, values_payload)] = sections else {
                return Err(StoreError::CorruptSection(
                    "model container must hold exactly a layout and a values section".to_string(),
                ));
            };
            let layout = Arc::new(decode_layout(layout_payload)?);
            let vec = decode_values(values_payload, layout)?;
            Ok(match kind {
                ContainerKind::BaseModel => Container::BaseModel(vec),
                _ => Container::DeltaModel(vec),
            })
        }
        ContainerKind::SessionState => {
            let mut iter = sections.iter();
            let Some((TAG_SESSION_HEADER, header)) = iter.next() else {
                return Err(StoreError::CorruptSection(
                    "session container must start with the session header".to_string(),
                ));
            };
            if header.len() != 36 {
                return Err(StoreError::CorruptSection(format!(
                    "session header holds {} bytes, expected 36",
                    header.len()
                )));
            }
            let task_count = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
            let base_hash: [u8; 32] = header[4..].try_into().unwrap();

            let Some((TAG_LAYOUT, layout_payload)) = iter.next() else {
                return Err(StoreError::CorruptSection(
                    "session container missing layout section".to_string(),
                ));
            };
            let Some((TAG_VALUES, values_payload)) = iter.next() else {
                return Err(StoreError::CorruptSection(
                    "session container missing values section".to_string(),
                ));
            };
            let layout = Arc::new(decode_layout(layout_payload)?);
            let vec = decode_values(values_payload, layout)?;

            let mut triggers = Vec::new();
            let mut prototypes = Vec::new();
            for (tag, payload) in iter {
                match *tag {
                    TAG_TRIGGER => {
                        if !prototypes.is_empty() {
                            return Err(StoreError::CorruptSection(
                                "trigger section after prototype sections".to_string(),
                            ));
                        }
                        triggers.push(decode_trigger(payload)?);
                    }
                    TAG_PROTOTYPES => prototypes.push(decode_prototypes(payload)?),
                    other => {
                        return Err(StoreError::CorruptSection(format!(
                            "unexpected section tag {other:#06x} in session container"
                        )))
                    }
                }
            }
            let state = SessionState {
                base_hash,
                unified: UnifiedDelta { vec, task_count },
                triggers,
                prototypes,
            };
            state.validate().map_err(|e| {
                StoreError::CorruptSection(format!("inconsistent session container: {e}"))
            })?;
            Ok(Container::SessionState(state))
        }
        ContainerKind::PrototypeBundle => {
            let mut sets = Vec::with_capacity(sections.len());
            for (tag, payload) in sections {
                if *tag != TAG_PROTOTYPES {
                    return Err(StoreError::CorruptSection(format!(
                        "unexpected section tag {tag:#06x} in prototype bundle"
                    )));
                }
                sets.push(decode_prototypes(payload)?);
            }
            Ok(Container::PrototypeBundle(sets))
        }
    }
}

// ── Byte reader ────────────────────────────────────────────────────────

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ()> {
        // n may come straight from an untrusted length field.
        let end = self.pos.checked_add(n).ok_or(())?;
        if end > self.bytes.len() {
            return Err(());
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn take_rest(&mut self) -> &'a [u8] {
        let slice = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        slice
    }

    fn u8(&mut self) -> Result<u8, ()> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ()> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ()> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ()> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
