//! Versioned binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "READLAB\0" | version u32 | kind u8 | flags u8
//! dims 14 x u64 | text vocab u64 | image vocab u64
//! kind 1 only: step u64 | epoch u64 | config hash [32] | rng seed [32]
//!              | rng stream u64 | rng word pos u128
//!              | adam beta1 f64 | beta2 f64 | eps f64 | weight decay f64 | adam step u64
//! blob count u32, then per blob:
//!   name length u32 | name utf-8 | rank u32 | shape rank x u64 | values f64
//! ```
//!
//! Kind 0 holds a frozen decoder, kind 1 a full training checkpoint. Flag
//! bit 0 marks a frozen decoder, bit 1 a shared temperature. Optimizer
//! moments are stored as blobs named `adam.m/<param>` and `adam.v/<param>`.

use std::path::Path;

use read_core::models::{ModelBundle, ModelDims};
use read_core::tensor::{ParamStore, Tensor};
use read_core::train::{AdamW, Checkpoint, RngState};

use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 8] = b"READLAB\0";
pub const VERSION: u32 = 1;
const KIND_DECODER: u8 = 0;
const KIND_TRAINING: u8 = 1;
const FLAG_FROZEN: u8 = 1;
const FLAG_SHARED_TAU: u8 = 2;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
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
    fn bytes(&mut self, v: &[u8]) {
        self.0.extend_from_slice(v);
    }
    fn blob(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.u32(name.len() as u32);
        self.bytes(name.as_bytes());
        self.u32(shape.len() as u32);
        for d in shape {
            self.u64(*d as u64);
        }
        for v in data {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "size overflow".to_string())
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn blob(&mut self) -> std::result::Result<(String, Tensor), String> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "blob name is not utf-8")?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.usize()).collect::<std::result::Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or("blob too large")?;
        if len.checked_mul(8).map_or(true, |b| b > self.buf.len() - self.pos) {
            return Err(format!("blob {name} truncated"));
        }
        let data = (0..len).map(|_| self.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        Ok((name, t))
    }
}

/// Header fields shared by both kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub version: u32,
    pub kind: u8,
    pub frozen: bool,
    pub shared_tau: bool,
    pub dims: ModelDims,
}

fn header(w: &mut Writer, kind: u8, flags: u8, dims: &ModelDims) {
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(kind);
    w.u8(flags);
    for d in dims.to_array() {
        w.u64(d as u64);
    }
    w.u64(dims.text_vocab as u64);
    w.u64(dims.image_vocab as u64);
}

fn read_header(r: &mut Reader) -> std::result::Result<Header, String> {
    if r.take(8)? != MAGIC {
        return Err("not a readlab checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("checkpoint version {version}, expected {VERSION}"));
    }
    let kind = r.u8()?;
    let flags = r.u8()?;
    let mut a = [0usize; 14];
    for v in a.iter_mut() {
        *v = r.usize()?;
    }
    let dims = ModelDims::from_array(a);
    let (tv, iv) = (r.usize()?, r.usize()?);
    if tv != dims.text_vocab || iv != dims.image_vocab {
        return Err("vocabulary sizes disagree with dims".into());
    }
    Ok(Header {
        version,
        kind,
        frozen: flags & FLAG_FROZEN != 0,
        shared_tau: flags & FLAG_SHARED_TAU != 0,
        dims,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| LabError::io(path, e))
}

pub fn encode_decoder(store: &ParamStore, dims: &ModelDims) -> Vec<u8> {
    let mut w = Writer::default();
    header(&mut w, KIND_DECODER, FLAG_FROZEN, dims);
    w.u32(store.len() as u32);
    for (_, p) in store.iter() {
        w.blob(&p.name, p.value.shape(), p.value.data());
    }
    w.0
}

pub fn save_decoder(path: &Path, store: &ParamStore, dims: &ModelDims) -> Result<()> {
    write_file(path, &encode_decoder(store, dims))
}

/// Reads a decoder checkpoint; every parameter comes back frozen.
pub fn load_decoder(path: &Path) -> Result<(ParamStore, ModelDims)> {
    let bytes = read_file(path)?;
    let fail = |d: String| LabError::format(path, d);
    let mut r = Reader { buf: &bytes, pos: 0 };
    let h = read_header(&mut r).map_err(fail)?;
    if h.kind != KIND_DECODER {
        return Err(fail("expected a decoder checkpoint".into()));
    }
    let n = r.u32().map_err(fail)?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let (name, t) = r.blob().map_err(fail)?;
        let id = store.insert(name, t);
        store.set_requires_grad(id, false);
    }
    if r.pos != bytes.len() {
        return Err(fail("trailing bytes".into()));
    }
    Ok((store, h.dims))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let b = &ck.bundle;
    let mut flags = 0;
    if b.decoder_frozen() {
        flags |= FLAG_FROZEN;
    }
    if b.align_log_scale.is_none() {
        flags |= FLAG_SHARED_TAU;
    }
    let mut w = Writer::default();
    header(&mut w, KIND_TRAINING, flags, &b.dims);
    w.u64(ck.step);
    w.u64(ck.epoch as u64);
    w.bytes(&ck.config_hash);
    w.bytes(&ck.rng.seed);
    w.u64(ck.rng.stream);
    w.bytes(&ck.rng.word_pos.to_le_bytes());
    let o = &ck.optimizer;
    w.f64(o.beta1);
    w.f64(o.beta2);
    w.f64(o.eps);
    w.f64(o.weight_decay);
    w.u64(o.step);
    let params: Vec<_> = b.store.iter().collect();
    let moments: Vec<(String, &[f64])> = params
        .iter()
        .enumerate()
        .flat_map(|(i, (_, p))| {
            let m = o.first.get(i).map_or(&[][..], |v| v.as_slice());
            let v = o.second.get(i).map_or(&[][..], |v| v.as_slice());
            [(format!("adam.m/{}", p.name), m), (format!("adam.v/{}", p.name), v)]
        })
        .collect();
    w.u32((params.len() + moments.len()) as u32);
    for (_, p) in &params {
        w.blob(&p.name, p.value.shape(), p.value.data());
    }
    for (name, data) in &moments {
        w.blob(name, &[data.len()], data);
    }
    w.0
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(ck))
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let h = read_header(&mut r)?;
    if h.kind != KIND_TRAINING {
        return Err("expected a training checkpoint".into());
    }
    let step = r.u64()?;
    let epoch = r.usize()?;
    let config_hash = r.array::<32>()?;
    let seed = r.array::<32>()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array::<16>()?);
    let mut optimizer = AdamW::new(0.0);
    optimizer.beta1 = r.f64()?;
    optimizer.beta2 = r.f64()?;
    optimizer.eps = r.f64()?;
    optimizer.weight_decay = r.f64()?;
    optimizer.step = r.u64()?;

    let mut bundle = ModelBundle::new(h.dims, 0, h.shared_tau);
    let ids: Vec<_> = bundle.store.ids().collect();
    let n = r.u32()? as usize;
    if n != 3 * ids.len() {
        return Err(format!("expected {} blobs, found {n}", 3 * ids.len()));
    }
    for id in &ids {
        let (name, t) = r.blob()?;
        if name != bundle.store.get(*id).name {
            return Err(format!("unexpected parameter {name}"));
        }
        bundle.store.set_value(*id, t).map_err(|e| e.to_string())?;
    }
    let mut first = Vec::with_capacity(ids.len());
    let mut second = Vec::with_capacity(ids.len());
    for id in &ids {
        let pname = bundle.store.get(*id).name.clone();
        for (prefix, dst) in [("adam.m/", &mut first), ("adam.v/", &mut second)] {
            let (name, t) = r.blob()?;
            if name != format!("{prefix}{pname}") {
                return Err(format!("unexpected optimizer blob {name}"));
            }
            dst.push(t.into_data());
        }
    }
    if first.iter().chain(&second).all(|v| v.is_empty()) {
        first.clear();
        second.clear();
    }
    optimizer.first = first;
    optimizer.second = second;
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    if h.frozen {
        bundle.freeze_decoder();
    }
    Ok(Checkpoint {
        bundle,
        optimizer,
        step,
        epoch,
        config_hash,
        rng: RngState { seed, stream, word_pos },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_file(path)?;
    decode_checkpoint(&bytes).map_err(|d| LabError::format(path, d))
}

/// Header of either kind, for version and dimension checks.
pub fn peek_header(path: &Path) -> Result<Header> {
    let bytes = read_file(path)?;
    read_header(&mut Reader { buf: &bytes, pos: 0 }).map_err(|d| LabError::format(path, d))
}
