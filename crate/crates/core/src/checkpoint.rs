//! Binary trainer checkpoints.
//!
//! ```text
//! magic    8 bytes  "SPSFCKPT"
//! version  u32 LE
//! section* name (u8 length + ASCII), payload length (u64 LE), payload, CRC32 of payload (u32 LE)
//! ```
//!
//! Sections appear in the order `config`, `anchors`, `params`, `optimizer`,
//! `rng`, `schedule`. All numbers are little-endian; floats are stored as
//! their IEEE bit patterns, so a load restores the state exactly.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::anchor::{AnchorSet, FieldHeads, GeoHead, FEATURE_DIM};
use crate::densify::OpacityStats;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mlp::{Activation, AdamState, LayerShape, MlpParams};
use crate::model::Model;
use crate::raster::DensifyStats;
use crate::trainer::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"SPSFCKPT";
pub const VERSION: u32 = 1;
pub const SECTIONS: [&str; 6] = ["config", "anchors", "params", "optimizer", "rng", "schedule"];

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
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.len(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }
    fn bytes(&mut self, v: &[u8]) {
        self.len(v.len());
        self.0.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Checkpoint { section: self.section.into(), msg: msg.into() })
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.err(format!("truncated at byte {}", self.pos));
        }
        self.pos += n;
        Ok(&self.buf[self.pos - n..self.pos])
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    /// Length prefix, bounded by the bytes left (`unit` bytes per element).
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(unit.max(1) as u64) > left {
            return self.err(format!("length {n} exceeds the remaining {left} bytes"));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn write_mlp(w: &mut Writer, p: &MlpParams) {
    w.len(p.layers().len());
    for l in p.layers() {
        w.len(l.inputs);
        w.len(l.outputs);
        w.u8(l.activation.tag());
    }
    w.f64s(p.data());
}

fn read_mlp(r: &mut Reader) -> Result<MlpParams> {
    let n = r.len(17)?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let inputs = r.u64()? as usize;
        let outputs = r.u64()? as usize;
        let tag = r.u8()?;
        let Some(activation) = Activation::from_tag(tag) else {
            return r.err(format!("unknown activation tag {tag}"));
        };
        layers.push(LayerShape { inputs, outputs, activation });
    }
    let data = r.f64s()?;
    MlpParams::from_parts(layers, data).or_else(|e| r.err(e.to_string()))
}

fn write_adam(w: &mut Writer, s: &AdamState) {
    w.f64s(&s.m);
    w.f64s(&s.v);
    w.u64(s.t);
    for v in [s.lr, s.beta1, s.beta2, s.eps] {
        w.f64(v);
    }
}

fn read_adam(r: &mut Reader) -> Result<AdamState> {
    let m = r.f64s()?;
    let v = r.f64s()?;
    if m.len() != v.len() {
        return r.err("adam moment lengths differ");
    }
    Ok(AdamState { m, v, t: r.u64()?, lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? })
}

fn section_payloads(t: &Trainer) -> Result<[Vec<u8>; 6]> {
    let config = toml::to_string(&t.config).map_err(|e| Error::Checkpoint { section: "config".into(), msg: e.to_string() })?;

    let mut a = Writer::default();
    let an = &t.model.anchors;
    a.len(an.k);
    a.len(an.len());
    for p in &an.positions {
        p.iter().for_each(|v| a.f64(*v));
    }
    an.features.iter().for_each(|v| a.f64(*v));
    an.offsets.iter().for_each(|v| a.f64(*v));
    an.log_gamma.iter().for_each(|v| a.f64(*v));
    an.active.iter().for_each(|v| a.u8(*v as u8));

    let mut p = Writer::default();
    let h = &t.model.heads;
    p.len(h.k);
    for m in [&h.opacity, &h.color, &h.cov] {
        write_mlp(&mut p, m);
    }
    match &h.geo {
        GeoHead::Shared => p.u8(0),
        GeoHead::Residual(m) => {
            p.u8(1);
            write_mlp(&mut p, m);
        }
        GeoHead::Independent(m) => {
            p.u8(2);
            write_mlp(&mut p, m);
        }
    }

    let mut o = Writer::default();
    t.opt.iter().for_each(|s| write_adam(&mut o, s));

    let mut r = Writer::default();
    r.0.extend_from_slice(&t.rng.get_seed());
    r.u64(t.rng.get_stream());
    r.0.extend_from_slice(&t.rng.get_word_pos().to_le_bytes());

    let mut s = Writer::default();
    s.len(t.iteration);
    s.len(t.skipped);
    s.f64(t.anchor_voxel);
    s.len(t.cursor);
    s.len(t.order.len());
    t.order.iter().for_each(|v| s.len(*v));
    s.f64s(&t.grad_stats.grad_sum);
    s.len(t.grad_stats.count.len());
    t.grad_stats.count.iter().for_each(|v| s.u64(*v));
    s.f64s(&t.opacity_stats.sum);
    s.len(t.opacity_stats.count.len());
    t.opacity_stats.count.iter().for_each(|v| s.u64(*v));

    Ok([config.into_bytes(), a.0, p.0, o.0, r.0, s.0])
}

pub fn checkpoint_bytes(t: &Trainer) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    for (name, payload) in SECTIONS.iter().zip(section_payloads(t)?) {
        w.u8(name.len() as u8);
        w.0.extend_from_slice(name.as_bytes());
        w.bytes(&payload);
        w.u32(crc32fast::hash(&payload));
    }
    Ok(w.0)
}

pub fn save_checkpoint(t: &Trainer, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(t)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

fn read_anchors(r: &mut Reader) -> Result<AnchorSet> {
    let k = r.u64()? as usize;
    let n = r.len(8 * (3 + FEATURE_DIM + 1))?;
    if k == 0 || k > 1024 {
        return r.err(format!("implausible k = {k}"));
    }
    let mut set = AnchorSet::empty(k);
    for _ in 0..n {
        set.positions.push(Vec3::new(r.f64()?, r.f64()?, r.f64()?));
    }
    for _ in 0..n * FEATURE_DIM {
        set.features.push(r.f64()?);
    }
    for _ in 0..n * 3 * k {
        set.offsets.push(r.f64()?);
    }
    for _ in 0..n {
        set.log_gamma.push(r.f64()?);
    }
    for _ in 0..n {
        set.active.push(match r.u8()? {
            0 => false,
            1 => true,
            b => return r.err(format!("bad active flag {b}")),
        });
    }
    Ok(set)
}

fn read_heads(r: &mut Reader) -> Result<FieldHeads> {
    let k = r.u64()? as usize;
    let opacity = read_mlp(r)?;
    let color = read_mlp(r)?;
    let cov = read_mlp(r)?;
    let geo = match r.u8()? {
        0 => GeoHead::Shared,
        1 => GeoHead::Residual(read_mlp(r)?),
        2 => GeoHead::Independent(read_mlp(r)?),
        b => return r.err(format!("unknown geometry head tag {b}")),
    };
    Ok(FieldHeads { k, opacity, color, cov, geo })
}

fn read_rng(r: &mut Reader) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut head = Reader { buf: bytes, pos: 0, section: "header" };
    if head.take(8).ok() != Some(MAGIC.as_slice()) {
        return head.err("bad magic");
    }
    let version = head.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: VERSION });
    }
    let mut payloads: Vec<&[u8]> = Vec::with_capacity(SECTIONS.len());
    for name in SECTIONS {
        head.section = name;
        let n = head.u8()? as usize;
        let found = head.take(n)?;
        if found != name.as_bytes() {
            return head.err(format!("expected this section, found `{}`", String::from_utf8_lossy(found)));
        }
        let payload = head.bytes()?;
        let crc = head.u32()?;
        if crc32fast::hash(payload) != crc {
            return head.err("checksum mismatch");
        }
        payloads.push(payload);
    }
    head.section = "trailer";
    head.finish()?;

    let text = std::str::from_utf8(payloads[0]).map_err(|e| Error::Checkpoint { section: "config".into(), msg: e.to_string() })?;
    let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Checkpoint { section: "config".into(), msg: e.to_string() })?;

    let mut r = Reader { buf: payloads[1], pos: 0, section: "anchors" };
    let anchors = read_anchors(&mut r)?;
    r.finish()?;

    let mut r = Reader { buf: payloads[2], pos: 0, section: "params" };
    let heads = read_heads(&mut r)?;
    r.finish()?;
    if heads.k != anchors.k {
        return r.err("head k does not match the anchor set");
    }

    let mut r = Reader { buf: payloads[3], pos: 0, section: "optimizer" };
    let opt = [(); 7].map(|_| read_adam(&mut r));
    let opt = {
        let mut out = Vec::with_capacity(7);
        for s in opt {
            out.push(s?);
        }
        <[AdamState; 7]>::try_from(out).unwrap()
    };
    r.finish()?;

    let mut r = Reader { buf: payloads[4], pos: 0, section: "rng" };
    let rng = read_rng(&mut r)?;
    r.finish()?;

    let mut r = Reader { buf: payloads[5], pos: 0, section: "schedule" };
    let iteration = r.u64()? as usize;
    let skipped = r.u64()? as usize;
    let anchor_voxel = r.f64()?;
    let cursor = r.u64()? as usize;
    let n = r.len(8)?;
    let order = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let grad_sum = r.f64s()?;
    let n = r.len(8)?;
    let count = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let sum = r.f64s()?;
    let n = r.len(8)?;
    let ocount = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    if cursor > order.len() || order.iter().any(|&v| v >= order.len()) {
        return r.err("view order is not a permutation prefix");
    }
    if grad_sum.len() != count.len() || sum.len() != ocount.len() {
        return r.err("statistics lengths differ");
    }

    Ok(Trainer {
        config,
        model: Model { anchors, heads },
        opt,
        rng,
        iteration,
        anchor_voxel,
        order,
        cursor,
        grad_stats: DensifyStats { grad_sum, count },
        opacity_stats: OpacityStats { sum, count: ocount },
        skipped,
    })
}
