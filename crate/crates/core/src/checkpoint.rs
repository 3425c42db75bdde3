//! Single-file checkpoint container.
//!
//! Layout (little-endian): 8-byte magic `PQRECKPT`, `u32` version, `u32`
//! section count, then per section a `u32` name length, the UTF-8 name, a
//! `u64` payload length and the payload. Floating-point payloads are stored as
//! `f64` so that a save/load round trip is bit-identical.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::itemrep::CodeEmbeddingTable;
use crate::optim::Adam;
use crate::quantizer::{ItemCodeTable, OpqCodebook};
use crate::seqencoder::{EncoderConfig, EncoderParams};
use crate::transfer::AlignmentMatrices;

pub const MAGIC: &[u8; 8] = b"PQRECKPT";
pub const VERSION: u32 = 1;

/// Everything needed to score a catalog, plus training provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Configuration snapshot in `section.key = value` form.
    pub config: String,
    pub tau: f64,
    pub codebook: OpqCodebook,
    pub codes: ItemCodeTable,
    pub table: CodeEmbeddingTable,
    pub encoder: EncoderParams,
    pub optimizer: Option<Adam>,
    /// One `key=value ...` line per logged event.
    pub log: Vec<String>,
    /// Alignment learned for the current codes but not yet applied to `table`.
    pub alignment: Option<AlignmentMatrices>,
    /// Hash of the checkpoint this one was derived from.
    pub source: Option<String>,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        let (d, m) = (self.codebook.num_subspaces(), self.codebook.num_centroids());
        if self.codes.num_subspaces() != d || self.codes.num_centroids() != m {
            return Err(Error::Config("item codes disagree with codebook (D, M)".into()));
        }
        if self.table.num_subspaces() != d || self.table.num_centroids() != m {
            return Err(Error::Config("code embedding table disagrees with codebook (D, M)".into()));
        }
        if self.table.dim() != self.encoder.config.dim {
            return Err(Error::Dimension {
                expected: self.encoder.config.dim,
                got: self.table.dim(),
            });
        }
        if let Some(a) = &self.alignment {
            if a.num_subspaces() != d || a.num_centroids() != m {
                return Err(Error::Config("alignment disagrees with codebook (D, M)".into()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<(&str, Vec<u8>)> = Vec::new();
        let mut w = Writer::default();
        w.f64(self.tau);
        sections.push(("meta", w.0));
        sections.push(("config", self.config.as_bytes().to_vec()));
        sections.push(("codebook", encode_codebook(&self.codebook)));
        sections.push(("codes", encode_codes(&self.codes)));
        sections.push(("table", encode_array3(&self.table.weights)));
        sections.push(("encoder", encode_encoder(&self.encoder)));
        if let Some(opt) = &self.optimizer {
            sections.push(("optimizer", encode_adam(opt)));
        }
        sections.push(("log", self.log.join("\n").into_bytes()));
        if let Some(a) = &self.alignment {
            sections.push(("alignment", encode_alignment(a)));
        }
        if let Some(s) = &self.source {
            sections.push(("provenance", s.as_bytes().to_vec()));
        }

        write_container(&sections)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = read_container(bytes)?;
        let find = |name: &str| sections.iter().find(|(n, _)| n == name).map(|(_, p)| *p);
        let need = |name: &str| find(name).ok_or_else(|| Error::Format(format!("missing section '{name}'")));
        let text = |b: &[u8]| String::from_utf8(b.to_vec()).map_err(|_| Error::Format("section is not UTF-8".into()));

        let tau = Reader::new(need("meta")?).f64()?;
        let log_text = text(need("log")?)?;
        let ckpt = Checkpoint {
            config: text(need("config")?)?,
            tau,
            codebook: decode_codebook(need("codebook")?)?,
            codes: decode_codes(need("codes")?)?,
            table: CodeEmbeddingTable {
                weights: decode_array3(&mut Reader::new(need("table")?))?,
            },
            encoder: decode_encoder(need("encoder")?)?,
            optimizer: find("optimizer").map(decode_adam).transpose()?,
            log: if log_text.is_empty() {
                Vec::new()
            } else {
                log_text.lines().map(str::to_string).collect()
            },
            alignment: find("alignment").map(decode_alignment).transpose()?,
            source: find("provenance").map(text).transpose()?,
        };
        ckpt.validate().map_err(|e| Error::Format(format!("inconsistent checkpoint: {e}")))?;
        Ok(ckpt)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn provenance_hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    pub fn encoder_hash(&self) -> String {
        hash_tensors(self.encoder.tensors())
    }

    pub fn table_hash(&self) -> String {
        hash_tensors([self.table.weights.as_slice().unwrap()])
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.validate()?;
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Writes a quantizer artifact: the codebook and the codes it assigns.
pub fn save_codebook(codebook: &OpqCodebook, codes: &ItemCodeTable, path: &Path) -> Result<()> {
    if codes.num_subspaces() != codebook.num_subspaces() || codes.num_centroids() != codebook.num_centroids() {
        return Err(Error::Config("item codes disagree with codebook (D, M)".into()));
    }
    let sections = [("codebook", encode_codebook(codebook)), ("codes", encode_codes(codes))];
    fs::write(path, write_container(&sections))?;
    Ok(())
}

pub fn load_codebook(path: &Path) -> Result<(OpqCodebook, ItemCodeTable)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let sections = read_container(&bytes)?;
    let need = |name: &str| {
        sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| *p)
            .ok_or_else(|| Error::Format(format!("missing section '{name}'")))
    };
    let codebook = decode_codebook(need("codebook")?)?;
    let codes = decode_codes(need("codes")?)?;
    if codes.num_subspaces() != codebook.num_subspaces() || codes.num_centroids() != codebook.num_centroids() {
        return Err(Error::Format("item codes disagree with codebook (D, M)".into()));
    }
    Ok((codebook, codes))
}

fn write_container<S: AsRef<str>>(sections: &[(S, Vec<u8>)]) -> Vec<u8> {
    let mut out = Writer::default();
    out.0.extend_from_slice(MAGIC);
    out.u32(VERSION);
    out.u32(sections.len() as u32);
    for (name, payload) in sections {
        let name = name.as_ref();
        out.u32(name.len() as u32);
        out.0.extend_from_slice(name.as_bytes());
        out.u64(payload.len() as u64);
        out.0.extend_from_slice(payload);
    }
    out.0
}

fn read_container(bytes: &[u8]) -> Result<Vec<(String, &[u8])>> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()?;
    let mut sections = Vec::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Format("section name is not UTF-8".into()))?;
        let len = r.u64()? as usize;
        sections.push((name, r.take(len)?));
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after last section".into()));
    }
    Ok(sections)
}

/// SHA-256 over the little-endian bytes of every value, hex encoded.
pub fn hash_tensors<'a>(tensors: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update((t.len() as u64).to_le_bytes());
        for v in t {
            h.update(v.to_le_bytes());
        }
    }
    to_hex(&h.finalize())
}

fn hex_digest(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes))
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format("checkpoint is truncated".into())),
        }
    }

    fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, expected: usize) -> Result<Vec<f64>> {
        let start = self.pos;
        let n = self.u64()? as usize;
        if n != expected {
            self.pos = start;
            return Err(Error::Format(format!("expected {expected} values, found {n}")));
        }
        self.pos = start;
        self.any_f64s()
    }
    fn any_f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn dims<const N: usize>(&mut self) -> Result<[usize; N]> {
        let mut out = [0; N];
        for d in &mut out {
            *d = self.u32()? as usize;
        }
        Ok(out)
    }
}

fn encode_array3(a: &Array3<f64>) -> Vec<u8> {
    let mut w = Writer::default();
    let (x, y, z) = a.dim();
    for d in [x, y, z] {
        w.u32(d as u32);
    }
    w.f64s(a.as_standard_layout().as_slice().unwrap());
    w.0
}

fn decode_array3(r: &mut Reader) -> Result<Array3<f64>> {
    let [x, y, z] = r.dims::<3>()?;
    let data = r.f64s(x * y * z)?;
    Ok(Array3::from_shape_vec((x, y, z), data).unwrap())
}

fn encode_array2(w: &mut Writer, a: &Array2<f64>) {
    w.u32(a.nrows() as u32);
    w.u32(a.ncols() as u32);
    w.f64s(a.as_standard_layout().as_slice().unwrap());
}

fn decode_array2(r: &mut Reader) -> Result<Array2<f64>> {
    let [x, y] = r.dims::<2>()?;
    let data = r.f64s(x * y)?;
    Ok(Array2::from_shape_vec((x, y), data).unwrap())
}

fn encode_codebook(c: &OpqCodebook) -> Vec<u8> {
    let mut w = Writer::default();
    encode_array2(&mut w, &c.rotation);
    w.0.extend(encode_array3(&c.centroids));
    w.0
}

fn decode_codebook(b: &[u8]) -> Result<OpqCodebook> {
    let mut r = Reader::new(b);
    let rotation = decode_array2(&mut r)?;
    let centroids = decode_array3(&mut r)?;
    OpqCodebook::new(rotation, centroids)
}

fn encode_codes(c: &ItemCodeTable) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(c.num_subspaces() as u32);
    w.u32(c.num_centroids() as u32);
    w.u64(c.as_slice().len() as u64);
    for &v in c.as_slice() {
        w.u32(v as u32);
    }
    w.0
}

fn decode_codes(b: &[u8]) -> Result<ItemCodeTable> {
    let mut r = Reader::new(b);
    let [d, m] = r.dims::<2>()?;
    let n = r.u64()? as usize;
    let codes = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    ItemCodeTable::new(d, m, codes)
}

fn encode_encoder(p: &EncoderParams) -> Vec<u8> {
    let mut w = Writer::default();
    let c = &p.config;
    for d in [c.layers, c.heads, c.dim, c.max_len] {
        w.u32(d as u32);
    }
    w.f64(c.dropout);
    for t in p.tensors() {
        w.f64s(t);
    }
    w.0
}

fn decode_encoder(b: &[u8]) -> Result<EncoderParams> {
    let mut r = Reader::new(b);
    let [layers, heads, dim, max_len] = r.dims::<4>()?;
    let config = EncoderConfig {
        layers,
        heads,
        dim,
        max_len,
        dropout: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("encoder section: {e}")))?;
    let mut p = EncoderParams::init(&config, 0)?;
    for t in p.tensors_mut() {
        let vals = r.f64s(t.len())?;
        t.copy_from_slice(&vals);
    }
    Ok(p)
}

fn encode_adam(a: &Adam) -> Vec<u8> {
    let mut w = Writer::default();
    for v in [a.lr, a.beta1, a.beta2, a.eps] {
        w.f64(v);
    }
    w.u64(a.step);
    w.u32(a.m.len() as u32);
    for (m, v) in a.m.iter().zip(&a.v) {
        w.f64s(m);
        w.f64s(v);
    }
    w.0
}

fn decode_adam(b: &[u8]) -> Result<Adam> {
    let mut r = Reader::new(b);
    let lr = r.f64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let eps = r.f64()?;
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        let mi = r.any_f64s()?;
        let vi = r.f64s(mi.len())?;
        m.push(mi);
        v.push(vi);
    }
    Ok(Adam {
        lr,
        beta1,
        beta2,
        eps,
        step,
        m,
        v,
    })
}

fn encode_alignment(a: &AlignmentMatrices) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(a.num_subspaces() as u32);
    w.u32(a.num_centroids() as u32);
    w.f64(a.sinkhorn_temp);
    w.u32(a.sinkhorn_iters as u32);
    w.f64(a.gumbel_noise_scale);
    for t in &a.theta {
        w.f64s(t.as_standard_layout().as_slice().unwrap());
    }
    w.0
}

fn decode_alignment(b: &[u8]) -> Result<AlignmentMatrices> {
    let mut r = Reader::new(b);
    let [d, m] = r.dims::<2>()?;
    let sinkhorn_temp = r.f64()?;
    let sinkhorn_iters = r.u32()? as usize;
    let gumbel_noise_scale = r.f64()?;
    let theta = (0..d)
        .map(|_| r.f64s(m * m).map(|v| Array2::from_shape_vec((m, m), v).unwrap()))
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentMatrices {
        theta,
        sinkhorn_temp,
        sinkhorn_iters,
        gumbel_noise_scale,
    })
}
