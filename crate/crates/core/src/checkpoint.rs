//! Binary checkpoints for both arms.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TOKF"  u32 version  u32 section count
//! repeated: [u8; 4] tag  u64 payload length  payload
//! ```
//!
//! Sections:
//!
//! - `CONF` JSON header: arm, architecture, per-layer τ, completed steps and
//!   the training config when there is one.
//! - `TDIR` tensor directory: per tensor a name, element width, rank, dims,
//!   and the offset and length of its bytes inside `TDAT`.
//! - `TDAT` raw tensor data, in parameter order.
//! - `OPTM` optional AdamW state: `u64 t`, then the first and second
//!   moments for every tensor in directory order, at the same element width.
//!
//! Readers skip sections with tags they do not know. Values are cast when
//! the file width differs from the requested element type. τ is read from
//! the header and never recomputed from the token counts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::TransformerLM;
use crate::error::{Error, Result};
use crate::lm::{Arm, LanguageModel};
use crate::model::TokenformerLM;
use crate::optim::AdamWState;
use crate::preset::ArchConfig;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"TOKF";
pub const VERSION: u32 = 1;

const CONF: &[u8; 4] = b"CONF";
const TDIR: &[u8; 4] = b"TDIR";
const TDAT: &[u8; 4] = b"TDAT";
const OPTM: &[u8; 4] = b"OPTM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    #[serde(flatten)]
    pub arch: ArchConfig,
    /// Per layer, Q, K, V, O, FFN. Empty for the Transformer arm.
    pub taus: Vec<[f64; 5]>,
    /// Optimizer steps completed when the file was written.
    pub step: usize,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

/// Either arm, as read back from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel<F: Scalar = f64> {
    Tokenformer(TokenformerLM<F>),
    Transformer(TransformerLM<F>),
}

impl<F: Scalar> AnyModel<F> {
    pub fn arch(&self) -> ArchConfig {
        match self {
            AnyModel::Tokenformer(m) => ArchConfig::Tokenformer(m.config().clone()),
            AnyModel::Transformer(m) => ArchConfig::Transformer(m.config().clone()),
        }
    }

    pub fn taus(&self) -> Vec<[f64; 5]> {
        match self {
            AnyModel::Tokenformer(m) => m.taus(),
            AnyModel::Transformer(_) => Vec::new(),
        }
    }

    pub fn new(arch: &ArchConfig, rng: &mut Rng) -> Result<Self> {
        Ok(match arch {
            ArchConfig::Tokenformer(c) => AnyModel::Tokenformer(TokenformerLM::new(c.clone(), rng)?),
            ArchConfig::Transformer(c) => AnyModel::Transformer(TransformerLM::new(c.clone(), rng)?),
        })
    }

    pub fn into_tokenformer(self) -> Result<TokenformerLM<F>> {
        match self {
            AnyModel::Tokenformer(m) => Ok(m),
            AnyModel::Transformer(_) => Err(Error::Config("checkpoint holds a transformer, not a tokenformer".into())),
        }
    }

    pub fn into_transformer(self) -> Result<TransformerLM<F>> {
        match self {
            AnyModel::Transformer(m) => Ok(m),
            AnyModel::Tokenformer(_) => Err(Error::Config("checkpoint holds a tokenformer, not a transformer".into())),
        }
    }
}

impl<F: Scalar> LanguageModel<F> for AnyModel<F> {
    fn arm(&self) -> Arm {
        match self {
            AnyModel::Tokenformer(m) => m.arm(),
            AnyModel::Transformer(m) => m.arm(),
        }
    }

    fn n_vocab(&self) -> usize {
        match self {
            AnyModel::Tokenformer(m) => m.n_vocab(),
            AnyModel::Transformer(m) => m.n_vocab(),
        }
    }

    fn max_seq(&self) -> usize {
        match self {
            AnyModel::Tokenformer(m) => m.max_seq(),
            AnyModel::Transformer(m) => m.max_seq(),
        }
    }

    fn parameters(&self) -> Vec<crate::lm::NamedParam<'_, F>> {
        match self {
            AnyModel::Tokenformer(m) => m.parameters(),
            AnyModel::Transformer(m) => m.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<F>> {
        match self {
            AnyModel::Tokenformer(m) => m.parameters_mut(),
            AnyModel::Transformer(m) => m.parameters_mut(),
        }
    }

    fn forward_batch(
        &self,
        tape: &mut crate::autodiff::Tape<F>,
        batch: &[Vec<usize>],
    ) -> Result<(crate::autodiff::Var, crate::lm::ParamVars)> {
        match self {
            AnyModel::Tokenformer(m) => m.forward_batch(tape, batch),
            AnyModel::Transformer(m) => m.forward_batch(tape, batch),
        }
    }
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint<F: Scalar = f64> {
    pub model: AnyModel<F>,
    pub optimizer: Option<AdamWState<F>>,
    pub step: usize,
    pub train: Option<TrainConfig>,
    /// Element width of the stored tensors, in bytes.
    pub stored_width: usize,
}

/// Serialises `model` and, when given, its optimizer state. The output is a
/// pure function of the inputs.
pub fn encode<F, M>(
    model: &M,
    arch: &ArchConfig,
    taus: Vec<[f64; 5]>,
    optimizer: Option<&AdamWState<F>>,
    step: usize,
    train: Option<&TrainConfig>,
) -> Result<Vec<u8>>
where
    F: Scalar,
    M: LanguageModel<F> + ?Sized,
{
    let params = model.parameters();
    if let Some(opt) = optimizer {
        if opt.m.len() != params.len()
            || opt.v.len() != params.len()
            || params
                .iter()
                .zip(&opt.m)
                .zip(&opt.v)
                .any(|((p, m), v)| m.shape() != p.tensor.shape() || v.shape() != p.tensor.shape())
        {
            return Err(Error::Contract("optimizer state does not match the model parameters".into()));
        }
    }
    let header = Header { arch: arch.clone(), taus, step, train: train.cloned() };
    let conf = serde_json::to_vec(&header)?;

    let mut dir = Vec::new();
    let mut dat = Vec::new();
    put_u32(&mut dir, params.len() as u32);
    for p in &params {
        let offset = dat.len() as u64;
        for &x in p.tensor.data() {
            x.write_le(&mut dat);
        }
        put_str(&mut dir, &p.name);
        put_u32(&mut dir, F::BYTES as u32);
        put_u32(&mut dir, p.tensor.shape().len() as u32);
        for &d in p.tensor.shape() {
            put_u64(&mut dir, d as u64);
        }
        put_u64(&mut dir, offset);
        put_u64(&mut dir, dat.len() as u64 - offset);
    }

    let mut sections: Vec<(&[u8; 4], Vec<u8>)> = vec![(CONF, conf), (TDIR, dir), (TDAT, dat)];
    if let Some(opt) = optimizer {
        let mut o = Vec::new();
        put_u64(&mut o, opt.t);
        for t in opt.m.iter().chain(&opt.v) {
            for &x in t.data() {
                x.write_le(&mut o);
            }
        }
        sections.push((OPTM, o));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, sections.len() as u32);
    for (tag, payload) in sections {
        out.extend_from_slice(tag);
        put_u64(&mut out, payload.len() as u64);
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

pub fn encode_any<F: Scalar>(
    model: &AnyModel<F>,
    optimizer: Option<&AdamWState<F>>,
    step: usize,
    train: Option<&TrainConfig>,
) -> Result<Vec<u8>> {
    encode(model, &model.arch(), model.taus(), optimizer, step, train)
}

pub fn encode_tokenformer<F: Scalar>(
    model: &TokenformerLM<F>,
    optimizer: Option<&AdamWState<F>>,
    step: usize,
    train: Option<&TrainConfig>,
) -> Result<Vec<u8>> {
    let arch = ArchConfig::Tokenformer(model.config().clone());
    encode(model, &arch, model.taus(), optimizer, step, train)
}

pub fn encode_transformer<F: Scalar>(
    model: &TransformerLM<F>,
    optimizer: Option<&AdamWState<F>>,
    step: usize,
    train: Option<&TrainConfig>,
) -> Result<Vec<u8>> {
    let arch = ArchConfig::Transformer(model.config().clone());
    encode(model, &arch, Vec::new(), optimizer, step, train)
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so a crash never leaves a half-written checkpoint under the final name.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Reads only the JSON header.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    let sections = split_sections(bytes)?;
    let conf = find(&sections, CONF)?;
    serde_json::from_slice(conf).map_err(|e| Error::Format(format!("CONF section is not valid JSON: {e}")))
}

pub fn decode<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let sections = split_sections(bytes)?;
    let header: Header = serde_json::from_slice(find(&sections, CONF)?)
        .map_err(|e| Error::Format(format!("CONF section is not valid JSON: {e}")))?;
    header.arch.validate()?;
    let entries = parse_dir(find(&sections, TDIR)?)?;
    let dat = find(&sections, TDAT)?;

    let mut model = AnyModel::<F>::new(&header.arch, &mut Rng::new(0))?;
    let names: Vec<(String, Vec<usize>)> =
        model.parameters().iter().map(|p| (p.name.clone(), p.tensor.shape().to_vec())).collect();
    if names.len() != entries.len() {
        return Err(Error::Format(format!(
            "directory lists {} tensors, the architecture has {}",
            entries.len(),
            names.len()
        )));
    }
    let mut width = None;
    for ((name, shape), e) in names.iter().zip(&entries) {
        if *name != e.name || *shape != e.dims {
            return Err(Error::Format(format!(
                "tensor {:?} {:?} in file where {name:?} {shape:?} was expected",
                e.name, e.dims
            )));
        }
        match width {
            None => width = Some(e.width),
            Some(w) if w != e.width => {
                return Err(Error::Format(format!("mixed element widths {w} and {} in one file", e.width)))
            }
            _ => {}
        }
    }
    let width = width.unwrap_or(F::BYTES);
    for (p, e) in model.parameters_mut().into_iter().zip(&entries) {
        let count: usize = e.dims.iter().product();
        if e.len != (count * e.width) as u64 {
            return Err(Error::Format(format!("tensor {:?}: length {} does not match its shape", e.name, e.len)));
        }
        let end = e
            .offset
            .checked_add(e.len)
            .filter(|&end| end <= dat.len() as u64)
            .ok_or_else(|| Error::Format(format!("tensor {:?} runs past the end of TDAT", e.name)))?;
        read_values(&dat[e.offset as usize..end as usize], e.width, p.data_mut())?;
    }

    if let AnyModel::Tokenformer(m) = &mut model {
        if header.taus.len() != m.blocks.len() {
            return Err(Error::Format(format!(
                "header has τ for {} layers, the model has {}",
                header.taus.len(),
                m.blocks.len()
            )));
        }
        let variant = m.config().variant;
        for (b, taus) in m.blocks.iter_mut().zip(&header.taus) {
            for (p, &tau) in b.projections_mut().into_iter().zip(taus) {
                let keys = std::mem::replace(p.keys_mut(), Tensor::zeros(&[0, 0]));
                let values = std::mem::replace(p.values_mut(), Tensor::zeros(&[0, 0]));
                *p = crate::pattention::ParamTokens::new(keys, values, tau, variant)
                    .map_err(|e| Error::Format(format!("bad τ in header: {e}")))?;
            }
        }
    }

    let optimizer = match sections.iter().find(|(t, _)| t == OPTM) {
        None => None,
        Some((_, o)) => Some(parse_optimizer(o, &entries, width)?),
    };
    Ok(Checkpoint { model, optimizer, step: header.step, train: header.train, stored_width: width })
}

struct DirEntry {
    name: String,
    width: usize,
    dims: Vec<usize>,
    offset: u64,
    len: u64,
}

fn split_sections(bytes: &[u8]) -> Result<Vec<([u8; 4], &[u8])>> {
    let mut r = Reader::new(bytes, "file header");
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}; not a checkpoint")));
    }
    let version = r.u32()?;
    if version > VERSION {
        return Err(Error::Format(format!(
            "format version {version} is newer than this build understands ({VERSION}); upgrade to read it"
        )));
    }
    if version == 0 {
        return Err(Error::Format("format version 0 is invalid".into()));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        r.what = "section header";
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = r.u64()?;
        let name = String::from_utf8_lossy(&tag).into_owned();
        let payload = r.take_named(len, &name).map_err(|_| {
            Error::Format(format!(
                "truncated: section {name} (#{i}) declares {len} bytes but only {} remain",
                r.remaining()
            ))
        })?;
        out.push((tag, payload));
    }
    Ok(out)
}

fn find<'a>(sections: &[([u8; 4], &'a [u8])], tag: &[u8; 4]) -> Result<&'a [u8]> {
    sections
        .iter()
        .find(|(t, _)| t == tag)
        .map(|(_, p)| *p)
        .ok_or_else(|| Error::Format(format!("missing section {}", String::from_utf8_lossy(tag))))
}

fn parse_dir(bytes: &[u8]) -> Result<Vec<DirEntry>> {
    let mut r = Reader::new(bytes, "TDIR");
    let n = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let name_len = r.u32()?;
        let name = String::from_utf8(r.take_named(name_len as u64, "TDIR")?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let width = r.u32()? as usize;
        if width != 4 && width != 8 {
            return Err(Error::Format(format!("tensor {name:?}: unsupported element width {width}")));
        }
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()?;
        let len = r.u64()?;
        out.push(DirEntry { name, width, dims, offset, len });
    }
    Ok(out)
}

fn parse_optimizer<F: Scalar>(bytes: &[u8], entries: &[DirEntry], width: usize) -> Result<AdamWState<F>> {
    let mut r = Reader::new(bytes, "OPTM");
    let t = r.u64()?;
    let read_all = |r: &mut Reader| -> Result<Vec<Tensor<F>>> {
        entries
            .iter()
            .map(|e| {
                let mut t = Tensor::zeros(&e.dims);
                let raw = r.take_named((t.len() * width) as u64, "OPTM")?;
                read_values(raw, width, t.data_mut())?;
                Ok(t)
            })
            .collect()
    };
    let m = read_all(&mut r)?;
    let v = read_all(&mut r)?;
    Ok(AdamWState { m, v, t })
}

fn read_values<F: Scalar>(raw: &[u8], width: usize, out: &mut [F]) -> Result<()> {
    for (dst, chunk) in out.iter_mut().zip(raw.chunks_exact(width)) {
        *dst = match width {
            8 => F::of(f64::read_le(chunk)),
            4 => F::of(f32::read_le(chunk) as f64),
            _ => unreachable!("width checked when the directory was parsed"),
        };
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Format("non-finite value in stored tensor".into()));
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let what = self.what;
        self.take_named(n as u64, what)
    }

    fn take_named(&mut self, n: u64, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() as u64 {
            return Err(Error::Format(format!("truncated in {what}: needed {n} bytes, {} remain", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
