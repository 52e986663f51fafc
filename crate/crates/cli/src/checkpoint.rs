//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "EVOTCKPT"
//! version      u32
//! kind         u8       0 generator, 1 discriminator
//! dims         5 × u64  vocab, d_model, heads, layers, max_len
//! extra        generator: u8 has_cls_head; discriminator: f64 threshold
//! fingerprint  str
//! vocab        u8 mode (0 word, 1 char), u32 count, count × str
//! directory    u32 count, count × (str name, u32 rank, rank × u64 dim)
//! optimizer    u8 present; if 1: u8 kind (0 sgd, 1 adam), f64 lr,
//!              f64 β1, f64 β2, f64 ε, u64 steps, u32 buffers,
//!              buffers × u64 len
//! payload      u64 count, count × f64: parameters in directory order,
//!              then first moments, then second moments
//! checksum     32 bytes SHA-256 of everything above
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::path::{Path, PathBuf};

use evotext::discriminator::DiscriminatorModel;
use evotext::generator::GeneratorModel;
use evotext::nn::{ModelDims, Params};
use evotext::tensor::{AdamConfig, Optimizer, OptimizerKind, Tensor};
use evotext::text::{TokenizerMode, Vocab};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"EVOTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {found} is newer than the supported version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint is truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint checksum mismatch; the file is corrupted")]
    Checksum,
    #[error("parameter {name}: directory shape {found:?} does not match the model's {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Generator(GeneratorModel),
    Discriminator(DiscriminatorModel),
}

impl Model {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Generator(_) => "generator",
            Model::Discriminator(_) => "discriminator",
        }
    }

    fn dims(&self) -> ModelDims {
        match self {
            Model::Generator(m) => m.dims,
            Model::Discriminator(m) => m.dims,
        }
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Model::Generator(m) => m.named_params(),
            Model::Discriminator(m) => m.named_params(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    pub optimizer: Option<Optimizer>,
    pub config_fingerprint: String,
}

impl Checkpoint {
    pub fn generator(&self) -> Option<&GeneratorModel> {
        match &self.model {
            Model::Generator(g) => Some(g),
            Model::Discriminator(_) => None,
        }
    }

    pub fn discriminator(&self) -> Option<&DiscriminatorModel> {
        match &self.model {
            Model::Discriminator(d) => Some(d),
            Model::Generator(_) => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Encoding

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
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let dims = ck.model.dims();
    match &ck.model {
        Model::Generator(_) => w.u8(0),
        Model::Discriminator(_) => w.u8(1),
    }
    for v in [dims.vocab, dims.d_model, dims.heads, dims.layers, dims.max_len] {
        w.u64(v as u64);
    }
    match &ck.model {
        Model::Generator(g) => w.u8(u8::from(g.cls_head.is_some())),
        Model::Discriminator(d) => w.f64(d.threshold),
    }
    w.str(&ck.config_fingerprint);
    w.u8(match ck.vocab.mode() {
        TokenizerMode::Word => 0,
        TokenizerMode::Char => 1,
    });
    w.u32(ck.vocab.len() as u32);
    for t in ck.vocab.tokens() {
        w.str(t);
    }
    let params = ck.model.params();
    w.u32(params.len() as u32);
    for (name, t) in &params {
        w.str(name);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
    }
    let mut moments: Vec<&Vec<f64>> = Vec::new();
    match &ck.optimizer {
        None => w.u8(0),
        Some(opt) => {
            w.u8(1);
            let cfg = match opt.kind() {
                OptimizerKind::Sgd => {
                    w.u8(0);
                    AdamConfig::default()
                }
                OptimizerKind::Adam(c) => {
                    w.u8(1);
                    c
                }
            };
            w.f64(opt.lr());
            w.f64(cfg.beta1);
            w.f64(cfg.beta2);
            w.f64(cfg.eps);
            w.u64(opt.step_count());
            let (first, second) = opt.moments();
            w.u32(first.len() as u32);
            for m in first {
                w.u64(m.len() as u64);
            }
            moments.extend(first.iter().chain(second));
        }
    }
    let count: usize = params.iter().map(|(_, t)| t.numel()).sum::<usize>() + moments.iter().map(|m| m.len()).sum::<usize>();
    w.u64(count as u64);
    for (_, t) in &params {
        for &x in t.data() {
            w.f64(x);
        }
    }
    for m in moments {
        for &x in m {
            w.f64(x);
        }
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

// ---------------------------------------------------------------------------
// Decoding

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - left,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| CheckpointError::Malformed(format!("size {v} does not fit in memory")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Malformed("string is not UTF-8".into()))
    }
}

fn fill(model: &mut impl Params, directory: &[(String, Vec<usize>)], payload: &mut impl Iterator<Item = f64>) -> Result<()> {
    let mut expected = Vec::new();
    model.visit("", &mut |n, t| expected.push((n, t.shape().to_vec())));
    if expected.len() != directory.len() {
        return Err(CheckpointError::Malformed(format!(
            "directory lists {} tensors, the model has {}",
            directory.len(),
            expected.len()
        )));
    }
    for ((en, es), (dn, ds)) in expected.iter().zip(directory) {
        if en != dn {
            return Err(CheckpointError::Malformed(format!("expected tensor {en}, found {dn}")));
        }
        if es != ds {
            return Err(CheckpointError::Shape {
                name: dn.clone(),
                expected: es.clone(),
                found: ds.clone(),
            });
        }
    }
    model.visit_mut("", &mut |_, t| {
        for x in t.data_mut() {
            *x = payload.next().expect("payload length checked");
        }
    });
    Ok(())
}

/// Parses bytes produced by [`to_bytes`]. Nothing is built unless the
/// whole file is structurally valid and its checksum matches.
pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < MAGIC.len() {
        return if MAGIC.starts_with(buf) {
            Err(CheckpointError::Truncated {
                offset: buf.len(),
                needed: MAGIC.len() - buf.len(),
            })
        } else {
            Err(CheckpointError::BadMagic)
        };
    }
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version > VERSION || version == 0 {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let kind = r.u8()?;
    let mut d = [0usize; 5];
    for v in &mut d {
        *v = r.usize()?;
    }
    let dims = ModelDims {
        vocab: d[0],
        d_model: d[1],
        heads: d[2],
        layers: d[3],
        max_len: d[4],
    };
    enum Extra {
        Head(bool),
        Threshold(f64),
    }
    let extra = match kind {
        0 => match r.u8()? {
            0 => Extra::Head(false),
            1 => Extra::Head(true),
            x => return Err(CheckpointError::Malformed(format!("bad head flag {x}"))),
        },
        1 => Extra::Threshold(r.f64()?),
        x => return Err(CheckpointError::Malformed(format!("unknown model kind {x}"))),
    };
    let config_fingerprint = r.str()?;
    let mode = match r.u8()? {
        0 => TokenizerMode::Word,
        1 => TokenizerMode::Char,
        x => return Err(CheckpointError::Malformed(format!("unknown tokenizer mode {x}"))),
    };
    let n_tokens = r.u32()? as usize;
    let mut tokens = Vec::with_capacity(n_tokens.min(1 << 16));
    for _ in 0..n_tokens {
        tokens.push(r.str()?);
    }
    let vocab = Vocab::from_tokens(mode, tokens).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if vocab.len() != dims.vocab {
        return Err(CheckpointError::Malformed(format!(
            "vocabulary has {} tokens, the model expects {}",
            vocab.len(),
            dims.vocab
        )));
    }
    let n_tensors = r.u32()? as usize;
    let mut directory = Vec::with_capacity(n_tensors.min(1 << 16));
    for _ in 0..n_tensors {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        directory.push((name, shape));
    }
    let opt_header = match r.u8()? {
        0 => None,
        1 => {
            let kind = r.u8()?;
            let lr = r.f64()?;
            let cfg = AdamConfig {
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let steps = r.u64()?;
            let n = r.u32()? as usize;
            let mut lens = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                lens.push(r.usize()?);
            }
            let kind = match kind {
                0 => OptimizerKind::Sgd,
                1 => OptimizerKind::Adam(cfg),
                x => return Err(CheckpointError::Malformed(format!("unknown optimizer kind {x}"))),
            };
            Some((kind, lr, steps, lens))
        }
        x => return Err(CheckpointError::Malformed(format!("bad optimizer flag {x}"))),
    };
    let count = r.usize()?;
    let need = count
        .checked_mul(8)
        .ok_or_else(|| CheckpointError::Malformed("payload size overflows".into()))?;
    let payload = r.take(need)?;
    let body_end = r.pos;
    let digest = r.take(32)?;
    if r.pos != buf.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    if Sha256::digest(&buf[..body_end]).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }

    let declared: usize = directory.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let moments: usize = opt_header.as_ref().map_or(0, |(_, _, _, l)| 2 * l.iter().sum::<usize>());
    if declared + moments != count {
        return Err(CheckpointError::Malformed(format!(
            "payload holds {count} values, the directory accounts for {}",
            declared + moments
        )));
    }
    let malformed = |e: evotext::nn::ConfigError| CheckpointError::Malformed(e.to_string());
    let mut model = match extra {
        Extra::Head(head) => {
            let mut g = GeneratorModel::new(dims, 0).map_err(malformed)?;
            if head {
                g.attach_cls_head(0);
            }
            Model::Generator(g)
        }
        Extra::Threshold(t) => {
            let mut m = DiscriminatorModel::new(dims, 0).map_err(malformed)?;
            m.threshold = t;
            Model::Discriminator(m)
        }
    };
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    match &mut model {
        Model::Generator(g) => fill(g, &directory, &mut values)?,
        Model::Discriminator(m) => fill(m, &directory, &mut values)?,
    }
    let optimizer = match opt_header {
        None => None,
        Some((kind, lr, steps, lens)) => {
            let mut take = |n: usize| (&mut values).take(n).collect::<Vec<f64>>();
            let first: Vec<Vec<f64>> = lens.iter().map(|&n| take(n)).collect();
            let second: Vec<Vec<f64>> = lens.iter().map(|&n| take(n)).collect();
            Some(Optimizer::from_parts(kind, lr, steps, first, second).map_err(|e| CheckpointError::Malformed(e.to_string()))?)
        }
    };
    Ok(Checkpoint {
        model,
        vocab,
        optimizer,
        config_fingerprint,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, to_bytes(ck)).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
