//! Checkpoint container: a run config snapshot plus named tensors.
//!
//! Values are stored as raw little-endian f64, so a write/read cycle is
//! bit-exact and a reloaded model decodes identically to the one that was
//! saved. The embedded config is enough to rebuild the module skeleton;
//! tensors are then matched strictly by name and shape, in both directions,
//! so a checkpoint from a different topology is rejected rather than
//! half-applied.

use crate::config::{self, RunConfig};
use mse2e_core::layers::ParamSet;
use mse2e_core::lm::CharLm;
use mse2e_core::model::{AdaDelta, MultiStreamModel};
use mse2e_core::ctc::LabelAlphabet;
use mse2e_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 6] = b"MSCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CkptKind {
    Model,
    Lm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub rho: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub entries: Vec<(String, Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: CkptKind,
    /// Optimizer updates attempted over the training run.
    pub step: u64,
    pub config: RunConfig,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub optimizer: Option<OptimizerState>,
    /// File this checkpoint was read from; names the file in errors.
    origin: PathBuf,
}

/// Captures the current parameters (and optionally optimizer accumulators).
pub fn snapshot(
    kind: CkptKind,
    step: u64,
    cfg: &RunConfig,
    params: &dyn ParamSet,
    opt: Option<&AdaDelta>,
) -> Checkpoint {
    let mut tensors = Vec::new();
    params.visit_params(&mut |name, t| {
        tensors.push((name, t.shape().to_vec(), t.data().to_vec()));
    });
    Checkpoint {
        kind,
        step,
        config: cfg.clone(),
        tensors,
        optimizer: opt.map(|o| OptimizerState {
            rho: o.rho,
            eps: o.eps,
            clip_norm: o.clip_norm,
            entries: o.state_entries(),
        }),
        origin: PathBuf::from("<unsaved>"),
    }
}

impl Checkpoint {
    /// Copies every stored tensor into the matching parameter. Missing,
    /// extra, or reshaped tensors abort before anything is half-applied.
    pub fn apply(&self, params: &mut dyn ParamSet) -> Result<()> {
        let mut saved: std::collections::BTreeMap<&str, (&[usize], &[f64])> = self
            .tensors
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s.as_slice(), d.as_slice())))
            .collect();

        let mut problem: Option<String> = None;
        params.visit_params(&mut |name, t| {
            if problem.is_some() {
                return;
            }
            match saved.remove(name.as_str()) {
                None => problem = Some(format!("checkpoint lacks tensor `{name}`")),
                Some((shape, _)) if shape != t.shape() => {
                    problem = Some(format!(
                        "tensor `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                        shape,
                        t.shape()
                    ))
                }
                Some(_) => {}
            }
        });
        if problem.is_none() {
            if let Some((name, _)) = saved.iter().next() {
                problem = Some(format!("checkpoint tensor `{name}` has no home in the model"));
            }
        }
        if let Some(msg) = problem {
            return Err(Error::format(&self.origin, msg));
        }

        let by_name: std::collections::BTreeMap<&str, &[f64]> = self
            .tensors
            .iter()
            .map(|(n, _, d)| (n.as_str(), d.as_slice()))
            .collect();
        params.visit_params_mut(&mut |name, t| {
            t.data_mut().copy_from_slice(by_name[name.as_str()]);
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[match self.kind {
            CkptKind::Model => 0u8,
            CkptKind::Lm => 1u8,
        }])?;
        w.write_all(&self.step.to_le_bytes())?;
        wr_bytes(w, config::echo(&self.config).as_bytes())?;

        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, shape, data) in &self.tensors {
            wr_bytes(w, name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &e in shape {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }

        match &self.optimizer {
            None => w.write_all(&[0u8])?,
            Some(o) => {
                w.write_all(&[1u8])?;
                w.write_all(&o.rho.to_le_bytes())?;
                w.write_all(&o.eps.to_le_bytes())?;
                w.write_all(&o.clip_norm.to_le_bytes())?;
                w.write_all(&(o.entries.len() as u64).to_le_bytes())?;
                for (name, eg2, edx2) in &o.entries {
                    wr_bytes(w, name.as_bytes())?;
                    w.write_all(&(eg2.len() as u64).to_le_bytes())?;
                    for &v in eg2 {
                        w.write_all(&v.to_le_bytes())?;
                    }
                    for &v in edx2 {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 6];
        rd_exact(&mut r, &mut magic, path)?;
        if &magic != MAGIC {
            return Err(Error::format(path, "not a checkpoint file (bad magic)"));
        }
        let version = rd_u32(&mut r, path)?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let kind = match rd_u8(&mut r, path)? {
            0 => CkptKind::Model,
            1 => CkptKind::Lm,
            k => return Err(Error::format(path, format!("unknown checkpoint kind {k}"))),
        };
        let step = rd_u64(&mut r, path)?;
        let config_text = rd_string(&mut r, path, 1 << 20)?;
        let config = config::parse(&config_text, path)?;

        let n_tensors = rd_u64(&mut r, path)? as usize;
        if n_tensors > 1 << 20 {
            return Err(Error::format(path, "implausible tensor count"));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = rd_string(&mut r, path, 4096)?;
            let rank = rd_u32(&mut r, path)? as usize;
            if rank > 8 {
                return Err(Error::format(path, format!("tensor `{name}` has implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let e = rd_u64(&mut r, path)? as usize;
                numel = numel.saturating_mul(e);
                shape.push(e);
            }
            if numel > 1 << 28 {
                return Err(Error::format(path, format!("tensor `{name}` is implausibly large")));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(rd_f64(&mut r, path)?);
            }
            tensors.push((name, shape, data));
        }

        let optimizer = match rd_u8(&mut r, path)? {
            0 => None,
            1 => {
                let rho = rd_f64(&mut r, path)?;
                let eps = rd_f64(&mut r, path)?;
                let clip_norm = rd_f64(&mut r, path)?;
                let n = rd_u64(&mut r, path)? as usize;
                if n > 1 << 20 {
                    return Err(Error::format(path, "implausible optimizer entry count"));
                }
                let mut entries = Vec::with_capacity(n);
                for _ in 0..n {
                    let name = rd_string(&mut r, path, 4096)?;
                    let len = rd_u64(&mut r, path)? as usize;
                    if len > 1 << 28 {
                        return Err(Error::format(path, "implausible optimizer state length"));
                    }
                    let mut eg2 = Vec::with_capacity(len);
                    for _ in 0..len {
                        eg2.push(rd_f64(&mut r, path)?);
                    }
                    let mut edx2 = Vec::with_capacity(len);
                    for _ in 0..len {
                        edx2.push(rd_f64(&mut r, path)?);
                    }
                    entries.push((name, eg2, edx2));
                }
                Some(OptimizerState { rho, eps, clip_norm, entries })
            }
            k => return Err(Error::format(path, format!("bad optimizer flag {k}"))),
        };

        let mut trailer = [0u8; 1];
        if r.read(&mut trailer).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::format(path, "trailing bytes after checkpoint payload"));
        }

        Ok(Checkpoint { kind, step, config, tensors, optimizer, origin: path.to_path_buf() })
    }
}

/// Builds a freshly initialized model from the config's seed and topology.
pub fn build_model(cfg: &RunConfig) -> Result<MultiStreamModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    MultiStreamModel::seeded(cfg.model_hyper(), &mut rng)
}

/// LM initialization draws from an independent generator so adding or
/// removing the acoustic model never perturbs it.
pub fn build_lm(cfg: &RunConfig) -> Result<CharLm> {
    let alphabet = LabelAlphabet::new(cfg.alphabet_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4c4d);
    Ok(CharLm::seeded(alphabet, cfg.lm_embed, cfg.lm_hidden, &mut rng))
}

pub fn load_model(path: &Path) -> Result<(MultiStreamModel, Checkpoint)> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.kind != CkptKind::Model {
        return Err(Error::format(path, "expected a model checkpoint, found a language-model one"));
    }
    let mut model = build_model(&ckpt.config)?;
    ckpt.apply(&mut model)?;
    Ok((model, ckpt))
}

pub fn load_lm(path: &Path) -> Result<(CharLm, Checkpoint)> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.kind != CkptKind::Lm {
        return Err(Error::format(path, "expected a language-model checkpoint, found a model one"));
    }
    let mut lm = build_lm(&ckpt.config)?;
    ckpt.apply(&mut lm)?;
    Ok((lm, ckpt))
}

fn wr_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn rd_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, "file ends mid-record")
        } else {
            Error::io(path, e)
        }
    })
}

fn rd_u8(r: &mut impl Read, path: &Path) -> Result<u8> {
    let mut b = [0u8; 1];
    rd_exact(r, &mut b, path)?;
    Ok(b[0])
}

fn rd_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    rd_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn rd_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    rd_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

fn rd_f64(r: &mut impl Read, path: &Path) -> Result<f64> {
    let mut b = [0u8; 8];
    rd_exact(r, &mut b, path)?;
    Ok(f64::from_le_bytes(b))
}

fn rd_string(r: &mut impl Read, path: &Path, cap: usize) -> Result<String> {
    let len = rd_u32(r, path)? as usize;
    if len > cap {
        return Err(Error::format(path, format!("string field of {len} bytes exceeds cap {cap}")));
    }
    let mut buf = vec![0u8; len];
    rd_exact(r, &mut buf, path)?;
    String::from_utf8(buf).map_err(|_| Error::format(path, "string field is not UTF-8"))
}
