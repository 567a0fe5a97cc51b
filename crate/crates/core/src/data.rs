//! Synthetic two-view corpus plus its file formats. Each label owns a
//! prototype frame; utterances emit jittered, noisy runs of prototypes,
//! and the second view sees everything through a fixed channel transform.
//! Storage is 32-bit, compute is 64-bit.

use crate::ctc::LabelAlphabet;
use crate::numerics::Tensor;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::ops::RangeInclusive;
use std::path::Path;

/// Knobs of the synthetic recognition task. Everything else (prototypes,
/// the second view's transform) is derived deterministically from `seed`.
#[derive(Clone, Debug)]
pub struct SyntheticTaskSpec {
    pub alphabet_size: usize,
    pub feature_dim: usize,
    /// Frames emitted per label before the ±2 uniform jitter, drawn
    /// independently per stream so the views are never frame-aligned.
    pub frames_per_label: usize,
    /// Smallest per-element Gaussian emission noise a view can get.
    pub emit_noise: f64,
    /// Largest per-element emission noise. Each view of each utterance
    /// draws its own level uniformly from `[emit_noise, emit_noise_max]`,
    /// so stream reliability varies per recording the way it does across
    /// real channels; equal bounds give a single-condition corpus.
    pub emit_noise_max: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            alphabet_size: 8,
            feature_dim: 20,
            frames_per_label: 8,
            emit_noise: 0.1,
            emit_noise_max: 0.1,
            seed: 0,
        }
    }
}

/// The task's generating material: one prototype frame per label and the
/// second view's channel map. Prototypes are pairwise at least 4 emission
/// noise standard deviations apart, so frames stay classifiable.
pub struct TaskPrototypes {
    /// `V` rows of `D` values; row i is label i's clean frame.
    pub label: Vec<Vec<f64>>,
    /// `[D, D]` orthonormal-rows map applied by the second view.
    pub transform: Tensor,
    pub bias: Vec<f64>,
}

impl TaskPrototypes {
    /// Clean (noiseless) frame for `label` as stream `stream` sees it.
    pub fn stream_view(&self, label: usize, stream: usize) -> Vec<f64> {
        let p = &self.label[label];
        match stream {
            0 => p.clone(),
            1 => {
                let d = p.len();
                let m = self.transform.data();
                (0..d)
                    .map(|r| {
                        let row = &m[r * d..(r + 1) * d];
                        row.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + self.bias[r]
                    })
                    .collect()
            }
            _ => panic!("stream_view: only streams 0 and 1 exist"),
        }
    }
}

impl SyntheticTaskSpec {
    fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if self.frames_per_label == 0 {
            return Err(Error::Config("frames per label must be positive".into()));
        }
        if self.emit_noise < 0.0 {
            return Err(Error::Config(format!(
                "emission noise {} must be nonnegative",
                self.emit_noise
            )));
        }
        if self.emit_noise_max < self.emit_noise {
            return Err(Error::Config(format!(
                "emission noise ceiling {} is below the floor {}",
                self.emit_noise_max, self.emit_noise
            )));
        }
        Ok(())
    }

    /// Prototypes and channel map for this spec, independent of how many
    /// utterances are drawn afterwards.
    pub fn prototypes(&self) -> Result<TaskPrototypes> {
        self.validate()?;
        let alphabet = LabelAlphabet::new(self.alphabet_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        materialize(self, &alphabet, &mut rng)
    }
}

fn materialize(
    spec: &SyntheticTaskSpec,
    alphabet: &LabelAlphabet,
    rng: &mut ChaCha8Rng,
) -> Result<TaskPrototypes> {
    let d = spec.feature_dim;
    let min_dist = 4.0 * spec.emit_noise;
    let mut label: Vec<Vec<f64>> = Vec::with_capacity(alphabet.size());
    let mut tries = 0;
    while label.len() < alphabet.size() {
        let cand: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ok = label.iter().all(|p| {
            let d2: f64 = p.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= min_dist
        });
        if ok {
            label.push(cand);
        } else {
            tries += 1;
            if tries > 1000 {
                return Err(Error::Config(format!(
                    "cannot place {} prototypes at least {:.3} apart in a unit box; \
                     lower the emission noise or raise the feature dimension",
                    alphabet.size(),
                    min_dist
                )));
            }
        }
    }

    // Gram-Schmidt over Gaussian rows: orthonormal for a length-preserving
    // second view. Degenerate draws are re-drawn.
    let mut transform = vec![0.0; d * d];
    for r in 0..d {
        loop {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for prev in 0..r {
                let row = &transform[prev * d..(prev + 1) * d];
                let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(row) {
                    *x -= dot * y;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for (slot, x) in transform[r * d..(r + 1) * d].iter_mut().zip(&v) {
                    *slot = x / norm;
                }
                break;
            }
        }
    }
    let bias: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
    Ok(TaskPrototypes {
        label,
        transform: Tensor::new(vec![d, d], transform),
        bias,
    })
}

/// One stored utterance: id plus a `[T, D]` feature matrix.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub utt_id: String,
    pub features: Tensor,
}

/// An ordered set of utterances with unique ids, the in-memory form of the
/// binary feature container.
#[derive(Clone, Debug, Default)]
pub struct FeatureFile {
    pub records: Vec<Utterance>,
}

/// A full generated task: one feature file per view plus the shared
/// transcripts. Both views of an utterance encode the same label sequence.
pub struct Corpus {
    pub stream1: FeatureFile,
    pub stream2: FeatureFile,
    pub transcripts: Vec<(String, Vec<usize>)>,
}

/// Draws `n_utts` utterances with label lengths uniform over `len_range`.
/// Byte-identical across runs with the same spec.
pub fn generate_corpus(
    spec: &SyntheticTaskSpec,
    n_utts: usize,
    len_range: RangeInclusive<usize>,
) -> Result<Corpus> {
    spec.validate()?;
    if n_utts == 0 {
        return Err(Error::Config("corpus needs at least one utterance".into()));
    }
    if *len_range.start() == 0 || len_range.is_empty() {
        return Err(Error::Config(format!(
            "label length range {:?} must be nonempty and start at 1 or more",
            len_range
        )));
    }
    let alphabet = LabelAlphabet::new(spec.alphabet_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = materialize(spec, &alphabet, &mut rng)?;

    let mut stream1 = FeatureFile::default();
    let mut stream2 = FeatureFile::default();
    let mut transcripts = Vec::with_capacity(n_utts);
    for u in 0..n_utts {
        let utt_id = format!("utt-{u:05}");
        let len = rng.gen_range(len_range.clone());
        let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(0..alphabet.size())).collect();
        for (stream, file) in [(0, &mut stream1), (1, &mut stream2)] {
            let sigma = if spec.emit_noise_max > spec.emit_noise {
                rng.gen_range(spec.emit_noise..=spec.emit_noise_max)
            } else {
                spec.emit_noise
            };
            let mut rows: Vec<f64> = Vec::new();
            let mut t = 0;
            for &lab in &labels {
                let clean = protos.stream_view(lab, stream);
                let f = (spec.frames_per_label as i64 + rng.gen_range(-2..=2)).max(1) as usize;
                for _ in 0..f {
                    rows.extend(clean.iter().map(|&x| {
                        if sigma == 0.0 {
                            x
                        } else {
                            x + sigma * rng.sample::<f64, _>(StandardNormal)
                        }
                    }));
                    t += 1;
                }
            }
            file.records.push(Utterance {
                utt_id: utt_id.clone(),
                features: Tensor::new(vec![t, spec.feature_dim], rows),
            });
        }
        transcripts.push((utt_id, labels));
    }
    Ok(Corpus {
        stream1,
        stream2,
        transcripts,
    })
}

/// Adds zero-mean Gaussian noise with standard deviation `sigma` to every
/// element. `sigma` 0 is the exact identity.
pub fn corrupt_stream(features: &Tensor, sigma: f64, seed: u64) -> Tensor {
    assert!(sigma >= 0.0, "noise std {} must be nonnegative", sigma);
    if sigma == 0.0 {
        return features.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = features
        .data()
        .iter()
        .map(|&x| x + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(features.shape().to_vec(), data)
}

const MAGIC: &[u8; 5] = b"MSE2E";
const VERSION: u32 = 1;

impl FeatureFile {
    pub fn get(&self, utt_id: &str) -> Option<&Tensor> {
        self.records
            .iter()
            .find(|r| r.utt_id == utt_id)
            .map(|r| &r.features)
    }

    /// Serializes to the binary container: magic, version, record count,
    /// then per record a length-prefixed id, T, D, and row-major 32-bit
    /// little-endian frames.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            assert!(seen.insert(&r.utt_id), "duplicate utt-id {:?}", r.utt_id);
        }
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            let id = r.utt_id.as_bytes();
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id)?;
            w.write_all(&(r.features.rows() as u64).to_le_bytes())?;
            w.write_all(&(r.features.cols() as u64).to_le_bytes())?;
            for &v in r.features.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(&mut f).map_err(|e| Error::io(path, e))
    }

    /// Parses the binary container, rejecting bad magic, unknown versions,
    /// duplicate ids, and truncated payloads.
    pub fn read_from(r: &mut impl Read, origin: &Path) -> Result<FeatureFile> {
        let bad = |m: String| Error::format(origin, m);
        let io = |e: std::io::Error| Error::io(origin, e);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {:?}", magic)));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        r.read_exact(&mut b8).map_err(io)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        let mut seen = BTreeSet::new();
        for _ in 0..count {
            r.read_exact(&mut b4).map_err(io)?;
            let id_len = u32::from_le_bytes(b4) as usize;
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id).map_err(io)?;
            let utt_id = String::from_utf8(id)
                .map_err(|_| bad("utt-id is not valid UTF-8".into()))?;
            if !seen.insert(utt_id.clone()) {
                return Err(bad(format!("duplicate utt-id {:?}", utt_id)));
            }
            r.read_exact(&mut b8).map_err(io)?;
            let t = u64::from_le_bytes(b8) as usize;
            r.read_exact(&mut b8).map_err(io)?;
            let d = u64::from_le_bytes(b8) as usize;
            let mut data = Vec::with_capacity(t * d);
            for _ in 0..t * d {
                r.read_exact(&mut b4).map_err(io)?;
                data.push(f32::from_le_bytes(b4) as f64);
            }
            records.push(Utterance {
                utt_id,
                features: Tensor::new(vec![t, d], data),
            });
        }
        Ok(FeatureFile { records })
    }

    pub fn read(path: &Path) -> Result<FeatureFile> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut f, path)
    }
}

/// Writes `utt-id<TAB>label characters`, one line per utterance.
pub fn write_transcripts(
    path: &Path,
    entries: &[(String, Vec<usize>)],
    alphabet: &LabelAlphabet,
) -> Result<()> {
    let mut out = String::new();
    for (id, labels) in entries {
        out.push_str(id);
        out.push('\t');
        out.push_str(&alphabet.decode_string(labels));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_transcripts(path: &Path, alphabet: &LabelAlphabet) -> Result<Vec<(String, Vec<usize>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, chars) = line.split_once('\t').ok_or_else(|| {
            Error::format(path, format!("line {}: expected utt-id<TAB>labels", n + 1))
        })?;
        if !seen.insert(id.to_string()) {
            return Err(Error::format(path, format!("duplicate utt-id {:?}", id)));
        }
        let labels = alphabet
            .encode(chars)
            .map_err(|e| Error::format(path, format!("line {}: {}", n + 1, e)))?;
        out.push((id.to_string(), labels));
    }
    Ok(out)
}

/// Pairs every feature record with its transcript. Errors when either side
/// has an utterance the other lacks.
pub fn join_corpus<'a>(
    features: &'a FeatureFile,
    transcripts: &'a [(String, Vec<usize>)],
) -> Result<Vec<(&'a str, &'a Tensor, &'a [usize])>> {
    let mut by_id: std::collections::BTreeMap<&str, &[usize]> = transcripts
        .iter()
        .map(|(id, l)| (id.as_str(), l.as_slice()))
        .collect();
    let mut out = Vec::with_capacity(features.records.len());
    for r in &features.records {
        let labels = by_id.remove(r.utt_id.as_str()).ok_or_else(|| {
            Error::Join(format!("utterance {:?} has features but no transcript", r.utt_id))
        })?;
        out.push((r.utt_id.as_str(), &r.features, labels));
    }
    if let Some((id, _)) = by_id.iter().next() {
        return Err(Error::Join(format!(
            "utterance {:?} has a transcript but no features",
            id
        )));
    }
    Ok(out)
}
