//! Run configuration: a flat `key = value` text format.
//!
//! One file drives the whole pipeline (generation, training, decoding), so
//! every run can be reproduced from its config and nothing else. Parsing is
//! strict: unknown keys, duplicate keys, and out-of-range values are all
//! rejected with the offending key named. `echo` renders the fully-resolved
//! config (defaults filled in) and `parse(echo(c)) == c` exactly.

use mse2e_core::data::SyntheticTaskSpec;
use mse2e_core::decode::BeamConfig;
use mse2e_core::model::{EncoderKind, ModelHyper, StreamSpec, TrainOptions};
use mse2e_core::{Error, Result};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtcMode {
    PerEncoder,
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HanMode {
    Learned,
    Fixed,
}

/// One encoder stream. `source` picks the 1-based feature view the stream
/// reads; the model itself takes one input per stream, so the pipeline
/// resolves views to per-stream copies before any encode call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamConfig {
    pub kind: EncoderKind,
    pub subsample: usize,
    pub layers: usize,
    pub source: usize,
}

impl StreamConfig {
    /// Defaults per position: every stream reads view 1, the second at 4x
    /// subsampling. Same input at two rates; point `source` at view 2 for
    /// parallel-recording setups instead.
    fn default_at(index: usize) -> Self {
        match index {
            1 => StreamConfig { kind: EncoderKind::Recurrent, subsample: 4, layers: 1, source: 1 },
            _ => StreamConfig { kind: EncoderKind::Recurrent, subsample: 1, layers: 1, source: 1 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    // Synthetic corpus.
    pub alphabet_size: usize,
    pub feature_dim: usize,
    pub frames_per_label: usize,
    pub emit_noise: f64,
    pub emit_noise_max: f64,
    pub train_utts: usize,
    pub test_utts: usize,
    pub len_min: usize,
    pub len_max: usize,

    // Model topology.
    pub streams: Vec<StreamConfig>,
    pub encoder_cells: usize,
    pub encoder_projection: Option<usize>,
    pub attention_dim: usize,
    pub decoder_cells: usize,
    pub embed_dim: usize,
    pub ctc_mode: CtcMode,
    pub han: HanMode,
    pub label_smoothing: f64,

    // Training.
    pub lambda_train: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of training utterances that get one feature view replaced
    /// by a noisy copy, so the fusion layer meets unreliable streams.
    pub augment_prob: f64,
    pub augment_sigma: f64,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    pub clip_norm: f64,
    pub lm_embed: usize,
    pub lm_hidden: usize,
    pub lm_epochs: usize,

    // Decoding.
    pub beam_width: usize,
    pub lambda_decode: f64,
    pub lm_weight: f64,
    pub max_len_ratio: f64,
    pub nbest: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            alphabet_size: 8,
            feature_dim: 20,
            frames_per_label: 8,
            emit_noise: 0.05,
            emit_noise_max: 1.0,
            train_utts: 500,
            test_utts: 50,
            len_min: 3,
            len_max: 6,
            streams: vec![StreamConfig::default_at(0), StreamConfig::default_at(1)],
            encoder_cells: 16,
            encoder_projection: None,
            attention_dim: 16,
            decoder_cells: 16,
            embed_dim: 8,
            ctc_mode: CtcMode::PerEncoder,
            han: HanMode::Learned,
            label_smoothing: 0.05,
            lambda_train: 0.5,
            batch_size: 2,
            epochs: 20,
            augment_prob: 0.5,
            augment_sigma: 1.0,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-4,
            clip_norm: 5.0,
            lm_embed: 8,
            lm_hidden: 16,
            lm_epochs: 5,
            beam_width: 20,
            lambda_decode: 0.3,
            lm_weight: 1.0,
            max_len_ratio: 1.0,
            nbest: 5,
        }
    }
}

fn key_err(origin: &Path, key: &str, what: impl std::fmt::Display) -> Error {
    Error::Config(format!("config {}: key `{key}`: {what}", origin.display()))
}

fn parse_num<T: std::str::FromStr>(origin: &Path, key: &str, raw: &str, ty: &str) -> Result<T> {
    raw.parse::<T>()
        .map_err(|_| key_err(origin, key, format!("invalid value `{raw}` (expected {ty})")))
}

/// Parses config text on top of the defaults. `origin` names the file in
/// error messages.
pub fn parse(text: &str, origin: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: HashSet<String> = HashSet::new();
    // Stream fields may precede the `streams` count line, so they are
    // collected and applied once the final count is known.
    let mut stream_fields: Vec<(usize, String, String)> = Vec::new();
    let mut stream_count = cfg.streams.len();

    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "config {}: line {}: expected `key = value`, got `{line}`",
                origin.display(),
                no + 1
            )));
        };
        let key = key.trim();
        let value = value.trim().to_string();
        if !seen.insert(key.to_string()) {
            return Err(key_err(origin, key, "duplicate key"));
        }

        if let Some(rest) = key.strip_prefix("stream") {
            if let Some((idx, field)) = rest.split_once('_') {
                if let Ok(k) = idx.parse::<usize>() {
                    if k == 0 {
                        return Err(key_err(origin, key, "streams are numbered from 1"));
                    }
                    stream_fields.push((k, field.to_string(), value));
                    continue;
                }
            }
            if rest == "s" {
                stream_count = parse_num(origin, key, &value, "positive integer")?;
                if stream_count == 0 {
                    return Err(key_err(origin, key, "at least one stream is required"));
                }
                if stream_count > 8 {
                    return Err(key_err(origin, key, "at most 8 streams are supported"));
                }
                continue;
            }
            return Err(key_err(origin, key, "unknown key"));
        }

        match key {
            "seed" => cfg.seed = parse_num(origin, key, &value, "unsigned integer")?,
            "alphabet_size" => cfg.alphabet_size = parse_num(origin, key, &value, "integer")?,
            "feature_dim" => cfg.feature_dim = parse_num(origin, key, &value, "integer")?,
            "frames_per_label" => cfg.frames_per_label = parse_num(origin, key, &value, "integer")?,
            "emit_noise" => cfg.emit_noise = parse_num(origin, key, &value, "number")?,
            "emit_noise_max" => cfg.emit_noise_max = parse_num(origin, key, &value, "number")?,
            "train_utts" => cfg.train_utts = parse_num(origin, key, &value, "integer")?,
            "test_utts" => cfg.test_utts = parse_num(origin, key, &value, "integer")?,
            "len_min" => cfg.len_min = parse_num(origin, key, &value, "integer")?,
            "len_max" => cfg.len_max = parse_num(origin, key, &value, "integer")?,
            "encoder_cells" => cfg.encoder_cells = parse_num(origin, key, &value, "integer")?,
            "encoder_projection" => {
                cfg.encoder_projection = if value == "none" {
                    None
                } else {
                    Some(parse_num(origin, key, &value, "integer or `none`")?)
                }
            }
            "attention_dim" => cfg.attention_dim = parse_num(origin, key, &value, "integer")?,
            "decoder_cells" => cfg.decoder_cells = parse_num(origin, key, &value, "integer")?,
            "embed_dim" => cfg.embed_dim = parse_num(origin, key, &value, "integer")?,
            "ctc_mode" => {
                cfg.ctc_mode = match value.as_str() {
                    "per_encoder" => CtcMode::PerEncoder,
                    "shared" => CtcMode::Shared,
                    other => {
                        return Err(key_err(
                            origin,
                            key,
                            format!("invalid value `{other}` (expected per_encoder or shared)"),
                        ))
                    }
                }
            }
            "han" => {
                cfg.han = match value.as_str() {
                    "learned" => HanMode::Learned,
                    "fixed" => HanMode::Fixed,
                    other => {
                        return Err(key_err(
                            origin,
                            key,
                            format!("invalid value `{other}` (expected learned or fixed)"),
                        ))
                    }
                }
            }
            "label_smoothing" => cfg.label_smoothing = parse_num(origin, key, &value, "number")?,
            "lambda_train" => cfg.lambda_train = parse_num(origin, key, &value, "number")?,
            "batch_size" => cfg.batch_size = parse_num(origin, key, &value, "integer")?,
            "epochs" => cfg.epochs = parse_num(origin, key, &value, "integer")?,
            "augment_prob" => cfg.augment_prob = parse_num(origin, key, &value, "number")?,
            "augment_sigma" => cfg.augment_sigma = parse_num(origin, key, &value, "number")?,
            "adadelta_rho" => cfg.adadelta_rho = parse_num(origin, key, &value, "number")?,
            "adadelta_eps" => cfg.adadelta_eps = parse_num(origin, key, &value, "number")?,
            "clip_norm" => cfg.clip_norm = parse_num(origin, key, &value, "number")?,
            "lm_embed" => cfg.lm_embed = parse_num(origin, key, &value, "integer")?,
            "lm_hidden" => cfg.lm_hidden = parse_num(origin, key, &value, "integer")?,
            "lm_epochs" => cfg.lm_epochs = parse_num(origin, key, &value, "integer")?,
            "beam_width" => cfg.beam_width = parse_num(origin, key, &value, "integer")?,
            "lambda_decode" => cfg.lambda_decode = parse_num(origin, key, &value, "number")?,
            "lm_weight" => cfg.lm_weight = parse_num(origin, key, &value, "number")?,
            "max_len_ratio" => cfg.max_len_ratio = parse_num(origin, key, &value, "number")?,
            "nbest" => cfg.nbest = parse_num(origin, key, &value, "integer")?,
            other => return Err(key_err(origin, other, "unknown key")),
        }
    }

    cfg.streams = (0..stream_count).map(StreamConfig::default_at).collect();
    for (k, field, value) in stream_fields {
        let key = format!("stream{k}_{field}");
        if k > stream_count {
            return Err(key_err(
                origin,
                &key,
                format!("stream {k} does not exist (streams = {stream_count})"),
            ));
        }
        let s = &mut cfg.streams[k - 1];
        match field.as_str() {
            "kind" => {
                s.kind = match value.as_str() {
                    "recurrent" => EncoderKind::Recurrent,
                    "conv_recurrent" => EncoderKind::ConvRecurrent,
                    other => {
                        return Err(key_err(
                            origin,
                            &key,
                            format!("invalid value `{other}` (expected recurrent or conv_recurrent)"),
                        ))
                    }
                }
            }
            "subsample" => s.subsample = parse_num(origin, &key, &value, "integer")?,
            "layers" => s.layers = parse_num(origin, &key, &value, "integer")?,
            "source" => s.source = parse_num(origin, &key, &value, "integer")?,
            _ => return Err(key_err(origin, &key, "unknown key")),
        }
    }

    validate(&cfg, origin)?;
    Ok(cfg)
}

fn check(origin: &Path, key: &str, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(key_err(origin, key, what))
    }
}

fn validate(cfg: &RunConfig, origin: &Path) -> Result<()> {
    let c = |key, ok, what| check(origin, key, ok, what);
    c("alphabet_size", (1..=26).contains(&cfg.alphabet_size), "must lie in 1..=26")?;
    c("feature_dim", cfg.feature_dim >= 1, "must be at least 1")?;
    c("frames_per_label", cfg.frames_per_label >= 1, "must be at least 1")?;
    c("emit_noise", cfg.emit_noise.is_finite() && cfg.emit_noise >= 0.0, "must be finite and non-negative")?;
    c(
        "emit_noise_max",
        cfg.emit_noise_max.is_finite() && cfg.emit_noise_max >= cfg.emit_noise,
        "must be finite and at least emit_noise",
    )?;
    c("train_utts", cfg.train_utts >= 1, "must be at least 1")?;
    c("test_utts", cfg.test_utts >= 1, "must be at least 1")?;
    c("len_min", cfg.len_min >= 1, "must be at least 1")?;
    c("len_max", cfg.len_max >= cfg.len_min, "must be at least len_min")?;
    for (i, s) in cfg.streams.iter().enumerate() {
        let key = |f: &str| format!("stream{}_{f}", i + 1);
        check(origin, &key("subsample"), matches!(s.subsample, 1 | 2 | 4), "must be 1, 2, or 4")?;
        check(origin, &key("layers"), (1..=4).contains(&s.layers), "must lie in 1..=4")?;
        check(origin, &key("source"), matches!(s.source, 1 | 2), "must be 1 or 2")?;
        if s.kind == EncoderKind::ConvRecurrent {
            check(
                origin,
                &key("subsample"),
                s.subsample == 4,
                "must be 4 for conv_recurrent (the front end fixes it)",
            )?;
        }
    }
    c("encoder_cells", cfg.encoder_cells >= 1, "must be at least 1")?;
    if let Some(p) = cfg.encoder_projection {
        c("encoder_projection", p >= 1, "must be at least 1 (or `none`)")?;
    }
    c("attention_dim", cfg.attention_dim >= 1, "must be at least 1")?;
    c("decoder_cells", cfg.decoder_cells >= 1, "must be at least 1")?;
    c("embed_dim", cfg.embed_dim >= 1, "must be at least 1")?;
    c("label_smoothing", (0.0..1.0).contains(&cfg.label_smoothing), "must lie in [0, 1)")?;
    c("lambda_train", (0.0..=1.0).contains(&cfg.lambda_train), "must lie in [0, 1]")?;
    c("batch_size", cfg.batch_size >= 1, "must be at least 1")?;
    c("epochs", cfg.epochs >= 1, "must be at least 1")?;
    c(
        "augment_prob",
        (0.0..=1.0).contains(&cfg.augment_prob),
        "must lie in [0, 1]",
    )?;
    c(
        "augment_sigma",
        cfg.augment_sigma.is_finite() && cfg.augment_sigma >= 0.0,
        "must be a finite non-negative number",
    )?;
    c("adadelta_rho", (0.0..1.0).contains(&cfg.adadelta_rho), "must lie in [0, 1)")?;
    c("adadelta_eps", cfg.adadelta_eps.is_finite() && cfg.adadelta_eps > 0.0, "must be positive")?;
    c("clip_norm", cfg.clip_norm.is_finite() && cfg.clip_norm > 0.0, "must be positive")?;
    c("lm_embed", cfg.lm_embed >= 1, "must be at least 1")?;
    c("lm_hidden", cfg.lm_hidden >= 1, "must be at least 1")?;
    c("lm_epochs", cfg.lm_epochs >= 1, "must be at least 1")?;
    c("beam_width", cfg.beam_width >= 1, "must be at least 1")?;
    c("lambda_decode", (0.0..=1.0).contains(&cfg.lambda_decode), "must lie in [0, 1]")?;
    c("lm_weight", cfg.lm_weight.is_finite() && cfg.lm_weight >= 0.0, "must be finite and non-negative")?;
    c("max_len_ratio", cfg.max_len_ratio.is_finite() && cfg.max_len_ratio > 0.0, "must be positive")?;
    c("nbest", cfg.nbest >= 1, "must be at least 1")?;
    Ok(())
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

fn kind_name(k: EncoderKind) -> &'static str {
    match k {
        EncoderKind::Recurrent => "recurrent",
        EncoderKind::ConvRecurrent => "conv_recurrent",
    }
}

/// Renders the fully-resolved config. Reparsing the result reproduces the
/// config exactly; floats print in shortest round-trip form.
pub fn echo(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(w, "seed = {}", cfg.seed);
    let _ = writeln!(w, "alphabet_size = {}", cfg.alphabet_size);
    let _ = writeln!(w, "feature_dim = {}", cfg.feature_dim);
    let _ = writeln!(w, "frames_per_label = {}", cfg.frames_per_label);
    let _ = writeln!(w, "emit_noise = {}", cfg.emit_noise);
    let _ = writeln!(w, "emit_noise_max = {}", cfg.emit_noise_max);
    let _ = writeln!(w, "train_utts = {}", cfg.train_utts);
    let _ = writeln!(w, "test_utts = {}", cfg.test_utts);
    let _ = writeln!(w, "len_min = {}", cfg.len_min);
    let _ = writeln!(w, "len_max = {}", cfg.len_max);
    let _ = writeln!(w, "streams = {}", cfg.streams.len());
    for (i, st) in cfg.streams.iter().enumerate() {
        let k = i + 1;
        let _ = writeln!(w, "stream{k}_kind = {}", kind_name(st.kind));
        let _ = writeln!(w, "stream{k}_subsample = {}", st.subsample);
        let _ = writeln!(w, "stream{k}_layers = {}", st.layers);
        let _ = writeln!(w, "stream{k}_source = {}", st.source);
    }
    let _ = writeln!(w, "encoder_cells = {}", cfg.encoder_cells);
    let _ = match cfg.encoder_projection {
        None => writeln!(w, "encoder_projection = none"),
        Some(p) => writeln!(w, "encoder_projection = {p}"),
    };
    let _ = writeln!(w, "attention_dim = {}", cfg.attention_dim);
    let _ = writeln!(w, "decoder_cells = {}", cfg.decoder_cells);
    let _ = writeln!(w, "embed_dim = {}", cfg.embed_dim);
    let _ = writeln!(
        w,
        "ctc_mode = {}",
        match cfg.ctc_mode {
            CtcMode::PerEncoder => "per_encoder",
            CtcMode::Shared => "shared",
        }
    );
    let _ = writeln!(
        w,
        "han = {}",
        match cfg.han {
            HanMode::Learned => "learned",
            HanMode::Fixed => "fixed",
        }
    );
    let _ = writeln!(w, "label_smoothing = {}", cfg.label_smoothing);
    let _ = writeln!(w, "lambda_train = {}", cfg.lambda_train);
    let _ = writeln!(w, "batch_size = {}", cfg.batch_size);
    let _ = writeln!(w, "epochs = {}", cfg.epochs);
    let _ = writeln!(w, "augment_prob = {}", cfg.augment_prob);
    let _ = writeln!(w, "augment_sigma = {}", cfg.augment_sigma);
    let _ = writeln!(w, "adadelta_rho = {}", cfg.adadelta_rho);
    let _ = writeln!(w, "adadelta_eps = {}", cfg.adadelta_eps);
    let _ = writeln!(w, "clip_norm = {}", cfg.clip_norm);
    let _ = writeln!(w, "lm_embed = {}", cfg.lm_embed);
    let _ = writeln!(w, "lm_hidden = {}", cfg.lm_hidden);
    let _ = writeln!(w, "lm_epochs = {}", cfg.lm_epochs);
    let _ = writeln!(w, "beam_width = {}", cfg.beam_width);
    let _ = writeln!(w, "lambda_decode = {}", cfg.lambda_decode);
    let _ = writeln!(w, "lm_weight = {}", cfg.lm_weight);
    let _ = writeln!(w, "max_len_ratio = {}", cfg.max_len_ratio);
    let _ = writeln!(w, "nbest = {}", cfg.nbest);
    s
}

impl RunConfig {
    pub fn model_hyper(&self) -> ModelHyper {
        ModelHyper {
            alphabet_size: self.alphabet_size,
            streams: self
                .streams
                .iter()
                .map(|s| StreamSpec {
                    kind: s.kind,
                    subsample: s.subsample,
                    layers: s.layers,
                    source: s.source - 1,
                    input_dim: self.feature_dim,
                })
                .collect(),
            encoder_cells: self.encoder_cells,
            encoder_projection: self.encoder_projection,
            attention_dim: self.attention_dim,
            decoder_cells: self.decoder_cells,
            embed_dim: self.embed_dim,
            shared_ctc: self.ctc_mode == CtcMode::Shared,
            fixed_stream_weights: self.han == HanMode::Fixed,
            label_smoothing: self.label_smoothing,
        }
    }

    pub fn task_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            alphabet_size: self.alphabet_size,
            feature_dim: self.feature_dim,
            frames_per_label: self.frames_per_label,
            emit_noise: self.emit_noise,
            emit_noise_max: self.emit_noise_max,
            seed: self.seed,
        }
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            width: self.beam_width,
            lambda: self.lambda_decode,
            gamma: self.lm_weight,
            max_len_ratio: self.max_len_ratio,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lambda: self.lambda_train,
            shuffle_seed: self.seed,
        }
    }
}
