//! Stream-reliability studies: noise injection at decode time and a
//! capacity sweep over the second encoder.
//!
//! Both report how the stream-level attention redistributes. The shift
//! study corrupts the first feature view and measures the change in the
//! second stream's weight; the weaken sweep retrains with the second
//! encoder muted, shallow, and deep, and reports that stream's mean weight
//! per setting.

use crate::checkpoint::{self, build_model};
use crate::commands::{attention_dump, best_labels, decode_set, load_set, DecodedUtt, SetItem};
use crate::config::RunConfig;
use mse2e_core::data::corrupt_stream;
use mse2e_core::eval::{error_rate, stream_attention_shift};
use mse2e_core::layers::ParamSet;
use mse2e_core::model::{estimate_unigram, train, AdaDelta, MultiStreamModel};
use mse2e_core::ctc::LabelAlphabet;
use mse2e_core::{Error, Result};
use std::fmt::Write as _;
use std::path::PathBuf;

pub struct ShiftArgs {
    pub model: PathBuf,
    pub lm: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub sigma: f64,
    pub beam: Option<usize>,
}

const SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

/// Per-utterance corruption seed: a fixed mix of the run seed and the
/// utterance's position, so reruns corrupt identically.
fn corruption_seed(run_seed: u64, index: usize) -> u64 {
    run_seed ^ SEED_MIX.wrapping_mul(index as u64 + 1)
}

/// Replaces the first view of every item with a noisy copy.
pub fn corrupt_first_view(items: &[SetItem], sigma: f64, run_seed: u64) -> Vec<SetItem> {
    items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let mut views = it.views.clone();
            views[0] = corrupt_stream(&views[0], sigma, corruption_seed(run_seed, i));
            SetItem { utt_id: it.utt_id.clone(), views, target: it.target.clone() }
        })
        .collect()
}

fn cer_of(items: &[SetItem], decoded: &[DecodedUtt]) -> Result<f64> {
    let refs: Vec<(String, Vec<usize>)> =
        items.iter().map(|it| (it.utt_id.clone(), it.target.clone())).collect();
    let hyps: Vec<(String, Vec<usize>)> =
        decoded.iter().map(|d| (d.utt_id.clone(), best_labels(d))).collect();
    error_rate(&refs, &hyps)
}

pub fn cmd_shift(args: &ShiftArgs) -> Result<()> {
    if !(args.sigma.is_finite() && args.sigma >= 0.0) {
        return Err(Error::Config(format!("sigma must be finite and non-negative, got {}", args.sigma)));
    }
    let (model, ckpt) = checkpoint::load_model(&args.model)?;
    let mut cfg = ckpt.config.clone();
    if let Some(w) = args.beam {
        cfg.beam_width = w;
    }
    let lm = match &args.lm {
        Some(path) => Some(checkpoint::load_lm(path)?.0),
        None => None,
    };

    let clean = load_set(&args.data, "test", &model.alphabet)?;
    let corrupt = corrupt_first_view(&clean, args.sigma, cfg.seed);

    let bc = cfg.beam_config();
    let dec_clean = decode_set(&model, lm.as_ref(), &clean, &bc)?;
    let dec_corrupt = decode_set(&model, lm.as_ref(), &corrupt, &bc)?;

    let mut report = String::new();
    let _ = writeln!(report, "sigma {}", args.sigma);
    let _ = writeln!(report, "utterances {}", clean.len());
    let _ = writeln!(report, "clean_cer {:.6}", cer_of(&clean, &dec_clean)?);
    let _ = writeln!(report, "corrupt_cer {:.6}", cer_of(&corrupt, &dec_corrupt)?);
    if model.num_streams() >= 2 {
        let shift = stream_attention_shift(
            &attention_dump(&dec_clean)?,
            &attention_dump(&dec_corrupt)?,
            1,
        )?;
        let _ = writeln!(report, "mean_beta2_clean {:.6}", mean_beta2(&dec_clean));
        let _ = writeln!(report, "mean_beta2_corrupt {:.6}", mean_beta2(&dec_corrupt));
        let _ = writeln!(report, "mean_beta2_shift {:.6}", shift.mean_delta);
        let _ = writeln!(report, "truncated_utts {}", shift.truncated_utts);
    }

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let path = args.out.join("shift.txt");
    std::fs::write(&path, &report).map_err(|e| Error::io(&path, e))?;
    print!("{report}");
    Ok(())
}

pub struct WeakenArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub seeds: u64,
}

/// Zeroes and freezes one encoder's parameters. An all-zero LSTM stack
/// emits exactly zero at every frame (gates saturate at one half, but the
/// cell and candidate stay zero), so the stream's attention context is the
/// zero vector: the encoder contributes nothing while the rest of the
/// network trains around it.
pub fn mute_encoder(model: &mut MultiStreamModel, stream: usize) {
    let prefix = format!("enc{stream}.");
    model.visit_params_mut(&mut |name, t| {
        if name.starts_with(&prefix) {
            t.data_mut().fill(0.0);
            t.requires_grad = false;
        }
    });
}

pub struct WeakenRow {
    pub layers: usize,
    pub seed: u64,
    pub mean_beta2: f64,
}

/// Mean weight the fusion layer puts on the second stream, over every
/// decode step of every utterance.
pub fn mean_beta2(decoded: &[DecodedUtt]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for d in decoded {
        for row in &d.outcome.nbest[0].stream_attention {
            sum += row[1];
            n += 1;
        }
    }
    sum / n as f64
}

/// Trains one sweep point: `layers` counts the second encoder's recurrent
/// layers, with 0 meaning the encoder is muted outright.
pub fn train_sweep_point(
    base: &RunConfig,
    train_items: &[SetItem],
    layers: usize,
    seed: u64,
) -> Result<MultiStreamModel> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.streams[1].layers = layers.max(1);

    let alphabet = LabelAlphabet::new(cfg.alphabet_size)?;
    let targets: Vec<Vec<usize>> = train_items.iter().map(|it| it.target.clone()).collect();
    let mut model = build_model(&cfg)?;
    model.set_unigram(estimate_unigram(&targets, &alphabet));
    if layers == 0 {
        mute_encoder(&mut model, 1);
    }

    let mut items: Vec<mse2e_core::model::TrainItem> = train_items
        .iter()
        .map(|it| mse2e_core::model::TrainItem {
            utt_id: it.utt_id.clone(),
            inputs: it.views.clone(),
            target: it.target.clone(),
        })
        .collect();
    crate::commands::augment_train_items(&mut items, &cfg);
    let mut opt = AdaDelta::new(cfg.adadelta_rho, cfg.adadelta_eps, cfg.clip_norm);
    train(&mut model, &mut opt, &items, &cfg.train_options())?;
    Ok(model)
}

/// Runs the full sweep and returns one row per (capacity, seed) pair.
pub fn weaken_sweep(
    cfg: &RunConfig,
    train_items: &[SetItem],
    test_items: &[SetItem],
    seeds: u64,
) -> Result<Vec<WeakenRow>> {
    if cfg.streams.len() != 2 {
        return Err(Error::Config(format!(
            "the weaken sweep varies the second of two streams, config has {}",
            cfg.streams.len()
        )));
    }
    let bc = {
        let mut c = cfg.beam_config();
        c.gamma = 0.0; // attention placement, not transcription quality, is under study
        c
    };
    let mut rows = Vec::new();
    for layers in [0usize, 1, 2] {
        for k in 0..seeds {
            let seed = cfg.seed.wrapping_add(k);
            let model = train_sweep_point(cfg, train_items, layers, seed)?;
            let decoded = decode_set(&model, None, test_items, &bc)?;
            rows.push(WeakenRow { layers, seed, mean_beta2: mean_beta2(&decoded) });
        }
    }
    Ok(rows)
}

pub fn cmd_weaken(args: &WeakenArgs) -> Result<()> {
    if args.seeds == 0 {
        return Err(Error::Config("at least one sweep seed is required".into()));
    }
    let ckpt = crate::checkpoint::Checkpoint::read(&args.model)?;
    let cfg = ckpt.config.clone();
    let alphabet = LabelAlphabet::new(cfg.alphabet_size)?;
    let train_items = load_set(&args.data, "train", &alphabet)?;
    let test_items = load_set(&args.data, "test", &alphabet)?;

    let rows = weaken_sweep(&cfg, &train_items, &test_items, args.seeds)?;

    let mut report = String::new();
    for r in &rows {
        let _ = writeln!(report, "layers {} seed {} mean_beta2 {:.6}", r.layers, r.seed, r.mean_beta2);
    }
    for layers in [0usize, 1, 2] {
        let vals: Vec<f64> =
            rows.iter().filter(|r| r.layers == layers).map(|r| r.mean_beta2).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let _ = writeln!(report, "setting {layers} mean_beta2 {mean:.6}");
    }

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let path = args.out.join("weaken.txt");
    std::fs::write(&path, &report).map_err(|e| Error::io(&path, e))?;
    print!("{report}");
    Ok(())
}
