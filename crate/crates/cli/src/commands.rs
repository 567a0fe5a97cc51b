//! The gen / train / decode / score subcommands and their shared plumbing.
//!
//! Every output a command writes is a pure function of its input files and
//! the config, so rerunning a pipeline from the same seed reproduces every
//! artifact byte for byte. Decoding fans out over a worker pool but results
//! are collected in utterance order, which keeps that guarantee.

use crate::checkpoint::{self, snapshot, CkptKind};
use crate::config::{self, RunConfig};
use mse2e_core::data::{
    corrupt_stream, generate_corpus, read_transcripts, write_transcripts, FeatureFile,
};
use mse2e_core::decode::{beam_search, format_nbest_line, BeamConfig, DecodeOutcome};
use mse2e_core::eval::{error_rate, AlignmentDump, UttAlignment};
use mse2e_core::lm::{lm_train, CharLm, LmTrainOptions};
use mse2e_core::model::{estimate_unigram, train, AdaDelta, MultiStreamModel, TrainItem};
use mse2e_core::ctc::LabelAlphabet;
use mse2e_core::numerics::Tensor;
use mse2e_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One utterance ready for training or decoding: both feature views plus
/// the reference labels. `views` is indexed by source id.
pub struct SetItem {
    pub utt_id: String,
    pub views: Vec<Tensor>,
    pub target: Vec<usize>,
}

/// Reads `{set}.stream1.feats`, `{set}.stream2.feats`, and `{set}.text`
/// from a corpus directory and joins them by utterance id. The result is
/// sorted by id.
pub fn load_set(dir: &Path, set: &str, alphabet: &LabelAlphabet) -> Result<Vec<SetItem>> {
    if set != "train" && set != "test" {
        return Err(Error::Config(format!("unknown data set `{set}` (expected train or test)")));
    }
    let f1 = FeatureFile::read(&dir.join(format!("{set}.stream1.feats")))?;
    let f2 = FeatureFile::read(&dir.join(format!("{set}.stream2.feats")))?;
    let text = read_transcripts(&dir.join(format!("{set}.text")), alphabet)?;

    for (file, name) in [(&f1, "stream1"), (&f2, "stream2")] {
        if file.records.len() != text.len() {
            return Err(Error::Join(format!(
                "{set}.{name}.feats has {} utterances, {set}.text has {}",
                file.records.len(),
                text.len()
            )));
        }
    }
    let mut items: Vec<SetItem> = text
        .into_iter()
        .map(|(id, target)| {
            let pick = |f: &FeatureFile, name: &str| {
                f.get(&id).cloned().ok_or_else(|| {
                    Error::Join(format!("{set}.{name}.feats lacks utterance {id}"))
                })
            };
            Ok(SetItem {
                views: vec![pick(&f1, "stream1")?, pick(&f2, "stream2")?],
                target,
                utt_id: id,
            })
        })
        .collect::<Result<_>>()?;
    items.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    Ok(items)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_resolved_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&out.join("config.resolved"), &config::echo(cfg))
}

fn mkdir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

pub fn cmd_gen(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = config::load(config_path)?;
    mkdir(out)?;

    let total = cfg.train_utts + cfg.test_utts;
    let mut corpus = generate_corpus(&cfg.task_spec(), total, cfg.len_min..=cfg.len_max)?;

    // First train_utts records form the training set, the rest the test
    // set; ids stay globally unique across the split.
    let test1 = FeatureFile { records: corpus.stream1.records.split_off(cfg.train_utts) };
    let test2 = FeatureFile { records: corpus.stream2.records.split_off(cfg.train_utts) };
    let test_text = corpus.transcripts.split_off(cfg.train_utts);
    let alphabet = LabelAlphabet::new(cfg.alphabet_size)?;

    corpus.stream1.write(&out.join("train.stream1.feats"))?;
    corpus.stream2.write(&out.join("train.stream2.feats"))?;
    write_transcripts(&out.join("train.text"), &corpus.transcripts, &alphabet)?;
    test1.write(&out.join("test.stream1.feats"))?;
    test2.write(&out.join("test.stream2.feats"))?;
    write_transcripts(&out.join("test.text"), &test_text, &alphabet)?;
    write_resolved_config(out, &cfg)?;

    println!(
        "generated {} train + {} test utterances ({} labels, {} dims) into {}",
        cfg.train_utts,
        cfg.test_utts,
        cfg.alphabet_size,
        cfg.feature_dim,
        out.display()
    );
    Ok(())
}

/// Appends, for a seeded fraction of utterances, a copy with one feature
/// view swapped for a noisy version. The training set then contains
/// clean/degraded pairs of the same utterance, so the fusion layer sees
/// unreliable streams next to reliable ones and learns to weight them
/// down; without this every stream is equally trustworthy at training
/// time and the stream weights never learn to react to noise. Single-view
/// models get the same policy on their only view, which keeps multi- and
/// single-stream runs comparable. Returns how many copies were added.
pub fn augment_train_items(items: &mut Vec<TrainItem>, cfg: &RunConfig) -> usize {
    if cfg.augment_prob <= 0.0 || cfg.augment_sigma <= 0.0 {
        return 0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6175_676d);
    let mut extra = Vec::new();
    for it in items.iter() {
        if rng.gen::<f64>() >= cfg.augment_prob {
            continue;
        }
        let view = rng.gen_range(0..it.inputs.len());
        // Graded noise, not a single level: the stream weights then see the
        // whole path from mild to severe degradation instead of one cliff.
        let sigma = cfg.augment_sigma * rng.gen::<f64>();
        let noise_seed = rng.gen::<u64>();
        let mut inputs = it.inputs.clone();
        inputs[view] = corrupt_stream(&inputs[view], sigma, noise_seed);
        extra.push(TrainItem {
            utt_id: format!("{}#aug", it.utt_id),
            inputs,
            target: it.target.clone(),
        });
    }
    let added = extra.len();
    items.append(&mut extra);
    added
}

pub fn cmd_train(config_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = config::load(config_path)?;
    mkdir(out)?;
    let alphabet = LabelAlphabet::new(cfg.alphabet_size)?;
    let items = load_set(data, "train", &alphabet)?;

    let mut train_items: Vec<TrainItem> = items
        .iter()
        .map(|it| TrainItem {
            utt_id: it.utt_id.clone(),
            inputs: it.views.clone(),
            target: it.target.clone(),
        })
        .collect();
    let augmented = augment_train_items(&mut train_items, &cfg);
    let targets: Vec<Vec<usize>> = items.iter().map(|it| it.target.clone()).collect();

    let mut model = checkpoint::build_model(&cfg)?;
    model.set_unigram(estimate_unigram(&targets, &alphabet));
    let mut opt = AdaDelta::new(cfg.adadelta_rho, cfg.adadelta_eps, cfg.clip_norm);
    let stats = train(&mut model, &mut opt, &train_items, &cfg.train_options())?;

    let mut log = String::new();
    let mut steps = 0u64;
    for s in &stats {
        steps += ((s.utterances + cfg.batch_size - 1) / cfg.batch_size) as u64;
        let _ = writeln!(
            log,
            "epoch {} mean_loss {} utterances {} dropped {} skipped_steps {} infeasible_ctc {}",
            s.epoch + 1,
            s.mean_loss,
            s.utterances,
            s.dropped_utterances,
            s.skipped_steps,
            s.infeasible_ctc
        );
    }
    write_text(&out.join("train.log"), &log)?;
    snapshot(CkptKind::Model, steps, &cfg, &model, Some(&opt)).write(&out.join("model.ckpt"))?;

    let mut lm = checkpoint::build_lm(&cfg)?;
    let mut lm_opt = AdaDelta::new(cfg.adadelta_rho, cfg.adadelta_eps, cfg.clip_norm);
    let lm_opts = LmTrainOptions {
        epochs: cfg.lm_epochs,
        batch_size: cfg.batch_size,
        shuffle_seed: cfg.seed ^ 0x4c4d,
    };
    let lm_stats = lm_train(&mut lm, &mut lm_opt, &targets, &lm_opts)?;
    let mut lm_log = String::new();
    for s in &lm_stats {
        let _ = writeln!(lm_log, "epoch {} mean_nll {}", s.epoch + 1, s.mean_nll);
    }
    write_text(&out.join("lm.log"), &lm_log)?;
    let lm_steps = (cfg.lm_epochs * ((targets.len() + cfg.batch_size - 1) / cfg.batch_size)) as u64;
    snapshot(CkptKind::Lm, lm_steps, &cfg, &lm, Some(&lm_opt)).write(&out.join("lm.ckpt"))?;

    write_resolved_config(out, &cfg)?;

    let last = stats.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} utterances ({augmented} noise-augmented); \
         final mean loss {:.6}; final lm nll {:.6}; wrote {}",
        stats.len(),
        items.len(),
        last.mean_loss,
        lm_stats.last().map(|s| s.mean_nll).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

pub struct DecodeArgs {
    pub model: PathBuf,
    pub lm: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub set: String,
    pub beam: Option<usize>,
    pub ctc_weight: Option<f64>,
    pub lm_weight: Option<f64>,
    pub nbest: Option<usize>,
    pub max_len_ratio: Option<f64>,
    pub dump_attention: bool,
}

pub struct DecodedUtt {
    pub utt_id: String,
    pub outcome: DecodeOutcome,
}

/// Decodes a whole set on the worker pool. Output order follows input
/// order, so results are deterministic regardless of scheduling.
pub fn decode_set(
    model: &MultiStreamModel,
    lm: Option<&CharLm>,
    items: &[SetItem],
    bc: &BeamConfig,
) -> Result<Vec<DecodedUtt>> {
    items
        .par_iter()
        .map(|it| {
            let outcome = beam_search(model, lm, &it.views, bc).map_err(|e| match e {
                // Attach the utterance so a bad record is findable.
                Error::Numeric(m) => Error::Numeric(format!("{}: {m}", it.utt_id)),
                other => other,
            })?;
            Ok(DecodedUtt { utt_id: it.utt_id.clone(), outcome })
        })
        .collect()
}

pub fn best_labels(d: &DecodedUtt) -> Vec<usize> {
    d.outcome.nbest.first().map(|h| h.emitted().to_vec()).unwrap_or_default()
}

pub fn attention_dump(decoded: &[DecodedUtt]) -> Result<AlignmentDump> {
    let utts = decoded
        .iter()
        .map(|d| {
            let best = &d.outcome.nbest[0];
            UttAlignment::from_steps(&d.utt_id, &best.frame_attention, &best.stream_attention)
        })
        .collect::<Result<_>>()?;
    Ok(AlignmentDump { utts })
}

/// Applies command-line overrides on top of the checkpoint's config.
fn apply_overrides(cfg: &mut RunConfig, args: &DecodeArgs) {
    if let Some(w) = args.beam {
        cfg.beam_width = w;
    }
    if let Some(l) = args.ctc_weight {
        cfg.lambda_decode = l;
    }
    if let Some(g) = args.lm_weight {
        cfg.lm_weight = g;
    }
    if let Some(n) = args.nbest {
        cfg.nbest = n;
    }
    if let Some(r) = args.max_len_ratio {
        cfg.max_len_ratio = r;
    }
}

pub fn cmd_decode(args: &DecodeArgs) -> Result<()> {
    let (model, ckpt) = checkpoint::load_model(&args.model)?;
    let mut cfg = ckpt.config.clone();
    apply_overrides(&mut cfg, args);

    let lm = match &args.lm {
        Some(path) => Some(checkpoint::load_lm(path)?.0),
        None => None,
    };
    let items = load_set(&args.data, &args.set, &model.alphabet)?;
    mkdir(&args.out)?;

    let bc = cfg.beam_config();
    let decoded = decode_set(&model, lm.as_ref(), &items, &bc)?;

    let mut nbest = String::new();
    let mut hyps: Vec<(String, Vec<usize>)> = Vec::new();
    for d in &decoded {
        for (i, hyp) in d.outcome.nbest.iter().take(cfg.nbest).enumerate() {
            nbest.push_str(&format_nbest_line(&d.utt_id, i + 1, hyp, &model.alphabet));
            nbest.push('\n');
        }
        hyps.push((d.utt_id.clone(), best_labels(d)));
    }
    write_text(&args.out.join("nbest.txt"), &nbest)?;
    write_transcripts(&args.out.join("hyp.text"), &hyps, &model.alphabet)?;
    if args.dump_attention {
        mse2e_core::eval::write_alignment_dump(&args.out.join("attention.txt"), &attention_dump(&decoded)?)?;
    }
    write_resolved_config(&args.out, &cfg)?;

    let gap = decoded.iter().map(|d| d.outcome.norm_gap).fold(0.0, f64::max);
    let capped = decoded.iter().filter(|d| d.outcome.fallback_unfinished).count();
    if capped > 0 {
        eprintln!("warning: {capped} utterances hit the length cap with no finished hypothesis");
    }
    println!(
        "decoded {} {} utterances (beam {}, ctc weight {}, lm weight {}); max distribution gap {:.3e}",
        decoded.len(),
        args.set,
        cfg.beam_width,
        cfg.lambda_decode,
        if lm.is_some() { cfg.lm_weight } else { 0.0 },
        gap
    );
    Ok(())
}

/// Error-rate report over two transcript files. The percentage comes from
/// the same routine the tests pin down; the operation counts are summed
/// over the per-utterance alignments.
pub fn score_report(ref_path: &Path, hyp_path: &Path) -> Result<String> {
    // Scoring is alphabet-agnostic: accept any a-z label.
    let alphabet = LabelAlphabet::new(26)?;
    let refs = read_transcripts(ref_path, &alphabet)?;
    let hyps = read_transcripts(hyp_path, &alphabet)?;
    let rate = error_rate(&refs, &hyps)?;

    let by_id: std::collections::BTreeMap<&str, &[usize]> =
        hyps.iter().map(|(id, l)| (id.as_str(), l.as_slice())).collect();
    let (mut symbols, mut dist, mut subs, mut ins, mut dels) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (id, r) in &refs {
        let counts = mse2e_core::eval::edit_distance(r, by_id[id.as_str()]);
        symbols += r.len();
        dist += counts.distance;
        subs += counts.substitutions;
        ins += counts.insertions;
        dels += counts.deletions;
    }

    let mut s = String::new();
    let _ = writeln!(s, "utterances {}", refs.len());
    let _ = writeln!(s, "reference_symbols {symbols}");
    let _ = writeln!(s, "distance {dist}");
    let _ = writeln!(s, "substitutions {subs}");
    let _ = writeln!(s, "insertions {ins}");
    let _ = writeln!(s, "deletions {dels}");
    let _ = writeln!(s, "error_rate {rate:.6}%");
    Ok(s)
}
