//! Error-rate metrics and attention diagnostics: alignment counts, corpus
//! error rates, and plain-text attention dumps with the stream-weight
//! shift statistic computed from them.

use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Alignment statistics of one reference/hypothesis pair. The operation
/// counts always recompose: S + I + D = distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    fn plus(mut self, s: usize, i: usize, d: usize) -> EditCounts {
        self.distance += s + i + d;
        self.substitutions += s;
        self.insertions += i;
        self.deletions += d;
        self
    }
}

/// Unit-cost Levenshtein alignment from `reference` to `hypothesis`:
/// insertions are extra hypothesis symbols, deletions are lost reference
/// symbols. Ties prefer substitution, then deletion, so the decomposition
/// is deterministic.
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    let mut dp = vec![EditCounts::default(); (n + 1) * (m + 1)];
    for i in 1..=n {
        dp[idx(i, 0)] = dp[idx(i - 1, 0)].plus(0, 0, 1);
    }
    for j in 1..=m {
        dp[idx(0, j)] = dp[idx(0, j - 1)].plus(0, 1, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            dp[idx(i, j)] = if reference[i - 1] == hypothesis[j - 1] {
                dp[idx(i - 1, j - 1)]
            } else {
                let sub = dp[idx(i - 1, j - 1)].plus(1, 0, 0);
                let del = dp[idx(i - 1, j)].plus(0, 0, 1);
                let ins = dp[idx(i, j - 1)].plus(0, 1, 0);
                let mut best = sub;
                if del.distance < best.distance {
                    best = del;
                }
                if ins.distance < best.distance {
                    best = ins;
                }
                best
            };
        }
    }
    dp[idx(n, m)]
}

/// Corpus error rate: 100 × Σ distance / Σ reference length, joined by
/// utterance id. Every reference needs a hypothesis and vice versa.
pub fn error_rate(refs: &[(String, Vec<usize>)], hyps: &[(String, Vec<usize>)]) -> Result<f64> {
    let mut by_id: BTreeMap<&str, &[usize]> = hyps
        .iter()
        .map(|(id, l)| (id.as_str(), l.as_slice()))
        .collect();
    if by_id.len() != hyps.len() {
        return Err(Error::Join("duplicate utt-id among hypotheses".into()));
    }
    let mut dist = 0usize;
    let mut ref_len = 0usize;
    for (id, r) in refs {
        let h = by_id
            .remove(id.as_str())
            .ok_or_else(|| Error::Join(format!("no hypothesis for utterance {:?}", id)))?;
        dist += edit_distance(r, h).distance;
        ref_len += r.len();
    }
    if let Some((id, _)) = by_id.iter().next() {
        return Err(Error::Join(format!("no reference for utterance {:?}", id)));
    }
    if ref_len == 0 {
        return Err(Error::Numeric("reference corpus has no symbols".into()));
    }
    Ok(100.0 * dist as f64 / ref_len as f64)
}

/// Attention record of one decoded utterance: per stream an L × T'ᵢ
/// frame-attention matrix and one L × N stream-weight matrix, L being the
/// number of decoder steps. Every row sums to 1 ± 1e-6.
#[derive(Clone, Debug, PartialEq)]
pub struct UttAlignment {
    pub utt_id: String,
    /// Indexed stream, then decoder step.
    pub frame_attention: Vec<Vec<Vec<f64>>>,
    /// Indexed decoder step.
    pub stream_attention: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignmentDump {
    pub utts: Vec<UttAlignment>,
}

fn check_row(row: &[f64], what: &str, utt: &str) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Numeric(format!(
            "{}: {} row sums to {}, not 1",
            utt, what, sum
        )));
    }
    Ok(())
}

impl UttAlignment {
    /// Builds the per-stream matrices from decode-order rows (step-major,
    /// as the search records them) and checks the row-sum invariant.
    pub fn from_steps(
        utt_id: &str,
        frame_steps: &[Vec<Vec<f64>>],
        stream_steps: &[Vec<f64>],
    ) -> Result<UttAlignment> {
        if frame_steps.len() != stream_steps.len() {
            return Err(Error::Numeric(format!(
                "{}: {} frame-attention steps but {} stream-weight steps",
                utt_id,
                frame_steps.len(),
                stream_steps.len()
            )));
        }
        let n_streams = frame_steps.first().map_or(0, |s| s.len());
        let mut frame_attention = vec![Vec::with_capacity(frame_steps.len()); n_streams];
        for step in frame_steps {
            assert_eq!(step.len(), n_streams, "ragged stream count");
            for (i, row) in step.iter().enumerate() {
                frame_attention[i].push(row.clone());
            }
        }
        let out = UttAlignment {
            utt_id: utt_id.to_string(),
            frame_attention,
            stream_attention: stream_steps.to_vec(),
        };
        out.check()?;
        Ok(out)
    }

    pub fn labels(&self) -> usize {
        self.stream_attention.len()
    }

    fn check(&self) -> Result<()> {
        for (i, mat) in self.frame_attention.iter().enumerate() {
            if mat.len() != self.labels() {
                return Err(Error::Numeric(format!(
                    "{}: stream {} has {} rows, expected {}",
                    self.utt_id,
                    i + 1,
                    mat.len(),
                    self.labels()
                )));
            }
            for row in mat {
                check_row(row, "frame-attention", &self.utt_id)?;
            }
        }
        for row in &self.stream_attention {
            check_row(row, "stream-weight", &self.utt_id)?;
        }
        Ok(())
    }
}

/// Serializes a dump as diff-able text, one block per utterance:
///
/// ```text
/// utt <id> streams <N> labels <L>
/// stream <i> frames <T>
/// <L weight rows>
/// weights
/// <L weight rows>
/// ```
///
/// Values print in shortest round-trip form, so read(write(d)) == d.
pub fn format_alignment_dump(dump: &AlignmentDump) -> Result<String> {
    let mut out = String::new();
    for utt in &dump.utts {
        utt.check()?;
        writeln!(
            out,
            "utt {} streams {} labels {}",
            utt.utt_id,
            utt.frame_attention.len(),
            utt.labels()
        )
        .unwrap();
        for (i, mat) in utt.frame_attention.iter().enumerate() {
            let frames = mat.first().map_or(0, Vec::len);
            writeln!(out, "stream {} frames {}", i + 1, frames).unwrap();
            for row in mat {
                writeln!(out, "{}", join_row(row)).unwrap();
            }
        }
        writeln!(out, "weights").unwrap();
        for row in &utt.stream_attention {
            writeln!(out, "{}", join_row(row)).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

fn join_row(row: &[f64]) -> String {
    row.iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_alignment_dump(path: &Path, dump: &AlignmentDump) -> Result<()> {
    std::fs::write(path, format_alignment_dump(dump)?).map_err(|e| Error::io(path, e))
}

pub fn parse_alignment_dump(text: &str, origin: &Path) -> Result<AlignmentDump> {
    let bad = |m: String| Error::format(origin, m);
    let mut lines = text.lines().peekable();
    let mut utts = Vec::new();
    while let Some(line) = lines.next() {
        if line.is_empty() {
            continue;
        }
        let head: Vec<&str> = line.split_whitespace().collect();
        if head.len() != 6 || head[0] != "utt" || head[2] != "streams" || head[4] != "labels" {
            return Err(bad(format!("bad utterance header {:?}", line)));
        }
        let utt_id = head[1].to_string();
        let n_streams: usize = head[3].parse().map_err(|_| bad(format!("bad stream count in {:?}", line)))?;
        let n_labels: usize = head[5].parse().map_err(|_| bad(format!("bad label count in {:?}", line)))?;
        let mut frame_attention = Vec::with_capacity(n_streams);
        for i in 0..n_streams {
            let hdr = lines
                .next()
                .ok_or_else(|| bad("dump ends before a stream block".into()))?;
            let parts: Vec<&str> = hdr.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "stream" || parts[2] != "frames" {
                return Err(bad(format!("bad stream header {:?}", hdr)));
            }
            if parts[1] != (i + 1).to_string() {
                return Err(bad(format!("stream blocks out of order at {:?}", hdr)));
            }
            let frames: usize = parts[3].parse().map_err(|_| bad(format!("bad frame count {:?}", hdr)))?;
            let mut mat = Vec::with_capacity(n_labels);
            for _ in 0..n_labels {
                mat.push(parse_row(&mut lines, frames, origin)?);
            }
            frame_attention.push(mat);
        }
        match lines.next() {
            Some("weights") => {}
            other => return Err(bad(format!("expected weights block, found {:?}", other))),
        }
        let mut stream_attention = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            stream_attention.push(parse_row(&mut lines, n_streams, origin)?);
        }
        let utt = UttAlignment {
            utt_id,
            frame_attention,
            stream_attention,
        };
        utt.check()?;
        utts.push(utt);
    }
    Ok(AlignmentDump { utts })
}

fn parse_row<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
    expect: usize,
    origin: &Path,
) -> Result<Vec<f64>> {
    let l = lines
        .next()
        .ok_or_else(|| Error::format(origin, "dump ends inside a matrix"))?;
    let vals: Vec<f64> = l
        .split_whitespace()
        .map(|v| {
            v.parse()
                .map_err(|_| Error::format(origin, format!("bad weight {:?}", v)))
        })
        .collect::<Result<_>>()?;
    if vals.len() != expect {
        return Err(Error::format(
            origin,
            format!("row has {} values, expected {}", vals.len(), expect),
        ));
    }
    Ok(vals)
}

pub fn read_alignment_dump(path: &Path) -> Result<AlignmentDump> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alignment_dump(&text, path)
}

/// Mean stream-weight movement between two decodes of the same utterances.
#[derive(Clone, Copy, Debug)]
pub struct ShiftReport {
    /// Mean over every (utterance, decoder step) pair of
    /// corrupt β⁽ⁱ⁾ − clean β⁽ⁱ⁾.
    pub mean_delta: f64,
    /// Utterances whose two decodes emitted different label counts; their
    /// comparison used the shorter prefix.
    pub truncated_utts: usize,
}

/// Compares stream `stream`'s weight between a clean and a corrupted
/// decode, joined by utterance id.
pub fn stream_attention_shift(
    clean: &AlignmentDump,
    corrupt: &AlignmentDump,
    stream: usize,
) -> Result<ShiftReport> {
    let mut by_id: BTreeMap<&str, &UttAlignment> = corrupt
        .utts
        .iter()
        .map(|u| (u.utt_id.as_str(), u))
        .collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut truncated = 0usize;
    for cu in &clean.utts {
        let xu = by_id
            .remove(cu.utt_id.as_str())
            .ok_or_else(|| Error::Join(format!("no corrupted decode for {:?}", cu.utt_id)))?;
        let steps = cu.labels().min(xu.labels());
        if cu.labels() != xu.labels() {
            truncated += 1;
        }
        for l in 0..steps {
            let (a, b) = (&cu.stream_attention[l], &xu.stream_attention[l]);
            if stream >= a.len() || stream >= b.len() {
                return Err(Error::Numeric(format!(
                    "{}: stream {} out of range for {} streams",
                    cu.utt_id,
                    stream + 1,
                    a.len().min(b.len())
                )));
            }
            sum += b[stream] - a[stream];
            count += 1;
        }
    }
    if let Some((id, _)) = by_id.iter().next() {
        return Err(Error::Join(format!("no clean decode for {:?}", id)));
    }
    if count == 0 {
        return Err(Error::Numeric("no comparable decoder steps".into()));
    }
    Ok(ShiftReport {
        mean_delta: sum / count as f64,
        truncated_utts: truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn counts(d: usize, s: usize, i: usize, del: usize) -> EditCounts {
        EditCounts {
            distance: d,
            substitutions: s,
            insertions: i,
            deletions: del,
        }
    }

    #[test]
    fn alignment_count_examples() {
        assert_eq!(edit_distance(&[0, 1, 2], &[0, 1, 2]), counts(0, 0, 0, 0));
        assert_eq!(edit_distance(&[0, 1, 2], &[0, 9, 2]), counts(1, 1, 0, 0));
        assert_eq!(edit_distance(&[0, 1], &[]), counts(2, 0, 0, 2));
        assert_eq!(edit_distance(&[], &[0, 1]), counts(2, 0, 2, 0));
        assert_eq!(edit_distance(&[], &[]), counts(0, 0, 0, 0));
        // Mixed-operation pair: several optimal decompositions exist, but
        // the distance and the recomposition law hold for whichever the
        // tie-break picks.
        let mixed = edit_distance(&[0, 1, 2], &[1, 9, 7]);
        assert_eq!(mixed.distance, 3);
        assert_eq!(
            mixed.substitutions + mixed.insertions + mixed.deletions,
            mixed.distance
        );
    }

    fn oracle(r: &[usize], h: &[usize]) -> usize {
        fn go(
            r: &[usize],
            h: &[usize],
            i: usize,
            j: usize,
            memo: &mut HashMap<(usize, usize), usize>,
        ) -> usize {
            if i == r.len() {
                return h.len() - j;
            }
            if j == h.len() {
                return r.len() - i;
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let v = if r[i] == h[j] {
                go(r, h, i + 1, j + 1, memo)
            } else {
                1 + go(r, h, i + 1, j + 1, memo)
                    .min(go(r, h, i + 1, j, memo))
                    .min(go(r, h, i, j + 1, memo))
            };
            memo.insert((i, j), v);
            v
        }
        go(r, h, 0, 0, &mut HashMap::new())
    }

    proptest! {
        #[test]
        fn matches_the_recursive_definition(
            r in proptest::collection::vec(0usize..4, 0..=6),
            h in proptest::collection::vec(0usize..4, 0..=6),
        ) {
            prop_assert_eq!(edit_distance(&r, &h).distance, oracle(&r, &h));
        }

        #[test]
        fn operation_counts_recompose(
            r in proptest::collection::vec(0usize..4, 0..=8),
            h in proptest::collection::vec(0usize..4, 0..=8),
        ) {
            let fwd = edit_distance(&r, &h);
            prop_assert_eq!(
                fwd.substitutions + fwd.insertions + fwd.deletions,
                fwd.distance
            );
            // Distance is symmetric; the decomposition need not be, since
            // optimal alignments are not unique.
            prop_assert_eq!(fwd.distance, edit_distance(&h, &r).distance);
            // Length bookkeeping: insertions and deletions absorb exactly
            // the length gap.
            let gap = h.len() as i64 - r.len() as i64;
            prop_assert_eq!(fwd.insertions as i64 - fwd.deletions as i64, gap);
        }

        #[test]
        fn distance_is_a_metric(
            a in proptest::collection::vec(0usize..3, 0..=5),
            b in proptest::collection::vec(0usize..3, 0..=5),
            c in proptest::collection::vec(0usize..3, 0..=5),
        ) {
            prop_assert_eq!(edit_distance(&a, &a).distance, 0);
            let ab = edit_distance(&a, &b).distance;
            let bc = edit_distance(&b, &c).distance;
            let ac = edit_distance(&a, &c).distance;
            prop_assert!(ac <= ab + bc);
            if a != b {
                prop_assert!(ab > 0);
            }
        }
    }

    fn seqs(pairs: &[(&str, Vec<usize>)]) -> Vec<(String, Vec<usize>)> {
        pairs
            .iter()
            .map(|(id, l)| (id.to_string(), l.clone()))
            .collect()
    }

    #[test]
    fn corpus_rates_follow_the_hand_count() {
        let refs = seqs(&[("utt-0", vec![0, 1, 2]), ("utt-1", vec![0, 1])]);
        let perfect = refs.clone();
        assert_eq!(error_rate(&refs, &perfect).unwrap(), 0.0);

        let empty = seqs(&[("utt-0", vec![]), ("utt-1", vec![])]);
        assert_eq!(error_rate(&refs, &empty).unwrap(), 100.0);

        // One substitution over five reference symbols.
        let hyps = seqs(&[("utt-0", vec![0, 9, 2]), ("utt-1", vec![0, 1])]);
        assert_eq!(error_rate(&refs, &hyps).unwrap(), 20.0);

        // Join errors go both ways; order does not matter.
        let missing = seqs(&[("utt-0", vec![0, 1, 2])]);
        assert!(matches!(error_rate(&refs, &missing), Err(Error::Join(_))));
        let extra = seqs(&[
            ("utt-1", vec![0, 1]),
            ("utt-0", vec![0, 1, 2]),
            ("utt-9", vec![0]),
        ]);
        assert!(matches!(error_rate(&refs, &extra), Err(Error::Join(_))));

        let hollow = seqs(&[("utt-0", vec![])]);
        assert!(matches!(
            error_rate(&hollow, &seqs(&[("utt-0", vec![])])),
            Err(Error::Numeric(_))
        ));
    }

    fn two_stream_utt(id: &str, beta2: f64, steps: usize) -> UttAlignment {
        let frame_steps: Vec<Vec<Vec<f64>>> =
            (0..steps).map(|_| vec![vec![0.25; 4], vec![0.5; 2]]).collect();
        let stream_steps: Vec<Vec<f64>> =
            (0..steps).map(|_| vec![1.0 - beta2, beta2]).collect();
        UttAlignment::from_steps(id, &frame_steps, &stream_steps).unwrap()
    }

    #[test]
    fn step_major_records_transpose_into_per_stream_matrices() {
        let utt = two_stream_utt("utt-0", 0.4, 3);
        assert_eq!(utt.frame_attention.len(), 2);
        assert_eq!(utt.frame_attention[0].len(), 3);
        assert_eq!(utt.frame_attention[0][1], vec![0.25; 4]);
        assert_eq!(utt.frame_attention[1][2], vec![0.5; 2]);
        assert_eq!(utt.labels(), 3);
    }

    #[test]
    fn malformed_rows_are_rejected_at_construction() {
        let bad = UttAlignment::from_steps(
            "utt-0",
            &[vec![vec![0.3, 0.3], vec![1.0]]],
            &[vec![0.5, 0.5]],
        );
        assert!(matches!(bad, Err(Error::Numeric(_))));
        let ragged = UttAlignment::from_steps("utt-0", &[], &[vec![1.0]]);
        assert!(matches!(ragged, Err(Error::Numeric(_))));
    }

    #[test]
    fn dump_text_round_trips_exactly() {
        let dump = AlignmentDump {
            utts: vec![
                two_stream_utt("utt-0", 1.0 / 3.0, 2),
                two_stream_utt("utt-1", 0.25, 1),
            ],
        };
        let text = format_alignment_dump(&dump).unwrap();
        let back = parse_alignment_dump(&text, Path::new("mem")).unwrap();
        assert_eq!(back, dump);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attn.txt");
        write_alignment_dump(&path, &dump).unwrap();
        assert_eq!(read_alignment_dump(&path).unwrap(), dump);
    }

    #[test]
    fn dump_blocks_use_the_documented_layout() {
        let utt = UttAlignment::from_steps(
            "utt-3",
            &[vec![vec![0.5, 0.5]]],
            &[vec![1.0]],
        )
        .unwrap();
        let text = format_alignment_dump(&AlignmentDump { utts: vec![utt] }).unwrap();
        assert_eq!(
            text,
            "utt utt-3 streams 1 labels 1\nstream 1 frames 2\n0.5 0.5\nweights\n1\n\n"
        );
    }

    #[test]
    fn unparsable_dumps_are_refused() {
        let p = Path::new("mem");
        assert!(parse_alignment_dump("utt x streams two labels 1\n", p).is_err());
        assert!(parse_alignment_dump("utt x streams 1 labels 1\nstream 1 frames 2\n0.9 0.2\nweights\n1\n", p).is_err());
        assert!(parse_alignment_dump("utt x streams 1 labels 1\nstream 1 frames 2\n0.5 0.5\n", p).is_err());
        assert!(parse_alignment_dump("utt x streams 1 labels 1\nstream 2 frames 1\n1\nweights\n1\n", p).is_err());
    }

    #[test]
    fn identical_dumps_shift_nothing() {
        let dump = AlignmentDump {
            utts: vec![two_stream_utt("utt-0", 0.4, 2)],
        };
        let report = stream_attention_shift(&dump, &dump, 1).unwrap();
        assert_eq!(report.mean_delta, 0.0);
        assert_eq!(report.truncated_utts, 0);
    }

    #[test]
    fn a_uniform_weight_move_reports_its_size() {
        let clean = AlignmentDump {
            utts: vec![two_stream_utt("utt-0", 0.4, 2), two_stream_utt("utt-1", 0.4, 3)],
        };
        let corrupt = AlignmentDump {
            utts: vec![two_stream_utt("utt-0", 0.6, 2), two_stream_utt("utt-1", 0.6, 3)],
        };
        let report = stream_attention_shift(&clean, &corrupt, 1).unwrap();
        assert!((report.mean_delta - 0.2).abs() < 1e-12);
        assert_eq!(report.truncated_utts, 0);
        // The complement stream moves the other way.
        let other = stream_attention_shift(&clean, &corrupt, 0).unwrap();
        assert!((other.mean_delta + 0.2).abs() < 1e-12);
    }

    #[test]
    fn length_mismatches_truncate_and_get_flagged() {
        let clean = AlignmentDump {
            utts: vec![two_stream_utt("utt-0", 0.4, 3)],
        };
        let corrupt = AlignmentDump {
            utts: vec![two_stream_utt("utt-0", 0.5, 2)],
        };
        let report = stream_attention_shift(&clean, &corrupt, 1).unwrap();
        assert_eq!(report.truncated_utts, 1);
        assert!((report.mean_delta - 0.1).abs() < 1e-12);
    }

    #[test]
    fn shift_joins_strictly_by_utterance() {
        let clean = AlignmentDump {
            utts: vec![two_stream_utt("utt-0", 0.4, 1)],
        };
        let corrupt = AlignmentDump {
            utts: vec![two_stream_utt("utt-1", 0.4, 1)],
        };
        assert!(matches!(
            stream_attention_shift(&clean, &corrupt, 1),
            Err(Error::Join(_))
        ));
        let same = clean.clone();
        assert!(matches!(
            stream_attention_shift(&clean, &same, 7),
            Err(Error::Numeric(_))
        ));
    }
}
