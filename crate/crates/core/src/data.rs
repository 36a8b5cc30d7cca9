//! Trajectory cleaning, fixed-length windowing, vocabulary and splits.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::roadnet::{RoadNetwork, SegmentId};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const N_SPECIAL: usize = 2;

pub const DEFAULT_L_IN: usize = 8;
pub const DEFAULT_L_OUT: usize = 4;
pub const DEFAULT_STRIDE: usize = 4;
pub const DEFAULT_MAX_SPEED: f64 = 50.0;

/// Bijection between road segments and model tokens. Tokens `0` and `1` are
/// reserved for padding and begin-of-sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    seg_to_token: BTreeMap<SegmentId, usize>,
    token_to_seg: Vec<SegmentId>,
}

impl Vocabulary {
    /// Tokens assigned in ascending segment-id order over every segment that
    /// appears in `seqs`.
    pub fn build<'a>(seqs: impl IntoIterator<Item = &'a Vec<SegmentId>>) -> Self {
        let mut ids: Vec<SegmentId> = seqs.into_iter().flatten().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        Self::from_sorted(ids)
    }

    /// Every segment of the network.
    pub fn from_network(network: &RoadNetwork) -> Self {
        Self::from_sorted(network.segments().iter().map(|s| s.id).collect())
    }

    fn from_sorted(ids: Vec<SegmentId>) -> Self {
        let seg_to_token = ids.iter().enumerate().map(|(i, &s)| (s, i + N_SPECIAL)).collect();
        Self {
            seg_to_token,
            token_to_seg: ids,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.token_to_seg.len() + N_SPECIAL
    }

    pub fn token(&self, seg: SegmentId) -> Option<usize> {
        self.seg_to_token.get(&seg).copied()
    }

    /// `None` for special tokens and out-of-range values.
    pub fn segment(&self, token: usize) -> Option<SegmentId> {
        token
            .checked_sub(N_SPECIAL)
            .and_then(|i| self.token_to_seg.get(i).copied())
    }

    pub fn encode(&self, seq: &[SegmentId]) -> Result<Vec<usize>> {
        seq.iter()
            .map(|&s| self.token(s).ok_or(Error::UnknownSegment(s)))
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<Vec<SegmentId>> {
        tokens
            .iter()
            .map(|&t| self.segment(t).ok_or(Error::UnknownToken(t)))
            .collect()
    }

    /// CSV `segment_id,token`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["segment_id", "token"])?;
        for (s, t) in &self.seg_to_token {
            wr.write_record([s.to_string(), t.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut pairs: Vec<(usize, SegmentId)> = Vec::new();
        for row in rd.deserialize() {
            let (s, t): (u64, usize) = row?;
            pairs.push((t, SegmentId(s)));
        }
        pairs.sort_unstable();
        for (i, (t, _)) in pairs.iter().enumerate() {
            if *t != i + N_SPECIAL {
                return Err(Error::invalid(format!("vocabulary tokens are not contiguous at {t}")));
            }
        }
        let ids: Vec<SegmentId> = pairs.into_iter().map(|(_, s)| s).collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != ids.len() {
            return Err(Error::invalid("vocabulary maps a segment twice"));
        }
        Ok(Self {
            seg_to_token: ids.iter().enumerate().map(|(i, &s)| (s, i + N_SPECIAL)).collect(),
            token_to_seg: ids,
        })
    }
}

/// An input window and the segments that follow it.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    /// Index of the trajectory the window came from.
    pub group: usize,
}

/// Keeps sequences with at least `min_len` segments.
pub fn clean<T: Clone>(trajs: &[Vec<T>], min_len: usize) -> Vec<Vec<T>> {
    trajs.iter().filter(|t| t.len() >= min_len).cloned().collect()
}

/// Windows at offsets `0, stride, 2·stride, …`, each `l_in + l_out` long.
pub fn windows(seq: &[usize], l_in: usize, l_out: usize, stride: usize, group: usize) -> Result<Vec<Sample>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let span = l_in + l_out;
    if seq.len() < span {
        return Ok(Vec::new());
    }
    Ok((0..=seq.len() - span)
        .step_by(stride)
        .map(|o| Sample {
            input: seq[o..o + l_in].to_vec(),
            target: seq[o + l_in..o + span].to_vec(),
            group,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Validation and test sizes are `floor(ratio · n)`; the remainder goes to
/// training.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must sum to 1")));
    }
    if n < 3 {
        return Err(Error::invalid(format!("cannot split {n} samples three ways")));
    }
    let val = (b * n as f64 + 1e-9).floor() as usize;
    let test = (c * n as f64 + 1e-9).floor() as usize;
    Ok((n - val - test, val, test))
}

/// Seeded random partition of `items`.
pub fn split<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<Split<T>> {
    let (_, n_val, n_test) = split_sizes(items.len(), ratios)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok(Split {
        val: pick(&order[..n_val]),
        test: pick(&order[n_val..n_val + n_test]),
        train: pick(&order[n_val + n_test..]),
    })
}

/// Partition by trajectory: every window of one trajectory lands in the same
/// part. Group counts, not sample counts, follow the ratios.
pub fn split_by_group(samples: &[Sample], ratios: (f64, f64, f64), seed: u64) -> Result<Split<Sample>> {
    let mut groups: Vec<usize> = samples.iter().map(|s| s.group).collect();
    groups.sort_unstable();
    groups.dedup();
    let parts = split(&groups, ratios, seed)?;
    let member = |set: &[usize]| {
        let set: std::collections::HashSet<usize> = set.iter().copied().collect();
        samples.iter().filter(|s| set.contains(&s.group)).cloned().collect::<Vec<_>>()
    };
    Ok(Split {
        train: member(&parts.train),
        val: member(&parts.val),
        test: member(&parts.test),
    })
}

/// One sample per line: `input_tokens|target_tokens`, space-separated.
pub fn write_samples(mut w: impl Write, samples: &[Sample]) -> Result<()> {
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    for s in samples {
        writeln!(w, "{}|{}", join(&s.input), join(&s.target))?;
    }
    Ok(())
}

pub fn read_samples(r: impl BufRead) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |part: &str| -> Result<Vec<usize>> {
            part.split_whitespace()
                .map(|t| {
                    t.parse().map_err(|e| Error::Parse {
                        line: i + 1,
                        message: format!("token `{t}`: {e}"),
                    })
                })
                .collect()
        };
        let (a, b) = line.split_once('|').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "missing `|` separator".into(),
        })?;
        out.push(Sample {
            input: parse(a)?,
            target: parse(b)?,
            group: i,
        });
    }
    Ok(out)
}
