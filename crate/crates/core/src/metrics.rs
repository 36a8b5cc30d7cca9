//! Distance Error and Average Match Rate over predicted segment sequences.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (diag + usize::from(x != y)).min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[b.len()]
}

/// Truncates to `l_out`, padding short predictions with `None`, which never
/// matches a target.
pub fn fit_length(pred: &[usize], l_out: usize) -> Vec<Option<usize>> {
    (0..l_out).map(|i| pred.get(i).copied()).collect()
}

fn check(preds: &[Vec<usize>], targets: &[Vec<usize>], l_out: usize) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    if preds.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if l_out == 0 || targets.iter().any(|t| t.len() != l_out) {
        return Err(Error::invalid(format!("every target must have length {l_out} > 0")));
    }
    Ok(())
}

/// Mean edit distance per output position.
pub fn distance_error(preds: &[Vec<usize>], targets: &[Vec<usize>], l_out: usize) -> Result<f64> {
    check(preds, targets, l_out)?;
    let total: usize = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let t: Vec<Option<usize>> = t.iter().copied().map(Some).collect();
            edit_distance(&fit_length(p, l_out), &t)
        })
        .sum();
    Ok(total as f64 / (preds.len() * l_out) as f64)
}

/// Fraction of positions `1..=l_out` where prediction equals target.
pub fn per_position_match(preds: &[Vec<usize>], targets: &[Vec<usize>], l_out: usize) -> Result<Vec<f64>> {
    check(preds, targets, l_out)?;
    let mut hits = vec![0usize; l_out];
    for (p, t) in preds.iter().zip(targets) {
        for (k, (a, b)) in fit_length(p, l_out).iter().zip(t).enumerate() {
            hits[k] += usize::from(*a == Some(*b));
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / preds.len() as f64).collect())
}

pub fn average_match_rate(preds: &[Vec<usize>], targets: &[Vec<usize>], l_out: usize) -> Result<f64> {
    check(preds, targets, l_out)?;
    let hits: usize = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| fit_length(p, l_out).iter().zip(t).filter(|(a, b)| **a == Some(**b)).count())
        .sum();
    Ok(hits as f64 / (preds.len() * l_out) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixScore {
    pub l_out: usize,
    pub de: f64,
    pub amr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub de: f64,
    pub amr: f64,
    pub n_samples: usize,
    pub l_out: usize,
    pub per_position_match: Vec<f64>,
    /// Scores of the first `k` predicted positions for `k = 1..=l_out`.
    pub per_length: Vec<PrefixScore>,
    pub fallback_count: usize,
    /// Adjacent pairs (last input, predictions) that are not road edges.
    pub disconnected_pairs: usize,
}

impl EvalReport {
    pub fn compute(preds: &[Vec<usize>], targets: &[Vec<usize>], l_out: usize) -> Result<Self> {
        let per_length = (1..=l_out)
            .map(|k| {
                let p: Vec<Vec<usize>> = preds.iter().map(|v| v.iter().take(k).copied().collect()).collect();
                let t: Vec<Vec<usize>> = targets.iter().map(|v| v[..k].to_vec()).collect();
                Ok(PrefixScore {
                    l_out: k,
                    de: distance_error(&p, &t, k)?,
                    amr: average_match_rate(&p, &t, k)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            de: distance_error(preds, targets, l_out)?,
            amr: average_match_rate(preds, targets, l_out)?,
            n_samples: preds.len(),
            l_out,
            per_position_match: per_position_match(preds, targets, l_out)?,
            per_length,
            fallback_count: 0,
            disconnected_pairs: 0,
        })
    }
}

/// One cell of a length sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub l_in: usize,
    pub l_out: usize,
    pub de: f64,
    pub amr: f64,
}

/// Text table with one row per input length and `DE% / AMR%` per output
/// length.
pub fn format_sweep_table(cells: &[SweepCell]) -> String {
    let mut ins: Vec<usize> = cells.iter().map(|c| c.l_in).collect();
    let mut outs: Vec<usize> = cells.iter().map(|c| c.l_out).collect();
    ins.sort_unstable();
    ins.dedup();
    outs.sort_unstable();
    outs.dedup();
    let mut s = String::new();
    let _ = write!(s, "{:>8}", "in\\out");
    for o in &outs {
        let _ = write!(s, " | {:>15}", format!("{o} (DE/AMR %)"));
    }
    s.push('\n');
    for i in &ins {
        let _ = write!(s, "{i:>8}");
        for o in &outs {
            match cells.iter().find(|c| c.l_in == *i && c.l_out == *o) {
                Some(c) => {
                    let _ = write!(s, " | {:>15}", format!("{:.2}/{:.2}", 100.0 * c.de, 100.0 * c.amr));
                }
                None => {
                    let _ = write!(s, " | {:>15}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}
