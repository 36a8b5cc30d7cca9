use sha2::{Digest, Sha256};

use super::RoadNetwork;
use crate::data::Vocabulary;
use crate::error::{Error, Result};

/// Binary token-adjacency matrix used to filter decoder output.
///
/// Row `i` marks the tokens whose segments directly follow token `i`'s
/// segment. Rows of special tokens are all ones so a special predecessor
/// never constrains the next step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborMask {
    n_tokens: usize,
    bits: Vec<bool>,
    special: Vec<bool>,
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
}

impl NeighborMask {
    pub fn build(network: &RoadNetwork, vocab: &Vocabulary) -> Result<Self> {
        let n = vocab.n_tokens();
        let mut index = vec![None; n];
        for (t, slot) in index.iter_mut().enumerate() {
            if let Some(seg) = vocab.segment(t) {
                *slot = Some(network.index_of(seg).map_err(|_| Error::UnknownToken(t))?);
            }
        }
        let mut token_of = std::collections::HashMap::new();
        for (t, i) in index.iter().enumerate() {
            if let Some(i) = i {
                token_of.insert(*i, t);
            }
        }
        let special: Vec<bool> = index.iter().map(Option::is_none).collect();
        let mut bits = vec![false; n * n];
        let mut succ = vec![Vec::new(); n];
        let mut pred = vec![Vec::new(); n];
        for t in 0..n {
            match index[t] {
                None => bits[t * n..(t + 1) * n].iter_mut().for_each(|b| *b = true),
                Some(i) => {
                    let mut row: Vec<usize> = network
                        .succ_indices(i)
                        .iter()
                        .filter_map(|j| token_of.get(j).copied())
                        .collect();
                    row.sort_unstable();
                    for &u in &row {
                        bits[t * n + u] = true;
                        pred[u].push(t);
                    }
                    succ[t] = row;
                }
            }
        }
        Ok(Self {
            n_tokens: n,
            bits,
            special,
            succ,
            pred,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn get(&self, from: usize, to: usize) -> bool {
        self.bits[from * self.n_tokens + to]
    }

    pub fn row(&self, from: usize) -> &[bool] {
        &self.bits[from * self.n_tokens..(from + 1) * self.n_tokens]
    }

    pub fn popcount(&self, from: usize) -> usize {
        self.row(from).iter().filter(|&&b| b).count()
    }

    pub fn is_special(&self, token: usize) -> bool {
        self.special[token]
    }

    /// Successor tokens of a segment token, ascending; empty for specials.
    pub fn successors(&self, token: usize) -> &[usize] {
        &self.succ[token]
    }

    pub fn predecessors(&self, token: usize) -> &[usize] {
        &self.pred[token]
    }

    /// Whether `from → to` is a road connection (specials never are).
    pub fn is_road_edge(&self, from: usize, to: usize) -> bool {
        !self.special[from] && !self.special[to] && self.get(from, to)
    }

    /// Hex SHA-256 over the matrix, used to pair checkpoints with masks.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_tokens as u64).to_le_bytes());
        h.update(self.bits.iter().map(|&b| b as u8).collect::<Vec<u8>>());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
