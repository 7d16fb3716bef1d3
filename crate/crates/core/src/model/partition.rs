//! Time-ordered token sequence, local story groups, and the sparse
//! attention mask.

use crate::error::{Error, Result};
use crate::graph::Mask;

/// One position of the episode-level token sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SeqSlot {
    Shot {
        index: usize,
        mid_time_s: f64,
        group: usize,
    },
    Dialog {
        index: usize,
        mid_time_s: f64,
        group: usize,
    },
    Group {
        group: usize,
    },
}

impl SeqSlot {
    pub fn group(&self) -> usize {
        match *self {
            SeqSlot::Shot { group, .. }
            | SeqSlot::Dialog { group, .. }
            | SeqSlot::Group { group } => group,
        }
    }

    pub fn is_group_token(&self) -> bool {
        matches!(self, SeqSlot::Group { .. })
    }
}

/// Interleaved shot/dialog tokens cut into consecutive blocks of
/// `group_size` tokens (the final block keeps the remainder), with one
/// group-token slot appended at the end of each block.
#[derive(Debug, Clone)]
pub struct GroupPartition {
    slots: Vec<SeqSlot>,
    block_sizes: Vec<usize>,
    num_shots: usize,
    num_dialogs: usize,
}

impl GroupPartition {
    /// Sort all tokens by mid-time (ties: shot before dialog, then source
    /// index) and cut into blocks.
    pub fn build(
        shot_spans: &[(f64, f64)],
        utterance_spans: &[(f64, f64)],
        group_size: usize,
    ) -> Result<Self> {
        if group_size < 2 {
            return Err(Error::invalid("group_size must be at least 2"));
        }
        let total = shot_spans.len() + utterance_spans.len();
        if total == 0 {
            return Err(Error::invalid("cannot partition an empty episode"));
        }

        // (mid, modality rank, source index); shots sort before dialogs on ties.
        let mut tokens: Vec<(f64, u8, usize)> = Vec::with_capacity(total);
        tokens.extend(
            shot_spans
                .iter()
                .enumerate()
                .map(|(i, &(s, e))| (0.5 * (s + e), 0u8, i)),
        );
        tokens.extend(
            utterance_spans
                .iter()
                .enumerate()
                .map(|(l, &(s, e))| (0.5 * (s + e), 1u8, l)),
        );
        tokens.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut slots = Vec::with_capacity(total + total / group_size + 1);
        let mut block_sizes = Vec::new();
        for (g, chunk) in tokens.chunks(group_size).enumerate() {
            for &(mid, rank, idx) in chunk {
                slots.push(match rank {
                    0 => SeqSlot::Shot {
                        index: idx,
                        mid_time_s: mid,
                        group: g,
                    },
                    _ => SeqSlot::Dialog {
                        index: idx,
                        mid_time_s: mid,
                        group: g,
                    },
                });
            }
            slots.push(SeqSlot::Group { group: g });
            block_sizes.push(chunk.len());
        }

        Ok(GroupPartition {
            slots,
            block_sizes,
            num_shots: shot_spans.len(),
            num_dialogs: utterance_spans.len(),
        })
    }

    /// Sequence length including group tokens.
    pub fn seq_len(&self) -> usize {
        self.slots.len()
    }

    pub fn num_groups(&self) -> usize {
        self.block_sizes.len()
    }

    pub fn num_shots(&self) -> usize {
        self.num_shots
    }

    pub fn num_dialogs(&self) -> usize {
        self.num_dialogs
    }

    pub fn slots(&self) -> &[SeqSlot] {
        &self.slots
    }

    /// Content tokens per block, before group-token insertion.
    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    /// Group-token indicator over the sequence.
    pub fn indicator(&self) -> Vec<bool> {
        self.slots.iter().map(|s| s.is_group_token()).collect()
    }

    /// Sequence position of each shot, by source index.
    pub fn shot_positions(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.num_shots];
        for (pos, slot) in self.slots.iter().enumerate() {
            if let SeqSlot::Shot { index, .. } = slot {
                out[*index] = pos;
            }
        }
        out
    }

    /// Sequence position of each dialog utterance, by source index.
    pub fn dialog_positions(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.num_dialogs];
        for (pos, slot) in self.slots.iter().enumerate() {
            if let SeqSlot::Dialog { index, .. } = slot {
                out[*index] = pos;
            }
        }
        out
    }
}

/// Attention mask over the partitioned sequence plus `pad_tokens` trailing
/// padding slots.
///
/// Tokens attend within their block (including the block's group token).
/// With `group_clique`, group tokens additionally attend to each other.
/// Padding tokens see only themselves and are seen by nobody else.
pub fn attention_mask(partition: &GroupPartition, pad_tokens: usize, group_clique: bool) -> Mask {
    let real = partition.seq_len();
    let n = real + pad_tokens;
    let groups: Vec<Option<usize>> = partition
        .slots()
        .iter()
        .map(|s| Some(s.group()))
        .chain((0..pad_tokens).map(|_| None))
        .collect();
    let is_group: Vec<bool> = partition
        .indicator()
        .into_iter()
        .chain((0..pad_tokens).map(|_| false))
        .collect();
    Mask::from_fn(n, |i, j| {
        if i == j {
            return true;
        }
        if i >= real || j >= real {
            return false;
        }
        if groups[i] == groups[j] {
            return true;
        }
        group_clique && is_group[i] && is_group[j]
    })
}
