use serde::Serialize;

use super::QloraError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Pack {
    pub ids: Vec<String>,
    pub lengths: Vec<usize>,
}

impl Pack {
    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Greedy first-fit: each sequence, in input order, goes into the first
/// pack with room for it, or opens a new pack.
pub fn pack_sequences(seqs: &[(String, usize)], max_len: usize) -> Result<Vec<Pack>, QloraError> {
    if max_len == 0 {
        return Err(QloraError::ZeroMaxLen);
    }
    let mut packs: Vec<Pack> = Vec::new();
    let mut room: Vec<usize> = Vec::new();
    for (id, len) in seqs {
        if *len > max_len {
            return Err(QloraError::Oversize { id: id.clone(), len: *len, max_len });
        }
        match room.iter().position(|r| r >= len) {
            Some(p) => {
                packs[p].ids.push(id.clone());
                packs[p].lengths.push(*len);
                room[p] -= len;
            }
            None => {
                packs.push(Pack { ids: vec![id.clone()], lengths: vec![*len] });
                room.push(max_len - len);
            }
        }
    }
    Ok(packs)
}

pub fn packed_padding(packs: &[Pack], max_len: usize) -> usize {
    packs.iter().map(|p| max_len - p.total()).sum()
}

pub fn unpacked_padding(lengths: &[usize], max_len: usize) -> usize {
    lengths.iter().map(|l| max_len.saturating_sub(*l)).sum()
}
