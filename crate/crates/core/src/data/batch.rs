//! Length-bucketed, zero-padded batches.
//!
//! Each document becomes the sequence `[SPECIAL, p1 .. pN, SEP, pad ..]`
//! in both modalities. The special slot holds the feature means, the SEP
//! slot holds zeros (the model adds a learned separator embedding there),
//! and padding holds zeros and is masked out.

use rand::seq::SliceRandom;
use rand::Rng;

use super::types::{make_special_tokens, Document, EntityLabel, SEP_BBOX};
use crate::error::{invalid, Result};
use crate::numerics::Tensor;

pub const DEFAULT_MAX_LEN: usize = 50;
pub const DEFAULT_GROUP_THRESHOLD: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Special,
    Proposal,
    Sep,
    Pad,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub doc_ids: Vec<String>,
    pub batch_size: usize,
    pub seq_len: usize,
    /// `[B, L, d_lang]`
    pub lang: Tensor,
    /// `[B, L, d_visn]`
    pub visn: Tensor,
    /// `[B, L, 4]`
    pub pos: Tensor,
    /// `B * L` validity flags shared by both modalities.
    pub mask: Vec<bool>,
    pub kinds: Vec<TokenKind>,
    /// Proposal count per document.
    pub lengths: Vec<usize>,
    pub entity_labels: Vec<Option<EntityLabel>>,
    pub class_labels: Vec<Option<usize>>,
    pub global_visual: Vec<Option<Vec<f64>>>,
}

impl Batch {
    pub fn row(&self, b: usize, i: usize) -> usize {
        b * self.seq_len + i
    }

    /// Flat row indices of real proposals, in batch order.
    pub fn proposal_rows(&self) -> Vec<usize> {
        (0..self.kinds.len())
            .filter(|&r| self.kinds[r] == TokenKind::Proposal)
            .collect()
    }

    pub fn sep_rows(&self) -> Vec<usize> {
        (0..self.kinds.len())
            .filter(|&r| self.kinds[r] == TokenKind::Sep)
            .collect()
    }

    /// Flat row index of each document's special token.
    pub fn special_rows(&self) -> Vec<usize> {
        (0..self.batch_size).map(|b| self.row(b, 0)).collect()
    }

    pub fn d_lang(&self) -> usize {
        self.lang.last_dim()
    }

    pub fn d_visn(&self) -> usize {
        self.visn.last_dim()
    }
}

/// Keeps documents of at most `max_len` proposals unchanged; longer ones are
/// reduced to a uniform random subset of `max_len`, in original order.
pub fn truncate_or_keep<R: Rng + ?Sized>(doc: &Document, max_len: usize, rng: &mut R) -> Result<Document> {
    if max_len == 0 {
        return invalid("max_len must be at least 1");
    }
    if doc.proposals.len() <= max_len {
        return Ok(doc.clone());
    }
    let mut keep = rand::seq::index::sample(rng, doc.proposals.len(), max_len).into_vec();
    keep.sort_unstable();
    Ok(Document {
        proposals: keep.into_iter().map(|i| doc.proposals[i].clone()).collect(),
        ..doc.clone()
    })
}

fn plan(
    lengths: &[usize],
    threshold: usize,
    batch_size: usize,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return invalid("batch_size must be at least 1");
    }
    let (mut short, mut long): (Vec<usize>, Vec<usize>) = (0..lengths.len()).partition(|&i| lengths[i] <= threshold);
    if let Some(r) = rng.as_deref_mut() {
        short.shuffle(r);
        long.shuffle(r);
    }
    let mut batches: Vec<Vec<usize>> = short
        .chunks(batch_size)
        .chain(long.chunks(batch_size))
        .map(<[usize]>::to_vec)
        .collect();
    if let Some(r) = rng {
        batches.shuffle(r);
    }
    Ok(batches)
}

/// Groups document indices into batches that never mix the short bucket
/// (`len <= threshold`) with the long bucket. Deterministic file order.
pub fn bucket_plan(lengths: &[usize], threshold: usize, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    plan(lengths, threshold, batch_size, None)
}

/// As [`bucket_plan`], shuffling within buckets and then batch order.
pub fn bucket_plan_shuffled<R: rand::RngCore>(
    lengths: &[usize],
    threshold: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    plan(lengths, threshold, batch_size, Some(rng))
}

/// Pads documents into one batch sized to its longest member.
pub fn collate(docs: &[&Document], d_lang: usize, d_visn: usize) -> Result<Batch> {
    if docs.is_empty() {
        return invalid("cannot collate an empty batch");
    }
    let b = docs.len();
    let l = docs.iter().map(|d| d.len()).max().unwrap_or(0) + 2;
    let mut lang = Tensor::zeros(&[b, l, d_lang]);
    let mut visn = Tensor::zeros(&[b, l, d_visn]);
    let mut pos = Tensor::zeros(&[b, l, 4]);
    let mut mask = vec![false; b * l];
    let mut kinds = vec![TokenKind::Pad; b * l];
    let mut entity_labels = vec![None; b * l];
    for (bi, doc) in docs.iter().enumerate() {
        let (tok, _) = make_special_tokens(doc)?;
        for p in &doc.proposals {
            p.validate(d_lang, d_visn)?;
        }
        let row0 = bi * l;
        lang.row_mut(row0).copy_from_slice(&tok.lang);
        visn.row_mut(row0).copy_from_slice(&tok.visn);
        pos.row_mut(row0).copy_from_slice(&tok.bbox);
        mask[row0] = true;
        kinds[row0] = TokenKind::Special;
        for (i, p) in doc.proposals.iter().enumerate() {
            let r = row0 + 1 + i;
            lang.row_mut(r).copy_from_slice(&p.lang);
            visn.row_mut(r).copy_from_slice(&p.visn);
            pos.row_mut(r).copy_from_slice(&p.bbox);
            mask[r] = true;
            kinds[r] = TokenKind::Proposal;
            entity_labels[r] = p.entity_label;
        }
        let sep = row0 + 1 + doc.len();
        pos.row_mut(sep).copy_from_slice(&SEP_BBOX);
        mask[sep] = true;
        kinds[sep] = TokenKind::Sep;
    }
    Ok(Batch {
        doc_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
        batch_size: b,
        seq_len: l,
        lang,
        visn,
        pos,
        mask,
        kinds,
        lengths: docs.iter().map(|d| d.len()).collect(),
        entity_labels,
        class_labels: docs.iter().map(|d| d.class_label).collect(),
        global_visual: docs.iter().map(|d| d.global_visual.clone()).collect(),
    })
}

/// Buckets by length then collates, in deterministic order.
pub fn bucket_batches(
    docs: &[Document],
    threshold: usize,
    batch_size: usize,
    d_lang: usize,
    d_visn: usize,
) -> Result<Vec<Batch>> {
    let lengths: Vec<usize> = docs.iter().map(Document::len).collect();
    bucket_plan(&lengths, threshold, batch_size)?
        .into_iter()
        .map(|idx| {
            let group: Vec<&Document> = idx.iter().map(|&i| &docs[i]).collect();
            collate(&group, d_lang, d_visn)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::Proposal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn doc(id: &str, n: usize) -> Document {
        Document {
            doc_id: id.into(),
            proposals: (0..n)
                .map(|i| Proposal::new([0.0, 0.0, 0.5, 0.5], vec![i as f64, 1.0], vec![-(i as f64)]))
                .collect(),
            class_label: None,
            global_visual: None,
        }
    }

    #[test]
    fn short_documents_are_kept() {
        let d = doc("a", 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(truncate_or_keep(&d, 50, &mut rng).unwrap(), d);
    }

    #[test]
    fn long_documents_are_subsampled_in_order() {
        let d = doc("a", 80);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = truncate_or_keep(&d, 50, &mut rng).unwrap();
        assert_eq!(t.len(), 50);
        let idx: Vec<f64> = t.proposals.iter().map(|p| p.lang[0]).collect();
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let again = truncate_or_keep(&d, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn buckets_never_mix() {
        let lengths = [5, 10, 40];
        for bs in 1..=3 {
            for batch in bucket_plan(&lengths, 30, bs).unwrap() {
                let long = batch.iter().filter(|&&i| lengths[i] > 30).count();
                assert!(long == 0 || long == batch.len(), "{batch:?}");
            }
        }
    }

    #[test]
    fn single_document_layout() {
        let d = doc("a", 7);
        let b = collate(&[&d], 2, 1).unwrap();
        assert_eq!(b.seq_len, 9);
        assert_eq!(b.kinds[0], TokenKind::Special);
        assert_eq!(b.kinds[8], TokenKind::Sep);
        assert!(b.mask.iter().all(|&m| m));
        assert_eq!(b.pos.row(0), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(b.lang.row(0), &[3.0, 1.0]);
    }

    #[test]
    fn padding_is_zero_and_masked() {
        let docs = [doc("a", 2), doc("b", 5)];
        let b = collate(&[&docs[0], &docs[1]], 2, 1).unwrap();
        assert_eq!(b.seq_len, 7);
        for r in 0..b.kinds.len() {
            if b.kinds[r] == TokenKind::Pad {
                assert!(!b.mask[r]);
                assert!(b
                    .lang
                    .row(r)
                    .iter()
                    .chain(b.visn.row(r))
                    .chain(b.pos.row(r))
                    .all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn zero_batch_size_is_rejected() {
        assert!(bucket_plan(&[1, 2], 30, 0).is_err());
    }
}
