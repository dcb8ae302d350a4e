//! Feature masking for masked-feature pre-training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Document, Modality, TokenKind};
use crate::error::{invalid, Result};

/// Per-modality selection probability plus the split of actions applied
/// to selected proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    pub select_prob: f64,
    pub zero_prob: f64,
    pub random_prob: f64,
    pub keep_prob: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            zero_prob: 0.8,
            random_prob: 0.1,
            keep_prob: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.select_prob, self.zero_prob, self.random_prob, self.keep_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return invalid(format!("masking probabilities must lie in [0, 1]: {self:?}"));
        }
        let total = self.zero_prob + self.random_prob + self.keep_prob;
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("zero/random/keep probabilities sum to {total}, not 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAction {
    Zero,
    Random,
    Keep,
}

/// One selected proposal feature and its pre-masking value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub batch_index: usize,
    pub seq_index: usize,
    pub modality: Modality,
    pub action: MaskAction,
    pub original: Vec<f64>,
}

/// Features used by the random-replacement action.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplacementPool {
    pub lang: Vec<Vec<f64>>,
    pub visn: Vec<Vec<f64>>,
}

impl ReplacementPool {
    /// Reservoir-samples up to `capacity` features per modality.
    pub fn from_documents<R: Rng + ?Sized>(docs: &[Document], capacity: usize, rng: &mut R) -> Self {
        let mut pool = Self::default();
        for (i, p) in docs.iter().flat_map(|d| &d.proposals).enumerate() {
            let seen = i + 1;
            if pool.lang.len() < capacity {
                pool.lang.push(p.lang.clone());
                pool.visn.push(p.visn.clone());
            } else {
                let j = rng.random_range(0..seen);
                if j < capacity {
                    pool.lang[j] = p.lang.clone();
                    pool.visn[j] = p.visn.clone();
                }
            }
        }
        pool
    }
}

/// Validated masking function.
#[derive(Clone, Debug)]
pub struct Masker {
    cfg: MaskingConfig,
    pool: ReplacementPool,
}

impl Masker {
    /// Fails up front when random replacement is possible but the pool is
    /// empty for either modality.
    pub fn new(cfg: MaskingConfig, pool: ReplacementPool) -> Result<Self> {
        cfg.validate()?;
        if cfg.select_prob > 0.0 && cfg.random_prob > 0.0 && (pool.lang.is_empty() || pool.visn.is_empty()) {
            return invalid("random replacement is enabled but the replacement pool is empty");
        }
        Ok(Self { cfg, pool })
    }

    pub fn config(&self) -> &MaskingConfig {
        &self.cfg
    }

    /// Masks real proposals only; special, separator and padded slots and
    /// all positions are left untouched. Selection and action are drawn
    /// independently per modality.
    pub fn apply<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> (Batch, Vec<MaskRecord>) {
        let mut out = batch.clone();
        let mut records = Vec::new();
        for modality in [Modality::Lang, Modality::Visn] {
            let pool = match modality {
                Modality::Lang => &self.pool.lang,
                Modality::Visn => &self.pool.visn,
            };
            for r in 0..batch.kinds.len() {
                if batch.kinds[r] != TokenKind::Proposal || rng.random::<f64>() >= self.cfg.select_prob {
                    continue;
                }
                let u = rng.random::<f64>();
                let action = if u < self.cfg.zero_prob {
                    MaskAction::Zero
                } else if u < self.cfg.zero_prob + self.cfg.random_prob {
                    MaskAction::Random
                } else {
                    MaskAction::Keep
                };
                let features = match modality {
                    Modality::Lang => &mut out.lang,
                    Modality::Visn => &mut out.visn,
                };
                let original = features.row(r).to_vec();
                match action {
                    MaskAction::Zero => features.row_mut(r).iter_mut().for_each(|v| *v = 0.0),
                    MaskAction::Random => {
                        let pick = &pool[rng.random_range(0..pool.len())];
                        features.row_mut(r).copy_from_slice(pick);
                    }
                    MaskAction::Keep => {}
                }
                records.push(MaskRecord {
                    batch_index: r / batch.seq_len,
                    seq_index: r % batch.seq_len,
                    modality,
                    action,
                    original,
                });
            }
        }
        (out, records)
    }
}

/// One-shot form of [`Masker::apply`].
pub fn apply_masking<R: Rng + ?Sized>(
    batch: &Batch,
    cfg: &MaskingConfig,
    pool: &ReplacementPool,
    rng: &mut R,
) -> Result<(Batch, Vec<MaskRecord>)> {
    let masker = Masker::new(cfg.clone(), pool.clone())?;
    Ok(masker.apply(batch, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collate, Proposal};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch() -> Batch {
        let docs: Vec<Document> = [3usize, 5]
            .iter()
            .enumerate()
            .map(|(i, &n)| Document {
                doc_id: format!("d{i}"),
                proposals: (0..n)
                    .map(|j| Proposal::new([0.1, 0.1, 0.2, 0.2], vec![1.0 + j as f64; 2], vec![2.0; 3]))
                    .collect(),
                class_label: None,
                global_visual: None,
            })
            .collect();
        collate(&[&docs[0], &docs[1]], 2, 3).unwrap()
    }

    #[test]
    fn zero_selection_leaves_batch_unchanged() {
        let b = batch();
        let cfg = MaskingConfig {
            select_prob: 0.0,
            ..Default::default()
        };
        let (m, rec) = apply_masking(&b, &cfg, &ReplacementPool::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m, b);
        assert!(rec.is_empty());
    }

    #[test]
    fn full_zeroing_hits_every_proposal_only() {
        let b = batch();
        let cfg = MaskingConfig {
            select_prob: 1.0,
            zero_prob: 1.0,
            random_prob: 0.0,
            keep_prob: 0.0,
        };
        let (m, rec) = apply_masking(&b, &cfg, &ReplacementPool::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(rec.len(), 2 * 8);
        for r in 0..b.kinds.len() {
            let zeroed = m.lang.row(r).iter().chain(m.visn.row(r)).all(|&v| v == 0.0);
            match b.kinds[r] {
                TokenKind::Proposal => assert!(zeroed),
                TokenKind::Special => assert!(!zeroed),
                _ => {}
            }
        }
        assert_eq!(m.pos, b.pos);
    }

    #[test]
    fn empty_pool_with_random_action_fails_at_construction() {
        assert!(Masker::new(MaskingConfig::default(), ReplacementPool::default()).is_err());
    }

    #[test]
    fn bad_probabilities_are_rejected() {
        let cfg = MaskingConfig {
            zero_prob: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
