#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfdoc::config::{layouts, AttentionScale, ModelConfig};
use selfdoc::data::{Document, Proposal};
use selfdoc::model::SelfDocModel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Four-wide model with one layer per stage, small enough for loop oracles.
pub fn micro_config(n_heads: usize) -> ModelConfig {
    ModelConfig {
        d_h: 4,
        n_heads,
        n_single_layers: 1,
        n_cross_blocks: 1,
        cross_layout: layouts::full(),
        d_lang: 3,
        d_visn: 5,
        attention_scale: AttentionScale::HeadDim,
        ..ModelConfig::tiny()
    }
}

/// Model whose every parameter, layer norms included, is drawn at O(1)
/// scale so that no term of a forward pass is negligible.
pub fn scrambled_model(cfg: ModelConfig, seed: u64) -> SelfDocModel {
    let mut m = SelfDocModel::new(cfg, seed).unwrap();
    let mut r = rng(seed + 1000);
    for id in m.params.ids().collect::<Vec<_>>() {
        let gamma = m.params.name(id).ends_with(".gamma");
        for v in m.params.get_mut(id).data_mut() {
            let u: f64 = r.random_range(-0.8..0.8);
            *v = if gamma { 1.0 + 0.4 * u } else { u };
        }
    }
    m
}

pub fn gaussian(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.5..1.5)).collect()
}

pub fn random_doc(r: &mut impl Rng, id: &str, n: usize, d_lang: usize, d_visn: usize) -> Document {
    let proposals = (0..n)
        .map(|_| {
            let x = r.random_range(0.0..0.7);
            let y = r.random_range(0.0..0.8);
            let bbox = [x, y, x + r.random_range(0.05..0.3), y + r.random_range(0.02..0.2)];
            Proposal::new(bbox, gaussian(r, d_lang), gaussian(r, d_visn))
        })
        .collect();
    Document {
        doc_id: id.into(),
        proposals,
        class_label: None,
        global_visual: None,
    }
}

pub mod oracle;
pub mod properties;

pub type Mat = Vec<Vec<f64>>;

pub fn random_mat(r: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| gaussian(r, cols)).collect()
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
