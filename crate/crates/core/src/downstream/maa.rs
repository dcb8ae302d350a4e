//! Modality-adaptive attention: per-slot gating of the two branches
//! followed by residual additive fusion.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoders::Linear;
use crate::error::Result;
use crate::numerics::{Graph, ParamStore, Var};

/// Two-layer gate `[h_t; h_v] -> d_mid -> 2` with GELU between the layers
/// and a sigmoid on the output.
#[derive(Clone, Debug)]
pub struct MaaParams {
    pub l1: Linear,
    pub l2: Linear,
}

impl MaaParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let s = cfg.init_std;
        Ok(Self {
            l1: Linear::new(store, "maa.l1", 2 * cfg.d_h, cfg.maa_hidden(), true, s, rng)?,
            l2: Linear::new(store, "maa.l2", cfg.maa_hidden(), 2, true, s, rng)?,
        })
    }
}

/// Per-row gate values `[n, 2]` holding `(w_lang, w_visn)`.
pub fn modality_weights(g: &mut Graph, maa: &MaaParams, h_t: Var, h_v: Var) -> Result<Var> {
    let x = g.tape.concat_cols(h_t, h_v)?;
    let x = maa.l1.forward(g, x)?;
    let x = g.tape.gelu(x)?;
    let x = maa.l2.forward(g, x)?;
    g.tape.sigmoid(x)
}

/// `(h_t + w_lang·h_t) + (h_v + w_visn·h_v)` with `weights: [n, 2]`.
pub fn fuse(g: &mut Graph, h_t: Var, h_v: Var, weights: Var) -> Result<Var> {
    let wl = g.tape.slice_cols(weights, 0, 1)?;
    let wv = g.tape.slice_cols(weights, 1, 1)?;
    let st = g.tape.mul_rows(h_t, wl)?;
    let sv = g.tape.mul_rows(h_v, wv)?;
    let t = g.tape.add(h_t, st)?;
    let v = g.tape.add(h_v, sv)?;
    g.tape.add(t, v)
}

/// Fused features `[n, d_h]` and gate values `[n, 2]` for rows of `h_t`/`h_v`.
pub fn modality_adaptive_attention(g: &mut Graph, maa: &MaaParams, h_t: Var, h_v: Var) -> Result<(Var, Var)> {
    let w = modality_weights(g, maa, h_t, h_v)?;
    Ok((fuse(g, h_t, h_v, w)?, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn fused_with(weight: f64) -> (Vec<f64>, Vec<f64>) {
        let store = ParamStore::new();
        let mut g = Graph::frozen(&store);
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let v = Tensor::new(vec![2, 3], vec![0.25, 4.0, -1.5, 2.0, 2.0, 2.0]).unwrap();
        let sum: Vec<f64> = t.data().iter().zip(v.data()).map(|(a, b)| a + b).collect();
        let (tv, vv) = (g.tape.constant(t).unwrap(), g.tape.constant(v).unwrap());
        let w = g.tape.constant(Tensor::full(&[2, 2], weight)).unwrap();
        let f = fuse(&mut g, tv, vv, w).unwrap();
        (g.tape.value(f).data().to_vec(), sum)
    }

    #[test]
    fn zero_gates_give_plain_sum() {
        let (f, sum) = fused_with(0.0);
        assert_eq!(f, sum);
    }

    #[test]
    fn unit_gates_double_the_sum() {
        let (f, sum) = fused_with(1.0);
        for (a, b) in f.iter().zip(&sum) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn fused_output_depends_on_both_modalities() {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let maa = MaaParams::new(&mut store, &cfg, &mut rng).unwrap();
        let d = cfg.d_h;
        let base_t = Tensor::from_fn(&[1, d], |i| (i as f64 * 0.37).sin());
        let base_v = Tensor::from_fn(&[1, d], |i| (i as f64 * 0.71).cos());
        let run = |t: &Tensor, v: &Tensor| -> (f64, Vec<f64>) {
            let mut g = Graph::frozen(&store);
            let (tv, vv) = (g.tape.constant(t.clone()).unwrap(), g.tape.constant(v.clone()).unwrap());
            let (f, w) = modality_adaptive_attention(&mut g, &maa, tv, vv).unwrap();
            (g.tape.value(f).data().iter().sum(), g.tape.value(w).data().to_vec())
        };
        let (f0, w) = run(&base_t, &base_v);
        assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
        let mut t = base_t.clone();
        t.data_mut()[0] += 1e-4;
        let mut v = base_v.clone();
        v.data_mut()[0] += 1e-4;
        assert!((run(&t, &base_v).0 - f0).abs() > 0.0);
        assert!((run(&base_t, &v).0 - f0).abs() > 0.0);
    }
}
