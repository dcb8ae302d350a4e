//! The assembled two-stream model with its pre-training and task heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::cross::{cross_encode, CrossBlock};
use crate::data::{Batch, Modality};
use crate::downstream::MaaParams;
use crate::encoders::{encode_modality, project_inputs, EncoderStack, InputProjection, Linear, SeqShape};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Parameter name prefixes of the pre-trained backbone.
pub const BACKBONE_PREFIXES: [&str; 4] = ["input.", "text.", "visn.", "cross"];

pub fn is_backbone(name: &str) -> bool {
    BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug)]
pub struct SelfDocModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub input: InputProjection,
    pub text: EncoderStack,
    pub visn: EncoderStack,
    pub cross: Vec<CrossBlock>,
    pub recon_lang: Linear,
    pub recon_visn: Linear,
    pub maa: MaaParams,
    pub entity_head: Linear,
    pub cls_head: Linear,
    /// Bias-free map of the whole-page vector into the hidden space.
    pub global_proj: Option<Linear>,
}

/// Final hidden states of both branches, `[B * L, d_h]` each.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub text: Var,
    pub visn: Var,
    pub seq: SeqShape,
}

impl SelfDocModel {
    /// Fresh parameters drawn from a seeded generator.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = cfg.init_std;
        let input = InputProjection::new(&mut store, &cfg, &mut rng)?;
        let text = EncoderStack::new(&mut store, Modality::Lang, &cfg, &mut rng)?;
        let visn = EncoderStack::new(&mut store, Modality::Visn, &cfg, &mut rng)?;
        let cross = (0..cfg.n_cross_blocks)
            .map(|b| CrossBlock::new(&mut store, b, &cfg, &mut rng))
            .collect::<Result<_>>()?;
        let recon_lang = Linear::new(&mut store, "recon.lang", cfg.d_h, cfg.d_lang, true, s, &mut rng)?;
        let recon_visn = Linear::new(&mut store, "recon.visn", cfg.d_h, cfg.d_visn, true, s, &mut rng)?;
        let maa = MaaParams::new(&mut store, &cfg, &mut rng)?;
        let entity_head = Linear::new(&mut store, "head.entity", cfg.d_h, 4, true, s, &mut rng)?;
        let cls_head = Linear::new(&mut store, "head.cls", cfg.d_h, cfg.n_classes, true, s, &mut rng)?;
        let global_proj = match cfg.d_global {
            Some(d) => Some(Linear::new(&mut store, "head.global", d, cfg.d_h, false, s, &mut rng)?),
            None => None,
        };
        Ok(Self {
            cfg,
            params: store,
            input,
            text,
            visn,
            cross,
            recon_lang,
            recon_visn,
            maa,
            entity_head,
            cls_head,
            global_proj,
        })
    }

    /// Builds the model for `cfg` and takes parameter values from `source`
    /// by name. Every parameter must be present with a matching shape unless
    /// `allow_missing` accepts its name (its fresh value is kept then).
    pub fn with_values(
        cfg: ModelConfig,
        seed: u64,
        source: &ParamStore,
        allow_missing: impl Fn(&str) -> bool,
    ) -> Result<Self> {
        let mut model = Self::new(cfg, seed)?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            match source.by_name(&name) {
                Some(t) if t.shape() == model.params.get(id).shape() => *model.params.get_mut(id) = t.clone(),
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        model.params.get(id).shape()
                    )))
                }
                None if allow_missing(&name) => {}
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        Ok(model)
    }

    /// Input projection, both single-modality stacks, then the cross blocks.
    pub fn encode(&self, g: &mut Graph, batch: &Batch) -> Result<Encoded> {
        let seq = SeqShape::of(batch)?;
        let (t0, v0) = project_inputs(g, &self.input, batch)?;
        let t = encode_modality(g, &self.cfg, &seq, t0, &self.text)?;
        let v = encode_modality(g, &self.cfg, &seq, v0, &self.visn)?;
        let (text, visn) = cross_encode(g, &self.cfg, &seq, t, v, &self.cross)?;
        Ok(Encoded { text, visn, seq })
    }

    /// Backbone outputs as plain tensors, without recording gradients.
    pub fn encode_values(&self, batch: &Batch) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::frozen(&self.params);
        let enc = self.encode(&mut g, batch)?;
        Ok((g.tape.value(enc.text).clone(), g.tape.value(enc.visn).clone()))
    }

    /// FNV-1a hash of backbone parameter names and bit patterns; any change
    /// to a frozen weight changes it.
    pub fn backbone_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.params.iter().filter(|(n, _)| is_backbone(n)) {
            for b in name
                .bytes()
                .chain(t.data().iter().flat_map(|v| v.to_bits().to_le_bytes()))
            {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_groups_are_named_by_role() {
        let m = SelfDocModel::new(ModelConfig::tiny(), 0).unwrap();
        let names: Vec<&str> = m.params.iter().map(|(n, _)| n).collect();
        assert!(names.iter().any(|n| n.starts_with("text.layer3.")));
        assert!(names.iter().any(|n| n.starts_with("cross1.visn.sub3.")));
        assert!(names.contains(&"recon.visn.w"));
        assert!(!names.iter().any(|n| n.starts_with("head.global")));
        assert!(names.iter().filter(|n| is_backbone(n)).all(|n| !n.starts_with("maa")));
    }

    #[test]
    fn values_roundtrip_by_name() {
        let a = SelfDocModel::new(ModelConfig::tiny(), 1).unwrap();
        let b = SelfDocModel::with_values(ModelConfig::tiny(), 2, &a.params, |_| false).unwrap();
        assert_eq!(a.backbone_fingerprint(), b.backbone_fingerprint());
        let mut cfg = ModelConfig::tiny();
        cfg.d_lang = 8;
        assert!(SelfDocModel::with_values(cfg, 0, &a.params, |_| false).is_err());
    }
}
