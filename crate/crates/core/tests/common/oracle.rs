//! Scalar-loop reimplementations of the forward passes, used as oracles
//! on a one-document, three-slot, four-wide model. Each `*_error` function
//! returns the largest absolute deviation over its cases.

use super::*;
use selfdoc::config::ModelConfig;
use selfdoc::cross::{cross_att_1, cross_att_2};
use selfdoc::data::{collate, Document, Modality};
use selfdoc::downstream::modality_adaptive_attention;
use selfdoc::encoders::{project_inputs, self_attention_layer, SeqShape};
use selfdoc::model::SelfDocModel;
use selfdoc::numerics::{Graph, ParamStore, Tensor, Var};
use selfdoc::pretrain::{pretrain_loss, MaskAction, MaskRecord};

struct Oracle<'a> {
    store: &'a ParamStore,
    cfg: &'a ModelConfig,
}

fn matmul(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|c| (0..row.len()).map(|a| row[a] * w[a][c]).sum())
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn smooth_l1(e: f64) -> f64 {
    if e.abs() < 1.0 {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

impl Oracle<'_> {
    fn tensor(&self, name: &str) -> &Tensor {
        self.store
            .by_name(name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
    }

    fn mat(&self, name: &str) -> Mat {
        let t = self.tensor(name);
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.tensor(name).data().to_vec()
    }

    fn linear(&self, x: &Mat, name: &str) -> Mat {
        let y = matmul(x, &self.mat(&format!("{name}.w")));
        match self.store.by_name(&format!("{name}.b")) {
            Some(b) => y
                .into_iter()
                .map(|r| r.iter().zip(b.data()).map(|(v, bb)| v + bb).collect())
                .collect(),
            None => y,
        }
    }

    fn layer_norm(&self, x: &Mat, name: &str) -> Mat {
        let (g, b) = (self.vec(&format!("{name}.gamma")), self.vec(&format!("{name}.beta")));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let s = (var + self.cfg.ln_eps).sqrt();
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / s * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    /// Residual attention sub-layer then residual feed-forward, both
    /// post-normalised; weights from `qs` against `ks`, values from `own`.
    fn block(&self, name: &str, own: &Mat, qs: &Mat, ks: &Mat, valid: &[bool]) -> Mat {
        let q = self.linear(qs, &format!("{name}.q"));
        let k = self.linear(ks, &format!("{name}.k"));
        let v = self.linear(own, &format!("{name}.v"));
        let (l, d) = (own.len(), self.cfg.d_h);
        let dk = d / self.cfg.n_heads;
        let scale = (dk as f64).sqrt();
        let mut ctx = vec![vec![0.0; d]; l];
        for h in 0..self.cfg.n_heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..l {
                let mut w = vec![0.0; l];
                let mut total = 0.0;
                for j in 0..l {
                    if valid[j] {
                        let s: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / scale;
                        w[j] = s.exp();
                        total += w[j];
                    }
                }
                for j in 0..l {
                    for c in cols.clone() {
                        ctx[i][c] += w[j] / total * v[j][c];
                    }
                }
            }
        }
        let a = self.linear(&ctx, &format!("{name}.o"));
        let h_att = self.layer_norm(&add(&a, own), &format!("{name}.ln_att"));
        let f = self.linear(&h_att, &format!("{name}.ff1"));
        let f: Mat = f.iter().map(|r| r.iter().map(|&x| gelu(x)).collect()).collect();
        let f = self.linear(&f, &format!("{name}.ff2"));
        self.layer_norm(&add(&f, &h_att), &format!("{name}.ln_ff"))
    }
}

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn run_pair(
    model: &SelfDocModel,
    valid: &[bool],
    t: &Mat,
    v: &Mat,
    f: impl Fn(&mut Graph, &SeqShape, Var, Var) -> (Var, Var),
) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::frozen(&model.params);
    let seq = SeqShape::new(1, t.len(), valid.to_vec()).unwrap();
    let d = model.cfg.d_h;
    let tv = g
        .tape
        .constant(Tensor::new(vec![t.len(), d], flatten(t)).unwrap())
        .unwrap();
    let vv = g
        .tape
        .constant(Tensor::new(vec![v.len(), d], flatten(v)).unwrap())
        .unwrap();
    let (a, b) = f(&mut g, &seq, tv, vv);
    (g.tape.value(a).data().to_vec(), g.tape.value(b).data().to_vec())
}

fn valid_rows(m: &[f64], d: usize, valid: &[bool]) -> Vec<f64> {
    m.chunks(d)
        .zip(valid)
        .filter(|(_, &ok)| ok)
        .flat_map(|(r, _)| r.to_vec())
        .collect()
}

pub const MASKS: [[bool; 3]; 2] = [[true, true, true], [true, true, false]];

pub fn self_attention_error() -> f64 {
    let mut worst: f64 = 0.0;
    for heads in [1, 2] {
        let model = scrambled_model(micro_config(heads), 11);
        let o = Oracle {
            store: &model.params,
            cfg: &model.cfg,
        };
        let mut r = rng(12);
        for valid in MASKS {
            let h = random_mat(&mut r, 3, 4);
            let (out, _) = run_pair(&model, &valid, &h, &h, |g, seq, t, _| {
                let y = self_attention_layer(g, &model.cfg, seq, t, &model.text.layers[0]).unwrap();
                (y, y)
            });
            let want = o.block("text.layer0", &h, &h, &h, &valid);
            worst = worst.max(max_diff(
                &valid_rows(&out, 4, &valid),
                &valid_rows(&flatten(&want), 4, &valid),
            ));
        }
    }
    worst
}

/// `sub` indexes the full layout: 0 is own-query cross-attention, 2 is
/// other-stream weights. The expected query/key sources are spelled out.
fn cross_error(sub: usize, own_queries: bool, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for heads in [1, 2] {
        let model = scrambled_model(micro_config(heads), seed);
        let o = Oracle {
            store: &model.params,
            cfg: &model.cfg,
        };
        let mut r = rng(seed + 1);
        for valid in MASKS {
            let (t, v) = (random_mat(&mut r, 3, 4), random_mat(&mut r, 3, 4));
            let pair = &model.cross[0].sublayers[sub];
            let (ot, ov) = run_pair(&model, &valid, &t, &v, |g, seq, a, b| {
                if sub == 0 {
                    cross_att_1(g, &model.cfg, seq, a, b, pair).unwrap()
                } else {
                    cross_att_2(g, &model.cfg, seq, a, b, pair).unwrap()
                }
            });
            let (tq, vq) = if own_queries { (&t, &v) } else { (&v, &t) };
            let wt = o.block(&format!("cross0.text.sub{sub}"), &t, tq, &v, &valid);
            let wv = o.block(&format!("cross0.visn.sub{sub}"), &v, vq, &t, &valid);
            worst = worst.max(max_diff(
                &valid_rows(&ot, 4, &valid),
                &valid_rows(&flatten(&wt), 4, &valid),
            ));
            worst = worst.max(max_diff(
                &valid_rows(&ov, 4, &valid),
                &valid_rows(&flatten(&wv), 4, &valid),
            ));
        }
    }
    worst
}

/// Text branch: queries from text, keys from vision, values from text.
pub fn cross_attention_1_error() -> f64 {
    cross_error(0, true, 21)
}

/// Text branch: queries and keys both from vision, values from text.
pub fn cross_attention_2_error() -> f64 {
    cross_error(2, false, 31)
}

/// Expected inputs of one document: mean-feature special slot over the
/// whole page, the proposals, then the separator.
fn expected_inputs(o: &Oracle, doc: &Document, len: usize) -> (Mat, Mat) {
    let n = doc.proposals.len() as f64;
    let mean = |f: &dyn Fn(&selfdoc::data::Proposal) -> &Vec<f64>| -> Vec<f64> {
        let d = f(&doc.proposals[0]).len();
        (0..d)
            .map(|j| doc.proposals.iter().map(|p| f(p)[j]).sum::<f64>() / n)
            .collect()
    };
    let mut lang = vec![mean(&|p| &p.lang)];
    let mut visn = vec![mean(&|p| &p.visn)];
    let mut pos = vec![vec![0.0, 0.0, 1.0, 1.0]];
    for p in &doc.proposals {
        lang.push(p.lang.clone());
        visn.push(p.visn.clone());
        pos.push(p.bbox.to_vec());
    }
    let (dl, dv) = (lang[0].len(), visn[0].len());
    let sep = lang.len();
    while lang.len() < len {
        lang.push(vec![0.0; dl]);
        visn.push(vec![0.0; dv]);
        pos.push(vec![0.0; 4]);
    }
    let p = matmul(&pos, &o.mat("input.w_pos"));
    let mut t = add(&matmul(&lang, &o.mat("input.w_lang")), &p);
    let mut v = add(&matmul(&visn, &o.mat("input.w_visn")), &p);
    for (j, x) in o.vec("input.sep_lang").into_iter().enumerate() {
        t[sep][j] += x;
    }
    for (j, x) in o.vec("input.sep_visn").into_iter().enumerate() {
        v[sep][j] += x;
    }
    (t, v)
}

pub fn input_projection_error() -> f64 {
    let model = scrambled_model(micro_config(1), 41);
    let o = Oracle {
        store: &model.params,
        cfg: &model.cfg,
    };
    let mut r = rng(42);
    let a = random_doc(&mut r, "a", 1, 3, 5);
    let b = random_doc(&mut r, "b", 3, 3, 5);

    let batch = collate(&[&a], 3, 5).unwrap();
    assert_eq!(batch.seq_len, 3);
    let mut g = Graph::frozen(&model.params);
    let (t, v) = project_inputs(&mut g, &model.input, &batch).unwrap();
    let (wt, wv) = expected_inputs(&o, &a, 3);
    let mut worst = max_diff(g.tape.value(t).data(), &flatten(&wt));
    worst = worst.max(max_diff(g.tape.value(v).data(), &flatten(&wv)));

    // shorter document padded to the longer one: pad rows stay zero
    let batch = collate(&[&a, &b], 3, 5).unwrap();
    let mut g = Graph::frozen(&model.params);
    let (t, _) = project_inputs(&mut g, &model.input, &batch).unwrap();
    let (wa, _) = expected_inputs(&o, &a, 5);
    let (wb, _) = expected_inputs(&o, &b, 5);
    let mut want = flatten(&wa);
    for x in &mut want[3 * 4..] {
        *x = 0.0;
    }
    want.extend(flatten(&wb));
    worst.max(max_diff(g.tape.value(t).data(), &want))
}

pub fn modality_fusion_error() -> f64 {
    let model = scrambled_model(micro_config(1), 51);
    let o = Oracle {
        store: &model.params,
        cfg: &model.cfg,
    };
    let mut r = rng(52);
    let (t, v) = (random_mat(&mut r, 3, 4), random_mat(&mut r, 3, 4));
    let mut g = Graph::frozen(&model.params);
    let tv = g.tape.constant(Tensor::new(vec![3, 4], flatten(&t)).unwrap()).unwrap();
    let vv = g.tape.constant(Tensor::new(vec![3, 4], flatten(&v)).unwrap()).unwrap();
    let (fused, w) = modality_adaptive_attention(&mut g, &model.maa, tv, vv).unwrap();

    let cat: Mat = t
        .iter()
        .zip(&v)
        .map(|(a, b)| a.iter().chain(b).copied().collect())
        .collect();
    let hid = o.linear(&cat, "maa.l1");
    let hid: Mat = hid.iter().map(|r| r.iter().map(|&x| gelu(x)).collect()).collect();
    let gates: Mat = o
        .linear(&hid, "maa.l2")
        .iter()
        .map(|r| r.iter().map(|&x| sigmoid(x)).collect())
        .collect();
    let want: Mat = (0..3)
        .map(|i| {
            (0..4)
                .map(|j| t[i][j] + gates[i][0] * t[i][j] + v[i][j] + gates[i][1] * v[i][j])
                .collect()
        })
        .collect();
    assert!(gates.iter().flatten().all(|&x| x > 0.0 && x < 1.0));
    max_diff(g.tape.value(w).data(), &flatten(&gates)).max(max_diff(g.tape.value(fused).data(), &flatten(&want)))
}

pub fn pretrain_loss_error() -> f64 {
    let model = scrambled_model(micro_config(1), 61);
    let o = Oracle {
        store: &model.params,
        cfg: &model.cfg,
    };
    let mut r = rng(62);
    let doc = random_doc(&mut r, "a", 1, 3, 5);
    let batch = collate(&[&doc], 3, 5).unwrap();
    let original_lang = gaussian(&mut r, 3);
    let original_visn: Vec<f64> = gaussian(&mut r, 5).iter().map(|x| 3.0 * x).collect();
    let records = vec![
        MaskRecord {
            batch_index: 0,
            seq_index: 1,
            modality: Modality::Lang,
            action: MaskAction::Zero,
            original: original_lang.clone(),
        },
        MaskRecord {
            batch_index: 0,
            seq_index: 1,
            modality: Modality::Visn,
            action: MaskAction::Keep,
            original: original_visn.clone(),
        },
        MaskRecord {
            batch_index: 0,
            seq_index: 0,
            modality: Modality::Visn,
            action: MaskAction::Random,
            original: original_visn.iter().map(|x| -x).collect(),
        },
    ];
    let mut g = Graph::frozen(&model.params);
    let enc = model.encode(&mut g, &batch).unwrap();
    let loss = pretrain_loss(&mut g, &model, &enc, &records).unwrap().unwrap();
    let got = g.tape.value(loss.total).item();

    let ht = to_mat(g.tape.value(enc.text));
    let hv = to_mat(g.tape.value(enc.visn));
    let term = |h: &Mat, head: &str, recs: Vec<&MaskRecord>| -> f64 {
        let mut sum = 0.0;
        for rec in &recs {
            let pred = &o.linear(&vec![h[rec.seq_index].clone()], head)[0];
            let d = pred.len() as f64;
            sum += pred
                .iter()
                .zip(&rec.original)
                .map(|(p, x)| smooth_l1(p - x))
                .sum::<f64>()
                / d;
        }
        sum / recs.len() as f64
    };
    let lang = term(
        &ht,
        "recon.lang",
        records.iter().filter(|r| r.modality == Modality::Lang).collect(),
    );
    let visn = term(
        &hv,
        "recon.visn",
        records.iter().filter(|r| r.modality == Modality::Visn).collect(),
    );
    (got - (lang + visn)).abs()
}

/// One-slot sequences: every attention function has weight 1 on the only
/// column, so each sub-layer reduces to a closed form in its own values.
/// Returns the largest deviation over self, own-query and other-stream
/// attention with an unrelated other stream.
pub fn single_slot_error() -> f64 {
    let model = scrambled_model(micro_config(2), 51);
    let o = Oracle {
        store: &model.params,
        cfg: &model.cfg,
    };
    let closed = |name: &str, h: &Mat| -> Mat {
        let v = o.linear(h, &format!("{name}.v"));
        let a = o.linear(&v, &format!("{name}.o"));
        let h_att = o.layer_norm(&add(&a, h), &format!("{name}.ln_att"));
        let f = o.linear(&h_att, &format!("{name}.ff1"));
        let f: Mat = f.iter().map(|r| r.iter().map(|&x| gelu(x)).collect()).collect();
        let f = o.linear(&f, &format!("{name}.ff2"));
        o.layer_norm(&add(&f, &h_att), &format!("{name}.ln_ff"))
    };
    let mut r = rng(52);
    let (t, v) = (random_mat(&mut r, 1, 4), random_mat(&mut r, 1, 4));
    let mut worst: f64 = 0.0;
    let (out, _) = run_pair(&model, &[true], &t, &t, |g, seq, a, _| {
        let y = self_attention_layer(g, &model.cfg, seq, a, &model.text.layers[0]).unwrap();
        (y, y)
    });
    worst = worst.max(max_diff(&out, &flatten(&closed("text.layer0", &t))));
    for sub in [0, 2] {
        let pair = &model.cross[0].sublayers[sub];
        let (ot, ov) = run_pair(&model, &[true], &t, &v, |g, seq, a, b| {
            if sub == 0 {
                cross_att_1(g, &model.cfg, seq, a, b, pair).unwrap()
            } else {
                cross_att_2(g, &model.cfg, seq, a, b, pair).unwrap()
            }
        });
        worst = worst.max(max_diff(&ot, &flatten(&closed(&format!("cross0.text.sub{sub}"), &t))));
        worst = worst.max(max_diff(&ov, &flatten(&closed(&format!("cross0.visn.sub{sub}"), &v))));
    }
    worst
}

/// Smallest output difference between the two cross functions run with
/// the same parameters on the same three-slot inputs, over both branches.
pub fn cross_functions_gap() -> f64 {
    let model = scrambled_model(micro_config(2), 61);
    let mut r = rng(62);
    let (t, v) = (random_mat(&mut r, 3, 4), random_mat(&mut r, 3, 4));
    let pair = &model.cross[0].sublayers[0];
    let valid = [true; 3];
    let (t1, v1) = run_pair(&model, &valid, &t, &v, |g, seq, a, b| {
        cross_att_1(g, &model.cfg, seq, a, b, pair).unwrap()
    });
    let (t2, v2) = run_pair(&model, &valid, &t, &v, |g, seq, a, b| {
        cross_att_2(g, &model.cfg, seq, a, b, pair).unwrap()
    });
    max_diff(&t1, &t2).min(max_diff(&v1, &v2))
}
