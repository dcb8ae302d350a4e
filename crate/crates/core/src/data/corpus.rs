//! JSON Lines corpus format.
//!
//! Line 1 is a header `{"version":1,"d_lang":..,"d_visn":..}`; every
//! following line is one [`Document`]. A header may name a binary sidecar
//! of little-endian `f32` values, in which case proposals carry
//! `lang_offset` / `visn_offset` (element indices) instead of arrays.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::types::{Category, Document, EntityLabel, Proposal};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub version: u32,
    pub d_lang: usize,
    pub d_visn: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub d_lang: usize,
    pub d_visn: usize,
    pub documents: Vec<Document>,
    /// Documents dropped at load because they held no proposals.
    pub rejected_empty: usize,
}

impl Corpus {
    pub fn new(d_lang: usize, d_visn: usize, documents: Vec<Document>) -> Self {
        Self {
            d_lang,
            d_visn,
            documents,
            rejected_empty: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for doc in &self.documents {
            for (i, p) in doc.proposals.iter().enumerate() {
                p.validate(self.d_lang, self.d_visn)
                    .map_err(|e| Error::Invalid(format!("document `{}` proposal {i}: {e}", doc.doc_id)))?;
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct ProposalRecord {
    bbox: [f64; 4],
    #[serde(default)]
    lang: Option<Vec<f64>>,
    #[serde(default)]
    visn: Option<Vec<f64>>,
    #[serde(default)]
    lang_offset: Option<usize>,
    #[serde(default)]
    visn_offset: Option<usize>,
    #[serde(default)]
    category: Option<Category>,
    #[serde(default)]
    entity_label: Option<EntityLabel>,
    #[serde(default)]
    text: Option<String>,
}

#[derive(Deserialize)]
struct DocumentRecord {
    doc_id: String,
    proposals: Vec<ProposalRecord>,
    #[serde(default)]
    class_label: Option<usize>,
    #[serde(default)]
    global_visual: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct SidecarProposal<'a> {
    bbox: [f64; 4],
    lang_offset: usize,
    visn_offset: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    category: Option<Category>,
    #[serde(skip_serializing_if = "Option::is_none")]
    entity_label: Option<EntityLabel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
}

#[derive(Serialize)]
struct SidecarDocument<'a> {
    doc_id: &'a str,
    proposals: Vec<SidecarProposal<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    global_visual: Option<&'a Vec<f64>>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn sidecar_slice(data: &[f32], offset: Option<usize>, len: usize, what: &str) -> std::result::Result<Vec<f64>, String> {
    let off = offset.ok_or_else(|| format!("proposal has neither `{what}` nor `{what}_offset`"))?;
    data.get(off..off + len)
        .map(|s| s.iter().map(|&v| f64::from(v)).collect())
        .ok_or_else(|| format!("`{what}_offset` {off} runs past the sidecar"))
}

/// Parses a corpus from text already in memory. `path` is used for error
/// messages and to resolve a sidecar.
pub fn parse_corpus(text: &str, path: &Path) -> Result<Corpus> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file: missing header"))?;
    let header: CorpusHeader =
        serde_json::from_str(first).map_err(|e| parse_err(path, 1, format!("bad header: {e}")))?;
    if header.version != CORPUS_VERSION {
        return Err(parse_err(
            path,
            1,
            format!("unsupported corpus version {}", header.version),
        ));
    }
    if header.d_lang == 0 || header.d_visn == 0 {
        return Err(parse_err(path, 1, "feature dimensions must be positive"));
    }
    let sidecar: Option<Vec<f32>> = match &header.sidecar {
        Some(name) => {
            let p = path.parent().unwrap_or(Path::new(".")).join(name);
            let bytes = fs::read(&p)?;
            if bytes.len() % 4 != 0 {
                return Err(parse_err(path, 1, "sidecar length is not a multiple of 4"));
            }
            Some(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        None => None,
    };

    let mut corpus = Corpus::new(header.d_lang, header.d_visn, Vec::new());
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentRecord = serde_json::from_str(line).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let mut proposals = Vec::with_capacity(rec.proposals.len());
        for (pi, pr) in rec.proposals.into_iter().enumerate() {
            let resolve =
                |inline: Option<Vec<f64>>, off: Option<usize>, len: usize, what: &str| match (inline, &sidecar) {
                    (Some(v), _) => Ok(v),
                    (None, Some(data)) => sidecar_slice(data, off, len, what),
                    (None, None) => Err(format!("proposal is missing `{what}`")),
                };
            let lang = resolve(pr.lang, pr.lang_offset, header.d_lang, "lang")
                .map_err(|m| parse_err(path, lineno, format!("proposal {pi}: {m}")))?;
            let visn = resolve(pr.visn, pr.visn_offset, header.d_visn, "visn")
                .map_err(|m| parse_err(path, lineno, format!("proposal {pi}: {m}")))?;
            let p = Proposal {
                bbox: pr.bbox,
                lang,
                visn,
                category: pr.category,
                entity_label: pr.entity_label,
                text: pr.text,
            };
            p.validate(header.d_lang, header.d_visn)
                .map_err(|e| parse_err(path, lineno, format!("proposal {pi}: {e}")))?;
            proposals.push(p);
        }
        if proposals.is_empty() {
            warn!(
                "{}:{lineno}: document `{}` has no proposals; skipped",
                path.display(),
                rec.doc_id
            );
            corpus.rejected_empty += 1;
            continue;
        }
        corpus.documents.push(Document {
            doc_id: rec.doc_id,
            proposals,
            class_label: rec.class_label,
            global_visual: rec.global_visual,
        });
    }
    if corpus.rejected_empty > 0 {
        warn!(
            "{}: rejected {} empty document(s)",
            path.display(),
            corpus.rejected_empty
        );
    }
    Ok(corpus)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_corpus(&text, path)
}

/// Canonical text form: header line then one document per line.
pub fn corpus_to_string(corpus: &Corpus) -> Result<String> {
    let header = CorpusHeader {
        version: CORPUS_VERSION,
        d_lang: corpus.d_lang,
        d_visn: corpus.d_visn,
        sidecar: None,
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for doc in &corpus.documents {
        out.push_str(&serde_json::to_string(doc)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    write_atomic(path.as_ref(), corpus_to_string(corpus)?.as_bytes())
}

/// Writes the JSON Lines file plus a `.bin` sidecar holding every feature
/// vector as little-endian `f32`. Lossy: values are rounded to `f32`.
pub fn save_corpus_with_sidecar(path: impl AsRef<Path>, corpus: &Corpus) -> Result<PathBuf> {
    let path = path.as_ref();
    let bin_path = path.with_extension("bin");
    let bin_name = bin_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Invalid(format!("bad corpus path {}", path.display())))?
        .to_string();
    let header = CorpusHeader {
        version: CORPUS_VERSION,
        d_lang: corpus.d_lang,
        d_visn: corpus.d_visn,
        sidecar: Some(bin_name),
    };
    let mut bin: Vec<u8> = Vec::new();
    let mut push = |v: &[f64]| -> usize {
        let off = bin.len() / 4;
        for &x in v {
            bin.extend_from_slice(&(x as f32).to_le_bytes());
        }
        off
    };
    let mut text = serde_json::to_string(&header)?;
    text.push('\n');
    for doc in &corpus.documents {
        let proposals = doc
            .proposals
            .iter()
            .map(|p| SidecarProposal {
                bbox: p.bbox,
                lang_offset: push(&p.lang),
                visn_offset: push(&p.visn),
                category: p.category,
                entity_label: p.entity_label,
                text: p.text.as_deref(),
            })
            .collect();
        let rec = SidecarDocument {
            doc_id: &doc.doc_id,
            proposals,
            class_label: doc.class_label,
            global_visual: doc.global_visual.as_ref(),
        };
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
    }
    write_atomic(&bin_path, &bin)?;
    write_atomic(path, text.as_bytes())?;
    Ok(bin_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, n: usize) -> Document {
        Document {
            doc_id: id.into(),
            proposals: (0..n)
                .map(|i| {
                    let mut p = Proposal::new(
                        [0.1, 0.1 * i as f64, 0.5, 0.1 * i as f64 + 0.05],
                        vec![i as f64 + 0.25, -1.5],
                        vec![0.3; 3],
                    );
                    p.entity_label = Some(EntityLabel::Question);
                    p
                })
                .collect(),
            class_label: Some(1),
            global_visual: None,
        }
    }

    #[test]
    fn write_then_read_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = Corpus::new(2, 3, vec![doc("a", 1), doc("b", 3), doc("c", 2)]);
        save_corpus(&path, &corpus).unwrap();
        let back = load_corpus(&path).unwrap();
        assert_eq!(back, corpus);
        let first = fs::read(&path).unwrap();
        save_corpus(&path, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn features_roundtrip_bit_for_bit() {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut d = doc("a", 4);
        for p in &mut d.proposals {
            p.lang
                .iter_mut()
                .chain(p.visn.iter_mut())
                .for_each(|x| *x = r.random::<f64>() * 7.0 - 3.5);
        }
        let corpus = Corpus::new(2, 3, vec![d]);
        let back = parse_corpus(&corpus_to_string(&corpus).unwrap(), Path::new("mem")).unwrap();
        for (a, b) in back.documents[0].proposals.iter().zip(&corpus.documents[0].proposals) {
            assert!(a.lang.iter().zip(&b.lang).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.visn.iter().zip(&b.visn).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn inverted_box_reports_line_number() {
        let text = "{\"version\":1,\"d_lang\":1,\"d_visn\":1}\n\
                    {\"doc_id\":\"ok\",\"proposals\":[{\"bbox\":[0,0,1,1],\"lang\":[1],\"visn\":[1]}]}\n\
                    {\"doc_id\":\"bad\",\"proposals\":[{\"bbox\":[0.9,0,0.1,1],\"lang\":[1],\"visn\":[1]}]}\n";
        let err = parse_corpus(text, Path::new("x.jsonl")).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("x1 > x2"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let text = "{\"version\":1,\"d_lang\":2,\"d_visn\":1}\n\
                    {\"doc_id\":\"a\",\"proposals\":[{\"bbox\":[0,0,1,1],\"lang\":[1],\"visn\":[1]}]}\n";
        let err = parse_corpus(text, Path::new("x.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = "{\"version\":1,\"d_lang\":1,\"d_visn\":1}\n{oops\n";
        let err = parse_corpus(text, Path::new("x.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_corpus("nope\n", Path::new("x.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_documents_are_counted_and_dropped() {
        let text = "{\"version\":1,\"d_lang\":1,\"d_visn\":1}\n\
                    {\"doc_id\":\"empty\",\"proposals\":[]}\n\
                    {\"doc_id\":\"a\",\"proposals\":[{\"bbox\":[0,0,1,1],\"lang\":[1],\"visn\":[1]}]}\n";
        let c = parse_corpus(text, Path::new("x.jsonl")).unwrap();
        assert_eq!(c.rejected_empty, 1);
        assert_eq!(c.documents.len(), 1);
    }

    #[test]
    fn sidecar_matches_json_to_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = Corpus::new(2, 3, vec![doc("a", 2), doc("b", 4)]);
        let bin = save_corpus_with_sidecar(&path, &corpus).unwrap();
        assert!(bin.exists());
        let back = load_corpus(&path).unwrap();
        assert_eq!(back.documents.len(), 2);
        for (d0, d1) in corpus.documents.iter().zip(&back.documents) {
            assert_eq!(d0.doc_id, d1.doc_id);
            for (p0, p1) in d0.proposals.iter().zip(&d1.proposals) {
                assert_eq!(p0.bbox, p1.bbox);
                for (a, b) in p0.lang.iter().chain(&p0.visn).zip(p1.lang.iter().chain(&p1.visn)) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}
