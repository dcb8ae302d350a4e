use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Detected component category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    TextBlock,
    Title,
    List,
    Table,
    Figure,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::TextBlock,
        Category::Title,
        Category::List,
        Category::Table,
        Category::Figure,
    ];
}

/// Form entity classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityLabel {
    Header,
    Question,
    Answer,
    Other,
}

impl EntityLabel {
    pub const ALL: [EntityLabel; 4] = [
        EntityLabel::Header,
        EntityLabel::Question,
        EntityLabel::Answer,
        EntityLabel::Other,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EntityLabel::Header => "header",
            EntityLabel::Question => "question",
            EntityLabel::Answer => "answer",
            EntityLabel::Other => "other",
        }
    }
}

/// One of the two parallel feature channels of a proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Lang,
    Visn,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Lang => "text",
            Modality::Visn => "visn",
        }
    }
}

/// Full-page box carried by the sequence-initial special tokens.
pub const PAGE_BBOX: [f64; 4] = [0.0, 0.0, 1.0, 1.0];
/// Box carried by the terminal separator.
pub const SEP_BBOX: [f64; 4] = [0.0, 0.0, 0.0, 0.0];

/// One detected document component with its two feature views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    /// `(x1, y1, x2, y2)` in normalized page coordinates.
    pub bbox: [f64; 4],
    pub lang: Vec<f64>,
    pub visn: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_label: Option<EntityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl Proposal {
    pub fn new(bbox: [f64; 4], lang: Vec<f64>, visn: Vec<f64>) -> Self {
        Self {
            bbox,
            lang,
            visn,
            category: None,
            entity_label: None,
            text: None,
        }
    }

    pub fn validate(&self, d_lang: usize, d_visn: usize) -> Result<()> {
        let [x1, y1, x2, y2] = self.bbox;
        if !self.bbox.iter().all(|c| (0.0..=1.0).contains(c)) {
            return invalid(format!("bbox {:?} outside [0, 1]", self.bbox));
        }
        if x1 > x2 || y1 > y2 {
            return invalid(format!("bbox {:?} has x1 > x2 or y1 > y2", self.bbox));
        }
        if self.lang.len() != d_lang {
            return invalid(format!(
                "language feature has length {}, header says {d_lang}",
                self.lang.len()
            ));
        }
        if self.visn.len() != d_visn {
            return invalid(format!(
                "visual feature has length {}, header says {d_visn}",
                self.visn.len()
            ));
        }
        if !self.lang.iter().chain(&self.visn).all(|v| v.is_finite()) {
            return invalid("non-finite feature value");
        }
        Ok(())
    }

    /// Page quadrant of the box center: 0 top-left, 1 top-right,
    /// 2 bottom-left, 3 bottom-right (y grows downwards).
    pub fn quadrant(&self) -> usize {
        let cx = 0.5 * (self.bbox[0] + self.bbox[2]);
        let cy = 0.5 * (self.bbox[1] + self.bbox[3]);
        usize::from(cx >= 0.5) + 2 * usize::from(cy >= 0.5)
    }
}

/// An ordered proposal sequence. Language and vision views are
/// index-aligned because each proposal carries both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub proposals: Vec<Proposal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_visual: Option<Vec<f64>>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

/// Sequence-initial token built from a whole document.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecialToken {
    pub bbox: [f64; 4],
    pub lang: Vec<f64>,
    pub visn: Vec<f64>,
}

fn mean_of<'a>(rows: impl ExactSizeIterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut acc: Vec<f64> = Vec::new();
    for row in rows {
        if acc.is_empty() {
            acc = vec![0.0; row.len()];
        }
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Builds the `[LANG]` and `[VISN]` tokens: feature means over all
/// proposals, with a full-page box. Both tokens carry both means so either
/// branch finds a vector at the shared index.
pub fn make_special_tokens(doc: &Document) -> Result<(SpecialToken, SpecialToken)> {
    if doc.proposals.is_empty() {
        return invalid(format!("document `{}` has no proposals", doc.doc_id));
    }
    let lang = mean_of(doc.proposals.iter().map(|p| &p.lang));
    let visn = mean_of(doc.proposals.iter().map(|p| &p.visn));
    let tok = SpecialToken {
        bbox: PAGE_BBOX,
        lang,
        visn,
    };
    Ok((tok.clone(), tok))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(props: Vec<Proposal>) -> Document {
        Document {
            doc_id: "d".into(),
            proposals: props,
            class_label: None,
            global_visual: None,
        }
    }

    #[test]
    fn single_proposal_special_tokens_copy_it() {
        let p = Proposal::new([0.1, 0.2, 0.3, 0.4], vec![1.0, -2.0], vec![0.5, 0.25, 3.0]);
        let (l, v) = make_special_tokens(&doc(vec![p.clone()])).unwrap();
        assert_eq!(l.lang, p.lang);
        assert_eq!(v.visn, p.visn);
        assert_eq!(l.bbox, [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn opposite_features_average_to_zero() {
        let a = Proposal::new([0.0, 0.0, 0.5, 0.5], vec![1.5, -0.5], vec![2.0]);
        let b = Proposal::new([0.5, 0.5, 1.0, 1.0], vec![-1.5, 0.5], vec![-2.0]);
        let (l, v) = make_special_tokens(&doc(vec![a, b])).unwrap();
        assert_eq!(l.lang, vec![0.0, 0.0]);
        assert_eq!(v.visn, vec![0.0]);
    }

    #[test]
    fn means_match_loop_average() {
        let props: Vec<Proposal> = (0..5)
            .map(|i| {
                let f = i as f64;
                Proposal::new(
                    [0.0, 0.0, 0.1, 0.1],
                    vec![f.sin(), f * 0.3],
                    vec![f.cos(), 1.0 / (f + 1.0), -f],
                )
            })
            .collect();
        let (l, _) = make_special_tokens(&doc(props.clone())).unwrap();
        for j in 0..2 {
            let mut s = 0.0;
            for p in &props {
                s += p.lang[j];
            }
            assert!((l.lang[j] - s / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_document_is_rejected() {
        assert!(make_special_tokens(&doc(vec![])).is_err());
    }

    #[test]
    fn inverted_box_is_rejected() {
        let p = Proposal::new([0.6, 0.1, 0.2, 0.4], vec![0.0], vec![0.0]);
        assert!(p.validate(1, 1).is_err());
    }
}
