//! Pre-extracted document features, their validation rules, the HMTB
//! container format and a synthetic generator.

mod hmtb;
mod synth;

pub use hmtb::{read_hmtb, write_hmtb, HMTB_MAGIC, HMTB_VERSION};
pub use synth::{synth_generate, SynthMode, SynthSpec};

use std::fmt;

use crate::error::{HmtError, Result};
use crate::tensor::Tensor;

/// One document's features. `s_mask` tags each word slot with its sentence
/// id (`1..=n`) or `0` for padding; ids are global across sections.
#[derive(Debug, Clone, PartialEq)]
pub struct DocFeatureBundle {
    pub doc_id: String,
    pub label: u32,
    pub l: usize,
    pub r: usize,
    pub d: usize,
    pub n: usize,
    pub m: usize,
    /// `l × d`
    pub sections: Tensor,
    /// `(l·r) × d`
    pub words: Tensor,
    pub s_mask: Vec<u32>,
    /// `m × d`, raw encoder output (projected inside the model)
    pub images: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Shape,
    NoSections,
    NoImages,
    NoSentences,
    SentenceRange,
    MissingSentence,
    NonMonotone,
    PadInterior,
    CountMismatch,
    NonFinite,
}

impl ViolationKind {
    pub fn code(self) -> &'static str {
        match self {
            ViolationKind::Shape => "shape",
            ViolationKind::NoSections => "no-sections",
            ViolationKind::NoImages => "no-images",
            ViolationKind::NoSentences => "no-sentences",
            ViolationKind::SentenceRange => "sentence-range",
            ViolationKind::MissingSentence => "missing-sentence",
            ViolationKind::NonMonotone => "non-monotone",
            ViolationKind::PadInterior => "pad-interior",
            ViolationKind::CountMismatch => "count-mismatch",
            ViolationKind::NonFinite => "non-finite",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.code(), self.detail)
    }
}

fn violation(kind: ViolationKind, detail: impl Into<String>) -> Violation {
    Violation {
        kind,
        detail: detail.into(),
    }
}

/// Checks every bundle invariant and reports all violations found.
pub fn validate_bundle(b: &DocFeatureBundle) -> std::result::Result<(), Vec<Violation>> {
    use ViolationKind::*;
    let mut out = Vec::new();
    if b.l == 0 {
        out.push(violation(NoSections, "l = 0"));
    }
    if b.m == 0 {
        out.push(violation(NoImages, "m = 0"));
    }
    let check_shape = |name: &str, t: &Tensor, rows: usize, out: &mut Vec<Violation>| {
        if t.shape() != [rows, b.d] {
            out.push(violation(
                Shape,
                format!("{name} has shape {:?}, expected [{rows}, {}]", t.shape(), b.d),
            ));
        } else if !t.is_finite() {
            out.push(violation(NonFinite, format!("{name} contains NaN or Inf")));
        }
    };
    if b.l > 0 && b.m > 0 && b.d > 0 {
        check_shape("sections", &b.sections, b.l, &mut out);
        check_shape("words", &b.words, b.l * b.r, &mut out);
        check_shape("images", &b.images, b.m, &mut out);
    }
    if b.s_mask.len() != b.l * b.r {
        out.push(violation(
            Shape,
            format!("s_mask has length {}, expected {}", b.s_mask.len(), b.l * b.r),
        ));
        return Err(out);
    }

    let max = b.s_mask.iter().copied().max().unwrap_or(0) as usize;
    if max == 0 {
        out.push(violation(NoSentences, "s_mask holds no sentence ids"));
    }
    if max != b.n {
        out.push(violation(CountMismatch, format!("n = {} but max(s_mask) = {max}", b.n)));
    }
    let mut seen = vec![false; max + 1];
    let mut prev = 0u32;
    for (i, &v) in b.s_mask.iter().enumerate() {
        if v as usize > b.n {
            out.push(violation(SentenceRange, format!("s_mask[{i}] = {v} exceeds n = {}", b.n)));
        }
        if v == 0 {
            continue;
        }
        seen[v as usize] = true;
        if v < prev {
            out.push(violation(NonMonotone, format!("s_mask[{i}] = {v} follows {prev}")));
        }
        prev = v;
    }
    for (id, present) in seen.iter().enumerate().skip(1) {
        if !present {
            out.push(violation(MissingSentence, format!("sentence {id} has no words")));
        }
    }
    if b.r > 0 {
        for (sec, span) in b.s_mask.chunks(b.r).enumerate() {
            if let Some(first_pad) = span.iter().position(|&v| v == 0) {
                if let Some(off) = span[first_pad..].iter().position(|&v| v != 0) {
                    out.push(violation(
                        PadInterior,
                        format!("section {sec}: slot {} follows padding", first_pad + off),
                    ));
                }
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

pub(crate) fn ensure_valid(b: &DocFeatureBundle) -> Result<()> {
    validate_bundle(b).map_err(|v| HmtError::Validation {
        doc_id: b.doc_id.clone(),
        violations: v.iter().map(ToString::to_string).collect(),
    })
}

/// Section assigned to each sentence (index `i` holds sentence `i + 1`).
/// A sentence whose words fall in several sections goes to the one holding
/// most of them, ties to the earlier section.
pub fn sentence_sections(s_mask: &[u32], l: usize, r: usize) -> Vec<usize> {
    let n = s_mask.iter().copied().max().unwrap_or(0) as usize;
    let mut counts = vec![vec![0usize; l]; n];
    for (slot, &v) in s_mask.iter().enumerate().take(l * r) {
        if v > 0 {
            counts[v as usize - 1][slot / r] += 1;
        }
    }
    counts
        .iter()
        .map(|c| {
            let mut best = 0;
            for (j, &k) in c.iter().enumerate() {
                if k > c[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn file_name(self) -> &'static str {
        match self {
            SplitTag::Train => "train.hmtb",
            SplitTag::Val => "val.hmtb",
            SplitTag::Test => "test.hmtb",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub tag: SplitTag,
    pub classes: usize,
    pub docs: Vec<DocFeatureBundle>,
}

impl DatasetSplit {
    /// Checks every document plus the split-level invariants (shared `d`
    /// and `r`, labels below the class count).
    pub fn validate(&self) -> Result<()> {
        let first = self.docs.first();
        for doc in &self.docs {
            ensure_valid(doc)?;
            if let Some(f) = first {
                if doc.d != f.d || doc.r != f.r {
                    return Err(HmtError::Validation {
                        doc_id: doc.doc_id.clone(),
                        violations: vec![format!(
                            "split-dims: (d, r) = ({}, {}) differs from ({}, {})",
                            doc.d, doc.r, f.d, f.r
                        )],
                    });
                }
            }
            if doc.label as usize >= self.classes {
                return Err(HmtError::LabelOutOfRange {
                    label: doc.label as usize,
                    classes: self.classes,
                });
            }
        }
        Ok(())
    }
}
