//! Synthetic feature bundles standing in for pretrained text/image encoders.
//!
//! Class directions are drawn from `seed` alone, so splits generated with the
//! same seed and different `stream`s share them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DatasetSplit, DocFeatureBundle, SplitTag};
use crate::error::{HmtError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    /// Class `c` shifts every feature row by a fixed unit direction.
    Planted,
    /// Text carries bit `a`, images carry bit `b`, label is `a XOR b`.
    Xor,
}

impl std::str::FromStr for SynthMode {
    type Err = HmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planted" => Ok(SynthMode::Planted),
            "xor" => Ok(SynthMode::Xor),
            other => Err(HmtError::Config(format!("unknown synth mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub docs: usize,
    pub classes: usize,
    pub d: usize,
    /// Inclusive range of section counts per document.
    pub sections: (usize, usize),
    pub r: usize,
    /// Inclusive range of image counts per document.
    pub images: (usize, usize),
    /// Inclusive range of sentences cut from each section.
    pub sentences_per_section: (usize, usize),
    pub sigma: f64,
    pub mode: SynthMode,
    pub seed: u64,
    pub stream: u64,
    pub tag: SplitTag,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            docs: 100,
            classes: 2,
            d: 32,
            sections: (1, 4),
            r: 16,
            images: (1, 4),
            sentences_per_section: (2, 5),
            sigma: 0.3,
            mode: SynthMode::Planted,
            seed: 0,
            stream: 0,
            tag: SplitTag::Train,
        }
    }
}

impl SynthSpec {
    fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(HmtError::Config(msg));
        if self.d < 8 {
            return bad(format!("d = {} must be at least 8", self.d));
        }
        if self.classes < 2 {
            return bad(format!("classes = {} must be at least 2", self.classes));
        }
        if self.mode == SynthMode::Xor && self.classes != 2 {
            return bad("xor mode requires exactly 2 classes".into());
        }
        let (lo, hi) = self.sentences_per_section;
        if lo == 0 || lo > hi || hi > self.r {
            return bad(format!("sentences per section {lo}..={hi} invalid for r = {}", self.r));
        }
        for (name, (lo, hi)) in [("sections", self.sections), ("images", self.images)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range {lo}..={hi} invalid"));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma = {} invalid", self.sigma));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Values are rounded to f32 precision so they survive HMTB unchanged.
fn noisy_rows(rng: &mut ChaCha8Rng, rows: usize, centre: &[f64], sigma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * centre.len());
    for _ in 0..rows {
        for &c in centre {
            let z: f64 = StandardNormal.sample(rng);
            out.push((c + sigma * z) as f32 as f64);
        }
    }
    out
}

/// Cuts `r` slots into `k` sentences followed by tail padding.
fn sentence_lengths(rng: &mut ChaCha8Rng, r: usize, k: usize) -> Vec<usize> {
    let used = rng.random_range(k.max(r * 3 / 4)..=r);
    let mut cuts: Vec<usize> = Vec::with_capacity(k + 1);
    cuts.push(0);
    let mut pool: Vec<usize> = (1..used).collect();
    for _ in 1..k {
        let pick = rng.random_range(0..pool.len());
        cuts.push(pool.swap_remove(pick));
    }
    cuts.sort_unstable();
    cuts.push(used);
    cuts.windows(2).map(|w| w[1] - w[0]).collect()
}

pub fn synth_generate(spec: &SynthSpec) -> Result<DatasetSplit> {
    spec.check()?;
    let d = spec.d;
    let mut world = ChaCha8Rng::seed_from_u64(spec.seed);
    let class_dirs: Vec<Vec<f64>> = (0..spec.classes).map(|_| unit_vector(&mut world, d)).collect();
    let text_dir = unit_vector(&mut world, d);
    let image_dir = unit_vector(&mut world, d);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.stream.wrapping_add(1));
    let mut docs = Vec::with_capacity(spec.docs);
    for i in 0..spec.docs {
        let l = rng.random_range(spec.sections.0..=spec.sections.1);
        let m = rng.random_range(spec.images.0..=spec.images.1);
        let (label, text_centre, image_centre) = match spec.mode {
            SynthMode::Planted => {
                let c = rng.random_range(0..spec.classes);
                (c, class_dirs[c].clone(), class_dirs[c].clone())
            }
            SynthMode::Xor => {
                let a = rng.random_bool(0.5);
                let b = rng.random_bool(0.5);
                let sign = |bit: bool| if bit { 1.0 } else { -1.0 };
                let t: Vec<f64> = text_dir.iter().map(|v| v * sign(a)).collect();
                let h: Vec<f64> = image_dir.iter().map(|v| v * sign(b)).collect();
                (usize::from(a ^ b), t, h)
            }
        };

        let mut s_mask = Vec::with_capacity(l * spec.r);
        let mut sentence = 0u32;
        for _ in 0..l {
            let k = rng.random_range(spec.sentences_per_section.0..=spec.sentences_per_section.1);
            for len in sentence_lengths(&mut rng, spec.r, k) {
                sentence += 1;
                s_mask.extend(std::iter::repeat_n(sentence, len));
            }
            s_mask.resize(s_mask.len().next_multiple_of(spec.r), 0);
        }

        let sections = noisy_rows(&mut rng, l, &text_centre, spec.sigma);
        let mut words = noisy_rows(&mut rng, l * spec.r, &text_centre, spec.sigma);
        for (slot, &v) in s_mask.iter().enumerate() {
            if v == 0 {
                words[slot * d..(slot + 1) * d].fill(0.0);
            }
        }
        let images = noisy_rows(&mut rng, m, &image_centre, spec.sigma);

        docs.push(DocFeatureBundle {
            doc_id: format!("synth-{}-{}-{i:05}", spec.seed, spec.stream),
            label: label as u32,
            l,
            r: spec.r,
            d,
            n: sentence as usize,
            m,
            sections: Tensor::new(vec![l, d], sections)?,
            words: Tensor::new(vec![l * spec.r, d], words)?,
            s_mask,
            images: Tensor::new(vec![m, d], images)?,
        });
    }
    Ok(DatasetSplit {
        tag: spec.tag,
        classes: spec.classes,
        docs,
    })
}
