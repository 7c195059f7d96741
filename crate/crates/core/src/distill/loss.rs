use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ForwardTrace;
use crate::scalar::Real;

/// Floor applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Weights of the hard-label, soft-label and embedding terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_h: f64,
    pub alpha_s: f64,
    pub alpha_e: f64,
}

impl LossWeights {
    pub fn new(alpha_h: f64, alpha_s: f64, alpha_e: f64) -> Result<Self> {
        let w = Self { alpha_h, alpha_s, alpha_e };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_h, self.alpha_s, self.alpha_e];
        if all.iter().any(|a| !(a.is_finite() && *a >= 0.0)) || all.iter().all(|&a| a == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be nonnegative with at least one positive, got {all:?}"
            )));
        }
        Ok(())
    }

    pub fn needs_teacher(&self) -> bool {
        self.alpha_s > 0.0 || self.alpha_e > 0.0
    }
}

/// Named weight combinations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Th,
    Ths,
    Thse,
    /// Embedding-only training of the layers up to the tap, then a
    /// hard-label stage for the head.
    Te,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Th, Strategy::Ths, Strategy::Thse, Strategy::Te];

    /// Weights of the (first) training stage.
    pub fn weights(self) -> LossWeights {
        let (h, s, e) = match self {
            Strategy::Th => (1.0, 0.0, 0.0),
            Strategy::Ths => (0.5, 1.0, 0.0),
            Strategy::Thse => (1.0, 1.0, 1.0),
            Strategy::Te => (0.0, 0.0, 1.0),
        };
        LossWeights { alpha_h: h, alpha_s: s, alpha_e: e }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Th => "Th",
            Strategy::Ths => "Ths",
            Strategy::Thse => "Thse",
            Strategy::Te => "Te",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}` (Th, Ths, Thse, Te)")))
    }
}

/// Loss terms summed over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub hard: f64,
    pub soft: f64,
    pub embedding: f64,
}

pub fn compound_loss(terms: &LossTerms, w: LossWeights) -> f64 {
    w.alpha_h * terms.hard + w.alpha_s * terms.soft + w.alpha_e * terms.embedding
}

/// Supervision for one example: the hard label and, when distilling, the
/// teacher's class distribution and embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub label: usize,
    pub soft: Option<Vec<f64>>,
    pub embedding: Option<Vec<f64>>,
}

fn cross_entropy(q: &[f64], p: &[f64]) -> f64 {
    -q.iter().zip(p).map(|(&qc, &pc)| if qc == 0.0 { 0.0 } else { qc * pc.max(LOG_FLOOR).ln() }).sum::<f64>()
}

impl Target {
    pub fn hard(label: usize) -> Self {
        Self { label, soft: None, embedding: None }
    }

    /// Loss terms of one student output against this target. Teacher terms
    /// are computed whenever teacher outputs are present.
    pub fn terms(&self, probs: &[f64], embedding: Option<&[f64]>, w: LossWeights) -> Result<LossTerms> {
        if self.label >= probs.len() {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                self.label,
                probs.len()
            )));
        }
        let hard = -probs[self.label].max(LOG_FLOOR).ln();
        let soft = match &self.soft {
            Some(q) if q.len() != probs.len() => {
                return Err(Error::Shape(format!("teacher has {} classes, student {}", q.len(), probs.len())))
            }
            Some(q) => cross_entropy(q, probs),
            None if w.alpha_s > 0.0 => return Err(Error::InvalidArgument("soft-label term needs a teacher".into())),
            None => 0.0,
        };
        let emb = match (&self.embedding, embedding) {
            (Some(t), Some(s)) if t.len() != s.len() && w.alpha_e == 0.0 => 0.0,
            (Some(t), Some(s)) if t.len() != s.len() => {
                return Err(Error::Shape(format!("teacher embedding has {} dims, student {}", t.len(), s.len())))
            }
            (Some(t), Some(s)) => t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum(),
            _ if w.alpha_e > 0.0 => {
                return Err(Error::InvalidArgument("embedding term needs teacher and student taps".into()))
            }
            _ => 0.0,
        };
        Ok(LossTerms { hard, soft, embedding: emb })
    }
}

/// Derivative of `-sum_c q_c log max(p_c, floor)` with respect to the
/// logits: `p_k * sum_{c unclamped} q_c - q_k [k unclamped]`.
fn ce_logit_grad(p: &[f64], q: &[f64], out: &mut [f64], scale: f64) {
    let live = |c: usize| p[c] >= LOG_FLOOR;
    let mass: f64 = (0..p.len()).filter(|&c| live(c)).map(|c| q[c]).sum();
    for k in 0..p.len() {
        let own = if live(k) { q[k] } else { 0.0 };
        out[k] += scale * (p[k] * mass - own);
    }
}

/// Gradient of the compound loss of one example with respect to the
/// student logits. The embedding term enters at the tap instead.
pub fn logit_grad(probs: &[f64], target: &Target, w: LossWeights) -> Result<Vec<f64>> {
    let mut g = vec![0.0; probs.len()];
    if w.alpha_h > 0.0 {
        let mut y = vec![0.0; probs.len()];
        *y.get_mut(target.label).ok_or_else(|| Error::InvalidArgument("label out of range".into()))? = 1.0;
        ce_logit_grad(probs, &y, &mut g, w.alpha_h);
    }
    if w.alpha_s > 0.0 {
        let q =
            target.soft.as_deref().ok_or_else(|| Error::InvalidArgument("soft-label term needs a teacher".into()))?;
        if q.len() != probs.len() {
            return Err(Error::Shape("teacher and student class counts differ".into()));
        }
        ce_logit_grad(probs, q, &mut g, w.alpha_s);
    }
    Ok(g)
}

/// Gradient of `||v_t - v_s||^2` with respect to the student embedding.
pub fn embedding_grad(student: &[f64], teacher: &[f64]) -> Vec<f64> {
    student.iter().zip(teacher).map(|(s, t)| 2.0 * (s - t)).collect()
}

fn as_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Batch loss terms from forward traces. With a teacher, the soft and
/// embedding terms are filled in as well.
pub fn loss_terms<T: Real>(
    student: &[ForwardTrace<T>],
    teacher: Option<&[ForwardTrace<T>]>,
    labels: &[usize],
) -> Result<LossTerms> {
    if student.len() != labels.len() || teacher.is_some_and(|t| t.len() != labels.len()) {
        return Err(Error::Shape("traces and labels differ in length".into()));
    }
    let mut total = LossTerms::default();
    let w = LossWeights { alpha_h: 1.0, alpha_s: 0.0, alpha_e: 0.0 };
    for (n, (s, &label)) in student.iter().zip(labels).enumerate() {
        let target = match teacher {
            Some(t) => Target { label, soft: Some(as_f64(&t[n].class_probs)), embedding: t[n].embedding().map(as_f64) },
            None => Target::hard(label),
        };
        let emb = s.embedding().map(as_f64);
        match (&target.embedding, &emb) {
            (Some(_), None) => return Err(Error::InvalidArgument("student has no embedding tap".into())),
            (Some(t), Some(s)) if t.len() != s.len() => {
                return Err(Error::Shape(format!("teacher embedding has {} dims, student {}", t.len(), s.len())))
            }
            _ => {}
        }
        let t = target.terms(&as_f64(&s.class_probs), emb.as_deref(), w)?;
        total.hard += t.hard;
        total.soft += t.soft;
        total.embedding += t.embedding;
    }
    Ok(total)
}
