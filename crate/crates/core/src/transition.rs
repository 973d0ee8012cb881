//! Decoupled category / state scoring.
//!
//! Each anchor carries two raw score vectors: action evidence `action[0..=K]`
//! (index 0 is background) and transition evidence `transition[0..K]` for the
//! K real categories. The two heads are read out jointly:
//!
//! * category probabilities: softmax over `action[j] + transition[j-1]`,
//!   with no transition term for background. A transitional frame carries
//!   evidence *for* its category here, so transitional context sharpens
//!   classification instead of diluting it.
//! * state score: `sigmoid(action[i] - transition[i])` per category. Near 1
//!   the anchor looks like the action in progress, near 0 like the
//!   transitional phase around it.
//!
//! Category probabilities depend only on the sum of the two branches, the
//! state score only on their difference.

use crate::graph::{sigmoid, softmax_row};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScorePair {
    /// Action evidence per category, background first; length K+1.
    pub action: Vec<f64>,
    /// Transition evidence per real category; length K.
    pub transition: Vec<f64>,
}

impl ScorePair {
    pub fn new(action: Vec<f64>, transition: Vec<f64>) -> Result<Self> {
        if action.len() < 2 || transition.len() + 1 != action.len() {
            return Err(Error::shape(format!(
                "score pair wants K+1 action and K transition scores, got {} and {}",
                action.len(),
                transition.len()
            )));
        }
        Ok(ScorePair { action, transition })
    }

    pub fn num_classes(&self) -> usize {
        self.transition.len()
    }

    /// Softmax over `action[j] + transition[j-1]` (background gets no
    /// transition term). Length K+1, sums to 1.
    pub fn category_probs(&self) -> Vec<f64> {
        assert_eq!(self.action.len(), self.transition.len() + 1, "inconsistent score pair");
        let mut logits = Vec::with_capacity(self.action.len());
        logits.push(self.action[0]);
        for (a, t) in self.action[1..].iter().zip(&self.transition) {
            logits.push(a + t);
        }
        let mut out = vec![0.0; logits.len()];
        softmax_row(&logits, &mut out);
        out
    }

    /// `sigmoid(action[i] - transition[i])` per real category. Length K.
    pub fn state_probs(&self) -> Vec<f64> {
        assert_eq!(self.action.len(), self.transition.len() + 1, "inconsistent score pair");
        self.action[1..]
            .iter()
            .zip(&self.transition)
            .map(|(a, t)| sigmoid(a - t))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    Background,
    /// Transitional phase of `class` (1-based): right category, wrong moment.
    Transitional { class: usize, p: f64, t: f64 },
    Active { class: usize, p: f64, t: f64 },
}

/// Hard decision for one anchor. `class` in the verdict is 1-based, matching
/// the category axis (0 is background). Argmax ties break to the lowest
/// index.
pub fn classify(scores: &ScorePair, p_threshold: f64, t_threshold: f64) -> Verdict {
    let p = scores.category_probs();
    let mut best = 0;
    for (j, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = j;
        }
    }
    if best == 0 || p[best] < p_threshold {
        return Verdict::Background;
    }
    let t = scores.state_probs()[best - 1];
    if t >= t_threshold {
        Verdict::Active { class: best, p: p[best], t }
    } else {
        Verdict::Transitional { class: best, p: p[best], t }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_probabilities() {
        let s = ScorePair::new(vec![0.0, 1.0, 0.0], vec![1.0, 0.0]).unwrap();
        let p = s.category_probs();
        // logits [0, 2, 0]
        assert!((p[0] - 0.10650697891920075).abs() < 1e-15);
        assert!((p[1] - 0.7869860421615985).abs() < 1e-15);
        assert!((p[2] - 0.10650697891920075).abs() < 1e-15);
        let t = s.state_probs();
        assert_eq!(t, vec![0.5, 0.5]);
    }

    #[test]
    fn new_rejects_mismatched_lengths() {
        assert!(ScorePair::new(vec![0.0, 1.0], vec![0.5]).is_ok());
        assert!(ScorePair::new(vec![0.0, 1.0, 2.0], vec![0.5]).is_err());
        assert!(ScorePair::new(vec![0.0], vec![]).is_err());
    }

    #[test]
    fn single_class_works() {
        let s = ScorePair::new(vec![-1.0, 2.0], vec![0.5]).unwrap();
        let p = s.category_probs();
        assert_eq!(p.len(), 2);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[1] > p[0]);
        assert_eq!(s.state_probs().len(), 1);
    }

    #[test]
    fn category_probs_see_only_the_branch_sum() {
        let a = ScorePair::new(vec![0.3, 1.0, -0.5], vec![0.2, 0.7]).unwrap();
        // shift evidence between branches without changing the sum
        let b = ScorePair::new(vec![0.3, 1.5, -1.0], vec![-0.3, 1.2]).unwrap();
        let pa = a.category_probs();
        let pb = b.category_probs();
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() < 1e-15);
        }
        // but the state probabilities move
        assert!(a.state_probs()[0] != b.state_probs()[0]);
    }

    #[test]
    fn state_probs_see_only_the_branch_difference() {
        let a = ScorePair::new(vec![0.0, 1.0, 2.0], vec![0.5, 1.5]).unwrap();
        let b = ScorePair::new(vec![0.0, 4.0, 5.0], vec![3.5, 4.5]).unwrap();
        assert_eq!(a.state_probs(), b.state_probs());
    }

    #[test]
    fn classify_thresholds() {
        // strong active class 1
        let active = ScorePair::new(vec![-2.0, 3.0, -2.0], vec![-1.0, 0.0]).unwrap();
        match classify(&active, 0.5, 0.5) {
            Verdict::Active { class, p, t } => {
                assert_eq!(class, 1);
                assert!(p > 0.5 && t > 0.5);
            }
            v => panic!("expected active, got {:?}", v),
        }
        // same category evidence, transition branch dominating
        let transitional = ScorePair::new(vec![-2.0, 0.0, -2.0], vec![3.0, 0.0]).unwrap();
        match classify(&transitional, 0.5, 0.5) {
            Verdict::Transitional { class, t, .. } => {
                assert_eq!(class, 1);
                assert!(t < 0.5);
            }
            v => panic!("expected transitional, got {:?}", v),
        }
        // flat scores fall back to background via the argmax tie rule
        let flat = ScorePair::new(vec![0.0, 0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(classify(&flat, 0.5, 0.5), Verdict::Background);
        // confident background
        let bg = ScorePair::new(vec![4.0, 0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(classify(&bg, 0.5, 0.5), Verdict::Background);
    }
}
