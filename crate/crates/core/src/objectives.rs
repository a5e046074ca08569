//! Training objectives: translation pretext, supervised source, self-paced
//! target, and their weighted total, plus pseudo-label selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Builds a `[n × classes]` count matrix from 0-based class lists per row.
fn count_targets(labels: &[Vec<usize>], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, row) in labels.iter().enumerate() {
        for &c in row {
            if c >= classes {
                return Err(Error::invalid(format!(
                    "sample {i}: class {c} out of range 0..{classes}"
                )));
            }
            t.data_mut()[i * classes + c] += 1.0;
        }
    }
    Ok(t)
}

fn check_rows(g: &Graph, probs: Var, n: usize, what: &str) -> Result<usize> {
    let (rows, cols) = g.value(probs).dims2();
    if rows != n {
        return Err(Error::invalid(format!("{what}: {rows} prediction rows for {n} labels")));
    }
    if rows == 0 {
        return Err(Error::invalid(format!("{what}: empty batch")));
    }
    Ok(cols)
}

/// Translation-distance loss: one log term per translated axis, averaged over
/// samples. `labels[i]` holds the 1-based class of every axis of sample `i`.
pub fn translation_loss(g: &mut Graph, probs: Var, labels: &[Vec<u8>]) -> Result<Var> {
    let classes = check_rows(g, probs, labels.len(), "translation_loss")?;
    let zero_based = labels
        .iter()
        .enumerate()
        .map(|(i, ls)| {
            ls.iter()
                .map(|&l| {
                    if l == 0 || l as usize > classes {
                        Err(Error::invalid(format!(
                            "sample {i}: translation label {l} outside 1..={classes}"
                        )))
                    } else {
                        Ok(l as usize - 1)
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let target = count_targets(&zero_based, classes)?;
    g.cross_entropy(probs, &target, labels.len() as f64)
}

/// Supervised source loss over the original predictions and, when present,
/// the weakly and strongly augmented ones, all sharing `labels`.
pub fn source_supervised_loss(
    g: &mut Graph,
    original: Var,
    weak: Option<Var>,
    strong: Option<Var>,
    labels: &[usize],
) -> Result<Var> {
    let classes = check_rows(g, original, labels.len(), "source_supervised_loss")?;
    let rows: Vec<Vec<usize>> = labels.iter().map(|&c| vec![c]).collect();
    let target = count_targets(&rows, classes)?;
    let n = labels.len() as f64;
    let mut terms = vec![(g.cross_entropy(original, &target, n)?, 1.0)];
    for p in [weak, strong].into_iter().flatten() {
        check_rows(g, p, labels.len(), "source_supervised_loss")?;
        terms.push((g.cross_entropy(p, &target, n)?, 1.0));
    }
    g.weighted_sum(&terms, 0.0)
}

/// A target sample's pseudo-label: a class when selected, else none.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub class: Option<usize>,
    /// Largest predicted probability.
    pub confidence: f64,
}

impl PseudoLabel {
    pub fn is_selected(&self) -> bool {
        self.class.is_some()
    }
}

/// Selection threshold `exp(−γ)` on the top probability.
pub fn selection_threshold(gamma: f64) -> f64 {
    (-gamma).exp()
}

/// One-hot on the argmax iff its probability strictly exceeds `exp(−γ)`.
///
/// This is the exact minimizer of the self-paced objective over
/// {zero, one-hot} labels. Argmax ties go to the lowest class.
pub fn select_pseudo_labels(probs: &Tensor, gamma: f64) -> Result<Vec<PseudoLabel>> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("self-paced γ = {gamma}")));
    }
    let threshold = selection_threshold(gamma);
    let (rows, _) = probs.dims2();
    Ok((0..rows)
        .map(|i| {
            let row = probs.row(i);
            let (class, confidence) =
                row.iter().copied().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |best, (c, p)| if p > best.1 { (c, p) } else { best },
                );
            PseudoLabel {
                class: (confidence > threshold).then_some(class),
                confidence,
            }
        })
        .collect())
}

/// Self-paced target loss: cross-entropy against selected pseudo-labels plus
/// `−γ` per selected sample, averaged over all `n_t` samples. With nothing
/// selected the result is a constant zero.
pub fn selfpaced_target_loss(g: &mut Graph, probs: Var, labels: &[PseudoLabel], gamma: f64) -> Result<Var> {
    let classes = check_rows(g, probs, labels.len(), "selfpaced_target_loss")?;
    let selected: Vec<Vec<usize>> = labels.iter().map(|l| l.class.into_iter().collect()).collect();
    let count = labels.iter().filter(|l| l.is_selected()).count();
    if count == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let n = labels.len() as f64;
    let target = count_targets(&selected, classes)?;
    let ce = g.cross_entropy(probs, &target, n)?;
    g.weighted_sum(&[(ce, 1.0)], -gamma * count as f64 / n)
}

/// Loss weights. `lambda` weights the original → weak relational term;
/// `gamma_schedule` gives γ per self-training round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub lambda: f64,
    pub gamma_schedule: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            eta: 1.0,
            lambda: 0.5,
            gamma_schedule: vec![0.25, 0.5, 1.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.eta, self.lambda];
        if all
            .iter()
            .chain(&self.gamma_schedule)
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::invalid(format!(
                "loss weights must be finite and non-negative: {all:?}, γ {:?}",
                self.gamma_schedule
            )));
        }
        if self.gamma_schedule.is_empty() {
            return Err(Error::invalid("γ schedule is empty"));
        }
        Ok(())
    }
}

/// Loss components of one step; disabled modules are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossComponents {
    pub relational: Option<Var>,
    pub translation: Option<Var>,
    pub source: Option<Var>,
    pub target: Option<Var>,
}

/// `L_rm + α·L_trans + β·L_cls^s + η·L_cls^t`, with η treated as zero
/// outside self-training.
pub fn total_loss(g: &mut Graph, parts: &LossComponents, weights: &LossWeights, self_training: bool) -> Result<Var> {
    let eta = if self_training { weights.eta } else { 0.0 };
    let terms: Vec<(Var, f64)> = [
        (parts.relational, 1.0),
        (parts.translation, weights.alpha),
        (parts.source, weights.beta),
        (parts.target, eta),
    ]
    .into_iter()
    .filter_map(|(v, w)| v.map(|v| (v, w)))
    .collect();
    g.weighted_sum(&terms, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
        let logits = Tensor::matrix(n, c, (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        softmax_rows(&logits, 1.0).unwrap()
    }

    fn value(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).item()
    }

    #[test]
    fn translation_uniform_and_one_hot() {
        let l = value(|g| {
            let p = g.constant(Tensor::matrix(2, 4, vec![0.25; 8]).unwrap());
            translation_loss(g, p, &[vec![1, 3], vec![4, 4]]).unwrap()
        });
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
        let l = value(|g| {
            let p = g.constant(Tensor::matrix(1, 4, vec![0.0, 1.0, 0.0, 0.0]).unwrap());
            translation_loss(g, p, &[vec![2, 2]]).unwrap()
        });
        assert_eq!(l, 0.0);
    }

    #[test]
    fn translation_label_range() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::matrix(1, 4, vec![0.25; 4]).unwrap());
        assert!(translation_loss(&mut g, p, &[vec![0, 1]]).is_err());
        assert!(translation_loss(&mut g, p, &[vec![5, 1]]).is_err());
        assert!(translation_loss(&mut g, p, &[vec![1], vec![1]]).is_err());
    }

    #[test]
    fn translation_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(1..10);
            let probs = random_probs(&mut rng, n, 4);
            let labels: Vec<Vec<u8>> = (0..n)
                .map(|_| vec![rng.gen_range(1..=4), rng.gen_range(1..=4)])
                .collect();
            let mut want = 0.0;
            for i in 0..n {
                for t in 1..=4u8 {
                    let lp = probs.get(i, t as usize - 1).ln();
                    if labels[i][0] == t {
                        want -= lp;
                    }
                    if labels[i][1] == t {
                        want -= lp;
                    }
                }
            }
            want /= n as f64;
            let got = value(|g| {
                let p = g.constant(probs.clone());
                translation_loss(g, p, &labels).unwrap()
            });
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_minimizer_is_label_average() {
        let mut logits = Tensor::zeros(&[1, 4]);
        for _ in 0..3000 {
            let mut g = Graph::new();
            let x = g.leaf(logits.clone());
            let p = g.softmax(x, 1.0).unwrap();
            let l = translation_loss(&mut g, p, &[vec![1, 3]]).unwrap();
            g.backward(l).unwrap();
            let grad = g.grad(x).unwrap();
            for (w, d) in logits.data_mut().iter_mut().zip(grad.data()) {
                *w -= 0.5 * d;
            }
        }
        let p = softmax_rows(&logits, 1.0).unwrap();
        assert!((p.get(0, 0) - 0.5).abs() < 0.01 && (p.get(0, 2) - 0.5).abs() < 0.01);
    }

    #[test]
    fn source_loss_cases() {
        let correct = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        let l = value(|g| {
            let p = g.constant(correct.clone());
            source_supervised_loss(g, p, Some(p), Some(p), &[0, 2]).unwrap()
        });
        assert_eq!(l, 0.0);
        let l = value(|g| {
            let p = g.constant(Tensor::matrix(2, 4, vec![0.25; 8]).unwrap());
            source_supervised_loss(g, p, Some(p), Some(p), &[0, 2]).unwrap()
        });
        assert!((l - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn source_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.gen_range(1..8);
            let c = rng.gen_range(2..6);
            let ps: Vec<Tensor> = (0..3).map(|_| random_probs(&mut rng, n, c)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let mut want = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                for p in &ps {
                    want -= p.get(i, y).ln();
                }
            }
            want /= n as f64;
            let got = value(|g| {
                let v: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
                source_supervised_loss(g, v[0], Some(v[1]), Some(v[2]), &labels).unwrap()
            });
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_label_examples() {
        let gamma = -(0.8f64.ln());
        let p = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4]]).unwrap();
        let sel = select_pseudo_labels(&p, gamma).unwrap();
        assert_eq!(sel[0].class, Some(0));
        assert_eq!(sel[1].class, None);
        assert_eq!(sel[1].confidence, 0.6);
    }

    /// Self-paced objective for a single sample under a fixed label choice.
    fn selfpaced_value(p: &[f64], choice: Option<usize>, gamma: f64) -> f64 {
        match choice {
            None => 0.0,
            Some(c) => -(p[c].ln() + gamma),
        }
    }

    #[test]
    fn selection_is_exhaustive_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(1..=8);
            let c = rng.gen_range(2..=5);
            let probs = random_probs(&mut rng, n, c);
            let gamma = rng.gen_range(0.0..2.0);
            let sel = select_pseudo_labels(&probs, gamma).unwrap();
            for (i, s) in sel.iter().enumerate() {
                let p = probs.row(i);
                let best = std::iter::once(None)
                    .chain((0..c).map(Some))
                    .map(|ch| selfpaced_value(p, ch, gamma))
                    .fold(f64::INFINITY, f64::min);
                assert!((selfpaced_value(p, s.class, gamma) - best).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selection_monotone_in_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probs = random_probs(&mut rng, 200, 4);
        let mut prev: Vec<bool> = vec![false; 200];
        for step in 0..50 {
            let sel = select_pseudo_labels(&probs, step as f64 * 0.05).unwrap();
            for (was, now) in prev.iter().zip(&sel) {
                assert!(!was || now.is_selected());
            }
            prev = sel.iter().map(PseudoLabel::is_selected).collect();
        }
    }

    #[test]
    fn selfpaced_cases() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.0, 1.0, -1.0]).unwrap());
        let p = g.softmax(x, 1.0).unwrap();
        let none = [PseudoLabel {
            class: None,
            confidence: 0.5,
        }; 2];
        let l = selfpaced_target_loss(&mut g, p, &none, 0.5).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(x).is_none_or(|t| t.data().iter().all(|v| *v == 0.0)));

        let l = value(|g| {
            let p = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.5, 0.5]).unwrap());
            let labels = [
                PseudoLabel {
                    class: Some(0),
                    confidence: 1.0,
                },
                PseudoLabel {
                    class: None,
                    confidence: 0.5,
                },
            ];
            selfpaced_target_loss(g, p, &labels, 0.7).unwrap()
        });
        assert!((l - (-0.7 / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn selfpaced_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(1..10);
            let probs = random_probs(&mut rng, n, 4);
            let gamma = rng.gen_range(0.0..1.5);
            let labels = select_pseudo_labels(&probs, gamma).unwrap();
            let mut want = 0.0;
            for (i, l) in labels.iter().enumerate() {
                for c in 0..4 {
                    if l.class == Some(c) {
                        want += probs.get(i, c).ln() + gamma;
                    }
                }
            }
            want = -want / n as f64;
            let got = value(|g| {
                let p = g.constant(probs.clone());
                selfpaced_target_loss(g, p, &labels, gamma).unwrap()
            });
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_arithmetic_and_phase() {
        let mut g = Graph::new();
        let c: Vec<Var> = (1..=4).map(|v| g.constant(Tensor::scalar(v as f64))).collect();
        let parts = LossComponents {
            relational: Some(c[0]),
            translation: Some(c[1]),
            source: Some(c[2]),
            target: Some(c[3]),
        };
        let ones = LossWeights {
            alpha: 1.0,
            beta: 1.0,
            eta: 1.0,
            ..Default::default()
        };
        let t = total_loss(&mut g, &parts, &ones, true).unwrap();
        assert_eq!(g.value(t).item(), 10.0);
        let t = total_loss(&mut g, &parts, &ones, false).unwrap();
        assert_eq!(g.value(t).item(), 6.0);
        let zeros = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            eta: 0.0,
            ..Default::default()
        };
        let t = total_loss(&mut g, &parts, &zeros, true).unwrap();
        assert_eq!(g.value(t).item(), 1.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            eta: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossWeights {
            gamma_schedule: vec![],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
