//! Attack objectives: cross-entropy, CW margin, DLR, margin-normalized
//! surrogates (untargeted and targeted), the alternating margin-decomposition
//! loss, cosine similarity against reference logits, and the linear
//! functionals used by initialization.
//!
//! Every loss reports its value together with its gradient with respect to
//! the logits, so the model layer can chain it through hand-written backprop.

pub const DLR_STABILIZER: f64 = 1e-12;
const MARGIN_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    CrossEntropy,
    /// CW margin: best wrong logit minus the true logit.
    Margin,
    /// Margin scaled by the spread between the first and third largest logits.
    Dlr,
    /// Cross-entropy of logits normalized by the true-class margin.
    Lafeat,
    LafeatTargeted { target: usize, t: f64 },
    /// Alternating margin decomposition, indexed by step `k` of `k_total`
    /// within restart `r`.
    MdPhase { k: usize, k_total: usize, r: usize },
    /// Cosine similarity between the logits and fixed reference logits.
    RrtCosine { reference: Vec<f64> },
    /// DLR numerator steered toward a chosen target class.
    DlrTargeted { target: usize },
    /// Target logit minus true logit.
    TargetedMargin { target: usize },
    /// Sum of targeted margins over several target classes.
    MultiTargetSum { targets: Vec<usize> },
    /// Plain linear functional of the logits (initialization direction).
    LogitDot { direction: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub grad_z: Vec<f64>,
    /// Set when the loss is evaluated at a point where its definition is
    /// degenerate (non-positive margin, zero-norm logits). Callers are
    /// expected to have checked for success before evaluating.
    pub degenerate: bool,
}

/// Index of the best wrong-class logit; ties broken by lowest class index.
pub fn best_wrong(z: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in z.iter().enumerate() {
        if i != y && v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// CW margin value: positive iff the sample is misclassified (ties lose).
pub fn margin_value(z: &[f64], y: usize) -> f64 {
    z[best_wrong(z, y)] - z[y]
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Stable softmax cross-entropy: logsumexp(z) - z_y.
fn sce(z: &[f64], y: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    lse - z[y]
}

pub fn cross_entropy(z: &[f64], y: usize) -> f64 {
    sce(z, y)
}

pub fn margin_loss(z: &[f64], y: usize) -> f64 {
    margin_value(z, y)
}

/// Indices of the three largest logits (descending, ties by lowest index).
fn top3(z: &[f64]) -> [usize; 3] {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap().then(a.cmp(&b)));
    [idx[0], idx[1], idx[2]]
}

pub fn dlr_loss(z: &[f64], y: usize) -> f64 {
    assert!(z.len() >= 3, "DLR needs at least 3 classes");
    let [p1, _, p3] = top3(z);
    let j = best_wrong(z, y);
    -(z[y] - z[j]) / (z[p1] - z[p3] + DLR_STABILIZER)
}

pub fn lafeat_loss(z: &[f64], y: usize) -> f64 {
    LossSpec::Lafeat.eval(z, y).value
}

pub fn lafeat_targeted(z: &[f64], y: usize, target: usize, t: f64) -> f64 {
    LossSpec::LafeatTargeted { target, t }.eval(z, y).value
}

pub fn md_phase_loss(z: &[f64], y: usize, k: usize, k_total: usize, r: usize) -> f64 {
    LossSpec::MdPhase { k, k_total, r }.eval(z, y).value
}

pub fn rrt_cosine(z_x: &[f64], z_tar: &[f64]) -> f64 {
    LossSpec::RrtCosine {
        reference: z_tar.to_vec(),
    }
    .eval(z_x, 0)
    .value
}

impl LossSpec {
    pub fn eval(&self, z: &[f64], y: usize) -> LossEval {
        let c = z.len();
        match self {
            LossSpec::CrossEntropy => {
                let mut g = softmax(z);
                g[y] -= 1.0;
                LossEval {
                    value: sce(z, y),
                    grad_z: g,
                    degenerate: false,
                }
            }
            LossSpec::Margin => {
                let j = best_wrong(z, y);
                let mut g = vec![0.0; c];
                g[j] += 1.0;
                g[y] -= 1.0;
                LossEval {
                    value: z[j] - z[y],
                    grad_z: g,
                    degenerate: false,
                }
            }
            LossSpec::Dlr => {
                assert!(c >= 3, "DLR needs at least 3 classes");
                let [p1, _, p3] = top3(z);
                let j = best_wrong(z, y);
                let num = z[j] - z[y];
                let den = z[p1] - z[p3] + DLR_STABILIZER;
                let mut g = vec![0.0; c];
                // quotient rule with the sort and argmax held fixed
                g[j] += 1.0 / den;
                g[y] -= 1.0 / den;
                g[p1] -= num / (den * den);
                g[p3] += num / (den * den);
                LossEval {
                    value: num / den,
                    grad_z: g,
                    degenerate: false,
                }
            }
            LossSpec::Lafeat => {
                let j = best_wrong(z, y);
                let m_raw = z[y] - z[j];
                let degenerate = m_raw <= 0.0;
                let m = m_raw.max(MARGIN_CLAMP);
                let s: Vec<f64> = z.iter().map(|&v| v / m).collect();
                let mut gs = softmax(&s);
                gs[y] -= 1.0;
                let dot: f64 = gs.iter().zip(z).map(|(a, b)| a * b).sum();
                let mut g: Vec<f64> = gs.iter().map(|&v| v / m).collect();
                if !degenerate {
                    g[y] -= dot / (m * m);
                    g[j] += dot / (m * m);
                }
                LossEval {
                    value: sce(&s, y),
                    grad_z: g,
                    degenerate,
                }
            }
            LossSpec::LafeatTargeted { target, t } => {
                assert!(*target != y, "target must differ from the true class");
                assert!(*t > 0.0, "t must be positive");
                let j = best_wrong(z, y);
                let m_raw = z[y] - z[j];
                let degenerate = m_raw <= 0.0;
                let m = m_raw.max(MARGIN_CLAMP);
                let scale = t * m;
                let s: Vec<f64> = z.iter().map(|&v| v / scale).collect();
                let mut gs = softmax(&s);
                gs[*target] -= 1.0;
                // L = -sce(s, target)
                let dl_ds: Vec<f64> = gs.iter().map(|&v| -v).collect();
                let dot: f64 = dl_ds.iter().zip(z).map(|(a, b)| a * b).sum();
                let mut g: Vec<f64> = dl_ds.iter().map(|&v| v / scale).collect();
                if !degenerate {
                    g[y] -= dot / (t * m * m);
                    g[j] += dot / (t * m * m);
                }
                LossEval {
                    value: -sce(&s, *target),
                    grad_z: g,
                    degenerate,
                }
            }
            LossSpec::MdPhase { k, k_total, r } => {
                assert!(k < k_total, "step index out of range");
                let j = best_wrong(z, y);
                let mut g = vec![0.0; c];
                let value;
                if *k < k_total / 2 {
                    if r % 2 == 0 {
                        value = z[j];
                        g[j] = 1.0;
                    } else {
                        value = -z[y];
                        g[y] = -1.0;
                    }
                } else {
                    value = z[j] - z[y];
                    g[j] += 1.0;
                    g[y] -= 1.0;
                }
                LossEval {
                    value,
                    grad_z: g,
                    degenerate: false,
                }
            }
            LossSpec::RrtCosine { reference } => {
                assert_eq!(reference.len(), c, "reference dimension mismatch");
                let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                let na = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nz < 1e-12 || na < 1e-12 {
                    return LossEval {
                        value: 0.0,
                        grad_z: vec![0.0; c],
                        degenerate: true,
                    };
                }
                let dot: f64 = z.iter().zip(reference).map(|(a, b)| a * b).sum();
                let value = dot / (nz * na);
                let g: Vec<f64> = z
                    .iter()
                    .zip(reference)
                    .map(|(&zi, &ai)| ai / (nz * na) - zi * value / (nz * nz))
                    .collect();
                LossEval {
                    value,
                    grad_z: g,
                    degenerate: false,
                }
            }
            LossSpec::DlrTargeted { target } => {
                assert!(c >= 3, "DLR needs at least 3 classes");
                assert!(*target != y);
                let [p1, _, p3] = top3(z);
                let num = z[*target] - z[y];
                let den = z[p1] - z[p3] + DLR_STABILIZER;
                let mut g = vec![0.0; c];
                g[*target] += 1.0 / den;
                g[y] -= 1.0 / den;
                g[p1] -= num / (den * den);
                g[p3] += num / (den * den);
                LossEval {
                    value: num / den,
                    grad_z: g,
                    degenerate: false,
                }
            }
            LossSpec::TargetedMargin { target } => {
                let mut g = vec![0.0; c];
                g[*target] += 1.0;
                g[y] -= 1.0;
                LossEval {
                    value: z[*target] - z[y],
                    grad_z: g,
                    degenerate: false,
                }
            }
            LossSpec::MultiTargetSum { targets } => {
                let mut g = vec![0.0; c];
                let mut value = 0.0;
                for &t in targets {
                    value += z[t] - z[y];
                    g[t] += 1.0;
                    g[y] -= 1.0;
                }
                LossEval {
                    value,
                    grad_z: g,
                    degenerate: false,
                }
            }
            LossSpec::LogitDot { direction } => {
                assert_eq!(direction.len(), c, "direction dimension mismatch");
                let value = z.iter().zip(direction).map(|(a, b)| a * b).sum();
                LossEval {
                    value,
                    grad_z: direction.clone(),
                    degenerate: false,
                }
            }
        }
    }

    pub fn value(&self, z: &[f64], y: usize) -> f64 {
        self.eval(z, y).value
    }

    /// True when the logits sit close enough to a non-smooth boundary of
    /// this loss (argmax switches, sort-order switches, margin sign change)
    /// that a finite-difference probe of width `gap` could straddle it.
    pub fn fd_degenerate(&self, z: &[f64], y: usize, gap: f64) -> bool {
        let wrong_gap = || {
            let j = best_wrong(z, y);
            let mut second = f64::NEG_INFINITY;
            for (i, &v) in z.iter().enumerate() {
                if i != y && i != j {
                    second = second.max(v);
                }
            }
            z[j] - second
        };
        match self {
            LossSpec::CrossEntropy
            | LossSpec::TargetedMargin { .. }
            | LossSpec::MultiTargetSum { .. }
            | LossSpec::LogitDot { .. } => false,
            LossSpec::Margin | LossSpec::MdPhase { .. } => {
                z.len() > 2 && wrong_gap() < gap
            }
            LossSpec::Dlr | LossSpec::DlrTargeted { .. } => {
                let mut sorted: Vec<f64> = z.to_vec();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                // only the top-3 logits (and whoever could displace them)
                // enter the denominator, so deeper sort ties are harmless
                let tight_sort = sorted
                    .windows(2)
                    .take(3)
                    .any(|w| w[0] - w[1] < gap);
                tight_sort || (z.len() > 2 && wrong_gap() < gap)
            }
            LossSpec::Lafeat | LossSpec::LafeatTargeted { .. } => {
                let m = z[y] - z[best_wrong(z, y)];
                m < gap || (z.len() > 2 && wrong_gap() < gap)
            }
            LossSpec::RrtCosine { .. } => {
                z.iter().map(|v| v * v).sum::<f64>().sqrt() < gap
            }
        }
    }
}
