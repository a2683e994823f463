//! Connectionist Temporal Classification: negative log-likelihood via the
//! log-space forward recursion, posterior-based gradients, greedy collapse
//! decoding and a brute-force enumeration oracle.
//!
//! The blank is the last class of every frame distribution.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Per-frame log-distributions `[T, classes]`; the blank is class
/// `classes - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLogProbs {
    log_probs: Array2<f64>,
}

impl FrameLogProbs {
    pub const NORM_TOL: f64 = 1e-6;

    /// Validates that every row is finite and exponentiates to a
    /// probability vector.
    pub fn new(log_probs: Array2<f64>) -> Result<Self> {
        if log_probs.ncols() < 2 {
            return Err(Error::Input("need at least one label class plus blank".into()));
        }
        for (t, row) in log_probs.outer_iter().enumerate() {
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::Input(format!("frame {t}: non-finite log-probability")));
            }
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            if (total - 1.0).abs() > Self::NORM_TOL {
                return Err(Error::Input(format!("frame {t}: probabilities sum to {total}, not 1")));
            }
        }
        Ok(FrameLogProbs { log_probs })
    }

    /// Row-wise log-softmax of unnormalized scores.
    pub fn from_logits(logits: ArrayView2<f64>) -> Self {
        FrameLogProbs { log_probs: crate::graph::log_softmax_rows(logits) }
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.log_probs.view()
    }

    pub fn frames(&self) -> usize {
        self.log_probs.nrows()
    }

    pub fn classes(&self) -> usize {
        self.log_probs.ncols()
    }

    pub fn blank(&self) -> usize {
        self.log_probs.ncols() - 1
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.log_probs
    }
}

/// Number of adjacent equal label pairs; each forces an extra blank frame.
pub fn adjacent_repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Minimum number of frames that can emit `target`.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + adjacent_repeats(target)
}

fn check_target(frames: usize, target: &[usize], blank: usize) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&l| l >= blank) {
        return Err(Error::Input(format!("target label {bad} is the blank or out of range (blank = {blank})")));
    }
    if frames < min_frames(target) {
        return Err(Error::Infeasible { frames, target_len: target.len(), repeats: adjacent_repeats(target) });
    }
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// The blank-augmented label sequence `b l1 b l2 ... lL b`.
fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// Whether state `s` may be entered directly from `s - 2`.
fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Log-space forward variables `alpha[t][s]`, emission at `t` included.
fn forward(lp: ArrayView2<f64>, ext: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let (frames, states) = (lp.nrows(), ext.len());
    let mut alpha = vec![vec![f64::NEG_INFINITY; states]; frames];
    alpha[0][0] = lp[[0, ext[0]]];
    if states > 1 {
        alpha[0][1] = lp[[0, ext[1]]];
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if acc == f64::NEG_INFINITY { acc } else { acc + lp[[t, ext[s]]] };
        }
    }
    alpha
}

/// Log-space backward variables `beta[t][s]`, emission at `t` excluded, so
/// that `alpha[t][s] + beta[t][s]` is the log-mass of paths through `(t, s)`.
fn backward(lp: ArrayView2<f64>, ext: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let (frames, states) = (lp.nrows(), ext.len());
    let mut beta = vec![vec![f64::NEG_INFINITY; states]; frames];
    beta[frames - 1][states - 1] = 0.0;
    if states > 1 {
        beta[frames - 1][states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = beta[t + 1][s] + lp[[t + 1, ext[s]]];
            if s + 1 < states {
                acc = log_add(acc, beta[t + 1][s + 1] + lp[[t + 1, ext[s + 1]]]);
            }
            if s + 2 < states && can_skip(ext, s + 2, blank) {
                acc = log_add(acc, beta[t + 1][s + 2] + lp[[t + 1, ext[s + 2]]]);
            }
            beta[t][s] = acc;
        }
    }
    beta
}

fn log_likelihood(alpha: &[Vec<f64>]) -> f64 {
    let last = alpha.last().expect("at least one frame");
    let states = last.len();
    if states > 1 {
        log_add(last[states - 1], last[states - 2])
    } else {
        last[0]
    }
}

/// Forward pass plus gradient w.r.t. the pre-softmax logits whose
/// log-softmax is `lp`: `softmax - posterior occupancy`. Rows of `lp` are
/// assumed normalized.
pub(crate) fn nll_and_logit_grad(lp: ArrayView2<f64>, target: &[usize], blank: usize) -> Result<(f64, Array2<f64>)> {
    let frames = lp.nrows();
    if frames == 0 {
        return Err(Error::Input("no frames".into()));
    }
    check_target(frames, target, blank)?;
    let ext = extended(target, blank);
    let alpha = forward(lp, &ext, blank);
    let log_p = log_likelihood(&alpha);
    if !log_p.is_finite() {
        return Err(Error::Internal(format!("CTC likelihood underflow ({log_p})")));
    }
    let beta = backward(lp, &ext, blank);
    let mut grad = lp.mapv(f64::exp);
    for t in 0..frames {
        for (s, &label) in ext.iter().enumerate() {
            let lm = alpha[t][s] + beta[t][s];
            if lm > f64::NEG_INFINITY {
                grad[[t, label]] -= (lm - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// `-log P(target | lp)` summed over every blank-augmented alignment.
pub fn ctc_loss(lp: &FrameLogProbs, target: &[usize]) -> Result<f64> {
    let frames = lp.frames();
    if frames == 0 {
        return Err(Error::Input("no frames".into()));
    }
    check_target(frames, target, lp.blank())?;
    let ext = extended(target, lp.blank());
    let log_p = log_likelihood(&forward(lp.view(), &ext, lp.blank()));
    if !log_p.is_finite() {
        return Err(Error::Internal(format!("CTC likelihood underflow ({log_p})")));
    }
    Ok(-log_p)
}

/// Gradient of [`ctc_loss`] with respect to the pre-softmax logits of each
/// frame (evaluated at logits equal to `lp`). Rows sum to zero.
pub fn ctc_gradient(lp: &FrameLogProbs, target: &[usize]) -> Result<Array2<f64>> {
    nll_and_logit_grad(lp.view(), target, lp.blank()).map(|(_, g)| g)
}

/// Per-frame argmax, collapse adjacent repeats, drop blanks.
pub fn ctc_greedy_collapse(lp: &FrameLogProbs) -> Vec<usize> {
    let blank = lp.blank();
    let mut out = Vec::new();
    let mut prev = None;
    for row in lp.view().outer_iter() {
        let best =
            row.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc }).0;
        if best != blank && prev != Some(best) {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Collapse of one frame labeling: drop repeats, then blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in path {
        if l != blank && prev != Some(l) {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

pub const ORACLE_MAX_FRAMES: usize = 8;
pub const ORACLE_MAX_CLASSES: usize = 6;

/// Enumerates all `classes^T` frame labelings and sums those collapsing to
/// `target`. Only for tiny instances.
pub fn brute_force_ctc(lp: &FrameLogProbs, target: &[usize]) -> Result<f64> {
    let (frames, classes) = (lp.frames(), lp.classes());
    if frames > ORACLE_MAX_FRAMES || classes > ORACLE_MAX_CLASSES {
        return Err(Error::Input(format!(
            "oracle bounds exceeded: T={frames} (max {ORACLE_MAX_FRAMES}), classes={classes} (max {ORACLE_MAX_CLASSES})"
        )));
    }
    if frames == 0 {
        return Err(Error::Input("no frames".into()));
    }
    let blank = lp.blank();
    if let Some(&bad) = target.iter().find(|&&l| l >= blank) {
        return Err(Error::Input(format!("target label {bad} is the blank or out of range")));
    }
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        if collapse(&path, blank) == target {
            let lp_sum: f64 = path.iter().enumerate().map(|(t, &k)| lp.view()[[t, k]]).sum();
            total += lp_sum.exp();
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == frames {
                return if total > 0.0 {
                    Ok(-total.ln())
                } else {
                    Err(Error::Infeasible { frames, target_len: target.len(), repeats: adjacent_repeats(target) })
                };
            }
            path[pos] += 1;
            if path[pos] < classes {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lp(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> FrameLogProbs {
        let logits = Array2::from_shape_fn((frames, classes), |_| rng.random_range(-2.0..2.0));
        FrameLogProbs::from_logits(logits.view())
    }

    #[test]
    fn single_frame_single_label() {
        let p: f64 = 0.3;
        let lp = FrameLogProbs::new(array![[p.ln(), (1.0 - p).ln()]]).unwrap();
        assert!((ctc_loss(&lp, &[0]).unwrap() + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lp = random_lp(&mut rng, 2, 3);
        let expected = -(lp.view()[[0, 2]] + lp.view()[[1, 2]]);
        assert!((ctc_loss(&lp, &[]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_separating_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lp = random_lp(&mut rng, 3, 3);
        let v = lp.view();
        // only a·blank·a collapses to "aa" in three frames
        let expected = -(v[[0, 0]] + v[[1, 2]] + v[[2, 0]]);
        assert!((ctc_loss(&lp, &[0, 0]).unwrap() - expected).abs() < 1e-9);
        assert!((brute_force_ctc(&lp, &[0, 0]).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn uniform_two_frames_one_symbol() {
        let h = 0.5f64.ln();
        let lp = FrameLogProbs::new(array![[h, h], [h, h]]).unwrap();
        let expected = -(0.75f64).ln();
        assert!((brute_force_ctc(&lp, &[0]).unwrap() - expected).abs() < 1e-12);
        assert!((ctc_loss(&lp, &[0]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn infeasible_targets_error_in_both_routes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lp = random_lp(&mut rng, 2, 3);
        assert!(matches!(ctc_loss(&lp, &[0, 1, 0]), Err(Error::Infeasible { .. })));
        assert!(matches!(ctc_loss(&lp, &[1, 1]), Err(Error::Infeasible { .. })));
        assert!(matches!(brute_force_ctc(&lp, &[0, 1, 0]), Err(Error::Infeasible { .. })));
        assert!(matches!(ctc_gradient(&lp, &[1, 1]), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn rejects_unnormalized_rows_and_blank_targets() {
        assert!(matches!(FrameLogProbs::new(array![[0.0, 0.0]]), Err(Error::Input(_))));
        let lp = FrameLogProbs::new(array![[0.5f64.ln(), 0.5f64.ln()]]).unwrap();
        assert!(matches!(ctc_loss(&lp, &[1]), Err(Error::Input(_))));
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lp = random_lp(&mut rng, 9, 3);
        assert!(matches!(brute_force_ctc(&lp, &[0]), Err(Error::Input(_))));
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 100 {
            let frames = rng.random_range(1..=6);
            let classes = rng.random_range(2..=4);
            let len = rng.random_range(0..=3);
            let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes - 1)).collect();
            if frames < min_frames(&target) {
                continue;
            }
            let lp = random_lp(&mut rng, frames, classes);
            let a = ctc_loss(&lp, &target).unwrap();
            let b = brute_force_ctc(&lp, &target).unwrap();
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            checked += 1;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let logits = Array2::from_shape_fn((4, 4), |_| rng.random_range(-2.0..2.0));
            let target = [rng.random_range(0..3), rng.random_range(0..3)];
            if 4 < min_frames(&target) {
                continue;
            }
            let lp = FrameLogProbs::from_logits(logits.view());
            let grad = ctc_gradient(&lp, &target).unwrap();
            let h = 1e-5;
            for idx in 0..logits.len() {
                let (r, c) = (idx / 4, idx % 4);
                let mut plus = logits.clone();
                plus[[r, c]] += h;
                let mut minus = logits.clone();
                minus[[r, c]] -= h;
                let f = |x: &Array2<f64>| ctc_loss(&FrameLogProbs::from_logits(x.view()), &target).unwrap();
                let num = (f(&plus) - f(&minus)) / (2.0 * h);
                let err = (num - grad[[r, c]]).abs() / num.abs().max(grad[[r, c]].abs()).max(1e-6);
                assert!(err < 1e-4, "({r},{c}) numeric {num} analytic {}", grad[[r, c]]);
            }
        }
    }

    #[test]
    fn single_frame_gradient_is_row_local() {
        let lp = FrameLogProbs::new(array![[0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()]]).unwrap();
        let g = ctc_gradient(&lp, &[1]).unwrap();
        assert_eq!(g.dim(), (1, 3));
        assert!(g.iter().any(|v| v.abs() > 0.0));
        assert!(g.sum().abs() < 1e-12);
    }

    #[test]
    fn greedy_collapse_examples() {
        let b = 2;
        assert_eq!(collapse(&[0, 0, b, 0], b), vec![0, 0]);
        assert_eq!(collapse(&[b, b, b], b), Vec::<usize>::new());
        assert_eq!(collapse(&[0, 1, 1, b, 1], b), vec![0, 1, 1]);

        let hi = 0.9f64.ln();
        let lo = 0.05f64.ln();
        let frame = |k: usize| {
            let mut r = [lo; 3];
            r[k] = hi;
            r
        };
        let rows = [frame(0), frame(0), frame(2), frame(0)];
        let lp = FrameLogProbs::new(Array2::from_shape_fn((4, 3), |(t, k)| rows[t][k])).unwrap();
        assert_eq!(ctc_greedy_collapse(&lp), vec![0, 0]);
    }
}
