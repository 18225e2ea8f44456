//! Training objectives, as tape builders plus plain value wrappers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::model::predict_future;
use crate::nn::params::{Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Temporal terms, self-supervised objective.
    pub unsup_temporal: f64,
    /// Contextual term, self-supervised objective.
    pub unsup_contextual: f64,
    /// Temporal terms, class-aware objective.
    pub semi_temporal: f64,
    /// Supervised contextual term, class-aware objective.
    pub semi_contextual: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            unsup_temporal: 1.0,
            unsup_contextual: 0.7,
            semi_temporal: 0.01,
            semi_contextual: 0.7,
            temperature: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        let w = [self.unsup_temporal, self.unsup_contextual, self.semi_temporal, self.semi_contextual];
        if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::config(format!("loss weights must be finite and >= 0: {w:?}")));
        }
        Ok(())
    }
}

/// How the supervised contextual sum over anchors is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SccNormalization {
    /// Divided by the number of rows, so the scale does not grow with batch size.
    #[default]
    Mean,
    /// Plain sum over anchors.
    Sum,
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be > 0, got {tau}")))
    }
}

/// InfoNCE over future latents: the context `c_src` `[B, h]` predicts steps
/// `anchor + 1 ..= anchor + horizon` of `z_tgt` `[B, d, T_z]`; candidates are
/// all `B` latents at that step. `anchor` is the context prefix length.
pub fn temporal_contrast<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound<F>,
    c_src: Var,
    z_tgt: Var,
    anchor: usize,
    horizon: usize,
) -> Result<Var> {
    let zs = g.shape(z_tgt).to_vec();
    if zs.len() != 3 || horizon == 0 || anchor == 0 || anchor + horizon > zs[2] {
        return Err(Error::shape(format!(
            "temporal contrast: anchor {anchor} + horizon {horizon} over latents {zs:?}"
        )));
    }
    let (b, d) = (zs[0], zs[1]);
    let mut weights = vec![F::zero(); b * b];
    let w = F::lit(-1.0 / (b * horizon) as f64);
    for i in 0..b {
        weights[i * b + i] = w;
    }
    let mut total: Option<Var> = None;
    for k in 1..=horizon {
        let pred = predict_future(g, p, c_src, k)?;
        let step = g.narrow(z_tgt, 2, anchor + k - 1, 1)?;
        let target = g.reshape(step, &[b, d])?;
        let logits = g.matmul_nt(pred, target)?;
        let ls = g.log_softmax_rows(logits, None)?;
        let term = g.weighted_sum(ls, weights.clone())?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("horizon >= 1"))
}

/// Row-wise cosine similarity over `rows` divided by `tau`, log-softmaxed
/// with the self-similarity removed.
fn similarity_log_probs<F: Scalar>(g: &mut Graph<F>, rows: Var, tau: f64) -> Result<(Var, usize)> {
    check_temperature(tau)?;
    let s = g.shape(rows).to_vec();
    if s.len() != 2 || s[0] < 2 || s[0] % 2 != 0 {
        return Err(Error::shape(format!("contrastive rows must be (2N, width), got {s:?}")));
    }
    let n2 = s[0];
    let unit = g.l2_normalize_rows(rows)?;
    let sim = g.matmul_nt(unit, unit)?;
    let sim = g.scale(sim, F::lit(1.0 / tau));
    let mut diag = vec![false; n2 * n2];
    for i in 0..n2 {
        diag[i * n2 + i] = true;
    }
    Ok((g.log_softmax_rows(sim, Some(diag))?, n2))
}

/// NT-Xent over `rows` `[2N, w]` where rows `2k`, `2k + 1` are the two
/// views of sample `k`.
pub fn contextual_contrast<F: Scalar>(g: &mut Graph<F>, rows: Var, tau: f64) -> Result<Var> {
    let (ls, n2) = similarity_log_probs(g, rows, tau)?;
    let mut weights = vec![F::zero(); n2 * n2];
    let w = F::lit(-1.0 / n2 as f64);
    for i in 0..n2 {
        weights[i * n2 + (i ^ 1)] = w;
    }
    g.weighted_sum(ls, weights)
}

/// Per-pair weights of the supervised contextual loss.
fn supervised_weights(labels: &[i64], norm: SccNormalization) -> Result<Vec<f64>> {
    let n2 = labels.len();
    let scale = match norm {
        SccNormalization::Mean => 1.0 / n2 as f64,
        SccNormalization::Sum => 1.0,
    };
    let mut weights = vec![0.0; n2 * n2];
    let mut any = false;
    for i in 0..n2 {
        let pos: Vec<usize> = (0..n2).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        any = true;
        let w = -scale / pos.len() as f64;
        for j in pos {
            weights[i * n2 + j] = w;
        }
    }
    if any {
        Ok(weights)
    } else {
        Err(Error::NoPositivePairs)
    }
}

/// Supervised variant: every other row sharing the anchor's label is a
/// positive. Anchors without positives contribute nothing.
pub fn supervised_contextual_contrast<F: Scalar>(
    g: &mut Graph<F>,
    rows: Var,
    labels: &[i64],
    tau: f64,
    norm: SccNormalization,
) -> Result<Var> {
    if labels.len() != g.shape(rows).first().copied().unwrap_or(0) {
        return Err(Error::shape(format!(
            "{} labels for {:?} rows",
            labels.len(),
            g.shape(rows)
        )));
    }
    let weights = supervised_weights(labels, norm)?;
    let (ls, _) = similarity_log_probs(g, rows, tau)?;
    g.weighted_sum(ls, weights.into_iter().map(F::lit).collect())
}

/// Mean negative log-likelihood of `labels` under `logits` `[B, K]`.
pub fn cross_entropy_graph<F: Scalar>(g: &mut Graph<F>, logits: Var, labels: &[i64]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::shape(format!("cross entropy: logits {s:?} with {} labels", labels.len())));
    }
    let (b, k) = (s[0], s[1]);
    let mut weights = vec![F::zero(); b * k];
    for (i, &y) in labels.iter().enumerate() {
        if !(0..k as i64).contains(&y) {
            return Err(Error::data(format!("label out of range: {y} (num_classes = {k})")));
        }
        weights[i * k + y as usize] = F::lit(-1.0 / b as f64);
    }
    let ls = g.log_softmax_rows(logits, None)?;
    g.weighted_sum(ls, weights)
}

/// Weighted self-supervised objective.
pub fn combine_unsup(tc_strong: f64, tc_weak: f64, contextual: f64, w: &LossWeights) -> f64 {
    w.unsup_temporal * (tc_strong + tc_weak) + w.unsup_contextual * contextual
}

/// Weighted class-aware objective.
pub fn combine_semi(tc_strong: f64, tc_weak: f64, supervised_contextual: f64, w: &LossWeights) -> f64 {
    w.semi_temporal * (tc_strong + tc_weak) + w.semi_contextual * supervised_contextual
}

/// `temporal_weight * (a + b) + contextual_weight * c` on the tape; absent
/// terms are skipped.
pub fn combine_graph<F: Scalar>(
    g: &mut Graph<F>,
    temporal: &[Var],
    temporal_weight: f64,
    contextual: Option<Var>,
    contextual_weight: f64,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut push = |g: &mut Graph<F>, v: Var, w: f64| -> Result<()> {
        let s = g.scale(v, F::lit(w));
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
        Ok(())
    };
    for &t in temporal {
        push(g, t, temporal_weight)?;
    }
    if let Some(c) = contextual {
        push(g, c, contextual_weight)?;
    }
    total.ok_or_else(|| Error::config("objective has no active terms"))
}

/// Which context predicts which view's future.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    StrongToWeak,
    WeakToStrong,
}

/// Latents and contexts of both views at one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalBatchViews<F = f32> {
    pub z_weak: Tensor<F>,
    pub z_strong: Tensor<F>,
    pub c_weak: Tensor<F>,
    pub c_strong: Tensor<F>,
    pub anchor: usize,
    pub horizon: usize,
}

/// Value form of [`temporal_contrast`]; `predictors[k - 1]` maps a context
/// to the step-`k` prediction.
pub fn temporal_contrast_loss<F: Scalar>(v: &TemporalBatchViews<F>, predictors: &[Tensor<F>], dir: Direction) -> Result<F> {
    if v.z_weak.shape() != v.z_strong.shape() || v.c_weak.shape() != v.c_strong.shape() {
        return Err(Error::shape("weak and strong views differ in shape"));
    }
    if predictors.len() < v.horizon {
        return Err(Error::config(format!(
            "{} predictors for horizon {}",
            predictors.len(),
            v.horizon
        )));
    }
    let mut store = ParamStore::new();
    for (k, w) in predictors.iter().enumerate() {
        store.insert(format!("tc.predictor{}.weight", k + 1), w.clone());
    }
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &store, |_| false);
    let (c, z) = match dir {
        Direction::StrongToWeak => (&v.c_strong, &v.z_weak),
        Direction::WeakToStrong => (&v.c_weak, &v.z_strong),
    };
    let c = g.constant(c.clone());
    let z = g.constant(z.clone());
    let out = temporal_contrast(&mut g, &p, c, z, v.anchor, v.horizon)?;
    Ok(g.scalar(out))
}

/// Value form of [`contextual_contrast`].
pub fn contextual_contrast_loss<F: Scalar>(rows: &Tensor<F>, tau: f64) -> Result<F> {
    let mut g = Graph::new();
    let r = g.constant(rows.clone());
    let out = contextual_contrast(&mut g, r, tau)?;
    Ok(g.scalar(out))
}

/// Value form of [`supervised_contextual_contrast`].
pub fn supervised_contextual_contrast_loss<F: Scalar>(rows: &Tensor<F>, labels: &[i64], tau: f64, norm: SccNormalization) -> Result<F> {
    let mut g = Graph::new();
    let r = g.constant(rows.clone());
    let out = supervised_contextual_contrast(&mut g, r, labels, tau, norm)?;
    Ok(g.scalar(out))
}

/// Value form of [`cross_entropy_graph`].
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[i64]) -> Result<F> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = cross_entropy_graph(&mut g, l, labels)?;
    Ok(g.scalar(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], rng: &mut crate::rng::Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
    }

    fn pair_loss(rows: &Tensor<f64>, i: usize, p: usize, tau: f64) -> f64 {
        let n = rows.dim(0);
        let num = cosine(rows.row(i), rows.row(p)) / tau;
        let den: f64 = (0..n).filter(|&m| m != i).map(|m| (cosine(rows.row(i), rows.row(m)) / tau).exp()).sum();
        -(num.exp() / den).ln()
    }

    #[test]
    fn contextual_matches_pairwise_oracle() {
        let mut rng = crate::rng::Rng::seed_from_u64(1);
        for n in 1..5 {
            let rows = random(&[2 * n, 5], &mut rng);
            let want: f64 = (0..2 * n).map(|i| pair_loss(&rows, i, i ^ 1, 0.2)).sum::<f64>() / (2 * n) as f64;
            let got = contextual_contrast_loss(&rows, 0.2).unwrap();
            assert!((got - want).abs() < 1e-9, "n={n}: {got} vs {want}");
        }
    }

    #[test]
    fn contextual_closed_forms() {
        let single = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        assert_eq!(contextual_contrast_loss(&single, 0.2).unwrap(), 0.0);

        let rows = Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let want = (1.0 + 2.0 * (-5.0f64).exp()).ln();
        assert!((contextual_contrast_loss(&rows, 0.2).unwrap() - want).abs() < 1e-12);

        let same = Tensor::full(&[6, 3], 0.7);
        assert!((contextual_contrast_loss(&same, 0.5).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(contextual_contrast_loss(&same, 0.0).is_err());
    }

    #[test]
    fn contextual_is_scale_and_swap_invariant() {
        let mut rng = crate::rng::Rng::seed_from_u64(2);
        let rows = random(&[6, 4], &mut rng);
        let base = contextual_contrast_loss(&rows, 0.3).unwrap();
        let mut scaled = rows.clone();
        scaled.data_mut()[8..12].iter_mut().for_each(|v| *v *= 7.5);
        assert!((contextual_contrast_loss(&scaled, 0.3).unwrap() - base).abs() < 1e-12);
        let mut swapped = rows.clone();
        let (a, b) = swapped.data_mut().split_at_mut(4);
        a.swap_with_slice(&mut b[..4]);
        assert!((contextual_contrast_loss(&swapped, 0.3).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn zero_rows_have_zero_similarity() {
        let rows = Tensor::new(vec![4, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let want: f64 = (0..4).map(|i| pair_loss(&rows, i, i ^ 1, 0.2)).sum::<f64>() / 4.0;
        assert!((contextual_contrast_loss(&rows, 0.2).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn supervised_matches_oracle_and_reductions() {
        let mut rng = crate::rng::Rng::seed_from_u64(3);
        let rows = random(&[6, 4], &mut rng);
        let labels = [0, 0, 1, 1, 0, 0];
        let mut want = 0.0;
        for i in 0..6 {
            let pos: Vec<usize> = (0..6).filter(|&j| j != i && labels[j] == labels[i]).collect();
            want += pos.iter().map(|&p| pair_loss(&rows, i, p, 0.2)).sum::<f64>() / pos.len() as f64;
        }
        let raw = supervised_contextual_contrast_loss(&rows, &labels, 0.2, SccNormalization::Sum).unwrap();
        let mean = supervised_contextual_contrast_loss(&rows, &labels, 0.2, SccNormalization::Mean).unwrap();
        assert!((raw - want).abs() < 1e-9);
        assert!((mean - want / 6.0).abs() < 1e-9);

        // partner-only positives reduce to 2N times the unsupervised loss
        let distinct = [0, 0, 1, 1, 2, 2];
        let raw = supervised_contextual_contrast_loss(&rows, &distinct, 0.2, SccNormalization::Sum).unwrap();
        assert!((raw - 6.0 * contextual_contrast_loss(&rows, 0.2).unwrap()).abs() < 1e-9);

        let same = Tensor::full(&[4, 3], 1.0);
        let all = supervised_contextual_contrast_loss(&same, &[2, 2, 2, 2], 0.2, SccNormalization::Sum).unwrap();
        assert!((all - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn supervised_empty_positive_sets() {
        let rows = Tensor::<f64>::full(&[4, 2], 1.0);
        assert!(matches!(
            supervised_contextual_contrast_loss(&rows, &[0, 1, 2, 3], 0.2, SccNormalization::Mean),
            Err(Error::NoPositivePairs)
        ));
        // only the two class-5 anchors contribute
        let v = supervised_contextual_contrast_loss(&rows, &[5, 5, 1, 2], 0.2, SccNormalization::Sum).unwrap();
        assert!((v - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    fn views(b: usize, d: usize, h: usize, tz: usize, rng: &mut crate::rng::Rng) -> TemporalBatchViews<f64> {
        TemporalBatchViews {
            z_weak: random(&[b, d, tz], rng),
            z_strong: random(&[b, d, tz], rng),
            c_weak: random(&[b, h], rng),
            c_strong: random(&[b, h], rng),
            anchor: 2,
            horizon: 2,
        }
    }

    #[test]
    fn temporal_matches_brute_force() {
        let mut rng = crate::rng::Rng::seed_from_u64(4);
        let (b, d, h, tz) = (3, 4, 5, 6);
        let v = views(b, d, h, tz, &mut rng);
        let preds: Vec<Tensor<f64>> = (0..2).map(|_| random(&[d, h], &mut rng)).collect();
        let got = temporal_contrast_loss(&v, &preds, Direction::StrongToWeak).unwrap();
        let mut want = 0.0;
        for k in 1..=2 {
            let step = v.anchor + k - 1;
            for i in 0..b {
                let pred: Vec<f64> = (0..d)
                    .map(|r| (0..h).map(|c| preds[k - 1].data()[r * h + c] * v.c_strong.data()[i * h + c]).sum())
                    .collect();
                let score = |n: usize| (0..d).map(|r| pred[r] * v.z_weak.data()[(n * d + r) * tz + step]).sum::<f64>();
                let lse = (0..b).map(|n| score(n).exp()).sum::<f64>().ln();
                want -= score(i) - lse;
            }
        }
        want /= (b * 2) as f64;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn temporal_closed_forms() {
        let mut rng = crate::rng::Rng::seed_from_u64(5);
        let preds: Vec<Tensor<f64>> = (0..2).map(|_| random(&[3, 4], &mut rng)).collect();
        let one = views(1, 3, 4, 5, &mut rng);
        assert_eq!(temporal_contrast_loss(&one, &preds, Direction::WeakToStrong).unwrap(), 0.0);

        let mut same = views(4, 3, 4, 5, &mut rng);
        let row: Vec<f64> = same.z_weak.data()[..15].to_vec();
        for b in 1..4 {
            same.z_weak.data_mut()[b * 15..(b + 1) * 15].copy_from_slice(&row);
        }
        let l = temporal_contrast_loss(&same, &preds, Direction::StrongToWeak).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let mut bad = same.clone();
        bad.anchor = 4;
        assert!(temporal_contrast_loss(&bad, &preds, Direction::StrongToWeak).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::<f64>::zeros(&[3, 4]);
        assert!((cross_entropy(&uniform, &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sure = Tensor::<f64>::new(vec![1, 3], vec![0.0, 1000.0, 0.0]).unwrap();
        assert!(cross_entropy(&sure, &[1]).unwrap().abs() < 1e-12);
        assert!(cross_entropy(&uniform, &[0, 1, 4]).is_err());
        let logits = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 0.5, -0.5]).unwrap();
        let want = (-(1.0 - (1f64.exp() + 2f64.exp()).ln()) - (-0.5 - (0.5f64.exp() + (-0.5f64).exp()).ln())) / 2.0;
        assert!((cross_entropy(&logits, &[0, 1]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn combinations() {
        let w = LossWeights::default();
        assert!((combine_unsup(1.0, 1.0, 1.0, &w) - 2.7).abs() < 1e-12);
        assert!((combine_semi(2.0, 2.0, 1.0, &w) - 0.74).abs() < 1e-12);
        let zero = LossWeights {
            unsup_temporal: 0.0,
            unsup_contextual: 0.0,
            semi_temporal: 0.0,
            semi_contextual: 0.0,
            ..w
        };
        assert_eq!(combine_unsup(3.0, 4.0, 5.0, &zero), 0.0);
        assert_eq!(combine_semi(3.0, 4.0, 5.0, &zero), 0.0);

        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(1.0));
        let c = g.constant(Tensor::scalar(1.0));
        let t = combine_graph(&mut g, &[a, b], 1.0, Some(c), 0.7).unwrap();
        assert!((g.scalar(t) - 2.7).abs() < 1e-12);
    }
}
