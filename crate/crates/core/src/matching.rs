//! Scoring Gaussians against query sets and the adaptive selection rules.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bits;
use crate::error::{argument_error, format_error, Result};
use crate::prompt::{Metric, QuerySet};
use crate::scene::Features;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Filtered,
    Grown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub membership: Vec<bool>,
    /// Positive score per Gaussian.
    pub scores: Vec<f64>,
    pub stage: Stage,
    pub prompt_id: String,
}

#[derive(Serialize, Deserialize)]
struct SegmentationWire {
    num_gaussians: usize,
    count: usize,
    membership: String,
    scores: String,
    stage: Stage,
    prompt_id: String,
}

impl Segmentation {
    pub fn len(&self) -> usize {
        self.membership.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membership.is_empty()
    }

    pub fn count(&self) -> usize {
        self.membership.iter().filter(|&&m| m).count()
    }

    pub fn members(&self) -> Vec<usize> {
        (0..self.membership.len()).filter(|&i| self.membership[i]).collect()
    }

    /// Same scores and prompt, new membership and stage.
    pub fn with_membership(&self, membership: Vec<bool>, stage: Stage) -> Segmentation {
        Segmentation {
            membership,
            scores: self.scores.clone(),
            stage,
            prompt_id: self.prompt_id.clone(),
        }
    }

    /// JSON with the membership as a base64 bitset and the scores as a
    /// base64 GSTEN `[N]` f32 tensor.
    pub fn to_json(&self) -> Result<String> {
        use base64::Engine;
        let scores = Tensor::from_f64(vec![self.scores.len()], &self.scores)?.to_bytes();
        let wire = SegmentationWire {
            num_gaussians: self.membership.len(),
            count: self.count(),
            membership: bits::encode(&self.membership),
            scores: base64::engine::general_purpose::STANDARD.encode(scores),
            stage: self.stage,
            prompt_id: self.prompt_id.clone(),
        };
        Ok(serde_json::to_string_pretty(&wire)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        use base64::Engine;
        let wire: SegmentationWire = serde_json::from_str(text)?;
        let membership = bits::decode(&wire.membership, wire.num_gaussians)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&wire.scores)
            .map_err(|e| format_error!("bad base64 scores: {}", e))?;
        let scores = Tensor::from_bytes(&bytes)?;
        scores.expect_rank(1)?;
        if scores.dims[0] != wire.num_gaussians {
            return Err(format_error!(
                "{} scores for {} Gaussians",
                scores.dims[0],
                wire.num_gaussians
            ));
        }
        Ok(Segmentation {
            membership,
            scores: scores.to_f64()?,
            stage: wire.stage,
            prompt_id: wire.prompt_id,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub positive: Vec<f64>,
    /// Absent when the query set has no negatives.
    pub negative: Option<Vec<f64>>,
    pub metric: Metric,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn max_scores(features: &Features, queries: &[Vec<f64>], metric: Metric) -> Vec<f64> {
    let queries: Vec<(Vec<f64>, bool)> = queries
        .iter()
        .map(|q| match metric {
            Metric::Dot => (q.clone(), true),
            Metric::Cosine => {
                let n = norm(q);
                (q.iter().map(|v| v / n).collect(), n > 0.0)
            }
        })
        .collect();
    features
        .as_slice()
        .par_chunks(features.dim())
        .map(|f| {
            let scale = match metric {
                Metric::Dot => 1.0,
                Metric::Cosine => {
                    let n = norm(f);
                    if n == 0.0 {
                        return -1.0;
                    }
                    1.0 / n
                }
            };
            queries
                .iter()
                .map(|(q, ok)| {
                    if !ok {
                        return -1.0;
                    }
                    scale * f.iter().zip(q).map(|(a, b)| a * b).sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Per Gaussian, the maximum over positive (and negative) queries of the
/// cosine similarity or dot product. Zero-norm vectors score -1 under
/// the cosine metric.
pub fn score(features: &Features, queries: &QuerySet) -> Result<Scores> {
    if queries.positive.is_empty() {
        return Err(argument_error!("query set has no positive queries"));
    }
    if let Some(q) = queries
        .positive
        .iter()
        .chain(&queries.negative)
        .find(|q| q.len() != features.dim())
    {
        return Err(argument_error!(
            "query of width {} against features of width {}",
            q.len(),
            features.dim()
        ));
    }
    Ok(Scores {
        positive: max_scores(features, &queries.positive, queries.metric),
        negative: (!queries.negative.is_empty())
            .then(|| max_scores(features, &queries.negative, queries.metric)),
        metric: queries.metric,
    })
}

/// Correctly rounded mean: a compensated sum, then a division whose
/// remainder is recovered with a fused multiply-add. Constant inputs give
/// that constant exactly.
fn exact_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let (mut sum, mut err) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        let back = t - sum;
        err += (sum - (t - back)) + (v - back);
        sum = t;
    }
    let n = values.len() as f64;
    let q = sum / n;
    let rem = (-q).mul_add(n, sum) + err;
    q + rem / n
}

/// Threshold of the cosine rule: the mean positive score.
pub fn cosine_threshold(positive: &[f64]) -> f64 {
    exact_mean(positive)
}

/// Threshold of the dot rule: mean plus population standard deviation.
pub fn dot_threshold(positive: &[f64]) -> f64 {
    let mean = exact_mean(positive);
    let var = exact_mean(&positive.iter().map(|s| (s - mean) * (s - mean)).collect::<Vec<_>>());
    mean + var.sqrt()
}

/// Keeps Gaussians whose positive score beats the negative score (when
/// negatives exist) and exceeds the mean positive score.
pub fn select_cosine(positive: &[f64], negative: Option<&[f64]>, prompt_id: &str) -> Segmentation {
    let tau = cosine_threshold(positive);
    let membership = positive
        .iter()
        .enumerate()
        .map(|(i, &s)| s > tau && negative.is_none_or(|n| s > n[i]))
        .collect();
    Segmentation {
        membership,
        scores: positive.to_vec(),
        stage: Stage::Raw,
        prompt_id: prompt_id.into(),
    }
}

/// Keeps Gaussians scoring above mean + std of all positive scores.
pub fn select_dot(positive: &[f64], prompt_id: &str) -> Segmentation {
    let tau = dot_threshold(positive);
    Segmentation {
        membership: positive.iter().map(|&s| s > tau).collect(),
        scores: positive.to_vec(),
        stage: Stage::Raw,
        prompt_id: prompt_id.into(),
    }
}

/// Applies the selection rule that belongs to the scores' metric.
pub fn select(scores: &Scores, prompt_id: &str) -> Segmentation {
    match scores.metric {
        Metric::Cosine => select_cosine(&scores.positive, scores.negative.as_deref(), prompt_id),
        Metric::Dot => select_dot(&scores.positive, prompt_id),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn features(rows: &[&[f64]]) -> Features {
        Features::from_vec(rows[0].len(), rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    fn queries(pos: &[&[f64]], neg: &[&[f64]], metric: Metric) -> QuerySet {
        QuerySet {
            positive: pos.iter().map(|q| q.to_vec()).collect(),
            negative: neg.iter().map(|q| q.to_vec()).collect(),
            metric,
        }
    }

    #[test]
    fn identical_query_scores_one() {
        let f = features(&[&[3.0, 4.0], &[0.0, 1.0]]);
        let s = score(&f, &queries(&[&[3.0, 4.0]], &[], Metric::Cosine)).unwrap();
        assert!((s.positive[0] - 1.0).abs() < 1e-15);
        assert!((s.positive[1] - 0.8).abs() < 1e-15);
        assert!(s.negative.is_none());
    }

    #[test]
    fn zero_feature_scores_minus_one() {
        let f = features(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let s = score(&f, &queries(&[&[1.0, 0.0]], &[], Metric::Cosine)).unwrap();
        assert_eq!(s.positive, vec![-1.0, 1.0]);
    }

    #[test]
    fn dot_metric_is_raw() {
        let f = features(&[&[2.0, 1.0]]);
        let s = score(&f, &queries(&[&[3.0, -1.0], &[0.5, 0.5]], &[], Metric::Dot)).unwrap();
        assert_eq!(s.positive, vec![5.0]);
    }

    #[test]
    fn width_mismatch_rejected() {
        let f = features(&[&[2.0, 1.0]]);
        assert!(score(&f, &queries(&[&[1.0]], &[], Metric::Dot)).is_err());
    }

    #[test]
    fn cosine_all_equal_is_empty() {
        let seg = select_cosine(&[0.4; 10], None, "");
        assert_eq!(seg.count(), 0);
    }

    #[test]
    fn cosine_hand_computed_tau() {
        let mut s = vec![0.9; 30];
        s.extend(vec![0.1; 70]);
        assert_eq!(cosine_threshold(&s), 0.34);
        let seg = select_cosine(&s, None, "p");
        assert_eq!(seg.members(), (0..30).collect::<Vec<_>>());
        assert_eq!(seg.stage, Stage::Raw);
    }

    #[test]
    fn dominating_negatives_empty_selection() {
        let s: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        let n = vec![2.0; 20];
        assert_eq!(select_cosine(&s, Some(&n), "").count(), 0);
    }

    #[test]
    fn dot_hand_computed_tau() {
        let mut s = vec![1.0; 10];
        s.extend(vec![0.0; 90]);
        assert_eq!(dot_threshold(&s), 0.4);
        assert_eq!(select_dot(&s, "").members(), (0..10).collect::<Vec<_>>());
        assert_eq!(select_dot(&[0.7; 5], "").count(), 0);
        assert_eq!(select_dot(&[3.0], "").count(), 0);
    }

    #[test]
    fn json_roundtrip() {
        let seg = Segmentation {
            membership: vec![true, false, true, true, false, false, false, false, true],
            scores: vec![0.5, -0.25, 1.0, 0.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            stage: Stage::Grown,
            prompt_id: "abc".into(),
        };
        let text = seg.to_json().unwrap();
        assert!(text.contains("\"grown\""));
        assert_eq!(Segmentation::from_json(&text).unwrap(), seg);
    }

    fn rows() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
        (1usize..5).prop_flat_map(|dim| {
            (
                proptest::collection::vec(-2.0f64..2.0, dim * 12),
                proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, dim), 1..4),
            )
        })
    }

    proptest! {
        #[test]
        fn max_decomposition_and_order_invariance((data, qs) in rows()) {
            let dim = qs[0].len();
            let f = Features::from_vec(dim, data).unwrap();
            let all = score(&f, &QuerySet { positive: qs.clone(), negative: vec![], metric: Metric::Cosine }).unwrap();
            let mut reversed = qs.clone();
            reversed.reverse();
            let rev = score(&f, &QuerySet { positive: reversed, negative: vec![], metric: Metric::Cosine }).unwrap();
            prop_assert_eq!(&all.positive, &rev.positive);
            let singles: Vec<Vec<f64>> = qs.iter()
                .map(|q| score(&f, &QuerySet { positive: vec![q.clone()], negative: vec![], metric: Metric::Cosine }).unwrap().positive)
                .collect();
            for i in 0..f.count() {
                let m = singles.iter().map(|s| s[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(all.positive[i], m);
            }
        }

        #[test]
        fn cosine_membership_ignores_positive_scaling((data, qs) in rows(), k in 0usize..12, scale in 0.1f64..10.0) {
            let dim = qs[0].len();
            let f = Features::from_vec(dim, data.clone()).unwrap();
            let mut scaled = data;
            scaled[k * dim..(k + 1) * dim].iter_mut().for_each(|v| *v *= scale);
            let g = Features::from_vec(dim, scaled).unwrap();
            let qset = QuerySet { positive: qs, negative: vec![], metric: Metric::Cosine };
            let a = select(&score(&f, &qset).unwrap(), "");
            let b = select(&score(&g, &qset).unwrap(), "");
            for (x, y) in a.scores.iter().zip(&b.scores) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn constant_scores_give_exact_thresholds(c in -1e3f64..1e3, n in 1usize..3000) {
            let s = vec![c; n];
            prop_assert_eq!(cosine_threshold(&s), c);
            prop_assert_eq!(dot_threshold(&s), c);
        }

        #[test]
        fn selection_is_idempotent(s in proptest::collection::vec(-1.0f64..1.0, 1..50)) {
            prop_assert_eq!(select_dot(&s, ""), select_dot(&s, ""));
            let seg = select_cosine(&s, None, "");
            let tau = cosine_threshold(&s);
            for i in seg.members() {
                prop_assert!(s[i] > tau);
            }
        }
    }
}
