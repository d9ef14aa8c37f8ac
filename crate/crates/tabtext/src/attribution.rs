//! Integrated gradients over the embedding layer, aggregated to tokens,
//! variables, and cohorts.
//!
//! The attribution target F is the pre-softmax logit of a chosen class. For
//! input embeddings x and the all-pad baseline x', the per-coordinate score
//! is (x - x') times the average of dF/dx along the straight path from x' to
//! x, sampled at n quadrature points. Token scores sum a row's coordinates
//! (preserving the completeness identity at sequence level), a variable's
//! score is the max over its member tokens, and cohort scores average each
//! variable over the sampled records in which it appears.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{positive_probability, Model, ModelError};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::tokenizer::PAD;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("attribution request: {0}")]
    BadRequest(String),
    #[error("non-finite gradient at quadrature step {step}")]
    NonFiniteGradient { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How path gradients are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// Gradients at alpha = k/n for k = 1..=n, equal weights.
    RightEndpoint,
    /// Gradients at alpha = k/n for k = 0..=n, endpoint weights halved.
    Trapezoid,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttributionRequest {
    pub target: usize,
    pub n_steps: usize,
    pub quadrature: Quadrature,
}

impl Default for AttributionRequest {
    fn default() -> Self {
        Self {
            target: 1,
            n_steps: 64,
            quadrature: Quadrature::RightEndpoint,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenAttribution {
    pub index: usize,
    pub token: String,
    /// Sum of the token's per-dimension attributions.
    pub raw: f64,
    /// Raw score rescaled so the sequence's largest magnitude is 1.
    pub display: f64,
    pub variable: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableAttribution {
    pub variable: String,
    pub score: f64,
}

/// Full per-record attribution report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleAttribution {
    pub tokens: Vec<TokenAttribution>,
    pub variables: Vec<VariableAttribution>,
    /// Model probability of class 1 for the record.
    pub prediction: f64,
    pub target: usize,
    pub n_steps: usize,
}

/// Cohort-level summary: per-variable mean over the records it appears in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortAttribution {
    pub means: IndexMap<String, f64>,
    /// How many sampled records contained each variable.
    pub counts: IndexMap<String, usize>,
    pub sample_count: usize,
    pub seed: u64,
}

/// One record prepared for cohort attribution.
#[derive(Debug, Clone)]
pub struct CohortRecord {
    pub ids: Vec<u32>,
    /// Per-token variable assignment, aligned with `ids`.
    pub variables: Vec<Option<String>>,
}

/// Integrated gradients of a scalar-valued function of one tensor along the
/// straight path from `baseline` to `x`.
pub fn path_integrated_gradients<F>(
    f: F,
    x: &Tensor,
    baseline: &Tensor,
    n_steps: usize,
    quadrature: Quadrature,
) -> Result<Tensor, AttributionError>
where
    F: Fn(&Tape, Var) -> Result<Var, AttributionError>,
{
    if n_steps == 0 {
        return Err(AttributionError::BadRequest("n_steps must be positive".into()));
    }
    if x.shape() != baseline.shape() {
        return Err(AttributionError::BadRequest(format!(
            "input shape {:?} does not match baseline shape {:?}",
            x.shape(),
            baseline.shape()
        )));
    }
    let diff: Vec<f64> = x
        .data()
        .iter()
        .zip(baseline.data())
        .map(|(a, b)| a - b)
        .collect();
    let steps: Vec<(usize, f64)> = match quadrature {
        Quadrature::RightEndpoint => {
            (1..=n_steps).map(|k| (k, 1.0 / n_steps as f64)).collect()
        }
        Quadrature::Trapezoid => (0..=n_steps)
            .map(|k| {
                let w = if k == 0 || k == n_steps { 0.5 } else { 1.0 };
                (k, w / n_steps as f64)
            })
            .collect(),
    };
    let mut grad_avg = vec![0.0; x.len()];
    for (k, weight) in steps {
        let alpha = k as f64 / n_steps as f64;
        let point_data: Vec<f64> = baseline
            .data()
            .iter()
            .zip(&diff)
            .map(|(b, d)| b + alpha * d)
            .collect();
        let tape = Tape::new();
        let point = tape.leaf(Tensor::new(x.shape().to_vec(), point_data)?);
        let score = f(&tape, point)?;
        let grads = tape.backward(score)?;
        let g = grads
            .get(point)
            .ok_or(AttributionError::Tensor(TensorError::DetachedGraph))?;
        if !g.all_finite() {
            return Err(AttributionError::NonFiniteGradient { step: k });
        }
        for (acc, gv) in grad_avg.iter_mut().zip(g.data()) {
            *acc += weight * gv;
        }
    }
    let ig: Vec<f64> = diff.iter().zip(&grad_avg).map(|(d, g)| d * g).collect();
    Ok(Tensor::new(x.shape().to_vec(), ig)?)
}

fn class_score_fn<'m>(
    model: &'m Model,
    mask: &'m [u8],
    target: usize,
) -> impl Fn(&Tape, Var) -> Result<Var, AttributionError> + 'm {
    move |tape, point| {
        let fwd = model.bind_frozen(tape);
        let h = fwd.encode_from_embeddings(point, mask)?;
        let logits = fwd.classify_logits(h)?;
        Ok(fwd.class_score(logits, target)?)
    }
}

/// Per-token, per-dimension integrated gradients matrix for one sequence,
/// with the all-pad embedding as baseline.
pub fn integrated_gradients(
    model: &Model,
    ids: &[u32],
    mask: &[u8],
    request: &AttributionRequest,
) -> Result<Tensor, AttributionError> {
    if request.target >= model.config.num_classes {
        return Err(AttributionError::BadRequest(format!(
            "target class {} out of range for {} classes",
            request.target, model.config.num_classes
        )));
    }
    let (x, baseline) = {
        let tape = Tape::eval();
        let fwd = model.bind_frozen(&tape);
        let e = fwd.embed(ids)?;
        let b = fwd.embed(&vec![PAD; ids.len()])?;
        (tape.value(e), tape.value(b))
    };
    path_integrated_gradients(
        class_score_fn(model, mask, request.target),
        &x,
        &baseline,
        request.n_steps,
        request.quadrature,
    )
}

/// The exact change in the target logit between an input and its baseline;
/// integrated-gradient totals converge to this as n_steps grows.
pub fn target_logit_change(
    model: &Model,
    ids: &[u32],
    mask: &[u8],
    target: usize,
) -> Result<f64, AttributionError> {
    let score = |input: &[u32]| -> Result<f64, AttributionError> {
        let tape = Tape::eval();
        let fwd = model.bind_frozen(&tape);
        let e = fwd.embed(input)?;
        let h = fwd.encode_from_embeddings(e, mask)?;
        let logits = fwd.classify_logits(h)?;
        let s = fwd.class_score(logits, target)?;
        Ok(tape.value(s).item())
    };
    Ok(score(ids)? - score(&vec![PAD; ids.len()])?)
}

/// Per-token raw scores: each row of the attribution matrix summed over
/// embedding dimensions.
pub fn token_scores(ig: &Tensor) -> Vec<f64> {
    let cols = ig.cols();
    ig.data().chunks(cols).map(|row| row.iter().sum()).collect()
}

/// Rescale so the largest magnitude becomes 1; all-zero input is unchanged.
pub fn display_scores(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    if max == 0.0 {
        return raw.to_vec();
    }
    raw.iter().map(|&s| s / max).collect()
}

/// Max raw token score per variable, in order of first appearance. Tokens
/// without a variable are skipped.
pub fn variable_attribution(
    raw: &[f64],
    variables: &[Option<String>],
) -> Vec<VariableAttribution> {
    let mut best: IndexMap<&str, f64> = IndexMap::new();
    for (score, var) in raw.iter().zip(variables) {
        let Some(name) = var else { continue };
        best.entry(name.as_str())
            .and_modify(|b| *b = b.max(*score))
            .or_insert(*score);
    }
    best.into_iter()
        .map(|(variable, score)| VariableAttribution {
            variable: variable.to_string(),
            score,
        })
        .collect()
}

/// Attribute one record end to end and package the report.
pub fn attribute_sample(
    model: &Model,
    ids: &[u32],
    tokens: &[String],
    variables: &[Option<String>],
    request: &AttributionRequest,
) -> Result<SampleAttribution, AttributionError> {
    if tokens.len() != ids.len() || variables.len() != ids.len() {
        return Err(AttributionError::BadRequest(format!(
            "{} ids but {} token strings and {} variable assignments",
            ids.len(),
            tokens.len(),
            variables.len()
        )));
    }
    let mask = vec![1u8; ids.len()];
    let ig = integrated_gradients(model, ids, &mask, request)?;
    let raw = token_scores(&ig);
    let display = display_scores(&raw);
    let prediction = {
        let tape = Tape::eval();
        let fwd = model.bind_frozen(&tape);
        let logits = fwd.classify(ids, &mask)?;
        positive_probability(&tape.value(logits))
    };
    let token_list = (0..ids.len())
        .map(|i| TokenAttribution {
            index: i,
            token: tokens[i].clone(),
            raw: raw[i],
            display: display[i],
            variable: variables[i].clone(),
        })
        .collect();
    Ok(SampleAttribution {
        tokens: token_list,
        variables: variable_attribution(&raw, variables),
        prediction,
        target: request.target,
        n_steps: request.n_steps,
    })
}

/// Attribute a seeded uniform sample (without replacement) of the records
/// and average each variable's score over the records containing it.
pub fn cohort_attribution(
    model: &Model,
    records: &[CohortRecord],
    request: &AttributionRequest,
    sample_size: usize,
    seed: u64,
) -> Result<CohortAttribution, AttributionError> {
    if sample_size == 0 {
        return Err(AttributionError::BadRequest("sample_size must be positive".into()));
    }
    if sample_size > records.len() {
        return Err(AttributionError::BadRequest(format!(
            "sample_size {} exceeds {} records",
            sample_size,
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(sample_size);

    let mut sums: IndexMap<String, f64> = IndexMap::new();
    let mut counts: IndexMap<String, usize> = IndexMap::new();
    for &idx in &order {
        let record = &records[idx];
        let mask = vec![1u8; record.ids.len()];
        let ig = integrated_gradients(model, &record.ids, &mask, request)?;
        let raw = token_scores(&ig);
        for attribution in variable_attribution(&raw, &record.variables) {
            *sums.entry(attribution.variable.clone()).or_insert(0.0) += attribution.score;
            *counts.entry(attribution.variable).or_insert(0) += 1;
        }
    }
    let means = sums
        .iter()
        .map(|(name, sum)| (name.clone(), sum / counts[name] as f64))
        .collect();
    Ok(CohortAttribution {
        means,
        counts,
        sample_count: sample_size,
        seed,
    })
}

/// Plain-text heat line: token:score pairs using display scores.
pub fn render_heat(tokens: &[TokenAttribution]) -> String {
    tokens
        .iter()
        .map(|t| format!("{}:{:+.2}", t.token, t.display))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionMode, ModelConfig};
    use crate::tokenizer::{CLS, SEP};
    use crate::train::{finetune, FinetuneConfig, LabeledSequence};
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            ffn: 32,
            vocab: 64,
            max_len: 16,
            window: 4,
            attention: AttentionMode::Disentangled,
            num_classes: 2,
            dropout: 0.0,
            seed: 13,
        }
    }

    fn request(n_steps: usize) -> AttributionRequest {
        AttributionRequest {
            target: 1,
            n_steps,
            quadrature: Quadrature::RightEndpoint,
        }
    }

    #[test]
    fn all_pad_input_attributes_exactly_zero() {
        let model = Model::new(tiny_config()).unwrap();
        let ids = vec![PAD; 5];
        let ig = integrated_gradients(&model, &ids, &[1; 5], &request(8)).unwrap();
        assert!(ig.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_function_is_recovered_exactly_at_any_step_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let baseline = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        for n_steps in [1, 2, 7] {
            for quad in [Quadrature::RightEndpoint, Quadrature::Trapezoid] {
                let wc = w.clone();
                let ig = path_integrated_gradients(
                    move |tape, point| {
                        let wv = tape.constant(wc.clone());
                        let prod = tape.mul(point, wv)?;
                        Ok(tape.sum(prod)?)
                    },
                    &x,
                    &baseline,
                    n_steps,
                    quad,
                )
                .unwrap();
                for ((iv, xv), (bv, wv)) in ig
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(baseline.data().iter().zip(w.data()))
                {
                    let expect = (xv - bv) * wv;
                    assert!((iv - expect).abs() < 1e-12, "{iv} vs {expect}");
                }
            }
        }
    }

    fn completeness_gap(model: &Model, ids: &[u32], n_steps: usize) -> (f64, f64) {
        let mask = vec![1u8; ids.len()];
        let ig = integrated_gradients(model, ids, &mask, &request(n_steps)).unwrap();
        let total: f64 = token_scores(&ig).iter().sum();
        let delta = target_logit_change(model, ids, &mask, 1).unwrap();
        ((total - delta).abs(), delta)
    }

    #[test]
    fn completeness_holds_within_tolerance_at_256_steps() {
        let model = Model::new(tiny_config()).unwrap();
        let ids = vec![CLS, 10, 23, 41, 9, SEP];
        let (gap, delta) = completeness_gap(&model, &ids, 256);
        assert!(
            gap <= 1e-2 * delta.abs() + 1e-4,
            "gap {gap} for delta {delta}"
        );
        let (dense_gap, _) = completeness_gap(&model, &ids, 4096);
        assert!(dense_gap <= gap + 1e-9, "{dense_gap} vs {gap}");
    }

    #[test]
    fn completeness_gap_shrinks_with_step_count() {
        let model = Model::new(tiny_config()).unwrap();
        let ids = vec![CLS, 7, 30, 55, SEP];
        let gaps: Vec<f64> = [8usize, 32, 128, 512]
            .iter()
            .map(|&n| completeness_gap(&model, &ids, n).0)
            .collect();
        for pair in gaps.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-6, "gaps {gaps:?}");
        }
    }

    #[test]
    fn attribution_is_deterministic() {
        let model = Model::new(tiny_config()).unwrap();
        let ids = vec![CLS, 12, 13, SEP];
        let a = integrated_gradients(&model, &ids, &[1; 4], &request(16)).unwrap();
        let b = integrated_gradients(&model, &ids, &[1; 4], &request(16)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn bad_requests_are_rejected() {
        let model = Model::new(tiny_config()).unwrap();
        let ids = vec![CLS, 12, SEP];
        let r = AttributionRequest {
            target: 5,
            ..request(8)
        };
        assert!(matches!(
            integrated_gradients(&model, &ids, &[1; 3], &r),
            Err(AttributionError::BadRequest(_))
        ));
        assert!(matches!(
            integrated_gradients(&model, &ids, &[1; 3], &request(0)),
            Err(AttributionError::BadRequest(_))
        ));
    }

    #[test]
    fn non_finite_gradients_abort_with_step_index() {
        let mut model = Model::new(tiny_config()).unwrap();
        model.params.get_mut("cls.w").data_mut()[0] = f64::NAN;
        let ids = vec![CLS, 12, SEP];
        match integrated_gradients(&model, &ids, &[1; 3], &request(8)) {
            Err(AttributionError::NonFiniteGradient { step: 1 }) => {}
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn token_scores_sum_rows_and_preserve_the_total() {
        let ig = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 0.0, 2.5, 0.0]).unwrap();
        assert_eq!(token_scores(&ig), vec![0.0, 2.5]);
        let zero = Tensor::zeros(&[3, 4]);
        assert!(token_scores(&zero).iter().all(|&s| s == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dense = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let total: f64 = token_scores(&dense).iter().sum();
        let direct: f64 = dense.data().iter().sum();
        assert!((total - direct).abs() <= 1e-12);
    }

    #[test]
    fn display_scores_normalize_to_unit_peak() {
        let raw = [0.2, -0.8, 0.4];
        let display = display_scores(&raw);
        assert_eq!(display, vec![0.25, -1.0, 0.5]);
        assert_eq!(display_scores(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn variable_scores_take_the_member_max() {
        let raw = [0.1, 0.5, 0.2, 0.3, 9.0];
        let com = Some("comorbidities".to_string());
        let vars = [com.clone(), com.clone(), com.clone(), com, None];
        let out = variable_attribution(&raw, &vars);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].variable, "comorbidities");
        assert_eq!(out[0].score, 0.5);

        let single = variable_attribution(&[0.7], &[Some("age".to_string())]);
        assert_eq!(single[0].score, 0.7);
    }

    #[test]
    fn positive_scaling_preserves_the_variable_ranking() {
        let raw = [0.1, 0.5, -0.3, 0.2];
        let vars: Vec<Option<String>> = ["a", "a", "b", "c"]
            .iter()
            .map(|s| Some(s.to_string()))
            .collect();
        let base = variable_attribution(&raw, &vars);
        let scaled_raw: Vec<f64> = raw.iter().map(|s| s * 3.0).collect();
        let scaled = variable_attribution(&scaled_raw, &vars);
        for (b, s) in base.iter().zip(&scaled) {
            assert_eq!(b.variable, s.variable);
            assert!((s.score - 3.0 * b.score).abs() < 1e-15);
        }
    }

    fn toy_records(n: usize) -> Vec<CohortRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|i| {
                let marker = if i % 2 == 0 { 10 } else { 11 };
                let filler: u32 = rng.random_range(20..60);
                CohortRecord {
                    ids: vec![CLS, marker, filler, SEP],
                    variables: vec![
                        None,
                        Some("complaint".to_string()),
                        Some("age".to_string()),
                        None,
                    ],
                }
            })
            .collect()
    }

    #[test]
    fn cohort_of_one_equals_that_records_scores() {
        let model = Model::new(tiny_config()).unwrap();
        let records = toy_records(4);
        let cohort = cohort_attribution(&model, &records, &request(8), 1, 3).unwrap();
        // Recover which record the seeded shuffle picked.
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        let picked = &records[order[0]];
        let ig =
            integrated_gradients(&model, &picked.ids, &[1; 4], &request(8)).unwrap();
        let expect = variable_attribution(&token_scores(&ig), &picked.variables);
        assert_eq!(cohort.sample_count, 1);
        for va in expect {
            assert_eq!(cohort.means[&va.variable], va.score);
            assert_eq!(cohort.counts[&va.variable], 1);
        }
    }

    #[test]
    fn duplicated_records_with_doubled_sample_keep_the_means() {
        let model = Model::new(tiny_config()).unwrap();
        let records = toy_records(3);
        let full = cohort_attribution(&model, &records, &request(8), 3, 0).unwrap();
        let mut doubled = records.clone();
        doubled.extend(records.iter().cloned());
        let twice = cohort_attribution(&model, &doubled, &request(8), 6, 0).unwrap();
        for (name, mean) in &full.means {
            assert!((twice.means[name] - mean).abs() < 1e-12);
            assert_eq!(twice.counts[name], 2 * full.counts[name]);
        }
    }

    #[test]
    fn variables_average_only_over_records_containing_them() {
        let model = Model::new(tiny_config()).unwrap();
        let mut records = toy_records(4);
        // Only the first record mentions "extra".
        records[0].variables[2] = Some("extra".to_string());
        let cohort = cohort_attribution(&model, &records, &request(8), 4, 0).unwrap();
        assert_eq!(cohort.counts["extra"], 1);
        assert_eq!(cohort.counts["complaint"], 4);
        assert_eq!(cohort.counts["age"], 3);
    }

    #[test]
    fn cohort_request_validation() {
        let model = Model::new(tiny_config()).unwrap();
        let records = toy_records(2);
        assert!(matches!(
            cohort_attribution(&model, &records, &request(8), 0, 0),
            Err(AttributionError::BadRequest(_))
        ));
        assert!(matches!(
            cohort_attribution(&model, &records, &request(8), 3, 0),
            Err(AttributionError::BadRequest(_))
        ));
    }

    #[test]
    fn trained_signal_token_dominates_cohort_attribution() {
        // Label is carried entirely by the marker token; after training, the
        // marker's variable should out-attribute the noise variable.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let data: Vec<LabeledSequence> = (0..80)
            .map(|i| {
                let label = (i % 2) as u8;
                let marker = if label == 1 { 10 } else { 11 };
                let mut ids = vec![CLS, marker];
                for _ in 0..3 {
                    ids.push(rng.random_range(20..60));
                }
                ids.push(SEP);
                LabeledSequence { ids, label }
            })
            .collect();
        let cfg = FinetuneConfig {
            epochs: 3,
            eval_every: 5,
            val_fraction: 0.15,
            batch_size: 8,
            lr: 1e-3,
            log_every: 5,
            seed: 2,
            ..FinetuneConfig::default()
        };
        let outcome = finetune(Model::new(tiny_config()).unwrap(), &data, &cfg).unwrap();
        assert!(outcome.best_auc >= 0.9);
        let records: Vec<CohortRecord> = data
            .iter()
            .map(|s| CohortRecord {
                ids: s.ids.clone(),
                variables: s
                    .ids
                    .iter()
                    .enumerate()
                    .map(|(i, _)| match i {
                        1 => Some("complaint".to_string()),
                        2..=4 => Some("noise".to_string()),
                        _ => None,
                    })
                    .collect(),
            })
            .collect();
        let cohort =
            cohort_attribution(&outcome.model, &records, &request(32), 40, 7).unwrap();
        // Mean |score| comparison: the signal variable should dominate.
        let complaint = cohort.means["complaint"].abs();
        let noise = cohort.means["noise"].abs();
        assert!(
            complaint > noise,
            "complaint {complaint} vs noise {noise}"
        );
    }

    #[test]
    fn sample_report_packages_tokens_and_heat() {
        let model = Model::new(tiny_config()).unwrap();
        let ids = vec![CLS, 10, SEP];
        let tokens = vec!["[CLS]".to_string(), "fever".to_string(), "[SEP]".to_string()];
        let vars = vec![None, Some("complaint".to_string()), None];
        let report =
            attribute_sample(&model, &ids, &tokens, &vars, &request(8)).unwrap();
        assert_eq!(report.tokens.len(), 3);
        assert_eq!(report.tokens[1].token, "fever");
        assert_eq!(report.tokens[1].variable.as_deref(), Some("complaint"));
        assert!(report.prediction > 0.0 && report.prediction < 1.0);
        assert_eq!(report.variables.len(), 1);
        let heat = render_heat(&report.tokens);
        assert!(heat.contains("fever:"));
        assert_eq!(heat.split(' ').count(), 3);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"prediction\""));
        // Mismatched metadata lengths are rejected.
        assert!(matches!(
            attribute_sample(&model, &ids, &tokens[..2].to_vec(), &vars, &request(8)),
            Err(AttributionError::BadRequest(_))
        ));
    }
}
