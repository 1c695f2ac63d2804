use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig, TextFeature};
use crate::autodiff::{Graph, Var};
use crate::constraints::pool_shared;
use crate::metrics::{evaluate_reports, retrieval_recall, Averaging, EvalReport};
use crate::nn::{Ctx, Model, PriorContext};
use crate::synthgen::vocab::{to_text, LabelSet, NUM_CONDITIONS};
use crate::synthgen::{LongitudinalSample, Visit};
use crate::{Error, Result};

/// Greedy output and retrieval features for one test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: u64,
    pub mode: Mode,
    pub tokens: Vec<u32>,
    pub text: String,
    /// Image shared feature (pooled over visits when a prior is used)
    /// followed by the current-specific feature.
    pub image_feature: Vec<f64>,
    /// The same layout for the generated report.
    pub text_feature: Vec<f64>,
}

fn concat(g: &Graph, a: Var, b: Var) -> Result<Vec<f64>> {
    let mut v = g.value(a);
    v.extend(g.value(b));
    Ok(v)
}

/// Text-side layout matching [`Prediction::image_feature`]: pooled shared
/// feature with the prior report when given, then current-specific.
fn report_feature(cx: &Ctx, model: &Model, l_c: Var, l_p: Option<Var>) -> Result<Vec<f64>> {
    let g = cx.g;
    match l_p {
        Some(l_p) => {
            let t = model.decompose(cx, l_c, l_p)?;
            let pooled = pool_shared(g, t.current_shared, t.prior_shared)?;
            concat(g, pooled, t.current_specific)
        }
        None => {
            let (sh, sp) = model.decompose_current(cx, l_c)?;
            concat(g, sh, sp)
        }
    }
}

/// Feature of the gold current report, laid out like the generated one.
pub fn reference_feature(model: &Model, s: &LongitudinalSample, mode: Mode) -> Result<Vec<f64>> {
    let g = Graph::new();
    let cx = Ctx::eval(&g, &model.store);
    let l_c = model.encode_text(&cx, &s.report_current)?;
    let l_p = match mode {
        Mode::WithHistory => Some(model.encode_text(&cx, &s.report_prior)?),
        Mode::NoHistory => None,
    };
    report_feature(&cx, model, l_c, l_p)
}

/// Scores one sample. In [`Mode::NoHistory`] the prior image and report are
/// never read.
pub fn predict_one(
    model: &Model,
    s: &LongitudinalSample,
    mode: Mode,
    text_feature: TextFeature,
) -> Result<Prediction> {
    let g = Graph::new();
    let cx = Ctx::eval(&g, &model.store);
    let (xc, cls_c) = model.encode_image(&cx, model.image_input(&cx, &s.image_current)?)?;
    let v_c = model.project_visual(&cx, cls_c)?;
    let max_len = model.config.max_len;
    let (decoded, image_feature, prior_text) = match mode {
        Mode::WithHistory => {
            let (xp, cls_p) = model.encode_image(&cx, model.image_input(&cx, &s.image_prior)?)?;
            let v_p = model.project_visual(&cx, cls_p)?;
            let pc = PriorContext {
                patches: xp,
                report: &s.report_prior,
            };
            let d = model.decode_report(&cx, xc, Some(&pc), None, max_len)?;
            let img = model.decompose(&cx, v_c, v_p)?;
            let pooled = pool_shared(&g, img.current_shared, img.prior_shared)?;
            let l_p = model.encode_text(&cx, &s.report_prior)?;
            (d, concat(&g, pooled, img.current_specific)?, Some(l_p))
        }
        Mode::NoHistory => {
            let d = model.decode_report(&cx, xc, None, None, max_len)?;
            let (sh, sp) = model.decompose_current(&cx, v_c)?;
            (d, concat(&g, sh, sp)?, None)
        }
    };
    let l_c = match text_feature {
        TextFeature::GeneratedReport => model.encode_text(&cx, &decoded.tokens)?,
        TextFeature::DecoderHidden => model.hidden_to_text(&cx, decoded.hidden)?,
    };
    let text_feature = report_feature(&cx, model, l_c, prior_text)?;
    Ok(Prediction {
        sample_id: s.sample_id,
        mode,
        text: to_text(&decoded.tokens),
        tokens: decoded.tokens,
        image_feature,
        text_feature,
    })
}

pub fn predict(
    model: &Model,
    samples: &[LongitudinalSample],
    mode: Mode,
    text_feature: TextFeature,
) -> Result<Vec<Prediction>> {
    samples
        .iter()
        .map(|s| predict_one(model, s, mode, text_feature))
        .collect()
}

/// Report, label and retrieval metrics of predictions against their samples,
/// matched by sample id.
pub fn score(preds: &[Prediction], gold: &[LongitudinalSample]) -> Result<EvalReport> {
    let by_id: std::collections::HashMap<u64, &LongitudinalSample> =
        gold.iter().map(|s| (s.sample_id, s)).collect();
    let mut generated = Vec::with_capacity(preds.len());
    let mut refs = Vec::with_capacity(preds.len());
    let mut labels: Vec<LabelSet> = Vec::with_capacity(preds.len());
    for p in preds {
        let s = by_id.get(&p.sample_id).ok_or_else(|| {
            Error::Config(format!("prediction for unknown sample {}", p.sample_id))
        })?;
        generated.push(p.tokens.clone());
        refs.push(s.report_current.clone());
        labels.push(s.factors.active_at(Visit::Current));
    }
    let mut report = evaluate_reports(&generated, &refs, &labels, Averaging::Micro)?;
    if !preds.is_empty() {
        let img: Vec<Vec<f64>> = preds.iter().map(|p| p.image_feature.clone()).collect();
        let txt: Vec<Vec<f64>> = preds.iter().map(|p| p.text_feature.clone()).collect();
        report.retrieval_recall_at_1 = Some(retrieval_recall(&img, &txt)?);
    }
    Ok(report)
}

/// Both test-time scenarios from one set of weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReports {
    pub with_history: EvalReport,
    pub no_history: EvalReport,
}

pub fn evaluate_modes(
    model: &Model,
    samples: &[LongitudinalSample],
    cfg: &RunConfig,
) -> Result<ModeReports> {
    let with = predict(model, samples, Mode::WithHistory, cfg.text_feature)?;
    let without = predict(model, samples, Mode::NoHistory, cfg.text_feature)?;
    Ok(ModeReports {
        with_history: score(&with, samples)?,
        no_history: score(&without, samples)?,
    })
}

/// Image-side decomposition of one sample, both visits visible.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub pooled_shared: Vec<f64>,
    pub prior_specific: Vec<f64>,
    pub current_specific: Vec<f64>,
}

pub fn image_features(model: &Model, s: &LongitudinalSample) -> Result<ImageFeatures> {
    let g = Graph::new();
    let cx = Ctx::eval(&g, &model.store);
    let (_, cls_c) = model.encode_image(&cx, model.image_input(&cx, &s.image_current)?)?;
    let (_, cls_p) = model.encode_image(&cx, model.image_input(&cx, &s.image_prior)?)?;
    let v_c = model.project_visual(&cx, cls_c)?;
    let v_p = model.project_visual(&cx, cls_p)?;
    let d = model.decompose(&cx, v_c, v_p)?;
    Ok(ImageFeatures {
        pooled_shared: g.value(pool_shared(&g, d.current_shared, d.prior_shared)?),
        prior_specific: g.value(d.prior_specific),
        current_specific: g.value(d.current_specific),
    })
}

/// Ridge term of the probe's normal equations.
pub const PROBE_RIDGE: f64 = 1e-6;
pub const PROBE_THRESHOLD: f64 = 0.5;

/// Least-squares linear map (with intercept) from features to 0/1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    weights: DMatrix<f64>,
}

fn design(features: &[Vec<f64>]) -> DMatrix<f64> {
    let d = features.first().map_or(0, |f| f.len());
    DMatrix::from_fn(features.len(), d + 1, |i, j| {
        if j == d {
            1.0
        } else {
            features[i][j]
        }
    })
}

fn targets(labels: &[LabelSet]) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), NUM_CONDITIONS, |i, j| {
        labels[i].contains(&(j as u8)) as u8 as f64
    })
}

impl LinearProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[LabelSet]) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::LengthMismatch {
                op: "probe",
                left: features.len(),
                right: labels.len(),
            });
        }
        let x = design(features);
        let y = targets(labels);
        let mut xtx = x.transpose() * &x;
        let scale = xtx.diagonal().max().max(1.0);
        for i in 0..xtx.nrows() {
            xtx[(i, i)] += PROBE_RIDGE * scale;
        }
        let weights = xtx
            .cholesky()
            .ok_or_else(|| Error::Degenerate {
                op: "probe",
                norm: 0.0,
                eps: PROBE_RIDGE,
            })?
            .solve(&(x.transpose() * y));
        Ok(Self { weights })
    }

    /// Fraction of (sample, label) cells predicted correctly.
    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[LabelSet]) -> f64 {
        let pred = design(features) * &self.weights;
        let y = targets(labels);
        let correct = pred
            .iter()
            .zip(y.iter())
            .filter(|(p, t)| (**p > PROBE_THRESHOLD) == (**t > 0.5))
            .count();
        correct as f64 / y.len() as f64
    }
}

/// Probe accuracies on the test split, probes fitted on the train split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub shared_from_pooled_shared: f64,
    pub shared_from_prior_specific: f64,
    pub shared_from_current_specific: f64,
    pub current_only_from_current_specific: f64,
    pub current_only_from_pooled_shared: f64,
}

impl ProbeReport {
    /// Shared conditions are best read from the shared feature, emerging
    /// ones from the current-specific feature.
    pub fn is_disentangled(&self) -> bool {
        self.shared_from_pooled_shared > self.shared_from_prior_specific
            && self.shared_from_pooled_shared > self.shared_from_current_specific
            && self.current_only_from_current_specific > self.current_only_from_pooled_shared
    }
}

pub fn probe(
    model: &Model,
    train: &[LongitudinalSample],
    test: &[LongitudinalSample],
) -> Result<ProbeReport> {
    let feats = |xs: &[LongitudinalSample]| -> Result<Vec<ImageFeatures>> {
        xs.iter().map(|s| image_features(model, s)).collect()
    };
    let (ftr, fte) = (feats(train)?, feats(test)?);
    let pick = |fs: &[ImageFeatures], k: usize| -> Vec<Vec<f64>> {
        fs.iter()
            .map(|f| match k {
                0 => f.pooled_shared.clone(),
                1 => f.prior_specific.clone(),
                _ => f.current_specific.clone(),
            })
            .collect()
    };
    let shared = |xs: &[LongitudinalSample]| -> Vec<LabelSet> {
        xs.iter().map(|s| s.factors.c_shared.clone()).collect()
    };
    let emerging = |xs: &[LongitudinalSample]| -> Vec<LabelSet> {
        xs.iter()
            .map(|s| s.factors.c_current_only.clone())
            .collect()
    };
    let acc = |k: usize, lab: &dyn Fn(&[LongitudinalSample]) -> Vec<LabelSet>| -> Result<f64> {
        let p = LinearProbe::fit(&pick(&ftr, k), &lab(train))?;
        Ok(p.accuracy(&pick(&fte, k), &lab(test)))
    };
    Ok(ProbeReport {
        shared_from_pooled_shared: acc(0, &shared)?,
        shared_from_prior_specific: acc(1, &shared)?,
        shared_from_current_specific: acc(2, &shared)?,
        current_only_from_current_specific: acc(2, &emerging)?,
        current_only_from_pooled_shared: acc(0, &emerging)?,
    })
}
