use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Mode, RunConfig, TextFeature};
use super::optim::{apply_update, Moments};
use crate::autodiff::{Graph, Var};
use crate::constraints::{
    loss_contrastive, loss_rrg, loss_sim, loss_structural, loss_total, pool_shared, LossBreakdown,
    LossTerms, TripletSequence,
};
use crate::nn::{Ctx, Model, ParamId, PriorContext};
use crate::synthgen::vocab::END;
use crate::synthgen::LongitudinalSample;
use crate::{Error, Result};

/// Everything a run needs to continue exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub moments: Moments,
    /// Lowest validation cross-entropy seen so far.
    pub best_val: Option<f64>,
}

impl TrainState {
    pub fn new(model: &Model, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // stream 0 initializes weights; batches draw from stream 1
        rng.set_stream(1);
        Self {
            step: 0,
            rng,
            moments: Moments::zeros(&model.store),
            best_val: None,
        }
    }

    /// Sample indices of the next batch, drawn with replacement.
    pub fn next_batch(&mut self, n: usize, batch: usize) -> Vec<usize> {
        (0..batch).map(|_| self.rng.random_range(0..n)).collect()
    }
}

/// Per-step record written to the loss CSV.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossBreakdown,
    /// Samples whose contrastive or structural term was skipped because a
    /// triplet collapsed.
    pub skipped_degenerate: usize,
}

/// Graph of one sample's training objective.
pub struct SampleLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub skipped_degenerate: bool,
}

/// Greedy tokens read off teacher-forced argmaxes, cut after the first END.
fn truncate_at_end(tokens: &[u32]) -> Vec<u32> {
    match tokens.iter().position(|&t| t == END) {
        Some(i) => tokens[..=i].to_vec(),
        None => tokens.to_vec(),
    }
}

/// Keeps a constraint term unless it failed on a collapsed triplet.
fn soft<T>(r: Result<T>, skipped: &mut bool) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_degenerate() => {
            *skipped = true;
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

pub fn sample_loss(
    cx: &Ctx,
    model: &Model,
    s: &LongitudinalSample,
    cfg: &RunConfig,
) -> Result<SampleLoss> {
    let g = cx.g;
    let (xc, cls_c) = model.encode_image(cx, model.image_input(cx, &s.image_current)?)?;
    let (xp, cls_p) = model.encode_image(cx, model.image_input(cx, &s.image_prior)?)?;
    let prior = PriorContext {
        patches: xp,
        report: &s.report_prior,
    };
    let pc = (cfg.mode == Mode::WithHistory).then_some(&prior);
    let decoded = model.decode_report(cx, xc, pc, Some(&s.report_current), model.config.max_len)?;
    let rrg = loss_rrg(
        g,
        decoded.logits,
        &s.report_current,
        cfg.constraints.rrg_reduction,
    )?;

    let mut terms = LossTerms {
        rrg,
        sim_img: None,
        sim_txt: None,
        contrastive: None,
        structural: None,
    };
    let mut skipped = false;
    let t = cfg.toggles;
    if t.any() {
        let v_c = model.project_visual(cx, cls_c)?;
        let v_p = model.project_visual(cx, cls_p)?;
        let l_c = match cfg.text_feature {
            TextFeature::GeneratedReport => {
                model.encode_text(cx, &truncate_at_end(&decoded.tokens))?
            }
            TextFeature::DecoderHidden => model.hidden_to_text(cx, decoded.hidden)?,
        };
        let l_p = model.encode_text(cx, &s.report_prior)?;
        let img = model.decompose(cx, v_c, v_p)?;
        let txt = model.decompose(cx, l_c, l_p)?;
        if t.sim {
            terms.sim_img = Some(loss_sim(g, img.current_shared, img.prior_shared)?);
            terms.sim_txt = Some(loss_sim(g, txt.current_shared, txt.prior_shared)?);
        }
        if t.con || t.stru {
            let v = TripletSequence::new(
                pool_shared(g, img.current_shared, img.prior_shared)?,
                img.prior_specific,
                img.current_specific,
            );
            let l = TripletSequence::new(
                pool_shared(g, txt.current_shared, txt.prior_shared)?,
                txt.prior_specific,
                txt.current_specific,
            );
            let c = &cfg.constraints;
            if t.con {
                terms.contrastive = soft(
                    loss_contrastive(g, &v, &l, c.tau, c.kernel, c.eps_norm),
                    &mut skipped,
                )?;
            }
            if t.stru {
                terms.structural = soft(loss_structural(g, &v, &l, c.eps_norm), &mut skipped)?;
            }
        }
    }
    let (total, breakdown) = loss_total(g, &terms, &cfg.constraints)?;
    Ok(SampleLoss {
        total,
        breakdown,
        skipped_degenerate: skipped,
    })
}

fn nan_abort(step: u64, batch: &[&LongitudinalSample], detail: String) -> Error {
    Error::NanLoss {
        step,
        sample_ids: batch.iter().map(|s| s.sample_id).collect(),
        detail,
    }
}

/// Forward and backward over a batch; the mean gradient is left in the
/// parameter store. Returns the mean breakdown.
pub fn accumulate_batch_grads(
    model: &mut Model,
    batch: &[&LongitudinalSample],
    cfg: &RunConfig,
    step: u64,
) -> Result<(LossBreakdown, usize)> {
    if batch.is_empty() {
        return Err(Error::Config("batch must be non-empty".into()));
    }
    model.store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut parts = Vec::with_capacity(batch.len());
    let mut skipped = 0;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
    for s in batch {
        let g = Graph::new();
        let cx = Ctx::train(&g, &model.store);
        let out = match sample_loss(&cx, model, s, cfg) {
            Ok(o) => o,
            Err(Error::NonFinite { op }) => {
                return Err(nan_abort(
                    step,
                    batch,
                    format!("non-finite value in {op} (sample {})", s.sample_id),
                ))
            }
            Err(e) => return Err(e),
        };
        if !out.breakdown.l_total.is_finite() {
            return Err(nan_abort(
                step,
                batch,
                format!("non-finite loss on sample {}", s.sample_id),
            ));
        }
        let gr = g.backward(out.total)?;
        for (id, var) in cx.bound() {
            if let Some(d) = gr.get(var) {
                let slot = grads[id.index()].get_or_insert_with(|| vec![0.0; d.len()]);
                for (a, b) in slot.iter_mut().zip(d) {
                    *a += b * scale;
                }
            }
        }
        skipped += out.skipped_degenerate as usize;
        parts.push(out.breakdown);
    }
    for (id, grad) in grads.into_iter().enumerate() {
        if let Some(grad) = grad {
            if grad.iter().any(|x| !x.is_finite()) {
                return Err(nan_abort(step, batch, "non-finite gradient".into()));
            }
            model.store.get_mut(ParamId(id)).accumulate_grad(&grad)?;
        }
    }
    Ok((LossBreakdown::mean_of(&parts), skipped))
}

/// One optimization step on `batch`.
pub fn train_step(
    model: &mut Model,
    state: &mut TrainState,
    batch: &[&LongitudinalSample],
    cfg: &RunConfig,
) -> Result<StepRecord> {
    let step = state.step + 1;
    let (losses, skipped) = accumulate_batch_grads(model, batch, cfg, step)?;
    apply_update(&mut model.store, &mut state.moments, &cfg.optimizer, step);
    state.step = step;
    Ok(StepRecord {
        step,
        losses,
        skipped_degenerate: skipped,
    })
}

/// Mean teacher-forced cross-entropy over `samples` in the configured mode.
pub fn validation_rrg(
    model: &Model,
    samples: &[LongitudinalSample],
    cfg: &RunConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for s in samples {
        let g = Graph::new();
        let cx = Ctx::eval(&g, &model.store);
        let (xc, _) = model.encode_image(&cx, model.image_input(&cx, &s.image_current)?)?;
        let prior;
        let pc = if cfg.mode == Mode::WithHistory {
            let (xp, _) = model.encode_image(&cx, model.image_input(&cx, &s.image_prior)?)?;
            prior = PriorContext {
                patches: xp,
                report: &s.report_prior,
            };
            Some(&prior)
        } else {
            None
        };
        let d = model.decode_report(&cx, xc, pc, Some(&s.report_current), model.config.max_len)?;
        total += g.scalar(loss_rrg(
            &g,
            d.logits,
            &s.report_current,
            cfg.constraints.rrg_reduction,
        )?);
    }
    Ok(total / samples.len() as f64)
}
