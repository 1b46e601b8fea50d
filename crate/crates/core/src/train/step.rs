//! One dual-timestep objective evaluation and its gradients.
//!
//! Student and teacher forwards run on the same graph against the same bound
//! parameter variables. Teacher maps are detached right after aggregation,
//! so only the student path (and the autoencoder) receives gradient.

use ctcal_autodiff::{Graph, Real, Tensor, Var};
use sha2::{Digest, Sha256};

use super::config::{CtcalConfig, Wiring};
use crate::diffusion::{add_noise, prediction_target, NoiseSchedule, TimestepPair};
use crate::error::{Error, Result};
use crate::loss::{compose_with_weight, ctcal_terms, timestep_weight, AeBinding, AttnAutoencoder, LossBreakdown};
use crate::model::{Bound, Branch, LoraAdapter, Model};

/// Everything drawn for one batch item.
#[derive(Debug, Clone)]
pub struct StepItem<T> {
    /// Clean image in model range, `[3 * R * R]`.
    pub x0: Vec<T>,
    pub tokens: Vec<usize>,
    /// Token positions the calibration aligns.
    pub align: Vec<usize>,
    pub eps: Vec<T>,
    pub pair: TimestepPair,
}

/// Where teacher maps come from.
pub enum TeacherSource<T> {
    /// Forward at `t_tea` through the shared parameters.
    Live,
    /// Pre-computed `[H, W, n]` maps, one per item, injected as constants.
    Constant(Vec<Tensor<T>>),
}

pub struct StepContext<'a, T> {
    pub model: &'a Model<T>,
    pub ae: &'a AttnAutoencoder<T>,
    pub adapter: Option<&'a LoraAdapter<T>>,
    pub schedule: &'a NoiseSchedule,
    pub wiring: Wiring,
    pub ctcal: &'a CtcalConfig,
}

pub struct StepOutput<T> {
    pub items: Vec<LossBreakdown>,
    pub mean: LossBreakdown,
    /// One entry per model parameter; `None` when it received no gradient.
    pub model_grads: Vec<Option<Tensor<T>>>,
    pub ae_grads: Vec<Option<Tensor<T>>>,
    pub adapter_grads: Vec<Option<Tensor<T>>>,
    pub teacher_maps: Vec<Tensor<T>>,
    pub student_maps: Vec<Tensor<T>>,
    /// Hashes of the parameter values read by the student and teacher forwards.
    pub param_hashes: Option<(String, String)>,
}

fn hash_bound<T: Real>(g: &Graph<T>, model: &Model<T>, p: &Bound) -> String {
    let mut h = Sha256::new();
    for id in model.params.ids() {
        for v in g.value(p.get(id)).data() {
            h.update(v.as_f64().to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn batch_tensor<T: Real>(items: &[Vec<T>], r: usize) -> Result<Tensor<T>> {
    let data: Vec<T> = items.iter().flatten().copied().collect();
    Ok(Tensor::new(&[items.len(), 3, r, r], data)?)
}

fn grads_for<T: Real>(grads: &mut ctcal_autodiff::Gradients<T>, leaves: &[Var], n: usize) -> Vec<Option<Tensor<T>>> {
    if leaves.is_empty() {
        return vec![None; n];
    }
    leaves.iter().map(|&v| grads.take(v)).collect()
}

fn scalar<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().as_f64()
}

pub fn compute_step<T: Real>(
    ctx: &StepContext<'_, T>,
    items: &[StepItem<T>],
    teacher: &TeacherSource<T>,
    instrument: bool,
) -> Result<StepOutput<T>> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = ctx.model.config();
    let r = cfg.resolution;
    let t_train = ctx.schedule.t_train();
    let mut g = Graph::<T>::new();
    let mut bound = ctx.model.params.bind(&mut g, ctx.adapter.is_none());
    let adapter_bound = ctx.adapter.map(|a| a.bind(&mut g, &mut bound, true));
    let ae_bind = AeBinding::new(&mut g, ctx.ae, ctx.wiring.uses_autoencoder());

    let tokens: Vec<Vec<usize>> = items.iter().map(|it| it.tokens.clone()).collect();
    let t_stu: Vec<usize> = items.iter().map(|it| it.pair.t_stu).collect();
    let t_tea: Vec<usize> = items.iter().map(|it| it.pair.t_tea).collect();
    let x_stu: Vec<Vec<T>> = items.iter().map(|it| add_noise(&it.x0, &it.eps, it.pair.t_stu, ctx.schedule)).collect::<Result<_>>()?;

    let stu_hash = instrument.then(|| hash_bound(&g, ctx.model, &bound));
    let xs = g.constant(batch_tensor(&x_stu, r)?);
    let student = ctx.model.forward(&mut g, &bound, xs, &tokens, &t_stu, Branch::Student)?;

    let mut teacher_vars: Vec<Option<Var>> = vec![None; items.len()];
    let mut tea_hash = None;
    if ctx.wiring.uses_teacher() {
        match teacher {
            TeacherSource::Live => {
                let x_tea: Vec<Vec<T>> =
                    items.iter().map(|it| add_noise(&it.x0, &it.eps, it.pair.t_tea, ctx.schedule)).collect::<Result<_>>()?;
                tea_hash = instrument.then(|| hash_bound(&g, ctx.model, &bound));
                let xt = g.constant(batch_tensor(&x_tea, r)?);
                let out = ctx.model.forward(&mut g, &bound, xt, &tokens, &t_tea, Branch::Teacher)?;
                for (i, slot) in teacher_vars.iter_mut().enumerate() {
                    let a = ctx.model.aggregate(&mut g, &out.records, i)?;
                    *slot = Some(g.detach(a));
                }
            }
            TeacherSource::Constant(maps) => {
                if maps.len() != items.len() {
                    return Err(Error::ShapeMismatch(format!("{} teacher maps for {} items", maps.len(), items.len())));
                }
                for (slot, m) in teacher_vars.iter_mut().zip(maps) {
                    *slot = Some(g.constant(m.clone()));
                }
            }
        }
    }

    let mut totals = Vec::with_capacity(items.len());
    let mut breakdowns = Vec::with_capacity(items.len());
    let mut student_maps = Vec::new();
    let mut teacher_maps = Vec::new();
    for (i, it) in items.iter().enumerate() {
        let target = prediction_target(&it.x0, &it.eps, it.pair.t_stu, ctx.schedule)?;
        let target = g.constant(Tensor::new(&[1, 3, r, r], target)?);
        let pred = g.narrow(student.pred, 0, i, 1);
        let diff = g.mse(pred, target);
        let mut b = LossBreakdown { diffusion: scalar(&g, diff), ..Default::default() };
        let total = match teacher_vars[i] {
            Some(a_tea) => {
                let a_stu = ctx.model.aggregate(&mut g, &student.records, i)?;
                let terms = ctcal_terms(
                    &mut g,
                    ctx.ae,
                    &ae_bind,
                    a_stu,
                    a_tea,
                    &it.align,
                    &ctx.ctcal.weights,
                    ctx.wiring.terms,
                    ctx.ctcal.semantic_updates_encoder,
                )?;
                [b.pixel, b.semantic, b.reconstruction, b.subject_reg] = terms.values(&g);
                b.lambda_t = if ctx.wiring.timestep_weighting { timestep_weight(it.pair.t_stu, t_train) } else { 1.0 };
                student_maps.push(g.value(a_stu).clone());
                teacher_maps.push(g.value(a_tea).clone());
                match terms.weighted_sum(&mut g, &ctx.ctcal.weights) {
                    Some(c) => {
                        let weighted = g.scale(c, T::from_f64_lossy(b.lambda_t));
                        b.total = compose_with_weight(b.diffusion, scalar(&g, c), b.lambda_t)?;
                        g.add(diff, weighted)
                    }
                    None => {
                        b.total = b.diffusion;
                        diff
                    }
                }
            }
            None => {
                b.total = compose_with_weight(b.diffusion, 0.0, 0.0)?;
                diff
            }
        };
        totals.push(total);
        breakdowns.push(b);
    }
    let sum = totals[1..].iter().fold(totals[0], |acc, &t| g.add(acc, t));
    let loss = g.scale(sum, T::from_f64_lossy(1.0 / items.len() as f64));
    if !g.value(loss).all_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }

    let mut grads = g.backward(loss);
    let model_grads = grads_for(&mut grads, bound.leaves(), ctx.model.params.len());
    let ae_grads = grads_for(&mut grads, ae_bind.live.leaves(), ctx.ae.params.len());
    let adapter_grads = match (&adapter_bound, ctx.adapter) {
        (Some(b), Some(a)) => grads_for(&mut grads, b.leaves(), a.params.len()),
        _ => Vec::new(),
    };
    let mean = mean_breakdown(&breakdowns);
    Ok(StepOutput {
        items: breakdowns,
        mean,
        model_grads,
        ae_grads,
        adapter_grads,
        teacher_maps,
        student_maps,
        param_hashes: stu_hash.map(|s| (s, tea_hash.unwrap_or_default())),
    })
}

/// Field-wise mean over items.
pub fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.diffusion += b.diffusion / n;
        m.pixel += b.pixel / n;
        m.semantic += b.semantic / n;
        m.reconstruction += b.reconstruction / n;
        m.subject_reg += b.subject_reg / n;
        m.lambda_t += b.lambda_t / n;
        m.total += b.total / n;
    }
    m
}
