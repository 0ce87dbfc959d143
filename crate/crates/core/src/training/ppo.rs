//! Combined objective `−J1 + α·J2` and the PPO update of the policy and value
//! networks, with truncated BPTT through the recurrent policy.

use mpcrrl_nn::{clip_global_norm, Adam, ParamSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    net_input, output_bias_name, pack_theta, tape_assemble_step, DynamicsParams, FastMlp, TapeOutputs, DT, F1, F2,
    HIDDEN, STATE_DIM,
};
use crate::error::{CoreError, Result};
use crate::policy::{Policy, PolicyKind, ValueFunction, ACTION_DIM, NUM_FEATURES};

use super::rollout::TrajectoryBuffer;

/// Which terms of the combined loss are active.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    /// Weight of the system identification term `J2`.
    pub alpha: f64,
    /// Include the clipped reward surrogate `J1`.
    pub use_reward: bool,
    pub clip: f64,
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(CoreError::Config(format!("α must be ≥ 0, got {}", self.alpha)));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(CoreError::Config(format!("clip ε must be in (0, 1), got {}", self.clip)));
        }
        if !self.use_reward && self.alpha == 0.0 {
            return Err(CoreError::Config(
                "at least one objective is required: reward surrogate or system identification".into(),
            ));
        }
        Ok(())
    }
}

/// Frozen pieces of the internal model needed to evaluate `J2` on a tape.
#[derive(Clone, Debug)]
pub struct ModelTemplate {
    pub f1: FastMlp,
    pub f2: FastMlp,
    pub bias1: f64,
    pub bias2: f64,
    pub base_packed: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ModelTemplate {
    pub fn new(base: &DynamicsParams, scale: &[f64]) -> Result<Self> {
        if scale.len() != ACTION_DIM {
            return Err(CoreError::Dimension(format!("scale has {} entries", scale.len())));
        }
        Ok(Self {
            f1: FastMlp::from_params(&base.nets, F1)?,
            f2: FastMlp::from_params(&base.nets, F2)?,
            bias1: base.nets.get(&output_bias_name(F1))?.data()[0],
            bias2: base.nets.get(&output_bias_name(F2))?.data()[0],
            base_packed: pack_theta(base),
            scale: scale.to_vec(),
        })
    }
}

/// Sum (not mean) of the loss terms over one chunk, plus diagnostics.
struct ChunkTerms {
    loss: Var,
    surrogate_sum: f64,
    j2_sum: f64,
    kl_sum: f64,
    steps: usize,
}

/// Build the loss for steps `[start, end)` of `episodes` on a fresh tape. Each
/// episode contributes its rows while `t < len`; the chunk starts from the
/// recorded belief `b_{start−1}`.
#[allow(clippy::too_many_arguments)]
fn chunk_loss(
    tape: &mut Tape,
    policy: &Policy,
    bound: &mpcrrl_nn::Bound,
    model: &ModelTemplate,
    episodes: &[&TrajectoryBuffer],
    advantages: &[&[f64]],
    start: usize,
    end: usize,
    obj: &Objective,
) -> Result<ChunkTerms> {
    let rows = episodes.len();
    let hs = match policy.kind {
        PolicyKind::Recurrent => policy.cfg.hidden,
        PolicyKind::FeedForward => 1,
    };
    let init = |pick: fn(&crate::policy::BeliefState) -> &Vec<f64>| -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows * hs);
        for ep in episodes {
            match policy.kind {
                PolicyKind::Recurrent => data.extend_from_slice(pick(&ep.steps[start].belief_prev)),
                PolicyKind::FeedForward => data.push(0.0),
            }
        }
        Ok(Tensor::matrix(rows, hs, data)?)
    };
    let mut h = tape.constant(init(|b| &b.h)?);
    let mut c = tape.constant(init(|b| &b.c)?);
    let log_std = policy.tape_log_std(tape, bound)?;
    let neg_log_std = tape.neg(log_std);
    let inv_std = tape.exp(neg_log_std);
    let std = tape.exp(log_std);
    let sum_log_std = tape.sum(log_std);
    let norm_const = 0.5 * ACTION_DIM as f64 * (2.0 * std::f64::consts::PI).ln();
    let base_row = tape.constant(Tensor::row(model.base_packed.clone()));
    let scale_row = tape.constant(Tensor::row(model.scale.clone()));

    let mut total: Option<Var> = None;
    let (mut surrogate_sum, mut j2_sum, mut kl_sum, mut steps) = (0.0, 0.0, 0.0, 0);
    for t in start..end {
        let mut feats = Vec::with_capacity(rows * NUM_FEATURES);
        let mut mask = Vec::with_capacity(rows);
        let mut act = Vec::with_capacity(rows * ACTION_DIM);
        let mut noise = Vec::with_capacity(rows * ACTION_DIM);
        let mut old_lp = Vec::with_capacity(rows);
        let mut adv = Vec::with_capacity(rows);
        let mut xs = Vec::with_capacity(rows * STATE_DIM);
        let mut xn = Vec::with_capacity(rows * STATE_DIM);
        let mut hid: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(rows * HIDDEN));
        for (k, ep) in episodes.iter().enumerate() {
            if let Some(s) = ep.steps.get(t) {
                if s.action.len() != ACTION_DIM || s.noise.len() != ACTION_DIM {
                    return Err(CoreError::Contract(format!("step {t} has no recorded policy action")));
                }
                feats.extend_from_slice(&s.features);
                mask.push(1.0);
                act.extend_from_slice(&s.action);
                noise.extend_from_slice(&s.noise);
                old_lp.push(s.log_prob);
                adv.push(advantages[k][t]);
                xs.extend_from_slice(&s.x);
                xn.extend_from_slice(&s.x_next);
                let plain = net_input(s.x[3], s.x[4], &s.u, false);
                let mirror = net_input(s.x[3], s.x[4], &s.u, true);
                hid[0].extend_from_slice(&model.f1.hidden(&plain));
                hid[1].extend_from_slice(&model.f1.hidden(&mirror));
                hid[2].extend_from_slice(&model.f2.hidden(&plain));
                hid[3].extend_from_slice(&model.f2.hidden(&mirror));
                steps += 1;
            } else {
                feats.extend(std::iter::repeat(0.0).take(NUM_FEATURES));
                mask.push(0.0);
                act.extend(std::iter::repeat(0.0).take(ACTION_DIM));
                noise.extend(std::iter::repeat(0.0).take(ACTION_DIM));
                old_lp.push(0.0);
                adv.push(0.0);
                xs.extend(std::iter::repeat(0.0).take(STATE_DIM));
                xn.extend(std::iter::repeat(0.0).take(STATE_DIM));
                for hv in hid.iter_mut() {
                    hv.extend(std::iter::repeat(0.0).take(HIDDEN));
                }
            }
        }
        let fv = tape.constant(Tensor::matrix(rows, NUM_FEATURES, feats)?);
        let out = policy.tape_step(tape, bound, fv, h, c)?;
        h = out.h;
        c = out.c;
        let maskv = tape.constant(Tensor::matrix(rows, 1, mask.clone())?);
        let mut step_loss: Option<Var> = None;

        if obj.use_reward {
            let a = tape.constant(Tensor::matrix(rows, ACTION_DIM, act)?);
            let diff = tape.sub(a, out.mean)?;
            let z = tape.mul(diff, inv_std)?;
            let z2 = tape.square(z);
            let quad = tape.sum_cols(z2);
            let half = tape.scale(quad, -0.5);
            let lp = tape.sub(half, sum_log_std)?;
            let lp = tape.add_scalar(lp, -norm_const);
            let old = tape.constant(Tensor::matrix(rows, 1, old_lp.clone())?);
            let log_ratio = tape.sub(lp, old)?;
            for (k, m) in mask.iter().enumerate() {
                if *m > 0.0 {
                    kl_sum += -tape.value(log_ratio).data()[k];
                }
            }
            let ratio = tape.exp(log_ratio);
            let advv = tape.constant(Tensor::matrix(rows, 1, adv)?);
            let s1 = tape.mul(ratio, advv)?;
            let clipped = tape.clamp(ratio, 1.0 - obj.clip, 1.0 + obj.clip);
            let s2 = tape.mul(clipped, advv)?;
            let surr = tape.minimum(s1, s2)?;
            let surr = tape.mul(surr, maskv)?;
            let surr = tape.sum(surr);
            surrogate_sum += tape.value(surr).data()[0];
            step_loss = Some(tape.neg(surr));
        }
        if obj.alpha > 0.0 {
            let eps = tape.constant(Tensor::matrix(rows, ACTION_DIM, noise)?);
            let spread = tape.mul(eps, std)?;
            let a_rep = tape.add(out.mean, spread)?;
            let squashed = tape.tanh(a_rep);
            let delta = tape.mul(squashed, scale_row)?;
            let theta = tape.add(delta, base_row)?;
            let theta0_raw = tape.slice_cols(theta, 0, 1)?;
            let w1 = tape.slice_cols(theta, 1, 1 + HIDDEN)?;
            let w2 = tape.slice_cols(theta, 1 + HIDDEN, 1 + 2 * HIDDEN)?;
            let mut outs = Vec::with_capacity(4);
            for (k, hv) in hid.into_iter().enumerate() {
                let hvar = tape.constant(Tensor::matrix(rows, HIDDEN, hv)?);
                let (w, b) = if k < 2 { (w1, model.bias1) } else { (w2, model.bias2) };
                let prod = tape.mul(hvar, w)?;
                let s = tape.sum_cols(prod);
                outs.push(tape.add_scalar(s, b));
            }
            let theta0 = tape.softplus(theta0_raw);
            let xv = tape.constant(Tensor::matrix(rows, STATE_DIM, xs)?);
            let tapeout = TapeOutputs {
                a: outs[0],
                b: outs[1],
                c: outs[2],
                d: outs[3],
            };
            let pred = tape_assemble_step(tape, xv, &tapeout, theta0, DT)?;
            let target = tape.constant(Tensor::matrix(rows, STATE_DIM, xn)?);
            let err = tape.sub(pred, target)?;
            let e2 = tape.square(err);
            let sq = tape.sum_cols(e2);
            let sq = tape.mul(sq, maskv)?;
            let j2 = tape.sum(sq);
            j2_sum += tape.value(j2).data()[0];
            let weighted = tape.scale(j2, obj.alpha);
            step_loss = Some(match step_loss {
                Some(l) => tape.add(l, weighted)?,
                None => weighted,
            });
        }
        let l = step_loss.expect("validated objective has a term");
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(ChunkTerms {
        loss: total.ok_or_else(|| CoreError::Contract("empty chunk".into()))?,
        surrogate_sum,
        j2_sum,
        kl_sum,
        steps,
    })
}

fn add_into(acc: &mut ParamSet, g: &ParamSet) -> Result<()> {
    for (name, t) in g.iter() {
        let dst = acc.values_mut(name)?;
        for (d, s) in dst.iter_mut().zip(t.data()) {
            *d += s;
        }
    }
    Ok(())
}

/// Objective values and policy gradient over a set of episodes.
#[derive(Clone, Debug)]
pub struct ObjectiveTerms {
    /// Mean clipped surrogate `J1` (0 when the reward term is off).
    pub surrogate: f64,
    /// Mean one-step squared prediction error `J2` under the reparameterized θ.
    pub j2: f64,
    /// `−J1 + α·J2`.
    pub loss: f64,
    pub approx_kl: f64,
    pub steps: usize,
    pub grads: ParamSet,
}

/// Evaluate the combined loss with truncated BPTT of length `bptt`; gradients
/// are taken with respect to the policy parameters.
pub fn objective_terms(
    episodes: &[&TrajectoryBuffer],
    advantages: &[&[f64]],
    policy: &Policy,
    model: &ModelTemplate,
    obj: &Objective,
    bptt: usize,
) -> Result<ObjectiveTerms> {
    obj.validate()?;
    if bptt == 0 {
        return Err(CoreError::Config("BPTT length must be ≥ 1".into()));
    }
    if episodes.len() != advantages.len() || episodes.iter().zip(advantages).any(|(e, a)| e.len() != a.len()) {
        return Err(CoreError::Contract("advantages do not match the episodes".into()));
    }
    let total_steps: usize = episodes.iter().map(|e| e.len()).sum();
    if total_steps == 0 {
        return Err(CoreError::Contract("no steps to optimize".into()));
    }
    let norm = 1.0 / total_steps as f64;
    let max_len = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
    let mut grads = policy.params.zeros_like();
    let (mut surr, mut j2, mut kl, mut loss) = (0.0, 0.0, 0.0, 0.0);
    let mut start = 0;
    while start < max_len {
        let end = (start + bptt).min(max_len);
        let active: Vec<usize> = (0..episodes.len()).filter(|&k| episodes[k].len() > start).collect();
        let eps: Vec<&TrajectoryBuffer> = active.iter().map(|&k| episodes[k]).collect();
        let adv: Vec<&[f64]> = active.iter().map(|&k| advantages[k]).collect();
        let mut tape = Tape::new();
        let bound = tape.bind(&policy.params);
        let terms = chunk_loss(&mut tape, policy, &bound, model, &eps, &adv, start, end, obj)?;
        let scaled = tape.scale(terms.loss, norm);
        loss += tape.value(scaled).data()[0];
        let g = tape.backward(scaled)?.params(&bound);
        add_into(&mut grads, &g)?;
        surr += terms.surrogate_sum;
        j2 += terms.j2_sum;
        kl += terms.kl_sum;
        debug_assert!(terms.steps > 0);
        start = end;
    }
    Ok(ObjectiveTerms {
        surrogate: surr * norm,
        j2: j2 * norm,
        loss,
        approx_kl: kl * norm,
        steps: total_steps,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub epochs: usize,
    /// Episodes per minibatch.
    pub minibatch: usize,
    pub bptt: usize,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            minibatch: 4,
            bptt: 64,
            max_grad_norm: 0.5,
            normalize_advantages: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub surrogate: f64,
    pub j2: f64,
    pub value_loss_before: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub explained_variance: f64,
    pub skipped: usize,
}

/// Value inputs `[features ⊕ action]` and targets for a set of episodes.
fn value_batch(episodes: &[&TrajectoryBuffer]) -> Result<(Tensor, Vec<f64>)> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for ep in episodes {
        for (s, r) in ep.steps.iter().zip(&ep.returns) {
            let mut row = s.features.to_vec();
            row.extend_from_slice(&s.action);
            rows.push(row);
            targets.push(*r);
        }
    }
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    Ok((Tensor::stack_rows(&refs)?, targets))
}

/// Mean squared error of the critic and, if `grad`, its parameter gradient.
pub fn value_loss(value: &ValueFunction, episodes: &[&TrajectoryBuffer], grad: bool) -> Result<(f64, Option<ParamSet>)> {
    let (x, targets) = value_batch(episodes)?;
    let n = targets.len();
    let mut tape = Tape::new();
    let bound = if grad { tape.bind(&value.params) } else { tape.bind_frozen(&value.params) };
    let xv = tape.constant(x);
    let q = value.tape_value(&mut tape, &bound, xv)?;
    let tv = tape.constant(Tensor::matrix(n, 1, targets)?);
    let e = tape.sub(q, tv)?;
    let e2 = tape.square(e);
    let loss = tape.mean(e2);
    let l = tape.value(loss).data()[0];
    if !grad {
        return Ok((l, None));
    }
    Ok((l, Some(tape.backward(loss)?.params(&bound))))
}

/// Shift the critic's output so its mean prediction matches the mean return
/// on `episodes`. Used once before the first update, since returns sit far
/// from the freshly initialized output.
pub fn calibrate_value(value: &mut ValueFunction, episodes: &[&TrajectoryBuffer]) -> Result<f64> {
    let (x, targets) = value_batch(episodes)?;
    let q = mpcrrl_nn::mlp_forward(&value.params, crate::policy::VALUE, &value.spec, &x)?;
    let n = targets.len() as f64;
    let delta = (targets.iter().sum::<f64>() - q.data().iter().sum::<f64>()) / n;
    value.shift_output(delta)?;
    Ok(delta)
}

/// `A_t = R_t − Q(x_t, θ_t)`, optionally normalized over all steps.
pub fn advantages(value: &ValueFunction, episodes: &[&TrajectoryBuffer], normalize: bool) -> Result<(Vec<Vec<f64>>, f64)> {
    let (x, targets) = value_batch(episodes)?;
    let q = mpcrrl_nn::mlp_forward(&value.params, crate::policy::VALUE, &value.spec, &x)?;
    let raw: Vec<f64> = targets.iter().zip(q.data()).map(|(r, q)| r - q).collect();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    let ev = {
        let vr = var(&targets);
        if vr > 0.0 {
            1.0 - var(&raw) / vr
        } else {
            0.0
        }
    };
    let mut flat = raw;
    if normalize && flat.len() > 1 {
        let m = flat.iter().sum::<f64>() / flat.len() as f64;
        let sd = var(&flat).sqrt();
        for a in flat.iter_mut() {
            *a = if sd > 1e-8 { (*a - m) / sd } else { *a - m };
        }
    }
    let mut out = Vec::with_capacity(episodes.len());
    let mut k = 0;
    for ep in episodes {
        out.push(flat[k..k + ep.len()].to_vec());
        k += ep.len();
    }
    Ok((out, ev))
}

/// Policy optimizer epochs over fixed advantages.
#[allow(clippy::too_many_arguments)]
pub fn policy_epochs(
    policy: &mut Policy,
    opt: &mut Adam,
    episodes: &[&TrajectoryBuffer],
    adv: &[Vec<f64>],
    model: &ModelTemplate,
    obj: &Objective,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(UpdateStats, usize)> {
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut count = 0.0;
    let mut skipped = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for mb in order.chunks(cfg.minibatch.max(1)) {
            let eps: Vec<&TrajectoryBuffer> = mb.iter().map(|&k| episodes[k]).collect();
            let a: Vec<&[f64]> = mb.iter().map(|&k| adv[k].as_slice()).collect();
            let mut terms = objective_terms(&eps, &a, policy, model, obj, cfg.bptt)?;
            if !terms.grads.all_finite() {
                skipped += 1;
                continue;
            }
            clip_global_norm(&mut terms.grads, cfg.max_grad_norm);
            policy.params = opt.step(&policy.params, &terms.grads)?;
            stats.policy_loss += terms.loss;
            stats.surrogate += terms.surrogate;
            stats.j2 += terms.j2;
            stats.approx_kl += terms.approx_kl;
            count += 1.0;
        }
    }
    if count > 0.0 {
        stats.policy_loss /= count;
        stats.surrogate /= count;
        stats.j2 /= count;
        stats.approx_kl /= count;
    }
    Ok((stats, skipped))
}

/// One update of `λ` and `φ` on the collected episodes (invalid buffers are
/// skipped).
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut Policy,
    value: &mut ValueFunction,
    policy_opt: &mut Adam,
    value_opt: &mut Adam,
    buffers: &[TrajectoryBuffer],
    model: &ModelTemplate,
    obj: &Objective,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    obj.validate()?;
    let episodes: Vec<&TrajectoryBuffer> = buffers.iter().filter(|b| b.valid && !b.is_empty()).collect();
    if episodes.is_empty() {
        return Err(CoreError::Contract("no valid trajectories to update on".into()));
    }
    let (adv, ev) = advantages(value, &episodes, cfg.normalize_advantages)?;
    let (mut stats, skipped) = policy_epochs(policy, policy_opt, &episodes, &adv, model, obj, cfg, rng)?;
    stats.explained_variance = ev;
    stats.skipped = skipped;

    stats.value_loss_before = value_loss(value, &episodes, false)?.0;
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for mb in order.chunks(cfg.minibatch.max(1)) {
            let eps: Vec<&TrajectoryBuffer> = mb.iter().map(|&k| episodes[k]).collect();
            let (_, g) = value_loss(value, &eps, true)?;
            let mut g = g.expect("gradient requested");
            if !g.all_finite() {
                stats.skipped += 1;
                continue;
            }
            clip_global_norm(&mut g, 10.0 * cfg.max_grad_norm.max(0.1));
            value.params = value_opt.step(&value.params, &g)?;
        }
    }
    stats.value_loss = value_loss(value, &episodes, false)?.0;
    Ok(stats)
}
