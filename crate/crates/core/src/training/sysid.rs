//! System identification warm start: scripted driving data and a one-step
//! prediction fit of the internal model.

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use mpcrrl_nn::{Adam, AdamConfig, ParamSet, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{model_step_tape, Control, DynamicsParams, VehicleState, CONTROL_DIM, DT, STATE_DIM, THETA0_RAW};
use crate::envsim::params::GroundTruthParams;
use crate::envsim::route::RouteFamily;
use crate::envsim::sim::{Env, EnvConfig};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub x: [f64; STATE_DIM],
    pub u: [f64; CONTROL_DIM],
    pub x_next: [f64; STATE_DIM],
    /// Index of the driving segment the transition came from.
    pub segment: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SysidDataset {
    pub transitions: Vec<Transition>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl SysidDataset {
    /// Every `k`-th segment goes to validation (`k = round(1/fraction)`). Small
    /// datasets with fewer than `k` segments hold out their last segment.
    pub fn new(transitions: Vec<Transition>, val_fraction: f64) -> Result<Self> {
        if transitions.is_empty() {
            return Err(CoreError::Contract("empty system identification dataset".into()));
        }
        let every = if val_fraction > 0.0 {
            (1.0 / val_fraction).round().max(2.0) as usize
        } else {
            usize::MAX
        };
        let (mut train, mut validation) = (Vec::new(), Vec::new());
        for (i, t) in transitions.iter().enumerate() {
            if every != usize::MAX && t.segment % every == every - 1 {
                validation.push(i);
            } else {
                train.push(i);
            }
        }
        let last_seg = transitions[transitions.len() - 1].segment;
        if validation.is_empty() && every != usize::MAX && transitions[0].segment != last_seg {
            let (v, t): (Vec<usize>, Vec<usize>) = train.iter().partition(|&&i| transitions[i].segment == last_seg);
            validation = v;
            train = t;
        }
        if train.is_empty() {
            return Err(CoreError::Contract("no training transitions after the split".into()));
        }
        Ok(Self {
            transitions,
            train,
            validation,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn speed_range(&self) -> (f64, f64) {
        self.transitions
            .iter()
            .map(|t| t.x[3])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub segment_steps: usize,
    /// Per-segment speed cap drawn uniformly from this range (m/s).
    pub speed_cap: (f64, f64),
    pub val_fraction: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            segment_steps: 200,
            speed_cap: (2.0, 9.0),
            val_fraction: 0.1,
        }
    }
}

/// Scripted driver: two-tone sinusoidal steering and piecewise-constant
/// throttle/brake phases, with a speed cap per segment.
struct Driver {
    steer: [(f64, f64, f64); 2],
    cap: f64,
    phase_left: usize,
    pedals: (f64, f64),
}

impl Driver {
    fn new(rng: &mut ChaCha8Rng, cfg: &CollectConfig) -> Self {
        let amp = rng.gen_range(0.1..1.0);
        let split = rng.gen_range(0.2..0.8);
        let tone = |rng: &mut ChaCha8Rng, a: f64| (a, rng.gen_range(0.05..0.8), rng.gen_range(0.0..std::f64::consts::TAU));
        Self {
            steer: [tone(rng, amp * split), tone(rng, amp * (1.0 - split))],
            cap: rng.gen_range(cfg.speed_cap.0..cfg.speed_cap.1),
            phase_left: 0,
            pedals: (0.0, 0.0),
        }
    }

    fn control(&mut self, t: usize, v: f64, rng: &mut ChaCha8Rng) -> Control {
        if self.phase_left == 0 {
            self.phase_left = rng.gen_range(5..30);
            self.pedals = match rng.gen_range(0..10) {
                0..=4 => (rng.gen_range(0.05..1.0), 0.0),
                5 | 6 => (0.0, 0.0),
                7 | 8 => (0.0, rng.gen_range(0.02..0.6)),
                _ => (rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.3)),
            };
        }
        self.phase_left -= 1;
        let time = t as f64 * DT;
        let w: f64 = self.steer.iter().map(|(a, om, ph)| a * (om * time + ph).sin()).sum();
        let (mut y, z) = self.pedals;
        if v > self.cap {
            y = 0.0;
        }
        Control::new(w.clamp(-1.0, 1.0), y, z)
    }
}

/// Collect exactly `n` transitions from the given ground truth (the training
/// column by default) with the scripted driver.
pub fn collect_sysid_data(n: usize, seed: u64, params: &GroundTruthParams, cfg: &CollectConfig) -> Result<SysidDataset> {
    if n == 0 {
        return Err(CoreError::Contract("requested zero transitions".into()));
    }
    if cfg.segment_steps == 0 || !(cfg.speed_cap.0 > 0.0 && cfg.speed_cap.1 > cfg.speed_cap.0) {
        return Err(CoreError::Config("invalid collection settings".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env_cfg = EnvConfig {
        capture_radius: 1e-9,
        off_route_distance: 1e12,
        max_steps: cfg.segment_steps,
        ..EnvConfig::default()
    };
    let params = GroundTruthParams {
        town: RouteFamily::Straight,
        ..params.clone()
    };
    let mut out = Vec::with_capacity(n);
    let mut segment = 0;
    while out.len() < n {
        let (mut env, mut x) = Env::reset_with(params.clone(), rng.gen(), env_cfg.clone())?;
        let mut driver = Driver::new(&mut rng, cfg);
        for t in 0..cfg.segment_steps {
            if out.len() == n {
                break;
            }
            let u = driver.control(t, x.v, &mut rng);
            let step = env.step(&u).map_err(|e| {
                CoreError::Simulation(format!("collection aborted after {} transitions: {e}", out.len()))
            })?;
            out.push(Transition {
                x: x.to_array(),
                u: u.to_array(),
                x_next: step.observation.to_array(),
                segment,
            });
            x = step.observation;
            if step.done {
                break;
            }
        }
        segment += 1;
    }
    SysidDataset::new(out, cfg.val_fraction)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before the rate is decayed.
    pub patience: usize,
    pub lr_decay: f64,
    /// Training stops once the rate falls below this.
    pub min_lr: f64,
    pub seed: u64,
    /// Initial `θ0` when the fit starts from scratch (m).
    pub theta0_init: f64,
    /// Full-batch L-BFGS iterations after the Adam phase (0 disables).
    pub refine_iters: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 256,
            max_epochs: 300,
            patience: 8,
            lr_decay: 0.5,
            min_lr: 1e-5,
            seed: 0,
            theta0_init: 1.5,
            refine_iters: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SysidFit {
    pub theta: DynamicsParams,
    /// Best-so-far training loss after each epoch.
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_val: f64,
    pub epochs: usize,
}

fn batch_tensors(ds: &SysidDataset, idx: &[usize]) -> (Tensor, Tensor, Tensor) {
    let mut x = Vec::with_capacity(idx.len() * STATE_DIM);
    let mut u = Vec::with_capacity(idx.len() * CONTROL_DIM);
    let mut y = Vec::with_capacity(idx.len() * STATE_DIM);
    for &i in idx {
        let t = &ds.transitions[i];
        x.extend_from_slice(&t.x);
        u.extend_from_slice(&t.u);
        y.extend_from_slice(&t.x_next);
    }
    let n = idx.len();
    (
        Tensor::matrix(n, STATE_DIM, x).expect("sized"),
        Tensor::matrix(n, CONTROL_DIM, u).expect("sized"),
        Tensor::matrix(n, STATE_DIM, y).expect("sized"),
    )
}

/// Mean over `idx` of `‖x + f(x,u;θ)Δt − x'‖²`, and optionally its gradient.
fn loss_and_grad(theta: &DynamicsParams, ds: &SysidDataset, idx: &[usize], grad: bool) -> Result<(f64, Option<mpcrrl_nn::ParamSet>)> {
    let mut tape = Tape::new();
    let ps = theta.to_paramset();
    let bound = if grad { tape.bind(&ps) } else { tape.bind_frozen(&ps) };
    let (x, u, y) = batch_tensors(ds, idx);
    let (x, u, y) = (tape.constant(x), tape.constant(u), tape.constant(y));
    let pred = model_step_tape(&mut tape, &bound, bound.get(THETA0_RAW)?, x, u, DT)?;
    let e = tape.sub(pred, y)?;
    let e2 = tape.square(e);
    let s = tape.sum(e2);
    let loss = tape.scale(s, 1.0 / idx.len() as f64);
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(CoreError::Numeric(format!(
            "non-finite sysid loss on batch starting at transition {}",
            idx.first().copied().unwrap_or(0)
        )));
    }
    if !grad {
        return Ok((value, None));
    }
    let g = tape.backward(loss)?.params(&bound);
    Ok((value, Some(g)))
}

/// Mean one-step squared prediction error over `idx` (in chunks).
pub fn prediction_mse(theta: &DynamicsParams, ds: &SysidDataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(CoreError::Contract("no transitions to evaluate".into()));
    }
    let mut total = 0.0;
    for chunk in idx.chunks(2048) {
        total += loss_and_grad(theta, ds, chunk, false)?.0 * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Minibatch Adam on the one-step loss with plateau learning-rate decay,
/// then an optional full-batch L-BFGS refinement. The best validation
/// parameters are returned.
pub fn fit_sysid(ds: &SysidDataset, theta_init: &DynamicsParams, cfg: &FitConfig) -> Result<SysidFit> {
    if ds.train.is_empty() {
        return Err(CoreError::Contract("empty training split".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.lr_decay > 0.0 && cfg.lr_decay < 1.0) {
        return Err(CoreError::Config("invalid sysid fit settings".into()));
    }
    let val_idx = if ds.validation.is_empty() { &ds.train } else { &ds.validation };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = theta_init.clone();
    let mut opt = Adam::new(&theta.to_paramset(), AdamConfig::with_lr(cfg.lr));
    let mut best = (prediction_mse(&theta, ds, val_idx)?, theta.clone());
    let mut best_train = f64::INFINITY;
    let (mut train_losses, mut val_losses) = (Vec::new(), Vec::new());
    let mut order = ds.train.clone();
    let mut stale = 0;
    let mut epochs = 0;
    for _ in 0..cfg.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (l, g) = loss_and_grad(&theta, ds, batch, true)?;
            epoch_loss += l * batch.len() as f64;
            let ps = opt.step(&theta.to_paramset(), &g.expect("gradient requested"))?;
            theta = DynamicsParams::from_paramset(&ps)?;
        }
        best_train = best_train.min(epoch_loss / order.len() as f64);
        train_losses.push(best_train);
        let val = prediction_mse(&theta, ds, val_idx)?;
        val_losses.push(val);
        if val < best.0 {
            best = (val, theta.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                opt.config.lr *= cfg.lr_decay;
                stale = 0;
                theta = best.1.clone();
                if opt.config.lr < cfg.min_lr {
                    break;
                }
            }
        }
    }
    if cfg.refine_iters > 0 {
        let refined = refine_lbfgs(ds, &best.1, cfg.refine_iters)?;
        let val = prediction_mse(&refined, ds, val_idx)?;
        val_losses.push(val);
        train_losses.push(best_train.min(prediction_mse(&refined, ds, &ds.train)?));
        if val < best.0 {
            best = (val, refined);
        }
    }
    Ok(SysidFit {
        theta: best.1,
        train_losses,
        val_losses,
        best_val: best.0,
        epochs,
    })
}

/// Full-batch one-step loss over the training split as a flat-vector problem.
struct FullBatch<'a> {
    ds: &'a SysidDataset,
    template: ParamSet,
}

impl FullBatch<'_> {
    fn unflatten(&self, flat: &[f64]) -> Result<DynamicsParams> {
        let mut ps = self.template.clone();
        let names: Vec<String> = ps.names().map(str::to_string).collect();
        let mut k = 0;
        for name in names {
            let dst = ps.values_mut(&name)?;
            dst.copy_from_slice(&flat[k..k + dst.len()]);
            k += dst.len();
        }
        DynamicsParams::from_paramset(&ps)
    }

    fn eval(&self, flat: &[f64], grad: bool) -> Result<(f64, Vec<f64>)> {
        let theta = self.unflatten(flat)?;
        let n = self.ds.train.len() as f64;
        let mut loss = 0.0;
        let mut g = vec![0.0; if grad { flat.len() } else { 0 }];
        for chunk in self.ds.train.chunks(2048) {
            let w = chunk.len() as f64 / n;
            let (l, cg) = loss_and_grad(&theta, self.ds, chunk, grad)?;
            loss += w * l;
            if let Some(cg) = cg {
                for (acc, v) in g.iter_mut().zip(flatten(&cg)) {
                    *acc += w * v;
                }
            }
        }
        Ok((loss, g))
    }
}

fn flatten(ps: &ParamSet) -> Vec<f64> {
    ps.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
}

impl CostFunction for FullBatch<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(p, false)?.0)
    }
}

impl Gradient for FullBatch<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.eval(p, true)?.1)
    }
}

/// L-BFGS on the full training split starting from `theta`.
fn refine_lbfgs(ds: &SysidDataset, theta: &DynamicsParams, iters: u64) -> Result<DynamicsParams> {
    let template = theta.to_paramset();
    let x0 = flatten(&template);
    let problem = FullBatch { ds, template };
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
        .with_tolerance_grad(0.0)
        .and_then(|s| s.with_tolerance_cost(0.0))
        .map_err(|e| CoreError::Numeric(format!("L-BFGS setup: {e}")))?;
    let run = Executor::new(problem, solver)
        .configure(|s| s.param(x0.clone()).max_iters(iters))
        .run();
    let best = match run {
        Ok(res) => res.state().get_best_param().cloned().unwrap_or(x0),
        // A failed line search leaves the Adam solution in place.
        Err(_) => x0,
    };
    FullBatch {
        ds,
        template: theta.to_paramset(),
    }
    .unflatten(&best)
}

/// Largest and mean position error of `horizon`-step open-loop predictions
/// started at every validation transition whose segment continues long enough.
pub fn open_loop_position_error(theta: &DynamicsParams, ds: &SysidDataset, horizon: usize) -> Result<(f64, f64, usize)> {
    let m = theta.compile()?;
    let mut worst: f64 = 0.0;
    let mut sum = 0.0;
    let mut count = 0;
    let val = &ds.validation;
    for (k, &start) in val.iter().enumerate() {
        if k + horizon > val.len() {
            break;
        }
        let run = &val[k..k + horizon];
        let contiguous = run.windows(2).all(|w| w[1] == w[0] + 1);
        let seg = ds.transitions[start].segment;
        if !contiguous || run.iter().any(|&i| ds.transitions[i].segment != seg) {
            continue;
        }
        let mut x = ds.transitions[start].x;
        for &i in run {
            x = m.step(&x, &ds.transitions[i].u, DT);
        }
        let truth = ds.transitions[run[horizon - 1]].x_next;
        let e = (x[0] - truth[0]).hypot(x[1] - truth[1]);
        worst = worst.max(e);
        sum += e;
        count += 1;
    }
    if count == 0 {
        return Err(CoreError::Contract(format!("no validation segment spans {horizon} steps")));
    }
    Ok((worst, sum / count as f64, count))
}

/// Transitions produced by a known model from random states and controls.
pub fn synthetic_dataset(theta: &DynamicsParams, n: usize, seed: u64, val_fraction: f64) -> Result<SysidDataset> {
    let m = theta.compile()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = VehicleState::new(
            rng.gen_range(-50.0..50.0),
            rng.gen_range(-50.0..50.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(0.0..9.0),
            rng.gen_range(-0.3..0.3),
        )
        .to_array();
        let u = Control::new(rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)).to_array();
        out.push(Transition {
            x,
            u,
            x_next: m.step(&x, &u, DT),
            segment: i / 100,
        });
    }
    SysidDataset::new(out, val_fraction)
}
