//! Internal vehicle model: heading from a learned rear-axle length, speed and
//! slip-angle rates from two small tanh networks with mirrored evaluation.
//!
//! The speed network enters through
//! `v' = ((√v + a)² + (√v + b)²) / 2` where `a`, `b` are the network outputs at
//! `(v, β, w, y, z)` and `(v, −β, −w, y, z)`, so `v' ≥ 0` holds exactly and the
//! speed update is symmetric under the mirror. The slip network is
//! antisymmetrized as `(c − d) / 2`.

use mpcrrl_nn::{softplus, Bound, MlpSpec, ParamSet, Tape, Tensor, Var};
use nalgebra::SMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const STATE_DIM: usize = 5;
pub const CONTROL_DIM: usize = 3;
pub const DT: f64 = 0.1;
pub const HIDDEN: usize = 32;
pub const NUM_ADAPTABLE: usize = 1 + 2 * HIDDEN;
/// The networks see `v / V_SCALE` instead of raw speed.
pub const V_SCALE: f64 = 10.0;
/// Lower bound on `v` inside `1/(2√v)` when linearizing at rest.
const SQRT_V_FLOOR: f64 = 1e-2;

pub const F1: &str = "f1";
pub const F2: &str = "f2";
pub const THETA0_RAW: &str = "theta0_raw";

pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type ControlMatrix = SMatrix<f64, STATE_DIM, CONTROL_DIM>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub p: f64,
    pub q: f64,
    pub psi: f64,
    pub v: f64,
    pub beta: f64,
}

impl VehicleState {
    pub fn new(p: f64, q: f64, psi: f64, v: f64, beta: f64) -> Self {
        Self { p, q, psi, v, beta }
    }

    pub fn to_array(self) -> [f64; STATE_DIM] {
        [self.p, self.q, self.psi, self.v, self.beta]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    fn check(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(CoreError::Domain(format!("non-finite state {self:?}")));
        }
        if self.v < 0.0 {
            return Err(CoreError::Domain(format!("negative speed {}", self.v)));
        }
        Ok(())
    }
}

/// Steering `w ∈ [−1, 1]`, throttle `y ∈ [0, 1]`, brake `z ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub w: f64,
    pub y: f64,
    pub z: f64,
}

impl Control {
    pub const NEUTRAL: Control = Control {
        w: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, y: f64, z: f64) -> Self {
        Self { w, y, z }
    }

    pub fn to_array(self) -> [f64; CONTROL_DIM] {
        [self.w, self.y, self.z]
    }

    pub fn from_array(a: [f64; CONTROL_DIM]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn in_box(&self) -> bool {
        (-1.0..=1.0).contains(&self.w) && (0.0..=1.0).contains(&self.y) && (0.0..=1.0).contains(&self.z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsJacobians {
    pub a: StateMatrix,
    pub b: ControlMatrix,
}

/// `θ = (θ0, θ1, θ2)`. `θ0 = softplus(theta0_raw)`; the two networks live in
/// `nets` under the `f1` and `f2` prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsParams {
    pub theta0_raw: f64,
    pub nets: ParamSet,
}

pub fn net_spec() -> MlpSpec {
    MlpSpec::new(vec![5, HIDDEN, HIDDEN, 1])
}

pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Name of the output-layer weight tensor of network `prefix`.
pub fn output_weight_name(prefix: &str) -> String {
    MlpSpec::weight_name(prefix, 2)
}

pub fn output_bias_name(prefix: &str) -> String {
    MlpSpec::bias_name(prefix, 2)
}

impl DynamicsParams {
    pub fn init<R: Rng + ?Sized>(theta0: f64, rng: &mut R) -> Self {
        let spec = net_spec();
        let mut nets = spec.init(F1, rng);
        nets.extend(spec.init(F2, rng)).expect("distinct prefixes");
        Self {
            theta0_raw: softplus_inverse(theta0),
            nets,
        }
    }

    pub fn theta0(&self) -> f64 {
        softplus(self.theta0_raw)
    }

    /// Zero both output layers (weights and biases): `f1′ ≡ f2′ ≡ 0`.
    pub fn zero_outputs(&mut self) {
        for prefix in [F1, F2] {
            for name in [output_weight_name(prefix), output_bias_name(prefix)] {
                self.nets
                    .values_mut(&name)
                    .expect("network layout")
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
    }

    /// Everything in one set, for checkpointing and system identification.
    pub fn to_paramset(&self) -> ParamSet {
        let mut ps = self.nets.clone();
        ps.insert(THETA0_RAW, Tensor::vector(vec![self.theta0_raw]))
            .expect("fresh name");
        ps
    }

    pub fn from_paramset(ps: &ParamSet) -> Result<Self> {
        let raw = ps.get(THETA0_RAW)?.data();
        if raw.len() != 1 {
            return Err(CoreError::Dimension(format!(
                "{THETA0_RAW} has {} entries",
                raw.len()
            )));
        }
        let mut nets = ps.filter_prefix(&format!("{F1}."));
        nets.extend(ps.filter_prefix(&format!("{F2}.")))?;
        let out = Self {
            theta0_raw: raw[0],
            nets,
        };
        out.compile()?;
        Ok(out)
    }

    pub fn compile(&self) -> Result<CompiledDynamics> {
        Ok(CompiledDynamics {
            theta0: self.theta0(),
            f1: FastMlp::from_params(&self.nets, F1)?,
            f2: FastMlp::from_params(&self.nets, F2)?,
        })
    }
}

/// The 65 adaptable entries: `[theta0_raw, f1 output weights, f2 output weights]`.
pub fn pack_theta(theta: &DynamicsParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(NUM_ADAPTABLE);
    out.push(theta.theta0_raw);
    for prefix in [F1, F2] {
        out.extend_from_slice(
            theta
                .nets
                .get(&output_weight_name(prefix))
                .expect("network layout")
                .data(),
        );
    }
    out
}

pub fn unpack_theta(packed: &[f64], template: &DynamicsParams) -> Result<DynamicsParams> {
    if packed.len() != NUM_ADAPTABLE {
        return Err(CoreError::Dimension(format!(
            "expected {NUM_ADAPTABLE} adaptable entries, got {}",
            packed.len()
        )));
    }
    let mut out = template.clone();
    out.theta0_raw = packed[0];
    for (k, prefix) in [F1, F2].into_iter().enumerate() {
        let start = 1 + k * HIDDEN;
        out.nets
            .values_mut(&output_weight_name(prefix))?
            .copy_from_slice(&packed[start..start + HIDDEN]);
    }
    Ok(out)
}

/// Heading rate `v·sin β / θ0`.
pub fn f0(v: f64, beta: f64, theta0: f64) -> Result<f64> {
    if theta0 <= 0.0 || !theta0.is_finite() {
        return Err(CoreError::Domain(format!("θ0 must be positive, got {theta0}")));
    }
    Ok(v * beta.sin() / theta0)
}

/// Speed rate from the two mirrored network outputs.
pub fn f1_sym_from_outputs(v: f64, a: f64, b: f64, dt: f64) -> f64 {
    let s = v.sqrt();
    (a * (2.0 * s + a) + b * (2.0 * s + b)) / (2.0 * dt)
}

/// `v + Δt·f1_sym` in closed form.
pub fn next_speed(v: f64, a: f64, b: f64) -> f64 {
    let s = v.sqrt();
    ((s + a).powi(2) + (s + b).powi(2)) / 2.0
}

/// `5 → 32 → 32 → 1` tanh network held in flat arrays for the hot path.
#[derive(Clone, Debug)]
pub struct FastMlp {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    w3: Vec<f64>,
    b3: f64,
}

fn tensor_of(ps: &ParamSet, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let t = ps.get(name)?;
    let dims: Vec<usize> = t.shape().to_vec();
    let ok = dims == shape || (shape.len() == 2 && shape[1] == 1 && dims == [shape[0]]);
    if !ok {
        return Err(CoreError::Dimension(format!(
            "`{name}` has shape {dims:?}, expected {shape:?}"
        )));
    }
    Ok(t.data().to_vec())
}

impl FastMlp {
    pub fn from_params(ps: &ParamSet, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: tensor_of(ps, &MlpSpec::weight_name(prefix, 0), &[5, HIDDEN])?,
            b1: tensor_of(ps, &MlpSpec::bias_name(prefix, 0), &[HIDDEN])?,
            w2: tensor_of(ps, &MlpSpec::weight_name(prefix, 1), &[HIDDEN, HIDDEN])?,
            b2: tensor_of(ps, &MlpSpec::bias_name(prefix, 1), &[HIDDEN])?,
            w3: tensor_of(ps, &MlpSpec::weight_name(prefix, 2), &[HIDDEN, 1])?,
            b3: tensor_of(ps, &MlpSpec::bias_name(prefix, 2), &[1])?[0],
        })
    }

    pub fn output_weights(&self) -> &[f64] {
        &self.w3
    }

    pub fn output_bias(&self) -> f64 {
        self.b3
    }

    fn layers(&self, x: &[f64; 5]) -> ([f64; HIDDEN], [f64; HIDDEN]) {
        let mut h1 = [0.0; HIDDEN];
        h1.copy_from_slice(&self.b1);
        for (i, xi) in x.iter().enumerate() {
            let row = &self.w1[i * HIDDEN..(i + 1) * HIDDEN];
            for (h, w) in h1.iter_mut().zip(row) {
                *h += xi * w;
            }
        }
        h1.iter_mut().for_each(|h| *h = mpcrrl_nn::tanh(*h));
        let mut h2 = [0.0; HIDDEN];
        h2.copy_from_slice(&self.b2);
        for (i, hi) in h1.iter().enumerate() {
            let row = &self.w2[i * HIDDEN..(i + 1) * HIDDEN];
            for (h, w) in h2.iter_mut().zip(row) {
                *h += hi * w;
            }
        }
        h2.iter_mut().for_each(|h| *h = mpcrrl_nn::tanh(*h));
        (h1, h2)
    }

    /// Last hidden activations; the output is `h2 · w3 + b3`.
    pub fn hidden(&self, x: &[f64; 5]) -> [f64; HIDDEN] {
        self.layers(x).1
    }

    pub fn eval(&self, x: &[f64; 5]) -> f64 {
        let h2 = self.hidden(x);
        self.b3 + h2.iter().zip(&self.w3).map(|(h, w)| h * w).sum::<f64>()
    }

    /// Output and its gradient with respect to the 5 inputs.
    pub fn eval_grad(&self, x: &[f64; 5]) -> (f64, [f64; 5]) {
        let (h1, h2) = self.layers(x);
        let out = self.b3 + h2.iter().zip(&self.w3).map(|(h, w)| h * w).sum::<f64>();
        let mut g2 = [0.0; HIDDEN];
        for k in 0..HIDDEN {
            g2[k] = self.w3[k] * (1.0 - h2[k] * h2[k]);
        }
        let mut g1 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            let row = &self.w2[i * HIDDEN..(i + 1) * HIDDEN];
            let s: f64 = row.iter().zip(&g2).map(|(w, g)| w * g).sum();
            g1[i] = s * (1.0 - h1[i] * h1[i]);
        }
        let mut gx = [0.0; 5];
        for (i, gxi) in gx.iter_mut().enumerate() {
            let row = &self.w1[i * HIDDEN..(i + 1) * HIDDEN];
            *gxi = row.iter().zip(&g1).map(|(w, g)| w * g).sum();
        }
        (out, gx)
    }
}

/// Network input for the original (`mirror = false`) or mirrored evaluation.
pub fn net_input(v: f64, beta: f64, u: &[f64; CONTROL_DIM], mirror: bool) -> [f64; 5] {
    let sign = if mirror { -1.0 } else { 1.0 };
    [v / V_SCALE, sign * beta, sign * u[0], u[1], u[2]]
}

/// Flat-array form of [`DynamicsParams`] used inside the MPC solver.
#[derive(Clone, Debug)]
pub struct CompiledDynamics {
    pub theta0: f64,
    pub f1: FastMlp,
    pub f2: FastMlp,
}

impl CompiledDynamics {
    pub fn f1_sym(&self, v: f64, beta: f64, u: &Control, dt: f64) -> Result<f64> {
        if v < 0.0 {
            return Err(CoreError::Domain(format!("negative speed {v}")));
        }
        let u = u.to_array();
        let a = self.f1.eval(&net_input(v, beta, &u, false));
        let b = self.f1.eval(&net_input(v, beta, &u, true));
        Ok(f1_sym_from_outputs(v, a, b, dt))
    }

    pub fn f2_sym(&self, v: f64, beta: f64, u: &Control) -> f64 {
        let u = u.to_array();
        let c = self.f2.eval(&net_input(v, beta, &u, false));
        let d = self.f2.eval(&net_input(v, beta, &u, true));
        (c - d) / 2.0
    }

    /// One Euler step, no validation.
    pub fn step(&self, x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM], dt: f64) -> [f64; STATE_DIM] {
        let [p, q, psi, v, beta] = *x;
        let v = v.max(0.0);
        let a = self.f1.eval(&net_input(v, beta, u, false));
        let b = self.f1.eval(&net_input(v, beta, u, true));
        let c = self.f2.eval(&net_input(v, beta, u, false));
        let d = self.f2.eval(&net_input(v, beta, u, true));
        let heading = psi + beta;
        [
            p + dt * v * heading.cos(),
            q + dt * v * heading.sin(),
            psi + dt * v * beta.sin() / self.theta0,
            next_speed(v, a, b),
            beta + dt * (c - d) / 2.0,
        ]
    }

    /// Step plus `∂x'/∂x` and `∂x'/∂u`.
    pub fn step_jacobians(
        &self,
        x: &[f64; STATE_DIM],
        u: &[f64; CONTROL_DIM],
        dt: f64,
    ) -> ([f64; STATE_DIM], StateMatrix, ControlMatrix) {
        let [p, q, psi, v, beta] = *x;
        let v = v.max(0.0);
        let (a, ga) = self.f1.eval_grad(&net_input(v, beta, u, false));
        let (b, gb) = self.f1.eval_grad(&net_input(v, beta, u, true));
        let (c, gc) = self.f2.eval_grad(&net_input(v, beta, u, false));
        let (d, gd) = self.f2.eval_grad(&net_input(v, beta, u, true));
        // Derivatives of the mirrored outputs w.r.t. the unmirrored (v, β, w, y, z).
        let mirror = |g: [f64; 5]| [g[0] / V_SCALE, -g[1], -g[2], g[3], g[4]];
        let plain = |g: [f64; 5]| [g[0] / V_SCALE, g[1], g[2], g[3], g[4]];
        let (ga, gb, gc, gd) = (plain(ga), mirror(gb), plain(gc), mirror(gd));

        let s = v.sqrt();
        let ds = 0.5 / v.max(SQRT_V_FLOOR).sqrt();
        let heading = psi + beta;
        let (sh, ch) = heading.sin_cos();
        let (sb, cb) = beta.sin_cos();
        let t0 = self.theta0;

        let next = [
            p + dt * v * ch,
            q + dt * v * sh,
            psi + dt * v * sb / t0,
            next_speed(v, a, b),
            beta + dt * (c - d) / 2.0,
        ];

        let mut ja = StateMatrix::identity();
        let mut jb = ControlMatrix::zeros();
        // p'
        ja[(0, 2)] = -dt * v * sh;
        ja[(0, 3)] = dt * ch;
        ja[(0, 4)] = -dt * v * sh;
        // q'
        ja[(1, 2)] = dt * v * ch;
        ja[(1, 3)] = dt * sh;
        ja[(1, 4)] = dt * v * ch;
        // ψ'
        ja[(2, 3)] = dt * sb / t0;
        ja[(2, 4)] = dt * v * cb / t0;
        // v' = ((s+a)² + (s+b)²)/2
        // √v · d√v/dv = 1/2 exactly, also at rest.
        ja[(3, 3)] = 1.0 + (a + b) * ds + (s + a) * ga[0] + (s + b) * gb[0];
        ja[(3, 4)] = (s + a) * ga[1] + (s + b) * gb[1];
        for k in 0..CONTROL_DIM {
            jb[(3, k)] = (s + a) * ga[2 + k] + (s + b) * gb[2 + k];
        }
        // β'
        ja[(4, 3)] = dt * (gc[0] - gd[0]) / 2.0;
        ja[(4, 4)] = 1.0 + dt * (gc[1] - gd[1]) / 2.0;
        for k in 0..CONTROL_DIM {
            jb[(4, k)] = dt * (gc[2 + k] - gd[2 + k]) / 2.0;
        }
        (next, ja, jb)
    }
}

fn check_inputs(x: &VehicleState, u: &Control, dt: f64) -> Result<()> {
    x.check()?;
    if !u.to_array().iter().all(|v| v.is_finite()) {
        return Err(CoreError::Domain(format!("non-finite control {u:?}")));
    }
    if dt <= 0.0 || !dt.is_finite() {
        return Err(CoreError::Domain(format!("Δt must be positive, got {dt}")));
    }
    Ok(())
}

pub fn model_step(x: &VehicleState, u: &Control, theta: &DynamicsParams, dt: f64) -> Result<VehicleState> {
    check_inputs(x, u, dt)?;
    let m = theta.compile()?;
    f0(x.v, x.beta, m.theta0)?;
    let next = VehicleState::from_array(m.step(&x.to_array(), &u.to_array(), dt));
    if !next.is_finite() {
        return Err(CoreError::Numeric(format!("model step produced {next:?}")));
    }
    Ok(next)
}

pub fn linearize(x: &VehicleState, u: &Control, theta: &DynamicsParams, dt: f64) -> Result<DynamicsJacobians> {
    check_inputs(x, u, dt)?;
    let m = theta.compile()?;
    f0(x.v, x.beta, m.theta0)?;
    let (_, a, b) = m.step_jacobians(&x.to_array(), &u.to_array(), dt);
    if !a.iter().chain(b.iter()).all(|v| v.is_finite()) {
        return Err(CoreError::Numeric("non-finite Jacobian entry".into()));
    }
    Ok(DynamicsJacobians { a, b })
}

/// Mirrored network outputs recorded on a tape, one row per sample.
pub struct TapeOutputs {
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub d: Var,
}

/// Build the network inputs `(v/V_SCALE, ±β, ±w, y, z)` for a batch.
pub fn tape_net_inputs(tape: &mut Tape, x: Var, u: Var) -> Result<(Var, Var)> {
    let v = tape.slice_cols(x, 3, 4)?;
    let vs = tape.scale(v, 1.0 / V_SCALE);
    let beta = tape.slice_cols(x, 4, 5)?;
    let w = tape.slice_cols(u, 0, 1)?;
    let yz = tape.slice_cols(u, 1, 3)?;
    let plain = tape.concat_cols(&[vs, beta, w, yz])?;
    let nb = tape.neg(beta);
    let nw = tape.neg(w);
    let mirror = tape.concat_cols(&[vs, nb, nw, yz])?;
    Ok((plain, mirror))
}

/// Euler step on a tape from the four network outputs; `theta0` broadcasts.
pub fn tape_assemble_step(
    tape: &mut Tape,
    x: Var,
    out: &TapeOutputs,
    theta0: Var,
    dt: f64,
) -> Result<Var> {
    let p = tape.slice_cols(x, 0, 1)?;
    let q = tape.slice_cols(x, 1, 2)?;
    let psi = tape.slice_cols(x, 2, 3)?;
    let v = tape.slice_cols(x, 3, 4)?;
    let beta = tape.slice_cols(x, 4, 5)?;

    let heading = tape.add(psi, beta)?;
    let ch = tape.cos(heading);
    let sh = tape.sin(heading);
    let vdt = tape.scale(v, dt);
    let dp = tape.mul(vdt, ch)?;
    let dq = tape.mul(vdt, sh)?;
    let p2 = tape.add(p, dp)?;
    let q2 = tape.add(q, dq)?;

    let sb = tape.sin(beta);
    let num = tape.mul(vdt, sb)?;
    let dpsi = tape.div(num, theta0)?;
    let psi2 = tape.add(psi, dpsi)?;

    let s = tape.sqrt(v);
    let sa = tape.add(s, out.a)?;
    let sb2 = tape.add(s, out.b)?;
    let sa = tape.square(sa);
    let sb2 = tape.square(sb2);
    let vv = tape.add(sa, sb2)?;
    let v2 = tape.scale(vv, 0.5);

    let cd = tape.sub(out.c, out.d)?;
    let dbeta = tape.scale(cd, dt / 2.0);
    let beta2 = tape.add(beta, dbeta)?;

    Ok(tape.concat_cols(&[p2, q2, psi2, v2, beta2])?)
}

/// Full model step on a tape; `bound` holds the `f1.*`/`f2.*` tensors and
/// `theta0_raw` is a `1×1` (or `1`) variable passed through softplus.
pub fn model_step_tape(
    tape: &mut Tape,
    bound: &Bound,
    theta0_raw: Var,
    x: Var,
    u: Var,
    dt: f64,
) -> Result<Var> {
    let spec = net_spec();
    let (plain, mirror) = tape_net_inputs(tape, x, u)?;
    let out = TapeOutputs {
        a: spec.forward(tape, bound, F1, plain)?,
        b: spec.forward(tape, bound, F1, mirror)?,
        c: spec.forward(tape, bound, F2, plain)?,
        d: spec.forward(tape, bound, F2, mirror)?,
    };
    let theta0 = tape.softplus(theta0_raw);
    tape_assemble_step(tape, x, &out, theta0, dt)
}
