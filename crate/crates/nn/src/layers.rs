//! Feed-forward and LSTM layers built from tape primitives.
//!
//! Parameter naming: an MLP under prefix `p` owns `p.l{i}.w` (`in × out`) and
//! `p.l{i}.b` (`out`); an LSTM owns `p.w` (`(in + hidden) × 4·hidden`) and
//! `p.b` (`4·hidden`) with gate blocks ordered input, forget, candidate, output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::tape::{Bound, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
}

/// Layer sizes including input and output, e.g. `[5, 32, 32, 1]`.
/// Hidden layers use `activation`; the output layer is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>) -> Self {
        Self {
            sizes,
            activation: Activation::Tanh,
        }
    }

    pub fn input(&self) -> usize {
        self.sizes[0]
    }

    pub fn output(&self) -> usize {
        *self.sizes.last().expect("non-empty spec")
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.l{layer}.w")
    }

    pub fn bias_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.l{layer}.b")
    }

    /// Uniform `±1/√fan_in` initialization.
    pub fn init<R: Rng + ?Sized>(&self, prefix: &str, rng: &mut R) -> ParamSet {
        let mut ps = ParamSet::new();
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            ps.insert(
                Self::weight_name(prefix, l),
                Tensor::uniform(&[fan_in, fan_out], bound, rng),
            )
            .expect("fresh names");
            ps.insert(
                Self::bias_name(prefix, l),
                Tensor::uniform(&[fan_out], bound, rng),
            )
            .expect("fresh names");
        }
        ps
    }

    /// Record the forward pass; `x` is `batch × input`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.input() {
            return Err(NnError::Dimension(format!(
                "mlp `{prefix}` expects {} inputs, got {cols}",
                self.input()
            )));
        }
        let mut h = x;
        for l in 0..self.num_layers() {
            let w = params.get(&Self::weight_name(prefix, l))?;
            let b = params.get(&Self::bias_name(prefix, l))?;
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if l + 1 < self.num_layers() {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        Ok(h)
    }
}

/// Evaluate an MLP without keeping the tape.
pub fn mlp_forward(params: &ParamSet, prefix: &str, spec: &MlpSpec, input: &Tensor) -> Result<Tensor> {
    if !input.is_finite() {
        return Err(NnError::Domain("non-finite mlp input".into()));
    }
    let mut tape = Tape::new();
    let bound = tape.bind_frozen(&params.filter_prefix(&format!("{prefix}.")));
    let x = tape.constant(Tensor::matrix(input.rows(), input.cols(), input.data().to_vec())?);
    let y = spec.forward(&mut tape, &bound, prefix, x)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmSpec {
    pub input: usize,
    pub hidden: usize,
}

impl LstmSpec {
    pub fn weight_name(prefix: &str) -> String {
        format!("{prefix}.w")
    }

    pub fn bias_name(prefix: &str) -> String {
        format!("{prefix}.b")
    }

    pub fn init<R: Rng + ?Sized>(&self, prefix: &str, rng: &mut R) -> ParamSet {
        let bound = 1.0 / ((self.input + self.hidden) as f64).sqrt();
        let mut ps = ParamSet::new();
        ps.insert(
            Self::weight_name(prefix),
            Tensor::uniform(&[self.input + self.hidden, 4 * self.hidden], bound, rng),
        )
        .expect("fresh names");
        ps.insert(
            Self::bias_name(prefix),
            Tensor::uniform(&[4 * self.hidden], bound, rng),
        )
        .expect("fresh names");
        ps
    }

    /// One cell update for a batch; returns `(h', c')`.
    pub fn step(
        &self,
        tape: &mut Tape,
        params: &Bound,
        prefix: &str,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let hs = self.hidden;
        for (what, v, want) in [("input", x, self.input), ("h", h, hs), ("c", c, hs)] {
            let got = tape.value(v).cols();
            if got != want {
                return Err(NnError::Dimension(format!(
                    "lstm `{prefix}` {what} width {got}, expected {want}"
                )));
            }
        }
        let w = params.get(&Self::weight_name(prefix))?;
        let b = params.get(&Self::bias_name(prefix))?;
        let xh = tape.concat_cols(&[x, h])?;
        let z = tape.matmul(xh, w)?;
        let z = tape.add(z, b)?;
        let zi = tape.slice_cols(z, 0, hs)?;
        let zf = tape.slice_cols(z, hs, 2 * hs)?;
        let zg = tape.slice_cols(z, 2 * hs, 3 * hs)?;
        let zo = tape.slice_cols(z, 3 * hs, 4 * hs)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

/// One LSTM step without keeping the tape: `(output, (h', c'))`.
pub fn lstm_forward(
    params: &ParamSet,
    prefix: &str,
    spec: &LstmSpec,
    input: &Tensor,
    hidden: (&Tensor, &Tensor),
) -> Result<(Tensor, (Tensor, Tensor))> {
    let mut tape = Tape::new();
    let bound = tape.bind_frozen(&params.filter_prefix(&format!("{prefix}.")));
    let as_row = |t: &Tensor| Tensor::matrix(t.rows(), t.cols(), t.data().to_vec());
    let x = tape.constant(as_row(input)?);
    let h = tape.constant(as_row(hidden.0)?);
    let c = tape.constant(as_row(hidden.1)?);
    let (h2, c2) = spec.step(&mut tape, &bound, prefix, x, h, c)?;
    let h2 = tape.value(h2).clone();
    let c2 = tape.value(c2).clone();
    Ok((h2.clone(), (h2, c2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = MlpSpec::new(vec![3, 4, 2]);
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let mut ps = spec.init("m", &mut rng);
        ps.scale(0.0);
        let y = mlp_forward(&ps, "m", &spec, &Tensor::row(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let spec = MlpSpec::new(vec![2, 2]);
        let mut ps = ParamSet::new();
        ps.insert("m.l0.w", Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap()).unwrap();
        ps.insert("m.l0.b", Tensor::vector(vec![0., 0.])).unwrap();
        let y = mlp_forward(&ps, "m", &spec, &Tensor::row(vec![1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn one_two_one_hand_value() {
        let spec = MlpSpec::new(vec![1, 2, 1]);
        let mut ps = ParamSet::new();
        ps.insert("m.l0.w", Tensor::matrix(1, 2, vec![1., 1.]).unwrap()).unwrap();
        ps.insert("m.l0.b", Tensor::vector(vec![0., 0.])).unwrap();
        ps.insert("m.l1.w", Tensor::matrix(2, 1, vec![1., 1.]).unwrap()).unwrap();
        ps.insert("m.l1.b", Tensor::vector(vec![0.])).unwrap();
        let y = mlp_forward(&ps, "m", &spec, &Tensor::row(vec![0.5])).unwrap();
        assert!((y.data()[0] - 2.0 * 0.5f64.tanh()).abs() < 1e-15);
        assert!((y.data()[0] - 0.92423).abs() < 1e-5);
    }

    #[test]
    fn mlp_shape_and_domain_errors() {
        let spec = MlpSpec::new(vec![3, 2]);
        let mut rng = rand::rngs::StdRng::seed_from_u64(2);
        let ps = spec.init("m", &mut rng);
        assert!(matches!(
            mlp_forward(&ps, "m", &spec, &Tensor::row(vec![1.0, 2.0])),
            Err(NnError::Dimension(_))
        ));
        assert!(matches!(
            mlp_forward(&ps, "m", &spec, &Tensor::row(vec![1.0, f64::NAN, 0.0])),
            Err(NnError::Domain(_))
        ));
    }

    #[test]
    fn lstm_zero_case() {
        let spec = LstmSpec { input: 3, hidden: 4 };
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let mut ps = spec.init("r", &mut rng);
        ps.scale(0.0);
        let z4 = Tensor::row(vec![0.0; 4]);
        let (out, (h, c)) =
            lstm_forward(&ps, "r", &spec, &Tensor::row(vec![0.0; 3]), (&z4, &z4)).unwrap();
        assert!(out.data().iter().chain(h.data()).chain(c.data()).all(|v| *v == 0.0));
    }

    #[test]
    fn lstm_hidden_mismatch() {
        let spec = LstmSpec { input: 2, hidden: 3 };
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        let ps = spec.init("r", &mut rng);
        let bad = Tensor::row(vec![0.0; 5]);
        let ok = Tensor::row(vec![0.0; 3]);
        assert!(matches!(
            lstm_forward(&ps, "r", &spec, &Tensor::row(vec![0.0; 2]), (&bad, &ok)),
            Err(NnError::Dimension(_))
        ));
    }
}
