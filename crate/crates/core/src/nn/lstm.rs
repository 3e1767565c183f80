use rand::Rng;

use super::{uniform, Binder, Params};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Bidirectional single-layer LSTM over `[T, N, F]` sequences.
///
/// Per direction the tensors are `w_ih: [F, 4H]`, `w_hh: [H, 4H]` and
/// `bias: [4H]`, gates packed as (input, forget, cell, output). Output is
/// `[T, N, 2H]`, forward half first. Initial states are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub name: String,
    pub input_size: usize,
    pub hidden_size: usize,
}

const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

impl BiLstm {
    pub fn new<T: Real>(params: &mut Params<T>, name: &str, input_size: usize, hidden_size: usize, rng: &mut impl Rng) -> Self {
        let h = hidden_size;
        let bound = 1.0 / (h as f64).sqrt();
        for dir in DIRECTIONS {
            params.insert(format!("{name}.{dir}.w_ih"), uniform(&[input_size, 4 * h], bound, rng), true);
            params.insert(format!("{name}.{dir}.w_hh"), uniform(&[h, 4 * h], bound, rng), true);
            let mut bias = Tensor::zeros(&[4 * h]);
            bias.data_mut()[h..2 * h].fill(T::one());
            params.insert(format!("{name}.{dir}.bias"), bias, true);
        }
        Self { name: name.to_string(), input_size, hidden_size }
    }

    /// Tensor names in the order [`Self::forward_with`] expects them.
    pub fn param_names(&self) -> Vec<String> {
        DIRECTIONS
            .iter()
            .flat_map(|dir| ["w_ih", "w_hh", "bias"].map(|p| format!("{}.{dir}.{p}", self.name)))
            .collect()
    }

    /// `2 × (4H·F + 4H·H + 4H)`.
    pub fn param_count(&self) -> usize {
        let h4 = 4 * self.hidden_size;
        2 * (h4 * self.input_size + h4 * self.hidden_size + h4)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let vars = self.param_names().iter().map(|n| b.var(g, n)).collect::<Result<Vec<_>>>()?;
        self.forward_with(g, x, &vars)
    }

    /// Forward pass with explicitly supplied parameter variables, ordered as
    /// [`Self::param_names`].
    pub fn forward_with<T: Real>(&self, g: &mut Graph<T>, x: Var, vars: &[Var]) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let [steps, batch, features] = shape[..] else {
            return Err(Error::ShapeMismatch(format!("{}: expected [T, N, F], got {shape:?}", self.name)));
        };
        if features != self.input_size {
            return Err(Error::ShapeMismatch(format!("{}: input size {features}, expected {}", self.name, self.input_size)));
        }
        if vars.len() != 6 {
            return Err(Error::ShapeMismatch(format!("{}: expected 6 parameter tensors, got {}", self.name, vars.len())));
        }
        let flat = g.reshape(x, &[steps * batch, features])?;
        let fwd = self.direction(g, flat, &vars[0..3], steps, batch, false)?;
        let bwd = self.direction(g, flat, &vars[3..6], steps, batch, true)?;
        g.concat(&[fwd, bwd], 2)
    }

    fn direction<T: Real>(&self, g: &mut Graph<T>, flat: Var, vars: &[Var], steps: usize, batch: usize, reverse: bool) -> Result<Var> {
        let h = self.hidden_size;
        let (w_ih, w_hh, bias) = (vars[0], vars[1], vars[2]);
        let proj = g.matmul(flat, w_ih)?;
        let proj = g.add_row_bias(proj, bias)?;
        let proj = g.reshape(proj, &[steps, batch, 4 * h])?;

        let mut outputs: Vec<Option<Var>> = vec![None; steps];
        let mut state: Option<(Var, Var)> = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..steps).rev()) } else { Box::new(0..steps) };
        for t in order {
            let mut gates = g.select(proj, t)?;
            if let Some((h_prev, _)) = state {
                let rec = g.matmul(h_prev, w_hh)?;
                gates = g.add(gates, rec)?;
            }
            let i = g.narrow(gates, 1, 0, h)?;
            let i = g.sigmoid(i)?;
            let f = g.narrow(gates, 1, h, h)?;
            let f = g.sigmoid(f)?;
            let c_in = g.narrow(gates, 1, 2 * h, h)?;
            let c_in = g.tanh(c_in)?;
            let o = g.narrow(gates, 1, 3 * h, h)?;
            let o = g.sigmoid(o)?;
            let ic = g.mul(i, c_in)?;
            let c = match state {
                Some((_, c_prev)) => {
                    let keep = g.mul(f, c_prev)?;
                    g.add(keep, ic)?
                }
                None => ic,
            };
            let tc = g.tanh(c)?;
            let h_t = g.mul(o, tc)?;
            outputs[t] = Some(h_t);
            state = Some((h_t, c));
        }
        let outputs: Vec<Var> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
        g.stack(&outputs)
    }
}
