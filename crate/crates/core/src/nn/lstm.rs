use super::{key, ParamTree};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Single-layer LSTM weights. Gate columns are ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    /// `S_in × 4S`
    pub w_input: T,
    /// `S × 4S`
    pub w_hidden: T,
    /// `1 × 4S`
    pub bias: T,
}

impl<T> ParamTree<T> for LstmParams<T> {
    type Mapped<U> = LstmParams<U>;

    fn map_leaves<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LstmParams<U> {
        LstmParams {
            w_input: f(&key(p, "w_input"), &self.w_input),
            w_hidden: f(&key(p, "w_hidden"), &self.w_hidden),
            bias: f(&key(p, "bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&key(p, "w_input"), &mut self.w_input);
        f(&key(p, "w_hidden"), &mut self.w_hidden);
        f(&key(p, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmState<T> {
    pub hidden: T,
    pub cell: T,
}

/// One LSTM update on a `1 × S_in` input; the new hidden state is the output.
pub fn lstm_step(
    tape: &mut Tape,
    x: Var,
    state: LstmState<Var>,
    p: &LstmParams<Var>,
) -> Result<LstmState<Var>> {
    let size = tape.shape(state.hidden)[1];
    if tape.shape(p.w_hidden) != [size, 4 * size] {
        return Err(Error::dim(
            "lstm_step",
            format!("hidden {size}, w_hidden {:?}", tape.shape(p.w_hidden)),
        ));
    }
    let a = tape.matmul(x, p.w_input)?;
    let b = tape.matmul(state.hidden, p.w_hidden)?;
    let gates = tape.add(a, b)?;
    let gates = tape.add(gates, p.bias)?;
    let i = tape.slice_cols(gates, 0, size)?;
    let f = tape.slice_cols(gates, size, size)?;
    let g = tape.slice_cols(gates, 2 * size, size)?;
    let o = tape.slice_cols(gates, 3 * size, size)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let kept = tape.mul(f, state.cell)?;
    let written = tape.mul(i, g)?;
    let cell = tape.add(kept, written)?;
    let squashed = tape.tanh(cell);
    let hidden = tape.mul(o, squashed)?;
    Ok(LstmState { hidden, cell })
}
