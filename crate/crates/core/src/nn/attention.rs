use serde::{Deserialize, Serialize};

use super::{key, ParamTree};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Compact multi-head attention weights.
///
/// One `S × F` projection each for query, key and value; head `i` reads
/// columns `i·F/h .. (i+1)·F/h`. A single `F × S` output map combines the
/// heads, so the parameter count does not grow with `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub w_query: T,
    pub w_key: T,
    pub w_value: T,
    pub w_out: T,
}

impl<T> ParamTree<T> for AttentionParams<T> {
    type Mapped<U> = AttentionParams<U>;

    fn map_leaves<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            w_query: f(&key(p, "w_query"), &self.w_query),
            w_key: f(&key(p, "w_key"), &self.w_key),
            w_value: f(&key(p, "w_value"), &self.w_value),
            w_out: f(&key(p, "w_out"), &self.w_out),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&key(p, "w_query"), &mut self.w_query);
        f(&key(p, "w_key"), &mut self.w_key);
        f(&key(p, "w_value"), &mut self.w_value);
        f(&key(p, "w_out"), &mut self.w_out);
    }
}

/// Divisor applied to attention scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `sqrt(S)`, the feature width of keys before projection.
    #[default]
    KeyDim,
    /// `sqrt(F / h)`, the per-head projection width.
    HeadDim,
}

impl AttentionScale {
    pub fn divisor(self, features: usize, projection: usize, heads: usize) -> f64 {
        match self {
            AttentionScale::KeyDim => (features as f64).sqrt(),
            AttentionScale::HeadDim => ((projection / heads) as f64).sqrt(),
        }
    }
}

/// Attention over already-projected rows.
///
/// `query` is `1 × F`, `keys`/`values` are `J × F`. Returns the `1 × S`
/// context after `w_out` and the `h × J` weights.
pub fn attend(
    tape: &mut Tape,
    query: Var,
    keys: Var,
    values: Var,
    w_out: Var,
    heads: usize,
    divisor: f64,
) -> Result<(Var, Var)> {
    let scores = tape.head_scores(query, keys, heads)?;
    let scores = tape.scale(scores, 1.0 / divisor);
    let weights = tape.softmax_rows(scores)?;
    let mixed = tape.head_mix(weights, values, heads)?;
    let context = tape.matmul(mixed, w_out)?;
    Ok((context, weights))
}

/// Multi-head attention of a `1 × S` query over `J × S` layer features that
/// serve as both keys and values.
pub fn multi_head_attention(
    tape: &mut Tape,
    query: Var,
    features: Var,
    p: &AttentionParams<Var>,
    heads: usize,
    scale: AttentionScale,
) -> Result<(Var, Var)> {
    let (j, s) = match *tape.shape(features) {
        [j, s] => (j, s),
        ref other => {
            return Err(Error::dim(
                "multi_head_attention",
                format!("features {other:?}"),
            ))
        }
    };
    if j == 0 {
        return Err(Error::dim(
            "multi_head_attention",
            "no layers to attend over",
        ));
    }
    let f = tape.shape(p.w_query)[1];
    if heads == 0 || !f.is_multiple_of(heads) {
        return Err(Error::dim(
            "multi_head_attention",
            format!("{heads} heads for projection width {f}"),
        ));
    }
    let q = tape.matmul(query, p.w_query)?;
    let k = tape.matmul(features, p.w_key)?;
    let v = tape.matmul(features, p.w_value)?;
    attend(tape, q, k, v, p.w_out, heads, scale.divisor(s, f, heads))
}
