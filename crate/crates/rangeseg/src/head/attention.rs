//! Scaled dot-product multi-head attention on dense matrices.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Dense linear map `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearParams {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.dim().0 != bias.len() {
            return Err(Error::Shape(format!(
                "linear weight rows {} vs bias length {}",
                weight.dim().0,
                bias.len()
            )));
        }
        Ok(LinearParams { weight, bias })
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.dim().1 != self.weight.dim().1 {
            return Err(Error::Shape(format!(
                "linear input width {} vs weight cols {}",
                x.dim().1,
                self.weight.dim().1
            )));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
    pub num_heads: usize,
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::MIN, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

/// Standard multi-head attention; also returns the per-head attention
/// matrices `(heads, Q, L)` whose rows sum to 1.
pub fn multi_head_attention_with_weights(
    queries: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    values: ArrayView2<f64>,
    params: &AttentionParams,
) -> Result<(Array2<f64>, Array3<f64>)> {
    if keys.dim().0 != values.dim().0 {
        return Err(Error::Shape(format!(
            "{} keys vs {} values",
            keys.dim().0,
            values.dim().0
        )));
    }
    let q = params.query.apply(queries)?;
    let k = params.key.apply(keys)?;
    let v = params.value.apply(values)?;
    let dim = q.dim().1;
    if dim % params.num_heads != 0 || k.dim().1 != dim || v.dim().1 != dim {
        return Err(Error::Shape(format!(
            "attention dim {dim} not divisible into {} heads",
            params.num_heads
        )));
    }
    let head_dim = dim / params.num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let (nq, nl) = (q.dim().0, k.dim().0);

    let mut concat = Array2::<f64>::zeros((nq, dim));
    let mut attn = Array3::<f64>::zeros((params.num_heads, nq, nl));
    for h in 0..params.num_heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k.slice(ndarray::s![.., cols.clone()]);
        let vh = v.slice(ndarray::s![.., cols.clone()]);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|s| s * scale);
        softmax_rows_inplace(&mut scores);
        let out_h = scores.dot(&vh);
        concat.slice_mut(ndarray::s![.., cols]).assign(&out_h);
        attn.index_axis_mut(Axis(0), h).assign(&scores);
    }
    Ok((params.output.apply(concat.view())?, attn))
}

pub fn multi_head_attention(
    queries: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    values: ArrayView2<f64>,
    params: &AttentionParams,
) -> Result<Array2<f64>> {
    multi_head_attention_with_weights(queries, keys, values, params).map(|(out, _)| out)
}
