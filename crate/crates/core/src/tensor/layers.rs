use super::{Graph, TensorError, Var};

/// Projection weights of one self-attention layer, already bound to a graph.
/// Each weight is `[d, d]`; head `h` owns columns `h·d_h .. (h+1)·d_h` of the
/// query, key and value projections.
#[derive(Debug, Clone, Copy)]
pub struct MhsaParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head scaled dot-product self-attention over the rows of `x[n,d]`.
pub fn mhsa(g: &mut Graph, x: Var, p: &MhsaParams, n_heads: usize) -> Result<Var, TensorError> {
    let d = match g.dims(x) {
        [_, d] => *d,
        other => return Err(super::shape_err("mhsa", format!("expected [n,d], got {other:?}"))),
    };
    if n_heads == 0 || d % n_heads != 0 {
        return Err(TensorError::HeadDivisibility { dim: d, heads: n_heads });
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = g.linear(x, p.wq, p.bq)?;
    let k = g.linear(x, p.wk, p.bk)?;
    let v = g.linear(x, p.wv, p.bv)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let logits = g.matmul_bt(qh, kh)?;
        let logits = g.scale(logits, scale);
        let attn = g.softmax(logits);
        heads.push(g.matmul(attn, vh)?);
    }
    let mixed = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.linear(mixed, p.wo, p.bo)
}
