//! Token-level routing: per-layer linear router, top-k selection at a bin
//! ratio, full-layer bypass for unselected tokens, and score rescaling so
//! gradients reach the router.

use crate::error::{Error, Result};
use crate::model::{block_forward, LayerVars};
use crate::tensor::{Tape, Var};

/// Ratio bins are tenths: 0 ..= 10 stand for 0.0 ..= 1.0.
pub type BinTenths = u8;

pub fn bin_to_f64(bin: BinTenths) -> f64 {
    bin as f64 / 10.0
}

/// Validate that `bin` is one of {0.0, 0.1, ..., 1.0} and convert to tenths.
pub fn bin_from_f64(bin: f64) -> Result<BinTenths> {
    let scaled = bin * 10.0;
    let rounded = scaled.round();
    if !(0.0..=10.0).contains(&rounded) || (scaled - rounded).abs() > 1e-9 {
        return Err(Error::Arg(format!("{bin} is not a ratio bin (multiples of 0.1 in [0, 1])")));
    }
    Ok(rounded as BinTenths)
}

/// Tokens processed at a bin: k = round((1 - bin) * n), half up.
pub fn k_of_ratio(bin: f64, n: usize) -> Result<usize> {
    let tenths = bin_from_f64(bin)?;
    Ok(k_of_bin(tenths, n))
}

pub fn k_of_bin(bin: BinTenths, n: usize) -> usize {
    // Exact integer arithmetic: round(n * (10 - bin) / 10), half up.
    (n * (10 - bin as usize) + 5) / 10
}

/// Indices of the k largest scores. Ties break toward the smaller index;
/// the result is sorted ascending for a stable scatter layout. Selection is
/// discrete and carries no gradient; gradient flows via rescaling instead.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Arg(format!(
            "k = {k} exceeds {} scores",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });
    let mut sel: Vec<usize> = order[..k].to_vec();
    sel.sort_unstable();
    Ok(sel)
}

/// Per-token importance: sigmoid(H . w + b), differentiable in H and router.
pub fn router_scores(tape: &mut Tape, h: Var, w: Var, b: Var) -> Result<Var> {
    let raw = tape.matmul(h, w)?;
    let raw = tape.add_scalar(raw, b)?;
    Ok(tape.sigmoid(raw))
}

/// What one routed layer selected.
#[derive(Clone, Debug)]
pub struct SelectionRecord {
    pub scores: Vec<f64>,
    pub indices: Vec<usize>,
    pub k: usize,
    pub bin: BinTenths,
}

/// Routed layer forward given precomputed scores. Selected rows receive
/// H + s * U (U from a block over the gathered rows only); unselected rows
/// pass through bit-identically.
pub fn routed_block_forward_scored(
    tape: &mut Tape,
    h: Var,
    cond: Var,
    lp: &LayerVars,
    heads: usize,
    scores: Var,
    bin: BinTenths,
    rescale: bool,
) -> Result<(Var, SelectionRecord)> {
    let n = tape.shape(h)[0];
    let k = k_of_bin(bin, n);
    let score_data = tape.data(scores).to_vec();
    let indices = topk_indices(&score_data, k)?;
    let record = SelectionRecord { scores: score_data, indices: indices.clone(), k, bin };
    if k == 0 {
        // Full bypass: the block is never invoked.
        return Ok((h, record));
    }
    let gathered = tape.gather_rows(h, &indices)?;
    let mut update = block_forward(tape, gathered, cond, lp, heads)?;
    if rescale {
        let sel_scores = tape.gather_rows(scores, &indices)?;
        update = tape.scale_rows(update, sel_scores)?;
    }
    let new_rows = tape.add(gathered, update)?;
    let out = tape.scatter_rows_into(h, new_rows, &indices)?;
    Ok((out, record))
}

/// Routed layer forward at one bin ratio, computing scores internally.
pub fn routed_block_forward(
    tape: &mut Tape,
    h: Var,
    cond: Var,
    lp: &LayerVars,
    heads: usize,
    bin: f64,
    rescale: bool,
) -> Result<(Var, SelectionRecord)> {
    let tenths = bin_from_f64(bin)?;
    let scores = router_scores(tape, h, lp.router_w, lp.router_b)?;
    routed_block_forward_scored(tape, h, cond, lp, heads, scores, tenths, rescale)
}
