//! Learnable continuous compression ratios per (layer, timestep-region):
//! bin querying, proximity-weighted two-branch training forward, the ratio
//! MSE loss, and nearest-bin snapping for inference.

use crate::error::{Error, Result};
use crate::model::LayerVars;
use crate::routing::{bin_to_f64, router_scores, routed_block_forward_scored, BinTenths, SelectionRecord};
use crate::tensor::{Tape, Var};

/// Learnable ratio scalars indexed by (layer, region), clamped to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RatioTable {
    layers: usize,
    regions: usize,
    values: Vec<f64>,
}

impl RatioTable {
    /// Fresh table at exactly zero: the uncompressed model.
    pub fn zeros(layers: usize, regions: usize) -> Self {
        RatioTable { layers, regions, values: vec![0.0; layers * regions] }
    }

    pub fn from_values(layers: usize, regions: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), layers * regions);
        RatioTable { layers, regions, values }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, layer: usize, region: usize) -> f64 {
        self.values[layer * self.regions + region]
    }

    pub fn set(&mut self, layer: usize, region: usize, v: f64) {
        self.values[layer * self.regions + region] = v;
    }

    /// Mean ratio over the whole table.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Nearest-bin snap (half rounds up). Inference then runs exactly one
    /// branch per layer.
    pub fn snap_for_inference(&self) -> RatioTable {
        let values = self.values.iter().map(|&v| bin_to_f64(snap_tenths(v))).collect();
        RatioTable { layers: self.layers, regions: self.regions, values }
    }

    /// True when every entry sits exactly on a bin.
    pub fn is_snapped(&self) -> bool {
        self.values
            .iter()
            .all(|&v| (v * 10.0 - (v * 10.0).round()).abs() < 1e-12)
    }

    /// Snapped bin (tenths) for one entry; errors if the table is not snapped.
    pub fn bin_tenths(&self, layer: usize, region: usize) -> Result<BinTenths> {
        let v = self.get(layer, region);
        let scaled = v * 10.0;
        if (scaled - scaled.round()).abs() > 1e-12 {
            return Err(Error::Arg(format!(
                "ratio table entry ({layer}, {region}) = {v} is not snapped to a bin"
            )));
        }
        Ok(scaled.round() as BinTenths)
    }

    /// Clamp every entry into [0, 1]; applied after each optimizer step.
    pub fn project(&mut self) {
        for v in &mut self.values {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Clamp then round a ratio to its nearest tenth, half up.
fn snap_tenths(r: f64) -> BinTenths {
    let r = r.clamp(0.0, 1.0);
    // The epsilon keeps decimal halves like 0.15 (binary 0.1499..) rounding up.
    let t = (r * 10.0 + 0.5 + 1e-9).floor();
    (t.min(10.0)) as BinTenths
}

/// The two bins bracketing a continuous ratio and their proximity weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinQuery {
    pub lo: BinTenths,
    pub hi: BinTenths,
    pub w_lo: f64,
    pub w_hi: f64,
}

impl BinQuery {
    pub fn lo_ratio(&self) -> f64 {
        bin_to_f64(self.lo)
    }

    pub fn hi_ratio(&self) -> f64 {
        bin_to_f64(self.hi)
    }
}

/// Lower/upper bin of `r` with weights w_hi = (r - lo) * 10, w_lo = 1 - w_hi.
/// r = 1.0 degenerates to the single 1.0 bin.
pub fn query_bins(r: f64) -> Result<BinQuery> {
    if !(0.0..=1.0).contains(&r) || r.is_nan() {
        return Err(Error::Arg(format!("ratio {r} outside [0, 1]")));
    }
    // Tolerate values like 0.3 whose f64 times 10 lands just below the bin.
    let lo = (r * 10.0 + 1e-9).floor().min(10.0);
    if lo >= 10.0 {
        return Ok(BinQuery { lo: 10, hi: 10, w_lo: 1.0, w_hi: 0.0 });
    }
    let w_hi = (r * 10.0 - lo).max(0.0);
    Ok(BinQuery {
        lo: lo as BinTenths,
        hi: lo as BinTenths + 1,
        w_lo: 1.0 - w_hi,
        w_hi,
    })
}

/// Timestep region: partitions [0, T) into R contiguous near-equal spans.
pub fn region_of_timestep(t: usize, timesteps: usize, regions: usize) -> Result<usize> {
    if regions == 0 || regions > timesteps {
        return Err(Error::Arg(format!(
            "regions {regions} must be in [1, timesteps {timesteps}]"
        )));
    }
    if t >= timesteps {
        return Err(Error::Arg(format!("timestep {t} out of range [0, {timesteps})")));
    }
    Ok((t * regions / timesteps).min(regions - 1))
}

/// Two-branch training forward of one routed layer. The router scores are
/// computed once; each branch selects at its own bin; outputs combine with
/// proximity weights so the result is differentiable in `r`.
pub fn diffcr_block_forward(
    tape: &mut Tape,
    h: Var,
    cond: Var,
    lp: &LayerVars,
    heads: usize,
    r: Var,
    rescale: bool,
) -> Result<(Var, SelectionRecord)> {
    let r_val = tape.value(r);
    let q = query_bins(r_val)?;
    let scores = router_scores(tape, h, lp.router_w, lp.router_b)?;
    let (out_lo, rec_lo) =
        routed_block_forward_scored(tape, h, cond, lp, heads, scores, q.lo, rescale)?;
    if q.lo == q.hi {
        // Degenerate r = 1.0: single branch, no gradient path through r.
        return Ok((out_lo, rec_lo));
    }
    let (out_hi, _) =
        routed_block_forward_scored(tape, h, cond, lp, heads, scores, q.hi, rescale)?;
    // w_hi = 10 r - lo, w_lo = 1 - w_hi; both differentiable in r.
    let ten_r = tape.scale(r, 10.0);
    let w_hi = tape.add_const(ten_r, -(q.lo as f64));
    let neg = tape.scale(w_hi, -1.0);
    let w_lo = tape.add_const(neg, 1.0);
    let lo_term = tape.mul_scalar(out_lo, w_lo)?;
    let hi_term = tape.mul_scalar(out_hi, w_hi)?;
    let out = tape.add(lo_term, hi_term)?;
    Ok((out, rec_lo))
}

/// lambda * (mean_(layers x batch) r[layer][region_of(t_b)] - target)^2,
/// built on the tape so every touched entry receives gradient.
///
/// `table_vars` holds one scalar var per (layer, region), layer-major.
pub fn ratio_mse_loss(
    tape: &mut Tape,
    table_vars: &[Var],
    layers: usize,
    regions: usize,
    batch_timesteps: &[usize],
    timesteps: usize,
    target: f64,
    lambda: f64,
) -> Result<Var> {
    if batch_timesteps.is_empty() {
        return Err(Error::Arg("ratio loss needs a non-empty batch".into()));
    }
    if lambda < 0.0 {
        return Err(Error::Arg("lambda must be >= 0".into()));
    }
    assert_eq!(table_vars.len(), layers * regions);
    let mut acc: Option<Var> = None;
    for &t in batch_timesteps {
        let region = region_of_timestep(t, timesteps, regions)?;
        for layer in 0..layers {
            let entry = table_vars[layer * regions + region];
            acc = Some(match acc {
                None => entry,
                Some(a) => tape.add(a, entry)?,
            });
        }
    }
    let count = (layers * batch_timesteps.len()) as f64;
    let mean = tape.scale(acc.unwrap(), 1.0 / count);
    let diff = tape.add_const(mean, -target);
    let sq = tape.mul(diff, diff)?;
    Ok(tape.scale(sq, lambda))
}

/// Batch-mean ratio (plain value, no tape) matching `ratio_mse_loss`.
pub fn batch_mean_ratio(
    table: &RatioTable,
    batch_timesteps: &[usize],
    timesteps: usize,
) -> Result<f64> {
    if batch_timesteps.is_empty() {
        return Err(Error::Arg("empty batch".into()));
    }
    let mut sum = 0.0;
    for &t in batch_timesteps {
        let region = region_of_timestep(t, timesteps, table.regions)?;
        for layer in 0..table.layers {
            sum += table.get(layer, region);
        }
    }
    Ok(sum / (table.layers * batch_timesteps.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::rng::{stream, Rng};

    #[test]
    fn query_bins_worked_examples() {
        let q = query_bins(0.22).unwrap();
        assert_eq!((q.lo, q.hi), (2, 3));
        assert!((q.lo_ratio() - 0.2).abs() < 1e-12 && (q.hi_ratio() - 0.3).abs() < 1e-12);
        assert!((q.w_lo - 0.8).abs() < 1e-12, "{}", q.w_lo);
        assert!((q.w_hi - 0.2).abs() < 1e-12, "{}", q.w_hi);

        let q = query_bins(0.12).unwrap();
        assert_eq!((q.lo, q.hi), (1, 2));
        assert!((q.w_lo - 0.8).abs() < 1e-12);
        assert!((q.w_hi - 0.2).abs() < 1e-12);
    }

    #[test]
    fn query_bins_boundaries() {
        let q = query_bins(0.0).unwrap();
        assert_eq!((q.lo, q.hi), (0, 1));
        assert_eq!((q.w_lo, q.w_hi), (1.0, 0.0));

        let q = query_bins(1.0).unwrap();
        assert_eq!((q.lo, q.hi), (10, 10));
        assert_eq!((q.w_lo, q.w_hi), (1.0, 0.0));

        // On-bin value: lands on the bin itself with zero upper weight.
        let q = query_bins(0.3).unwrap();
        assert_eq!(q.lo, 3);
        assert!(q.w_hi.abs() < 1e-12);

        assert!(query_bins(-0.01).is_err());
        assert!(query_bins(1.01).is_err());
    }

    #[test]
    fn query_bins_weights_always_sum_to_one() {
        let mut rng = Rng::new(4, stream::INIT);
        for _ in 0..1000 {
            let r = rng.uniform();
            let q = query_bins(r).unwrap();
            assert_eq!(q.w_lo + q.w_hi, 1.0);
            assert!(q.lo_ratio() <= r + 1e-10 && r <= q.hi_ratio() + 1e-10);
        }
    }

    #[test]
    fn region_partition_examples() {
        assert_eq!(region_of_timestep(0, 200, 4).unwrap(), 0);
        assert_eq!(region_of_timestep(199, 200, 4).unwrap(), 3);
        // T=100, R=10: each region spans exactly 10 timesteps.
        for region in 0..10 {
            for t in region * 10..(region + 1) * 10 {
                assert_eq!(region_of_timestep(t, 100, 10).unwrap(), region);
            }
        }
        assert!(region_of_timestep(200, 200, 4).is_err());
        assert!(region_of_timestep(0, 10, 11).is_err());
    }

    #[test]
    fn snap_examples() {
        let t = RatioTable::from_values(1, 3, vec![0.29, 0.05, 0.0]);
        let s = t.snap_for_inference();
        assert_eq!(s.values(), &[0.3, 0.1, 0.0]);
        assert!(s.is_snapped());
        assert!(!t.is_snapped());
        // Decimal halves round up.
        let t = RatioTable::from_values(1, 2, vec![0.15, 0.45]);
        assert_eq!(t.snap_for_inference().values(), &[0.2, 0.5]);
    }

    #[test]
    fn project_clamps() {
        let mut t = RatioTable::from_values(1, 3, vec![-0.03, 1.07, 0.42]);
        t.project();
        assert_eq!(t.values(), &[0.0, 1.0, 0.42]);
    }

    #[test]
    fn ratio_loss_zero_at_target() {
        let mut tape = Tape::new();
        let vars: Vec<Var> = (0..4).map(|_| tape.scalar(0.3, true)).collect();
        let loss = ratio_mse_loss(&mut tape, &vars, 2, 2, &[1, 5], 10, 0.3, 0.3).unwrap();
        assert_eq!(tape.value(loss), 0.0);
    }

    #[test]
    fn ratio_loss_hand_computed() {
        // Single region, two layers at (0.1, 0.3), target 0.3, lambda 0.3:
        // mean = 0.2, loss = 0.3 * 0.01 = 0.003.
        let mut tape = Tape::new();
        let vars = vec![tape.scalar(0.1, true), tape.scalar(0.3, true)];
        let loss = ratio_mse_loss(&mut tape, &vars, 2, 1, &[0, 1, 2], 10, 0.3, 0.3).unwrap();
        assert!((tape.value(loss) - 0.003).abs() < 1e-15, "{}", tape.value(loss));
    }

    #[test]
    fn ratio_loss_rejects_empty_batch() {
        let mut tape = Tape::new();
        let vars = vec![tape.scalar(0.0, true)];
        assert!(ratio_mse_loss(&mut tape, &vars, 1, 1, &[], 10, 0.3, 0.3).is_err());
    }

    #[test]
    fn ratio_loss_gradient_matches_analytic_and_fd() {
        // grad w.r.t. one entry = lambda * 2 (mean - target) * touches / (L B)
        let (layers, regions, timesteps) = (2usize, 2usize, 10usize);
        let batch = vec![1usize, 7, 8]; // regions 0, 1, 1
        let vals = [0.1, 0.5, 0.2, 0.0];
        let (target, lambda) = (0.3, 0.3);
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|&v| tape.scalar(v, true)).collect();
        let loss =
            ratio_mse_loss(&mut tape, &vars, layers, regions, &batch, timesteps, target, lambda)
                .unwrap();
        tape.backward(loss).unwrap();

        let lb = (layers * batch.len()) as f64;
        let mean = (vals[0] + 2.0 * vals[1] + vals[2] + 2.0 * vals[3]) / lb;
        for (i, touches) in [(0usize, 1.0), (1, 2.0), (2, 1.0), (3, 2.0)] {
            let analytic = lambda * 2.0 * (mean - target) * touches / lb;
            let got = tape.grad(vars[i]).unwrap()[0];
            assert!((got - analytic).abs() < 1e-12, "entry {i}: {got} vs {analytic}");
            // Central finite differences.
            let h = 1e-6;
            let eval = |delta: f64| {
                let mut tp = Tape::new();
                let vs: Vec<Var> = vals
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| tp.scalar(if j == i { v + delta } else { v }, true))
                    .collect();
                let l = ratio_mse_loss(&mut tp, &vs, layers, regions, &batch, timesteps, target, lambda)
                    .unwrap();
                tp.value(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((got - fd).abs() < 1e-8, "entry {i}: {got} vs fd {fd}");
        }
    }

    fn fixture() -> (Model, Vec<f64>, Vec<f64>) {
        let cfg = ModelConfig {
            image_side: 8,
            patch_side: 2,
            hidden_dim: 16,
            heads: 2,
            layers: 2,
            classes: 2,
            train_timesteps: 20,
            sample_steps: 10,
            regions: 2,
            ..ModelConfig::default()
        };
        let mut model = Model::new(cfg, 23).unwrap();
        let ll = model.layout.layers[0].clone();
        let mut rng = Rng::new(55, stream::INIT);
        model.store.arrays[ll.router_w].data.iter_mut().for_each(|x| *x = rng.normal() * 0.5);
        let n = model.config.n_tokens();
        let d = model.config.hidden_dim;
        let h: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
        let cond: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        (model, h, cond)
    }

    #[test]
    fn two_branch_combination_matches_manual_mix() {
        let (model, h_data, cond_data) = fixture();
        let n = model.config.n_tokens();
        let d = model.config.hidden_dim;
        let r = 0.12;
        let run_branch = |bin: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let h = tape.constant(h_data.clone(), vec![n, d]);
            let cond = tape.constant(cond_data.clone(), vec![1, d]);
            let lp = bound.layer(&model.layout, 0);
            let (out, _) = crate::routing::routed_block_forward(
                &mut tape, h, cond, &lp, model.config.heads, bin, true,
            )
            .unwrap();
            tape.data(out).to_vec()
        };
        let lo = run_branch(0.1);
        let hi = run_branch(0.2);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let h = tape.constant(h_data.clone(), vec![n, d]);
        let cond = tape.constant(cond_data.clone(), vec![1, d]);
        let lp = bound.layer(&model.layout, 0);
        let rv = tape.scalar(r, true);
        let (out, _) =
            diffcr_block_forward(&mut tape, h, cond, &lp, model.config.heads, rv, true).unwrap();
        let q = query_bins(r).unwrap();
        for i in 0..n * d {
            let manual = q.w_lo * lo[i] + q.w_hi * hi[i];
            assert!(
                (tape.data(out)[i] - manual).abs() < 1e-12,
                "elem {i}: {} vs {manual}",
                tape.data(out)[i]
            );
        }
    }

    #[test]
    fn on_bin_ratio_equals_single_branch() {
        let (model, h_data, cond_data) = fixture();
        let n = model.config.n_tokens();
        let d = model.config.hidden_dim;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let h = tape.constant(h_data.clone(), vec![n, d]);
        let cond = tape.constant(cond_data.clone(), vec![1, d]);
        let lp = bound.layer(&model.layout, 0);
        let rv = tape.scalar(0.3, true);
        let (out, _) =
            diffcr_block_forward(&mut tape, h, cond, &lp, model.config.heads, rv, true).unwrap();
        let single = {
            let mut tp = Tape::new();
            let bd = model.bind(&mut tp, false);
            let hh = tp.constant(h_data.clone(), vec![n, d]);
            let cc = tp.constant(cond_data.clone(), vec![1, d]);
            let lp2 = bd.layer(&model.layout, 0);
            let (o, _) = crate::routing::routed_block_forward(
                &mut tp, hh, cc, &lp2, model.config.heads, 0.3, true,
            )
            .unwrap();
            tp.data(o).to_vec()
        };
        assert_eq!(tape.data(out), &single[..]);
    }

    #[test]
    fn zero_init_table_starts_uncompressed() {
        let table = RatioTable::zeros(8, 4);
        for &v in table.values() {
            let q = query_bins(v).unwrap();
            assert_eq!((q.lo, q.hi, q.w_lo, q.w_hi), (0, 1, 1.0, 0.0));
        }
    }

    #[test]
    fn ratio_gradient_matches_finite_differences_within_cell() {
        let (model, h_data, cond_data) = fixture();
        let n = model.config.n_tokens();
        let d = model.config.hidden_dim;
        let eval = |r: f64| -> f64 {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let h = tape.constant(h_data.clone(), vec![n, d]);
            let cond = tape.constant(cond_data.clone(), vec![1, d]);
            let lp = bound.layer(&model.layout, 0);
            let rv = tape.scalar(r, true);
            let (out, _) =
                diffcr_block_forward(&mut tape, h, cond, &lp, model.config.heads, rv, true).unwrap();
            let zeros = tape.constant(vec![0.0; n * d], vec![n, d]);
            let l = tape_mse(&mut tape, out, zeros);
            tape.value(l)
        };
        let r0 = 0.34;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let h = tape.constant(h_data.clone(), vec![n, d]);
        let cond = tape.constant(cond_data.clone(), vec![1, d]);
        let lp = bound.layer(&model.layout, 0);
        let rv = tape.scalar(r0, true);
        let (out, _) =
            diffcr_block_forward(&mut tape, h, cond, &lp, model.config.heads, rv, true).unwrap();
        let zeros = tape.constant(vec![0.0; n * d], vec![n, d]);
        let loss = tape_mse(&mut tape, out, zeros);
        tape.backward(loss).unwrap();
        let got = tape.grad(rv).unwrap()[0];
        let step = 1e-4;
        let fd = (eval(r0 + step) - eval(r0 - step)) / (2.0 * step);
        assert!(
            ((got - fd) / fd.abs().max(1e-12)).abs() < 1e-4,
            "analytic {got} vs fd {fd}"
        );
    }

    fn tape_mse(tape: &mut Tape, a: Var, b: Var) -> Var {
        tape.mse_mean(a, b).unwrap()
    }
}
