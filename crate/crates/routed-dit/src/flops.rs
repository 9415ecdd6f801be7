//! Analytic FLOPs accounting (multiply-accumulates) under ratio assignments
//! and a wall-clock benchmark of the routing machinery.

use std::time::Instant;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::ratio::{region_of_timestep, RatioTable};
use crate::rng::{stream, Rng};
use crate::routing::{k_of_bin, topk_indices};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerFlops {
    pub router: u64,
    pub attention: u64,
    pub mlp: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.router + self.attention + self.mlp
    }
}

/// MAC counts of one routed layer processing k of n tokens at width d.
pub fn flops_of_layer(n: usize, k: usize, d: usize, mlp_ratio: usize) -> LayerFlops {
    assert!(k <= n, "k = {k} exceeds n = {n}");
    let (n, k, d, m) = (n as u64, k as u64, d as u64, mlp_ratio as u64);
    LayerFlops {
        router: n * d,
        attention: 4 * k * d * d + 2 * k * k * d,
        mlp: 2 * k * d * (m * d),
    }
}

/// Dense layer: every token processed, no router.
pub fn flops_of_dense_layer(n: usize, d: usize, mlp_ratio: usize) -> LayerFlops {
    let f = flops_of_layer(n, n, d, mlp_ratio);
    LayerFlops { router: 0, ..f }
}

#[derive(Clone, Debug)]
pub struct FlopsReport {
    /// Per-layer totals over the whole sampling run (routed).
    pub per_layer: Vec<LayerFlops>,
    pub routed_total: u64,
    pub dense_total: u64,
    /// 1 - routed / dense; negative means router overhead dominates.
    pub savings: f64,
}

/// Totals over a full sampling run: layers x respaced steps x 2 CFG branches.
pub fn flops_of_run(cfg: &ModelConfig, table: &RatioTable) -> Result<FlopsReport> {
    cfg.validate()?;
    if table.layers() != cfg.layers || table.regions() != cfg.regions {
        return Err(Error::Arg(format!(
            "table is {}x{}, config wants {}x{}",
            table.layers(),
            table.regions(),
            cfg.layers,
            cfg.regions
        )));
    }
    let n = cfg.n_tokens();
    let ts = crate::diffusion::respaced_timesteps(cfg.train_timesteps, cfg.sample_steps);
    const CFG_BRANCHES: u64 = 2;
    let mut per_layer = vec![LayerFlops { router: 0, attention: 0, mlp: 0 }; cfg.layers];
    for &t in &ts {
        let region = region_of_timestep(t, cfg.train_timesteps, cfg.regions)?;
        for (l, acc) in per_layer.iter_mut().enumerate() {
            let bin = table.bin_tenths(l, region)?;
            let k = k_of_bin(bin, n);
            let f = flops_of_layer(n, k, cfg.hidden_dim, cfg.mlp_ratio);
            acc.router += f.router * CFG_BRANCHES;
            acc.attention += f.attention * CFG_BRANCHES;
            acc.mlp += f.mlp * CFG_BRANCHES;
        }
    }
    let routed_total: u64 = per_layer.iter().map(LayerFlops::total).sum();
    let dense_per_step = flops_of_dense_layer(n, cfg.hidden_dim, cfg.mlp_ratio).total();
    let dense_total = dense_per_step * cfg.layers as u64 * ts.len() as u64 * CFG_BRANCHES;
    let savings = 1.0 - routed_total as f64 / dense_total as f64;
    Ok(FlopsReport { per_layer, routed_total, dense_total, savings })
}

// ── Wall-clock benchmark ─────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct BenchRow {
    pub ratio: f64,
    pub dense_us: f64,
    pub routed_us: f64,
    /// Time spent in score + topk + gather + scatter alone, as a fraction of
    /// the dense layer time.
    pub overhead_frac: f64,
}

struct BenchBlock {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    w1: Array2<f64>,
    w2: Array2<f64>,
    router_w: Array1<f64>,
    router_b: f64,
    heads: usize,
}

impl BenchBlock {
    fn new(d: usize, heads: usize, rng: &mut Rng) -> Self {
        let mat = |r: usize, c: usize, rng: &mut Rng| {
            Array2::from_shape_fn((r, c), |_| rng.normal() * 0.02)
        };
        BenchBlock {
            wq: mat(d, d, rng),
            wk: mat(d, d, rng),
            wv: mat(d, d, rng),
            wo: mat(d, d, rng),
            w1: mat(d, 4 * d, rng),
            w2: mat(4 * d, d, rng),
            router_w: Array1::from_shape_fn(d, |_| rng.normal() * 0.02),
            router_b: 0.0,
            heads,
        }
    }

    fn scores(&self, h: &Array2<f64>) -> Vec<f64> {
        h.dot(&self.router_w)
            .iter()
            .map(|&x| 1.0 / (1.0 + (-(x + self.router_b)).exp()))
            .collect()
    }

    /// Attention + MLP over the given rows, returning the residual update.
    fn block(&self, h: &Array2<f64>) -> Array2<f64> {
        let k_rows = h.nrows();
        let d = h.ncols();
        let dh = d / self.heads;
        let q = h.dot(&self.wq);
        let key = h.dot(&self.wk);
        let v = h.dot(&self.wv);
        let mut att = Array2::zeros((k_rows, d));
        let scale = 1.0 / (dh as f64).sqrt();
        for head in 0..self.heads {
            let cols = head * dh..(head + 1) * dh;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = key.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut s = qh.dot(&kh.t());
            s.mapv_inplace(|x| x * scale);
            for mut row in s.rows_mut() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            let oh = s.dot(&vh);
            att.slice_mut(ndarray::s![.., cols]).assign(&oh);
        }
        let att = att.dot(&self.wo);
        let mut m = (h + &att).dot(&self.w1);
        m.mapv_inplace(|x| x * 0.5 * (1.0 + (x * 0.7978845608028654 * (1.0 + 0.044715 * x * x)).tanh()));
        att + m.dot(&self.w2)
    }

    fn dense_forward(&self, h: &Array2<f64>) -> Array2<f64> {
        h + &self.block(h)
    }

    fn routed_forward(&self, h: &Array2<f64>, bin: u8) -> Array2<f64> {
        let n = h.nrows();
        let k = k_of_bin(bin, n);
        let scores = self.scores(h);
        let idx = topk_indices(&scores, k).expect("k <= n");
        if k == 0 {
            return h.clone();
        }
        let gathered = gather(h, &idx);
        let u = self.block(&gathered);
        let mut out = h.clone();
        for (pos, &i) in idx.iter().enumerate() {
            for c in 0..h.ncols() {
                out[[i, c]] += scores[i] * u[[pos, c]];
            }
        }
        out
    }

    /// Routing machinery only: score, topk, gather, scatter. No block math.
    fn machinery_only(&self, h: &Array2<f64>, bin: u8) -> Array2<f64> {
        let n = h.nrows();
        let k = k_of_bin(bin, n);
        let scores = self.scores(h);
        let idx = topk_indices(&scores, k).expect("k <= n");
        let gathered = gather(h, &idx);
        let mut out = h.clone();
        for (pos, &i) in idx.iter().enumerate() {
            for c in 0..h.ncols() {
                out[[i, c]] = gathered[[pos, c]];
            }
        }
        out
    }
}

fn gather(h: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), h.ncols()));
    for (pos, &i) in idx.iter().enumerate() {
        out.row_mut(pos).assign(&h.row(i));
    }
    out
}

fn median_us<F: FnMut() -> f64>(reps: usize, mut run: F) -> f64 {
    let mut times = Vec::with_capacity(reps);
    let mut sink = 0.0;
    for _ in 0..3 {
        sink += run(); // warm-up, excluded
    }
    for _ in 0..reps {
        let start = Instant::now();
        sink += run();
        times.push(start.elapsed().as_secs_f64() * 1e6);
    }
    std::hint::black_box(sink);
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = times.len() / 2;
    if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    }
}

/// Median per-layer latency of dense vs routed forward at each ratio bin.
pub fn benchmark_routing(
    n: usize,
    d: usize,
    ratios: &[f64],
    reps: usize,
) -> Result<Vec<BenchRow>> {
    if n == 0 || d == 0 || reps == 0 {
        return Err(Error::Arg("benchmark needs n, d, reps >= 1".into()));
    }
    let heads = if d % 4 == 0 { 4 } else { 1 };
    let mut rng = Rng::new(1, stream::BENCH);
    let blk = BenchBlock::new(d, heads, &mut rng);
    let h = Array2::from_shape_fn((n, d), |_| rng.normal());
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let bin = crate::routing::bin_from_f64(ratio)?;
        let dense_us = median_us(reps, || blk.dense_forward(&h).sum());
        let routed_us = median_us(reps, || blk.routed_forward(&h, bin).sum());
        let machinery_us = median_us(reps, || blk.machinery_only(&h, bin).sum());
        rows.push(BenchRow {
            ratio,
            dense_us,
            routed_us,
            overhead_frac: machinery_us / dense_us,
        });
    }
    Ok(rows)
}
