//! DDPM forward process, the joint training step (diffusion loss + ratio
//! loss), and a respaced ancestral sampler with classifier-free guidance.

use crate::dataset::ToyDataset;
use crate::error::{Error, Result};
use crate::model::{
    model_forward, patchify, unpatchify, Bound, ForwardOptions, Model, RatioMode,
};
use crate::optim::{AdamState, AdamW};
use crate::ratio::{batch_mean_ratio, ratio_mse_loss, region_of_timestep, RatioTable};
use crate::rng::{stream, Rng};
use crate::tensor::{Tape, Var};

// The canonical 1000-step DDPM range (1e-4 .. 0.02) compressed to the desk
// T=200 by the usual 1000/T scaling, so the terminal signal level is still
// negligible (abar_199 < 1e-4).
pub const BETA_START: f64 = 5e-4;
pub const BETA_END: f64 = 0.1;
/// Probability of swapping the class for the null class during training.
pub const UNCOND_DROPOUT: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Arg("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Arg(format!(
            "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
        )));
    }
    let mut betas = Vec::with_capacity(timesteps);
    for t in 0..timesteps {
        let frac = if timesteps == 1 { 0.0 } else { t as f64 / (timesteps - 1) as f64 };
        betas.push(beta_start + (beta_end - beta_start) * frac);
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(timesteps);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Vec<f64> {
    let ab = schedule.alpha_bars[t];
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| s0 * x + s1 * e).collect()
}

// ── Training ─────────────────────────────────────────────────────────

pub struct TrainBatch {
    /// Model-space images in [-1, 1].
    pub images: Vec<Vec<f64>>,
    /// Class id actually fed to the model (null class after dropout).
    pub classes: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub noise: Vec<Vec<f64>>,
}

/// One named stream per random decision so each is independently replayable.
pub struct TrainRngs {
    pub data: Rng,
    pub noise: Rng,
    pub timesteps: Rng,
    pub classes: Rng,
    pub dropout: Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        TrainRngs {
            data: Rng::new(seed, stream::DATA),
            noise: Rng::new(seed, stream::NOISE),
            timesteps: Rng::new(seed, stream::TIMESTEPS),
            classes: Rng::new(seed, stream::CLASSES),
            dropout: Rng::new(seed, stream::COND_DROPOUT),
        }
    }
}

pub fn draw_batch(
    dataset: &ToyDataset,
    model: &Model,
    batch_size: usize,
    rngs: &mut TrainRngs,
) -> Result<TrainBatch> {
    if batch_size == 0 {
        return Err(Error::Arg("batch size must be >= 1".into()));
    }
    let cfg = &model.config;
    let pixels = cfg.image_side * cfg.image_side;
    let mut images = Vec::with_capacity(batch_size);
    let mut classes = Vec::with_capacity(batch_size);
    let mut timesteps = Vec::with_capacity(batch_size);
    let mut noise = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let class = rngs.classes.uniform_int(dataset.classes as u64) as usize;
        images.push(dataset.sample(class, &mut rngs.data)?);
        let dropped = rngs.dropout.uniform() < UNCOND_DROPOUT;
        classes.push(if dropped { cfg.null_class() } else { class });
        timesteps.push(rngs.timesteps.uniform_int(cfg.train_timesteps as u64) as usize);
        let mut e = vec![0.0; pixels];
        rngs.noise.fill_normal(&mut e, 1.0);
        noise.push(e);
    }
    Ok(TrainBatch { images, classes, timesteps, noise })
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub total: f64,
    pub diffusion: f64,
    pub ratio: f64,
    /// Batch-mean ratio of the post-update table over this batch's regions.
    pub batch_mean_ratio: f64,
}

pub struct Trainer {
    pub model: Model,
    pub schedule: NoiseSchedule,
    pub opt: AdamW,
    pub states: Vec<AdamState>,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model) -> Result<Self> {
        let schedule = make_schedule(model.config.train_timesteps, BETA_START, BETA_END)?;
        let states = model
            .store
            .arrays
            .iter()
            .map(|a| AdamState::zeros(a.data.len()))
            .collect();
        Ok(Trainer { model, schedule, opt: AdamW::default(), states, step: 0 })
    }

    /// One joint optimization step. `lambda` is the effective ratio-loss
    /// coefficient for this step (constant unless a schedule is configured).
    pub fn train_step(&mut self, batch: &TrainBatch, lambda: f64) -> Result<StepStats> {
        let cfg = self.model.config.clone();
        let b = batch.images.len();
        if b == 0 {
            return Err(Error::Arg("empty batch".into()));
        }
        let layers = cfg.layers;
        let regions = cfg.regions;
        let table = self.model.ratio_table();

        let mut grads: Vec<Vec<f64>> = self
            .model
            .store
            .arrays
            .iter()
            .map(|a| vec![0.0; a.data.len()])
            .collect();
        let ratio_idx = self.model.layout.ratio_table;

        // Diffusion loss: one tape per sample, gradients summed in batch
        // order so accumulation is deterministic.
        let mut diff_sum = 0.0;
        for i in 0..b {
            let t = batch.timesteps[i];
            let region = region_of_timestep(t, cfg.train_timesteps, regions)?;
            let x_t = q_sample(&batch.images[i], t, &batch.noise[i], &self.schedule);
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, true);
            let r_vars: Vec<Var> = (0..layers)
                .map(|l| tape.scalar(table.get(l, region), true))
                .collect();
            let fwd = model_forward(
                &mut tape,
                &self.model,
                &bound,
                &x_t,
                t,
                batch.classes[i],
                RatioMode::TwoBranch(&r_vars),
                &ForwardOptions::default(),
            )?;
            let target_tok = patchify(&batch.noise[i], cfg.image_side, cfg.patch_side)?;
            let target = tape.constant(target_tok, vec![cfg.n_tokens(), cfg.patch_dim()]);
            let loss = tape.mse_mean(fwd.eps_tokens, target)?;
            let lv = tape.value(loss);
            if !lv.is_finite() {
                let (node, op) = tape.first_nonfinite().unwrap_or((loss.0, "mse_mean"));
                return Err(Error::NonFinite { op, node });
            }
            diff_sum += lv;
            let scaled = tape.scale(loss, 1.0 / b as f64);
            tape.backward(scaled)?;
            for (id, buf) in grads.iter_mut().enumerate() {
                if let Some(g) = tape.grad(bound.vars[id]) {
                    for (acc, gv) in buf.iter_mut().zip(g) {
                        *acc += gv;
                    }
                }
            }
            for (l, rv) in r_vars.iter().enumerate() {
                if let Some(g) = tape.grad(*rv) {
                    grads[ratio_idx][l * regions + region] += g[0];
                }
            }
        }
        let diffusion = diff_sum / b as f64;

        // Ratio loss on its own small tape over the table scalars.
        let mut rtape = Tape::new();
        let table_vars: Vec<Var> = table.values().iter().map(|&v| rtape.scalar(v, true)).collect();
        let rloss = ratio_mse_loss(
            &mut rtape,
            &table_vars,
            layers,
            regions,
            &batch.timesteps,
            cfg.train_timesteps,
            cfg.target_ratio,
            lambda,
        )?;
        let ratio = rtape.value(rloss);
        rtape.backward(rloss)?;
        for (e, tv) in table_vars.iter().enumerate() {
            if let Some(g) = rtape.grad(*tv) {
                grads[ratio_idx][e] += g[0];
            }
        }

        self.step += 1;
        for id in 0..grads.len() {
            let arr = &mut self.model.store.arrays[id];
            self.opt
                .step(&mut arr.data, &grads[id], &mut self.states[id], self.step, arr.decay)?;
        }
        // Keep ratios valid after the unconstrained update.
        for v in &mut self.model.store.arrays[ratio_idx].data {
            *v = v.clamp(0.0, 1.0);
        }

        let mean = batch_mean_ratio(
            &self.model.ratio_table(),
            &batch.timesteps,
            cfg.train_timesteps,
        )?;
        Ok(StepStats { total: diffusion + ratio, diffusion, ratio, batch_mean_ratio: mean })
    }
}

// ── Sampling ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    pub class: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    /// Ignore the ratio table and run the plain dense model.
    pub dense: bool,
    pub rescale: bool,
}

/// Guided noise estimate: eps_u + scale (eps_c - eps_u). Scale 1 returns the
/// conditional estimate unchanged.
pub fn guided_eps(cond: &[f64], uncond: &[f64], scale: f64) -> Vec<f64> {
    if scale == 1.0 {
        return cond.to_vec();
    }
    cond.iter().zip(uncond).map(|(c, u)| u + scale * (c - u)).collect()
}

/// Training-timestep indices of the respaced S-step subset, ascending.
pub fn respaced_timesteps(train_timesteps: usize, sample_steps: usize) -> Vec<usize> {
    (0..sample_steps).map(|i| i * train_timesteps / sample_steps).collect()
}

fn predict_eps(
    model: &Model,
    x: &[f64],
    t: usize,
    class: usize,
    table: Option<&RatioTable>,
    rescale: bool,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound: Bound = model.bind(&mut tape, false);
    let mode = match table {
        None => RatioMode::Dense,
        Some(tb) => RatioMode::Snapped(tb),
    };
    let fwd = model_forward(&mut tape, model, &bound, x, t, class, mode, &ForwardOptions { rescale })?;
    unpatchify(tape.data(fwd.eps_tokens), model.config.image_side, model.config.patch_side)
}

/// Ancestral DDPM sampling over the respaced subset, CFG via the learned
/// null class. Returns a model-space image clamped to [-1, 1].
pub fn sample(
    model: &Model,
    schedule: &NoiseSchedule,
    table: &RatioTable,
    opts: &SampleOptions,
) -> Result<Vec<f64>> {
    let cfg = &model.config;
    if opts.class >= cfg.classes {
        return Err(Error::Arg(format!(
            "class {} out of range [0, {})",
            opts.class, cfg.classes
        )));
    }
    if !opts.dense && !table.is_snapped() {
        return Err(Error::Arg("ratio table must be snapped before sampling".into()));
    }
    let ts = respaced_timesteps(cfg.train_timesteps, cfg.sample_steps);
    let pixels = cfg.image_side * cfg.image_side;
    let mut rng = Rng::new(opts.seed, stream::SAMPLER);
    let mut x = vec![0.0; pixels];
    rng.fill_normal(&mut x, 1.0);

    let tbl = if opts.dense { None } else { Some(table) };
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let eps_c = predict_eps(model, &x, t, opts.class, tbl, opts.rescale)?;
        let eps = if opts.cfg_scale == 1.0 {
            eps_c
        } else {
            let eps_u = predict_eps(model, &x, t, cfg.null_class(), tbl, opts.rescale)?;
            guided_eps(&eps_c, &eps_u, opts.cfg_scale)
        };
        let ab = schedule.alpha_bars[t];
        let ab_prev = if i > 0 { schedule.alpha_bars[ts[i - 1]] } else { 1.0 };
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let coef = beta / (1.0 - ab).sqrt();
        let inv_sqrt_a = 1.0 / alpha.sqrt();
        let sigma = if i > 0 {
            (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
        } else {
            0.0
        };
        for p in 0..pixels {
            let mean = inv_sqrt_a * (x[p] - coef * eps[p]);
            x[p] = if sigma > 0.0 { mean + sigma * rng.normal() } else { mean };
        }
    }
    for p in &mut x {
        *p = p.clamp(-1.0, 1.0);
    }
    Ok(x)
}
