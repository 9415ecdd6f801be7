//! Desk-scale diffusion transformer: patch embedding, timestep/class
//! conditioning, adaLN-modulated blocks, and the layer stack that routing
//! wraps.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ratio::{region_of_timestep, RatioTable};
use crate::rng::{stream, Rng};
use crate::routing::{routed_block_forward_scored, router_scores, SelectionRecord};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub train_timesteps: usize,
    pub sample_steps: usize,
    pub regions: usize,
    pub target_ratio: f64,
    pub ratio_loss_coeff: f64,
    pub cfg_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_side: 16,
            patch_side: 2,
            hidden_dim: 64,
            heads: 4,
            layers: 8,
            mlp_ratio: 4,
            classes: 10,
            train_timesteps: 200,
            sample_steps: 50,
            regions: 4,
            target_ratio: 0.3,
            ratio_loss_coeff: 0.3,
            cfg_scale: 4.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "image_side {} must be divisible by patch_side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::Config("hidden_dim must be even".into()));
        }
        if self.regions == 0 || self.regions > self.train_timesteps {
            return Err(Error::Config(format!(
                "regions {} must be in [1, train_timesteps {}]",
                self.regions, self.train_timesteps
            )));
        }
        if self.sample_steps == 0 || self.sample_steps > self.train_timesteps {
            return Err(Error::Config("sample_steps must be in [1, train_timesteps]".into()));
        }
        if !(0.0..=1.0).contains(&self.target_ratio) {
            return Err(Error::Config("target_ratio must be in [0, 1]".into()));
        }
        if self.ratio_loss_coeff < 0.0 {
            return Err(Error::Config("ratio_loss_coeff must be >= 0".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("need at least one layer".into()));
        }
        Ok(())
    }

    /// Tokens per image.
    pub fn n_tokens(&self) -> usize {
        let g = self.image_side / self.patch_side;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    /// Class id used for the unconditional branch.
    pub fn null_class(&self) -> usize {
        self.classes
    }
}

// ── Parameter storage ────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ParamArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Whether AdamW weight decay applies to this array.
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    pub arrays: Vec<ParamArray>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, decay: bool) -> usize {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        let id = self.arrays.len();
        self.index.insert(name.to_string(), id);
        self.arrays.push(ParamArray { name: name.to_string(), shape, data, decay });
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }
}

/// Indices of each semantic parameter inside the store.
#[derive(Clone, Debug)]
pub struct Layout {
    pub patch_w: usize,
    pub patch_b: usize,
    pub pos: usize,
    pub class_embed: usize,
    pub time_w: usize,
    pub time_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub layers: Vec<LayerLayout>,
    pub ratio_table: usize,
}

#[derive(Clone, Debug)]
pub struct LayerLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub ada_w: usize,
    pub ada_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub mlp_w1: usize,
    pub mlp_b1: usize,
    pub mlp_w2: usize,
    pub mlp_b2: usize,
    pub router_w: usize,
    pub router_b: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layout: Layout,
}

const INIT_STD: f64 = 0.02;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed, stream::INIT);
        let d = config.hidden_dim;
        let p2 = config.patch_dim();
        let n = config.n_tokens();
        let hid = config.mlp_ratio * d;
        let mut store = ParamStore::default();

        let normal = |shape: Vec<usize>, rng: &mut Rng| -> Vec<f64> {
            let mut v = vec![0.0; shape.iter().product()];
            rng.fill_normal(&mut v, INIT_STD);
            v
        };

        let patch_w = {
            let data = normal(vec![p2, d], &mut rng);
            store.add("patch_embed.w", vec![p2, d], data, true)
        };
        let patch_b = store.add("patch_embed.b", vec![d], vec![0.0; d], false);
        let pos = {
            let data = normal(vec![n, d], &mut rng);
            store.add("pos_embed", vec![n, d], data, true)
        };
        let class_embed = {
            // classes + 1: last row is the learned null class for CFG.
            let data = normal(vec![config.classes + 1, d], &mut rng);
            store.add("class_embed", vec![config.classes + 1, d], data, true)
        };
        let time_w = {
            let data = normal(vec![d, d], &mut rng);
            store.add("time_proj.w", vec![d, d], data, true)
        };
        let time_b = store.add("time_proj.b", vec![d], vec![0.0; d], false);

        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let pre = format!("layer{l}");
            let ln1_g = store.add(&format!("{pre}.ln1.g"), vec![d], vec![1.0; d], false);
            let ln1_b = store.add(&format!("{pre}.ln1.b"), vec![d], vec![0.0; d], false);
            // adaLN modulation starts at zero so conditioning fades in.
            let ada_w = store.add(&format!("{pre}.ada.w"), vec![d, 2 * d], vec![0.0; d * 2 * d], true);
            let ada_b = store.add(&format!("{pre}.ada.b"), vec![2 * d], vec![0.0; 2 * d], false);
            let wq = {
                let data = normal(vec![d, d], &mut rng);
                store.add(&format!("{pre}.attn.wq"), vec![d, d], data, true)
            };
            let wk = {
                let data = normal(vec![d, d], &mut rng);
                store.add(&format!("{pre}.attn.wk"), vec![d, d], data, true)
            };
            let wv = {
                let data = normal(vec![d, d], &mut rng);
                store.add(&format!("{pre}.attn.wv"), vec![d, d], data, true)
            };
            let wo = {
                let data = normal(vec![d, d], &mut rng);
                store.add(&format!("{pre}.attn.wo"), vec![d, d], data, true)
            };
            let ln2_g = store.add(&format!("{pre}.ln2.g"), vec![d], vec![1.0; d], false);
            let ln2_b = store.add(&format!("{pre}.ln2.b"), vec![d], vec![0.0; d], false);
            let mlp_w1 = {
                let data = normal(vec![d, hid], &mut rng);
                store.add(&format!("{pre}.mlp.w1"), vec![d, hid], data, true)
            };
            let mlp_b1 = store.add(&format!("{pre}.mlp.b1"), vec![hid], vec![0.0; hid], false);
            let mlp_w2 = {
                let data = normal(vec![hid, d], &mut rng);
                store.add(&format!("{pre}.mlp.w2"), vec![hid, d], data, true)
            };
            let mlp_b2 = store.add(&format!("{pre}.mlp.b2"), vec![d], vec![0.0; d], false);
            // Zero router weights: every token starts at importance 0.5.
            let router_w = store.add(&format!("{pre}.router.w"), vec![d, 1], vec![0.0; d], false);
            let router_b = store.add(&format!("{pre}.router.b"), vec![1], vec![0.0], false);
            layers.push(LayerLayout {
                ln1_g, ln1_b, ada_w, ada_b, wq, wk, wv, wo, ln2_g, ln2_b,
                mlp_w1, mlp_b1, mlp_w2, mlp_b2, router_w, router_b,
            });
        }

        let head_w = {
            let data = normal(vec![d, p2], &mut rng);
            store.add("head.w", vec![d, p2], data, true)
        };
        let head_b = store.add("head.b", vec![p2], vec![0.0; p2], false);

        // Ratio table starts at exactly zero: the uncompressed model.
        let ratio_table = store.add(
            "ratio_table",
            vec![config.layers, config.regions],
            vec![0.0; config.layers * config.regions],
            false,
        );

        let layout = Layout {
            patch_w, patch_b, pos, class_embed, time_w, time_b, head_w, head_b,
            layers, ratio_table,
        };
        Ok(Model { config, store, layout })
    }

    /// Zero the output-side projections so every block (and the head) is the
    /// identity / zero map. Used by tests of the zero-init contract.
    pub fn zero_output_projections(&mut self) {
        for l in 0..self.config.layers {
            let ll = self.layout.layers[l].clone();
            for id in [ll.wo, ll.mlp_w2] {
                self.store.arrays[id].data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        for id in [self.layout.head_w, self.layout.head_b] {
            self.store.arrays[id].data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn ratio_table(&self) -> RatioTable {
        RatioTable::from_values(
            self.config.layers,
            self.config.regions,
            self.store.arrays[self.layout.ratio_table].data.clone(),
        )
    }

    pub fn set_ratio_table(&mut self, table: &RatioTable) {
        self.store.arrays[self.layout.ratio_table].data = table.values().to_vec();
    }

    /// Record every parameter array as a leaf on `tape`, in store order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self
            .store
            .arrays
            .iter()
            .map(|a| tape.leaf(a.data.clone(), a.shape.clone(), requires_grad))
            .collect();
        Bound { vars }
    }
}

/// Tape leaves for every parameter array of one forward pass.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, store_id: usize) -> Var {
        self.vars[store_id]
    }

    pub fn layer<'m>(&self, layout: &'m Layout, l: usize) -> LayerVars {
        let ll = &layout.layers[l];
        LayerVars {
            ln1_g: self.var(ll.ln1_g),
            ln1_b: self.var(ll.ln1_b),
            ada_w: self.var(ll.ada_w),
            ada_b: self.var(ll.ada_b),
            wq: self.var(ll.wq),
            wk: self.var(ll.wk),
            wv: self.var(ll.wv),
            wo: self.var(ll.wo),
            ln2_g: self.var(ll.ln2_g),
            ln2_b: self.var(ll.ln2_b),
            mlp_w1: self.var(ll.mlp_w1),
            mlp_b1: self.var(ll.mlp_b1),
            mlp_w2: self.var(ll.mlp_w2),
            mlp_b2: self.var(ll.mlp_b2),
            router_w: self.var(ll.router_w),
            router_b: self.var(ll.router_b),
        }
    }
}

/// One layer's parameters as tape vars.
#[derive(Clone, Copy)]
pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ada_w: Var,
    pub ada_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub router_w: Var,
    pub router_b: Var,
}

// ── Tokenization ─────────────────────────────────────────────────────

/// Split a side x side image into row-major patch tokens of patch_side^2
/// values each. Token i covers patch (i / grid, i % grid).
pub fn patchify(image: &[f64], side: usize, patch: usize) -> Result<Vec<f64>> {
    if image.len() != side * side || side % patch != 0 {
        return Err(Error::Config(format!(
            "patchify: image of {} pixels does not match side {side} / patch {patch}",
            image.len()
        )));
    }
    let grid = side / patch;
    let mut out = Vec::with_capacity(side * side);
    for py in 0..grid {
        for px in 0..grid {
            for dy in 0..patch {
                for dx in 0..patch {
                    out.push(image[(py * patch + dy) * side + px * patch + dx]);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of `patchify` on raw token values.
pub fn unpatchify(tokens: &[f64], side: usize, patch: usize) -> Result<Vec<f64>> {
    if tokens.len() != side * side || side % patch != 0 {
        return Err(Error::Config(format!(
            "unpatchify: {} values do not match side {side} / patch {patch}",
            tokens.len()
        )));
    }
    let grid = side / patch;
    let p2 = patch * patch;
    let mut out = vec![0.0; side * side];
    for (i, chunk) in tokens.chunks(p2).enumerate() {
        let (py, px) = (i / grid, i % grid);
        for dy in 0..patch {
            for dx in 0..patch {
                out[(py * patch + dy) * side + px * patch + dx] = chunk[dy * patch + dx];
            }
        }
    }
    Ok(out)
}

/// Sinusoidal timestep embedding of width `dim`.
pub fn timestep_embedding(t: usize, dim: usize, max_t: usize) -> Result<Vec<f64>> {
    if t >= max_t {
        return Err(Error::Arg(format!("timestep {t} out of range [0, {max_t})")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    Ok(out)
}

// ── Block and model forward ──────────────────────────────────────────

/// Residual update U of one block: the unrouted layer output is H + U.
/// Attention runs over the provided rows only.
pub fn block_forward(tape: &mut Tape, h: Var, cond: Var, lp: &LayerVars, heads: usize) -> Result<Var> {
    // adaLN shift/scale from the condition vector.
    let modp = tape.matmul(cond, lp.ada_w)?;
    let modp = tape.add_row_vec(modp, lp.ada_b)?;
    let d = tape.shape(h)[1];
    let shift = tape.slice_cols(modp, 0, d)?;
    let shift = shift_to_vec(tape, shift);
    let scale = tape.slice_cols(modp, d, d)?;
    let scale = shift_to_vec(tape, scale);

    let a1 = tape.layernorm_lastdim(h)?;
    let a1 = tape.mul_row_vec(a1, lp.ln1_g)?;
    let a1 = tape.add_row_vec(a1, lp.ln1_b)?;
    let one_plus = tape.add_const(scale, 1.0);
    let a1 = tape.mul_row_vec(a1, one_plus)?;
    let a1 = tape.add_row_vec(a1, shift)?;

    let q = tape.matmul(a1, lp.wq)?;
    let k = tape.matmul(a1, lp.wk)?;
    let v = tape.matmul(a1, lp.wv)?;
    let att = tape.attention(q, k, v, heads)?;
    let att = tape.matmul(att, lp.wo)?;

    let h2 = tape.add(h, att)?;
    let a2 = tape.layernorm_lastdim(h2)?;
    let a2 = tape.mul_row_vec(a2, lp.ln2_g)?;
    let a2 = tape.add_row_vec(a2, lp.ln2_b)?;
    let m = tape.matmul(a2, lp.mlp_w1)?;
    let m = tape.add_row_vec(m, lp.mlp_b1)?;
    let m = tape.gelu(m);
    let m = tape.matmul(m, lp.mlp_w2)?;
    let m = tape.add_row_vec(m, lp.mlp_b2)?;

    tape.add(att, m)
}

// A (1, d) row reshaped to a plain d-vector for row broadcasting.
fn shift_to_vec(tape: &mut Tape, v: Var) -> Var {
    // slice_cols keeps 2-D shape; row-vec ops only look at element count,
    // so a (1, d) tensor is already usable. Kept as a named hook for clarity.
    let _ = tape;
    v
}

/// How each layer treats its tokens during a forward pass.
pub enum RatioMode<'a> {
    /// No routing at all: plain DiT.
    Dense,
    /// One snapped bin per layer, chosen by the timestep's region.
    Snapped(&'a RatioTable),
    /// Two-branch training forward; one learnable scalar var per layer.
    TwoBranch(&'a [Var]),
}

pub struct ForwardOptions {
    /// Multiply selected residual updates by the router score.
    pub rescale: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { rescale: true }
    }
}

pub struct ForwardResult {
    /// Predicted noise in token layout (N x patch_dim).
    pub eps_tokens: Var,
    /// Per-layer selection records (None for dense layers).
    pub records: Vec<Option<SelectionRecord>>,
}

/// Full model forward on one image. Output shape equals input shape after
/// `unpatchify`.
pub fn model_forward(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    x_t: &[f64],
    t: usize,
    class: usize,
    mode: RatioMode<'_>,
    opts: &ForwardOptions,
) -> Result<ForwardResult> {
    let cfg = &model.config;
    if t >= cfg.train_timesteps {
        return Err(Error::Arg(format!(
            "timestep {t} out of range [0, {})",
            cfg.train_timesteps
        )));
    }
    if class > cfg.classes {
        return Err(Error::Arg(format!(
            "class {class} out of range [0, {}] (null class = {})",
            cfg.classes,
            cfg.null_class()
        )));
    }
    let n = cfg.n_tokens();
    let p2 = cfg.patch_dim();
    let tokens = patchify(x_t, cfg.image_side, cfg.patch_side)?;
    let tok = tape.constant(tokens, vec![n, p2]);
    let mut h = tape.matmul(tok, bound.var(model.layout.patch_w))?;
    h = tape.add_row_vec(h, bound.var(model.layout.patch_b))?;
    h = tape.add(h, bound.var(model.layout.pos))?;

    // Condition vector: projected sinusoidal timestep + learned class embedding.
    let temb = timestep_embedding(t, cfg.hidden_dim, cfg.train_timesteps)?;
    let temb = tape.constant(temb, vec![1, cfg.hidden_dim]);
    let mut cond = tape.matmul(temb, bound.var(model.layout.time_w))?;
    cond = tape.add_row_vec(cond, bound.var(model.layout.time_b))?;
    let class_row = tape.gather_rows(bound.var(model.layout.class_embed), &[class])?;
    cond = tape.add(cond, class_row)?;

    let region = region_of_timestep(t, cfg.train_timesteps, cfg.regions)?;
    let mut records = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let lp = bound.layer(&model.layout, l);
        match &mode {
            RatioMode::Dense => {
                let u = block_forward(tape, h, cond, &lp, cfg.heads)?;
                h = tape.add(h, u)?;
                records.push(None);
            }
            RatioMode::Snapped(table) => {
                let bin = table.bin_tenths(l, region)?;
                let scores = router_scores(tape, h, lp.router_w, lp.router_b)?;
                let (out, rec) =
                    routed_block_forward_scored(tape, h, cond, &lp, cfg.heads, scores, bin, opts.rescale)?;
                h = out;
                records.push(Some(rec));
            }
            RatioMode::TwoBranch(r_vars) => {
                let (out, rec) = crate::ratio::diffcr_block_forward(
                    tape, h, cond, &lp, cfg.heads, r_vars[l], opts.rescale,
                )?;
                h = out;
                records.push(Some(rec));
            }
        }
    }

    let hf = tape.layernorm_lastdim(h)?;
    let mut out = tape.matmul(hf, bound.var(model.layout.head_w))?;
    out = tape.add_row_vec(out, bound.var(model.layout.head_b))?;
    Ok(ForwardResult { eps_tokens: out, records })
}
