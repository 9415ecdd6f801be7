//! Subcommand implementations behind the CLI surface.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{to_pixel_space, ToyDataset};
use crate::diffusion::{
    draw_batch, make_schedule, q_sample, sample, SampleOptions, Trainer, TrainRngs, BETA_END,
    BETA_START,
};
use crate::emit::{
    emit_router_maps, write_bench_csv, write_heatmap_csv, write_pgm, TrajectoryRow,
    TrajectoryWriter,
};
use crate::error::Result;
use crate::flops::{benchmark_routing, flops_of_run};
use crate::model::Model;
use crate::rng::{stream, Rng};

const CHECKPOINT_EVERY: u64 = 500;
const TRAJECTORY_EVERY: u64 = 10;

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out_dir);
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let hash = cfg.hash();

    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model)?;
    let dataset = ToyDataset::new(cfg.dataset_kind, cfg.model.classes, cfg.model.image_side)?;
    let mut rngs = TrainRngs::new(cfg.seed);
    let mut traj = TrajectoryWriter::create(&out.join("trajectory.csv"), &hash)?;

    if cfg.steps == 0 {
        Checkpoint::from_trainer(cfg, &trainer).save(&ckpt_dir.join("final.ckpt"))?;
        println!("steps = 0: wrote initial checkpoint only");
        return Ok(());
    }

    for step in 1..=cfg.steps {
        let batch = draw_batch(&dataset, &trainer.model, cfg.batch_size, &mut rngs)?;
        let lambda = cfg.effective_lambda(step);
        let stats = trainer.train_step(&batch, lambda)?;
        if step % TRAJECTORY_EVERY == 0 || step == cfg.steps {
            let table = trainer.model.ratio_table();
            let mut rows = Vec::with_capacity(cfg.model.layers * cfg.model.regions);
            for l in 0..cfg.model.layers {
                for r in 0..cfg.model.regions {
                    rows.push(TrajectoryRow {
                        step,
                        layer: l,
                        region: r,
                        ratio: table.get(l, r),
                        batch_mean_ratio: stats.batch_mean_ratio,
                        diffusion_loss: stats.diffusion,
                        ratio_loss: stats.ratio,
                        total_loss: stats.total,
                    });
                }
            }
            traj.append(&rows)?;
        }
        if step % CHECKPOINT_EVERY == 0 {
            Checkpoint::from_trainer(cfg, &trainer).save(&ckpt_dir.join(format!("step{step:06}.ckpt")))?;
        }
        if step % 100 == 0 || step == 1 {
            println!(
                "step {step}: diffusion {:.5} ratio {:.6} mean_ratio {:.4}",
                stats.diffusion, stats.ratio, stats.batch_mean_ratio
            );
        }
    }
    Checkpoint::from_trainer(cfg, &trainer).save(&ckpt_dir.join("final.ckpt"))?;
    println!("done: {} steps, outputs under {}", cfg.steps, out.display());
    Ok(())
}

pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub class: usize,
    pub count: usize,
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub dense: bool,
}

pub fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let trainer = ckpt.restore_trainer()?;
    let cfg = &ckpt.config;
    let hash = cfg.hash();
    let out = PathBuf::from(args.out.as_deref().unwrap_or(&cfg.out_dir));
    let samples_dir = out.join("samples");
    fs::create_dir_all(&samples_dir)?;

    let table = trainer.model.ratio_table().snap_for_inference();
    let schedule = make_schedule(cfg.model.train_timesteps, BETA_START, BETA_END)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    for i in 0..args.count {
        let opts = SampleOptions {
            class: args.class,
            cfg_scale: cfg.model.cfg_scale,
            seed: seed.wrapping_add(i as u64),
            dense: args.dense,
            rescale: true,
        };
        let img = sample(&trainer.model, &schedule, &table, &opts)?;
        let px = to_pixel_space(&img);
        let path = samples_dir.join(format!("class{}_{i:03}.pgm", args.class));
        write_pgm(&path, &px, cfg.model.image_side, cfg.model.image_side, &hash)?;
        println!("wrote {}", path.display());
    }

    let report = flops_of_run(&cfg.model, &table)?;
    println!(
        "flops: routed {} dense {} savings {:.4}{}",
        report.routed_total,
        report.dense_total,
        report.savings,
        if args.dense { " (images above used --dense)" } else { "" }
    );
    Ok(())
}

pub fn cmd_bench(n: usize, d: usize, ratios: &[f64], reps: usize, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let rows = benchmark_routing(n, d, ratios, reps)?;
    // Benchmarks have no config; stamp the parameters instead.
    let tag = format!("bench-n{n}-d{d}-reps{reps}");
    write_bench_csv(&out.join("bench.csv"), &rows, &tag)?;
    for r in &rows {
        println!(
            "ratio {:.1}: dense {:.1}us routed {:.1}us ({:.3}x) machinery {:.3} of dense",
            r.ratio,
            r.dense_us,
            r.routed_us,
            r.routed_us / r.dense_us,
            r.overhead_frac
        );
    }
    Ok(())
}

pub fn cmd_viz(checkpoint: &Path, out: Option<&str>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let trainer = ckpt.restore_trainer()?;
    let cfg = &ckpt.config;
    let hash = cfg.hash();
    let out = PathBuf::from(out.unwrap_or(&cfg.out_dir));
    fs::create_dir_all(&out)?;

    let table = trainer.model.ratio_table().snap_for_inference();
    write_heatmap_csv(&out.join("heatmap.csv"), &table, &hash)?;

    // Probe input: a noised class-0 image at each region's first timestep.
    let dataset = ToyDataset::new(cfg.dataset_kind, cfg.model.classes, cfg.model.image_side)?;
    let schedule = make_schedule(cfg.model.train_timesteps, BETA_START, BETA_END)?;
    let x0 = dataset.sample(0, &mut Rng::new(cfg.seed, stream::DATA))?;
    let t_of_region: Vec<usize> = (0..cfg.model.regions)
        .map(|r| r * cfg.model.train_timesteps / cfg.model.regions)
        .collect();
    let mut rng = Rng::new(cfg.seed, stream::NOISE);
    let mut maps = 0;
    for &t in &t_of_region {
        let mut eps = vec![0.0; x0.len()];
        rng.fill_normal(&mut eps, 1.0);
        let x_t = q_sample(&x0, t, &eps, &schedule);
        maps += emit_router_maps(&trainer.model, &table, &x_t, &[t], &out.join("maps"), &hash)?.len();
    }
    println!("wrote heatmap.csv and {maps} router maps under {}", out.display());

    // Per-region mean ratios for eyeballing the timestep pattern.
    for r in 0..cfg.model.regions {
        let mean: f64 =
            (0..cfg.model.layers).map(|l| table.get(l, r)).sum::<f64>() / cfg.model.layers as f64;
        let span_lo = r * cfg.model.train_timesteps / cfg.model.regions;
        let span_hi = (r + 1) * cfg.model.train_timesteps / cfg.model.regions;
        println!("region {r} (t {span_lo}..{span_hi}): mean snapped ratio {mean:.2}");
    }
    Ok(())
}

pub fn cmd_inspect(checkpoint: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    println!("version {}", crate::checkpoint::VERSION);
    println!("step {}", ckpt.step);
    println!("config hash {}", ckpt.config.hash());
    println!("arrays {}", ckpt.arrays.len());
    for a in &ckpt.arrays {
        println!("  {} {:?} ({} values)", a.name, a.shape, a.data.len());
    }
    Ok(())
}
