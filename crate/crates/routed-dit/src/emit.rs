//! File emitters: ASCII PGM images, trajectory/heatmap/bench CSVs, and
//! router prediction maps. Every file carries the config hash in a comment.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flops::BenchRow;
use crate::model::{model_forward, ForwardOptions, Model, RatioMode};
use crate::ratio::RatioTable;
use crate::tensor::Tape;

/// Grayscale ASCII PGM (P2, maxval 255) from pixel values in [0, 1].
pub fn write_pgm(path: &Path, pixels: &[f64], width: usize, height: usize, cfg_hash: &str) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Dim(format!(
            "{} pixels do not fill {width}x{height}",
            pixels.len()
        )));
    }
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "P2")?;
    writeln!(f, "# cfg {cfg_hash}")?;
    writeln!(f, "{width} {height}")?;
    writeln!(f, "255")?;
    for row in pixels.chunks(width) {
        let line: Vec<String> = row
            .iter()
            .map(|&p| ((p.clamp(0.0, 1.0) * 255.0).round() as u32).to_string())
            .collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

/// One logged (step, layer, region) record of the training trajectory.
#[derive(Clone, Copy, Debug)]
pub struct TrajectoryRow {
    pub step: u64,
    pub layer: usize,
    pub region: usize,
    pub ratio: f64,
    pub batch_mean_ratio: f64,
    pub diffusion_loss: f64,
    pub ratio_loss: f64,
    pub total_loss: f64,
}

pub struct TrajectoryWriter {
    file: BufWriter<File>,
    last_step: Option<u64>,
}

impl TrajectoryWriter {
    pub fn create(path: &Path, cfg_hash: &str) -> Result<Self> {
        let mut file = BufWriter::new(File::create(path)?);
        writeln!(file, "# cfg {cfg_hash}")?;
        writeln!(
            file,
            "step,layer,region,ratio,batch_mean_ratio,diffusion_loss,ratio_loss,total_loss"
        )?;
        Ok(TrajectoryWriter { file, last_step: None })
    }

    /// Append rows for one step; steps must strictly increase.
    pub fn append(&mut self, rows: &[TrajectoryRow]) -> Result<()> {
        for r in rows {
            if let Some(last) = self.last_step {
                if r.step < last {
                    return Err(Error::Arg(format!(
                        "trajectory step {} after step {last}",
                        r.step
                    )));
                }
            }
            writeln!(
                self.file,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.layer,
                r.region,
                r.ratio,
                r.batch_mean_ratio,
                r.diffusion_loss,
                r.ratio_loss,
                r.total_loss
            )?;
            self.last_step = Some(r.step);
        }
        self.file.flush()?;
        Ok(())
    }
}

/// Layer x region ratio table as CSV: one row per layer, R value columns.
pub fn write_heatmap_csv(path: &Path, table: &RatioTable, cfg_hash: &str) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "# cfg {cfg_hash}")?;
    let header: Vec<String> = (0..table.regions()).map(|r| format!("region{r}")).collect();
    writeln!(f, "layer,{}", header.join(","))?;
    for l in 0..table.layers() {
        let vals: Vec<String> = (0..table.regions()).map(|r| table.get(l, r).to_string()).collect();
        writeln!(f, "{l},{}", vals.join(","))?;
    }
    f.flush()?;
    Ok(())
}

pub fn parse_heatmap_csv(path: &Path) -> Result<RatioTable> {
    let text = fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("heatmap csv has no header".into()))?;
    let regions = header.split(',').count().saturating_sub(1);
    if regions == 0 {
        return Err(Error::Format("heatmap csv header has no region columns".into()));
    }
    let mut values = Vec::new();
    let mut layers = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != regions + 1 {
            return Err(Error::Format(format!(
                "heatmap row `{line}` has {} fields, expected {}",
                fields.len(),
                regions + 1
            )));
        }
        for v in &fields[1..] {
            values.push(
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad ratio `{v}`")))?,
            );
        }
        layers += 1;
    }
    if layers == 0 {
        return Err(Error::Format("heatmap csv has no data rows".into()));
    }
    Ok(RatioTable::from_values(layers, regions, values))
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow], cfg_hash: &str) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "# cfg {cfg_hash}")?;
    writeln!(f, "ratio,dense_us,routed_us,overhead_frac")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.ratio, r.dense_us, r.routed_us, r.overhead_frac)?;
    }
    f.flush()?;
    Ok(())
}

/// Router prediction maps: one PGM grid of scores per (timestep, layer).
/// Returns the written paths.
pub fn emit_router_maps(
    model: &Model,
    table: &RatioTable,
    input: &[f64],
    timesteps: &[usize],
    out_dir: &Path,
    cfg_hash: &str,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let cfg = &model.config;
    let grid = cfg.image_side / cfg.patch_side;
    let mut paths = Vec::new();
    for &t in timesteps {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let fwd = model_forward(
            &mut tape,
            model,
            &bound,
            input,
            t,
            0,
            RatioMode::Snapped(table),
            &ForwardOptions::default(),
        )?;
        for (l, rec) in fwd.records.iter().enumerate() {
            let rec = rec
                .as_ref()
                .ok_or_else(|| Error::Arg("router maps need a routed forward".into()))?;
            let path = out_dir.join(format!("t{t:03}_l{l:02}.pgm"));
            write_pgm(&path, &rec.scores, grid, grid, cfg_hash)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn pgm_format_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        write_pgm(&path, &[0.0, 0.5, 1.0, 0.25], 2, 2, "abc").unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "P2");
        assert_eq!(lines[1], "# cfg abc");
        assert_eq!(lines[2], "2 2");
        assert_eq!(lines[3], "255");
        assert_eq!(lines[4], "0 128");
        assert_eq!(lines[5], "255 64");
    }

    #[test]
    fn pgm_rejects_wrong_pixel_count() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_pgm(&dir.path().join("x.pgm"), &[0.0; 3], 2, 2, "h").is_err());
    }

    #[test]
    fn heatmap_roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heatmap.csv");
        let table = RatioTable::from_values(3, 2, vec![0.0, 0.1, 0.5, 1.0, 0.3, 0.2]);
        write_heatmap_csv(&path, &table, "deadbeef").unwrap();
        let back = parse_heatmap_csv(&path).unwrap();
        assert_eq!(back, table);
        assert!(fs::read_to_string(&path).unwrap().starts_with("# cfg deadbeef"));
    }

    #[test]
    fn heatmap_roundtrip_unsnapped_values() {
        // Continuous (pre-snap) tables must survive the trip too.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let table = RatioTable::from_values(2, 2, vec![0.2871436223, 0.1, 1.0 / 3.0, 0.0]);
        write_heatmap_csv(&path, &table, "h").unwrap();
        assert_eq!(parse_heatmap_csv(&path).unwrap(), table);
    }

    #[test]
    fn heatmap_parse_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "# cfg x\nlayer,region0\n0,notanumber\n").unwrap();
        assert!(parse_heatmap_csv(&path).is_err());
        fs::write(&path, "# cfg x\n").unwrap();
        assert!(parse_heatmap_csv(&path).is_err());
    }

    #[test]
    fn trajectory_rejects_decreasing_steps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let mut w = TrajectoryWriter::create(&path, "h").unwrap();
        let row = |step| TrajectoryRow {
            step,
            layer: 0,
            region: 0,
            ratio: 0.0,
            batch_mean_ratio: 0.0,
            diffusion_loss: 1.0,
            ratio_loss: 0.0,
            total_loss: 1.0,
        };
        w.append(&[row(10)]).unwrap();
        w.append(&[row(20)]).unwrap();
        assert!(w.append(&[row(15)]).is_err());
    }

    #[test]
    fn fresh_router_maps_are_uniform_half() {
        let cfg = ModelConfig {
            image_side: 8,
            patch_side: 2,
            hidden_dim: 16,
            heads: 2,
            layers: 2,
            classes: 2,
            train_timesteps: 10,
            sample_steps: 5,
            regions: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg.clone(), 4).unwrap();
        let table = model.ratio_table();
        let dir = tempfile::tempdir().unwrap();
        let input = vec![0.2; cfg.image_side * cfg.image_side];
        let paths =
            emit_router_maps(&model, &table, &input, &[0, 9], dir.path(), "h").unwrap();
        assert_eq!(paths.len(), 4); // 2 timesteps x 2 layers
        for p in &paths {
            let text = fs::read_to_string(p).unwrap();
            let mut lines = text.lines();
            assert_eq!(lines.next(), Some("P2"));
            lines.next();
            assert_eq!(lines.next(), Some("4 4"));
            assert_eq!(lines.next(), Some("255"));
            for line in lines {
                // Zero-initialized router scores are exactly 0.5 -> 128.
                assert!(line.split(' ').all(|v| v == "128"), "{line}");
            }
        }
    }
}
