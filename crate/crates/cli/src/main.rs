mod ply;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pressmap_core::body_model::{BodyModel, ModelBank, PosedMesh};
use pressmap_core::fim::FimToggles;
use pressmap_core::losses::{compute_stats, GtView, NormStats};
use pressmap_core::metrics::{group_reports, GroupedReport, MetricReport};
use pressmap_core::nn::gradcheck::full_suite;
use pressmap_core::nn::train::{evaluate, evaluate_ws, train_supervised, train_ws, ImageData, TrainConfig, TrainHistory};
use pressmap_core::nn::{BodyMapNet, NetConfig, Normalization, WsNet};
use pressmap_core::pmt::PmtTensor;
use pressmap_core::projection::{project_gt, PressureImage, Reprojection, DEFAULT_Z_EPS};
use pressmap_core::synth::{make_dataset, Cover, Dataset, DatasetView, PoseCategory, SynthConfig};

#[derive(Parser)]
#[command(name = "pressmap", version, about = "Body mesh and per-vertex pressure maps from depth and pressure-mat images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a toy female/male body model pair.
    Model {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 690)]
        n_v: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Generate a synthetic dataset.
    Gen {
        /// Generator config (JSON); a balanced set is used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Sample count for the balanced default config.
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute loss normalization statistics of a dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        filter: Filter,
        /// JSON output; a PMT1 copy is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training of the mesh and pressure network.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Feature sources for the per-vertex head, e.g. `xyz,image`.
        #[arg(long)]
        fim_toggles: Option<String>,
        #[command(flatten)]
        filter: Filter,
        #[arg(long)]
        out: PathBuf,
    },
    /// Weakly supervised training of the pressure head from images only.
    TrainWs {
        #[arg(long)]
        data: PathBuf,
        /// Frozen mesh network checkpoint.
        #[arg(long)]
        mesh_net: PathBuf,
        /// Continue from an existing weakly supervised checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        fim_toggles: Option<String>,
        #[command(flatten)]
        filter: Filter,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against dataset ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Score pressure from this weakly supervised head instead.
        #[arg(long)]
        ws: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = GroupBy::None)]
        group_by: GroupBy,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[command(flatten)]
        filter: Filter,
        /// Report file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Move pressure between a mat image and mesh vertices.
    Project {
        #[arg(value_enum)]
        direction: Direction,
        /// Pressure image (to3d input, or grid geometry source for to2d).
        #[arg(long)]
        pressure: PathBuf,
        /// Vertex positions as a PMT1 `[n, 3]` tensor.
        #[arg(long)]
        mesh: PathBuf,
        /// Per-vertex pressure (to2d input).
        #[arg(long)]
        vertex_pressure: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_Z_EPS)]
        z_eps: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the vertex pressure as a colored PLY mesh.
        #[arg(long)]
        ply: Option<PathBuf>,
        /// Body model directory providing faces for the PLY export.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately corrupt the backward pass of one op.
        #[arg(long)]
        corrupt_vjp: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args, Default)]
struct Filter {
    /// Comma-separated pose categories to keep.
    #[arg(long)]
    pose_filter: Option<String>,
    /// Comma-separated cover conditions to keep.
    #[arg(long)]
    cover_filter: Option<String>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum GroupBy {
    None,
    Cover,
    PoseCategory,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Direction {
    To3d,
    To2d,
}

/// Network and optimizer settings read from `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    net: NetConfig,
    train: TrainConfig,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Model { out, n_v, seed } => {
            ModelBank::toy(n_v, seed)?.save(&out)?;
            println!("wrote models to {}", out.display());
        }
        Command::Gen { config, seed, count, out } => {
            let mut cfg = match config {
                Some(p) => read_json::<SynthConfig>(&p)?,
                None => SynthConfig::balanced(count, 0),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let m = make_dataset(&cfg, &out)?;
            println!("wrote {} samples to {}", m.entries.len(), out.display());
        }
        Command::Stats { data, filter, out } => {
            let d = Dataset::load(&data)?;
            let v = filtered(&d, &filter)?;
            let s = stats_of(&d, &v)?;
            write_json(&out, &s)?;
            PmtTensor::f64(&[7], s.as_array().to_vec())?.save(out.with_extension("pmt"))?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Train {
            data,
            config,
            seed,
            fim_toggles,
            filter,
            out,
        } => {
            let run = run_config(config.as_deref(), seed, fim_toggles.as_deref())?;
            let d = Dataset::load(&data)?;
            let v = filtered(&d, &filter)?;
            let stats = stats_of(&d, &v)?;
            let norm = Normalization::from_targets(v.indices.iter().map(|&i| &d.samples[i].gt_params), stats.sigma_p)?;
            let mut net = BodyMapNet::new(run.net.clone(), norm)?;
            let h = train_supervised(&mut net, &v, &d.models, &stats, &run.train)?;
            net.save(&out)?;
            finish_training(&out, &run, &h)?;
        }
        Command::TrainWs {
            data,
            mesh_net,
            init,
            config,
            seed,
            fim_toggles,
            filter,
            out,
        } => {
            let run = run_config(config.as_deref(), seed, fim_toggles.as_deref())?;
            let d = Dataset::load(&data)?;
            let v = filtered(&d, &filter)?;
            let mesh = BodyMapNet::load(&mesh_net)?;
            let mut ws = match init {
                Some(p) => WsNet::load(p)?,
                None => WsNet::new(NetConfig { fim: run.net.fim, ..mesh.config.clone() }, mesh.norm.clone())?,
            };
            let h = train_ws(&mut ws, &mesh, &v, &d.models, &run.train)?;
            if d.gt_pressure_reads() != 0 {
                bail!("weakly supervised training read ground-truth vertex pressure");
            }
            ws.save(&out)?;
            finish_training(&out, &run, &h)?;
        }
        Command::Eval {
            data,
            checkpoint,
            ws,
            group_by,
            format,
            filter,
            out,
        } => {
            let d = Dataset::load(&data)?;
            let v = filtered(&d, &filter)?;
            let threads = eval_threads()?;
            let net = BodyMapNet::load(&checkpoint)?;
            let reports = match ws {
                Some(p) => evaluate_ws(&WsNet::load(p)?, &net, &v, &d.models, threads)?,
                None => evaluate(&net, &v, &d.models, threads)?,
            };
            let labels: Vec<String> = (0..v.len())
                .map(|i| match group_by {
                    GroupBy::None => "all".to_string(),
                    GroupBy::Cover => v.cover(i).to_string(),
                    GroupBy::PoseCategory => v.pose_category(i).to_string(),
                })
                .collect();
            let g = group_reports(&reports, &labels)?;
            let text = match format {
                Format::Json => serde_json::to_string_pretty(&g)? + "\n",
                Format::Csv => to_csv(&g),
            };
            match out {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Project {
            direction,
            pressure,
            mesh,
            vertex_pressure,
            z_eps,
            out,
            ply,
            model,
        } => {
            let img = PressureImage::load(&pressure)?;
            let vertices = load_points(&mesh)?;
            let faces = match &model {
                Some(dir) => BodyModel::load(dir)?.faces,
                None => Default::default(),
            };
            let posed = PosedMesh::new(vertices, vec![], faces);
            let per_vertex = match direction {
                Direction::To3d => {
                    let vp = project_gt(&img, &posed, z_eps)?;
                    PmtTensor::f64(&[vp.len()], vp.clone())?.save(&out)?;
                    vp
                }
                Direction::To2d => {
                    let Some(vp_path) = vertex_pressure else {
                        bail!("to2d needs --vertex-pressure");
                    };
                    let vp = PmtTensor::load(&vp_path)?.to_f64();
                    let r = Reprojection::new(&posed, &img.geometry);
                    PressureImage::new(img.geometry, r.forward(&vp)?)?.save(&out)?;
                    vp
                }
            };
            if let Some(p) = ply {
                ply::write(&p, &posed, &per_vertex)?;
            }
            println!("wrote {}", out.display());
        }
        Command::Gradcheck { seed, corrupt_vjp, out } => {
            let report = full_suite(seed, corrupt_vjp.as_deref())?;
            for c in &report.checks {
                println!(
                    "{:<28} {} rel_err {:.3e} (tol {:.0e}, {} coords)",
                    c.name,
                    if c.passed { "ok  " } else { "FAIL" },
                    c.rel_err,
                    c.tolerance,
                    c.checked
                );
            }
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
            let failed = report.failures().len();
            if failed > 0 {
                bail!("{failed} of {} gradient checks failed", report.checks.len());
            }
            println!("all {} gradient checks passed", report.checks.len());
        }
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run_config(path: Option<&Path>, seed: Option<u64>, toggles: Option<&str>) -> Result<RunConfig> {
    let mut run = match path {
        Some(p) => read_json::<RunConfig>(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        run.train.seed = s;
        run.net.seed = s;
    }
    if let Some(t) = toggles {
        run.net.fim = FimToggles::parse(t)?;
    }
    run.net.validate()?;
    run.train.validate()?;
    Ok(run)
}

fn finish_training(out: &Path, run: &RunConfig, h: &TrainHistory) -> Result<()> {
    write_json(&out.join("history.json"), h)?;
    write_json(&out.join("run.json"), run)?;
    if let Some(last) = h.epoch_loss.last() {
        println!("trained {} epochs, final loss {last:.6}", h.epoch_loss.len());
    }
    println!("wrote checkpoint to {}", out.display());
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| anyhow::anyhow!("{e}")))
        .collect()
}

fn filtered<'a>(d: &'a Dataset, f: &Filter) -> Result<DatasetView<'a>> {
    let cats = f.pose_filter.as_deref().map(parse_list::<PoseCategory>).transpose()?;
    let covers = f.cover_filter.as_deref().map(parse_list::<Cover>).transpose()?;
    let v = d.filter(cats.as_deref(), covers.as_deref());
    if v.is_empty() {
        bail!("no samples match the filters");
    }
    Ok(v)
}

fn stats_of(d: &Dataset, v: &DatasetView<'_>) -> Result<NormStats> {
    Ok(compute_stats(v.indices.iter().map(|&i| {
        let s = &d.samples[i];
        GtView {
            params: &s.gt_params,
            mesh: &s.gt_mesh,
            pressure: &s.gt_vpm,
            contact: &s.gt_contact,
        }
    }))?)
}

fn eval_threads() -> Result<usize> {
    match std::env::var("PRESSMAP_THREADS") {
        Ok(s) => {
            let n: usize = s.trim().parse().with_context(|| format!("PRESSMAP_THREADS={s}"))?;
            Ok(n.max(1))
        }
        Err(_) => Ok(1),
    }
}

fn load_points(path: &Path) -> Result<Vec<[f64; 3]>> {
    let t = PmtTensor::load(path)?;
    let shape = t.shape();
    if shape.len() != 2 || shape[1] != 3 {
        bail!("{}: expected an [n, 3] tensor, got {shape:?}", path.display());
    }
    Ok(t.to_f64().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn to_csv(g: &GroupedReport) -> String {
    let parts: Vec<&String> = g.overall.mean.per_part_v2vp.keys().collect();
    let mut s = String::from("group,count,mpjpe_mm,pve_mm,height_cm,chest_cm,waist_cm,hips_cm,v2vp,v2vp_1ea,v2vp_2ea");
    for p in &parts {
        s.push_str(&format!(",v2vp_{p}"));
    }
    s.push('\n');
    let row = |name: &str, count: usize, m: &MetricReport| {
        let e = &m.shape_err_cm;
        let mut r = format!(
            "{name},{count},{},{},{},{},{},{},{},{},{}",
            m.mpjpe_mm, m.pve_mm, e.height, e.chest, e.waist, e.hips, m.v2vp, m.v2vp_1ea, m.v2vp_2ea
        );
        for p in &parts {
            r.push_str(&format!(",{}", m.per_part_v2vp.get(*p).copied().unwrap_or(f64::NAN)));
        }
        r.push('\n');
        r
    };
    s.push_str(&row("all", g.overall.count, &g.overall.mean));
    if !(g.groups.len() == 1 && g.groups.contains_key("all")) {
        for (k, v) in &g.groups {
            s.push_str(&row(k, v.count, &v.mean));
        }
    }
    s
}
