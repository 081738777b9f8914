//! `point2`: phantoms, rendering, datasets, training, registration and
//! evaluation from the command line.
//!
//! Exit status: 0 on success, 1 on invalid input (bad flags, config or files),
//! 2 on a numeric failure or a failed gradient check.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use point2::config::RunConfig;
use point2::gradcheck::{run_all, GradCheckConfig};
use point2::io;
use point2::phantom::make_phantom;
use point2::pipeline::{
    ablation_grid, ablation_mpd, ablation_run, eval_metrics, mpd, register_cases, Dataset,
    LossCurveRow, Tracker, TrackerKind,
};
use point2::pipeline::train::train_with_progress;
use point2::pipeline::{make_dataset, NetworkTracker};
use point2::tracknet::NetworkParams;
use point2::volume::{render_drr, RayIntegralConfig};
use point2::{Error, Result, RigidPose};

#[derive(Parser)]
#[command(name = "point2", version, about = "Multiview 2D/3D rigid registration by POI tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults are used for absent fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the dataset and training seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic phantom volume.
    Phantom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Number of blobs (0 gives an all-zero volume).
        #[arg(long)]
        blobs: Option<usize>,
        /// Cubic volume size in voxels.
        #[arg(long)]
        dims: Option<usize>,
    },
    /// Render a DRR of a volume.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pose JSON; identity when absent.
        #[arg(long)]
        pose: Option<PathBuf>,
        /// Index into the configured views.
        #[arg(long, default_value_t = 0)]
        view: usize,
    },
    /// Generate a train/test corpus.
    Dataset {
        #[command(flatten)]
        common: Common,
        /// Output directory; `manifest.json` is written at its root.
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage training; writes per-view parameters and the loss curve.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stage1_epochs: Option<usize>,
        #[arg(long)]
        stage2_epochs: Option<usize>,
    },
    /// Track every POI of a split; writes the peaks CSV and prints mPD.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Register every case of a split; writes JSON-lines records.
    Register {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Directory written by `train`; required unless `--oracle`.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Use the ground-truth 2D positions instead of a network.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Summarize registration records into the metrics CSV.
    Eval {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and measure every tracking configuration; writes the mPD table.
    Ablation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the tracked and true points of every configuration.
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long)]
        stage1_epochs: Option<usize>,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Random scalars checked on the default-sized network (0 skips it).
        #[arg(long, default_value_t = 300)]
        desk_samples: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

fn split_cases(ds: &Dataset, split: Split) -> Vec<usize> {
    match split {
        Split::Train => ds.train.clone(),
        Split::Test => ds.test.clone(),
        Split::All => (0..ds.cases.len()).collect(),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.dataset.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn params_path(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("view{view}.json"))
}

fn read_network(dir: &Path, views: usize) -> Result<Vec<NetworkParams>> {
    (0..views).map(|i| io::read_params(&params_path(dir, i))).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom {
            common,
            out,
            blobs,
            dims,
        } => {
            let cfg = load_config(&common)?;
            let mut spec = cfg.phantom().clone();
            if let Some(n) = blobs {
                spec.n_blobs = n;
            }
            if let Some(d) = dims {
                spec.dims = [d; 3];
            }
            if let Some(s) = common.seed {
                spec.rng_seed = s;
            }
            io::write_volume(&out, &make_phantom(&spec)?)
        }
        Command::Render {
            common,
            volume,
            out,
            pose,
            view,
        } => {
            let cfg = load_config(&common)?;
            let vol = io::read_volume(&volume)?;
            let pose = match pose {
                Some(p) => io::read_pose(&p)?,
                None => RigidPose::identity(),
            };
            let views = &cfg.dataset.views;
            let v = views
                .get(view)
                .ok_or_else(|| Error::validation("view", format!("index {view} but {} views configured", views.len())))?;
            let ray = cfg
                .ray_step_mm
                .map(|step_mm| RayIntegralConfig { step_mm })
                .unwrap_or_else(|| RayIntegralConfig::for_volume(&vol));
            io::write_image(&out, &render_drr(&vol, &pose, v, &cfg.dataset.geometry, &ray)?)
        }
        Command::Dataset { common, out } => {
            let cfg = load_config(&common)?;
            let ds = make_dataset(&cfg.dataset)?;
            create_dir(&out)?;
            io::write_dataset(&out, &ds)?;
            println!(
                "{} volumes, {} train cases, {} test cases",
                ds.volumes.len(),
                ds.train.len(),
                ds.test.len()
            );
            Ok(())
        }
        Command::Train {
            common,
            dataset,
            out,
            stage1_epochs,
            stage2_epochs,
        } => {
            let cfg = load_config(&common)?;
            let mut tcfg = cfg.train.clone();
            if let Some(e) = stage1_epochs {
                tcfg.stage1_epochs = e;
            }
            if let Some(e) = stage2_epochs {
                tcfg.stage2_epochs = e;
            }
            let ds = io::read_dataset(&dataset)?;
            create_dir(&out)?;
            let trained = train_with_progress(&ds, &tcfg, |r: &LossCurveRow| {
                eprintln!(
                    "stage {} epoch {:>3}: loss {:.6} (bce {:.6}, 3d {:.3})",
                    r.stage, r.epoch, r.loss, r.bce_term, r.tri_term
                )
            })?;
            let stage1 = out.join("stage1");
            create_dir(&stage1)?;
            for (i, (p, p1)) in trained.params.iter().zip(&trained.stage1_params).enumerate() {
                io::write_params(&params_path(&out, i), p)?;
                io::write_params(&params_path(&stage1, i), p1)?;
            }
            io::write_loss_curve(&out.join("loss_curve.csv"), &trained.curve)?;
            io::write_json(&out.join("train_config.json"), &tcfg)
        }
        Command::Track {
            common,
            dataset,
            params,
            out,
            split,
        } => {
            let cfg = load_config(&common)?;
            let ds = io::read_dataset(&dataset)?;
            let net = read_network(&params, ds.config.views.len())?;
            let tracker = NetworkTracker {
                params: &net,
                preprocess: cfg.train.preprocess,
            };
            let mut w = csv::Writer::from_path(&out).map_err(Error::from)?;
            w.write_record(["case_id", "view", "poi", "col", "row", "gt_col", "gt_row"])
                .map_err(Error::from)?;
            let (mut tracked, mut truth) = (Vec::new(), Vec::new());
            for ci in split_cases(&ds, split) {
                let c = &ds.cases[ci];
                for (v, xray) in c.xrays.iter().enumerate() {
                    let pois = ds.drr_pois_px(c.volume, v)?;
                    let found = tracker.track(v, &ds.drrs[c.volume][v], xray, &pois)?;
                    for (j, (r, g)) in found.into_iter().zip(&c.gt_pois_px[v]).enumerate() {
                        let (col, row) = match r {
                            Ok(p) => {
                                tracked.push(p);
                                truth.push(*g);
                                (p.x.to_string(), p.y.to_string())
                            }
                            Err(_) => (String::new(), String::new()),
                        };
                        w.write_record([
                            c.id.clone(),
                            v.to_string(),
                            j.to_string(),
                            col,
                            row,
                            g.x.to_string(),
                            g.y.to_string(),
                        ])
                        .map_err(Error::from)?;
                    }
                }
            }
            w.flush().map_err(|e| Error::io(&out, e))?;
            let m = mpd(&tracked, &truth, ds.config.geometry.pixel_spacing_mm)?;
            println!("mpd_mm={m} tracked={}", tracked.len());
            Ok(())
        }
        Command::Register {
            common,
            dataset,
            params,
            oracle,
            out,
            split,
        } => {
            let cfg = load_config(&common)?;
            let ds = io::read_dataset(&dataset)?;
            let cases = split_cases(&ds, split);
            let records = if oracle {
                register_cases(&ds, &cases, &TrackerKind::Oracle)?
            } else {
                let dir = params.ok_or_else(|| Error::validation("params", "required unless --oracle"))?;
                let net = read_network(&dir, ds.config.views.len())?;
                register_cases(
                    &ds,
                    &cases,
                    &TrackerKind::Network {
                        params: &net,
                        preprocess: cfg.train.preprocess,
                    },
                )?
            };
            io::write_records(&out, &records)
        }
        Command::Eval { records, out } => {
            let recs = io::read_records(&records)?;
            if recs.is_empty() {
                return Err(Error::validation("records", "no registration records"));
            }
            let m = eval_metrics(&recs)?;
            io::write_metrics(&out, &m)?;
            println!(
                "count={} mtre_p50={} mtre_p75={} mtre_p95={} gfr={} mean_time_s={}",
                m.count, m.mtre_p50, m.mtre_p75, m.mtre_p95, m.gfr, m.mean_time_s
            );
            Ok(())
        }
        Command::Ablation {
            common,
            dataset,
            out,
            points,
            stage1_epochs,
        } => {
            let cfg = load_config(&common)?;
            let mut tcfg = cfg.train.clone();
            if let Some(e) = stage1_epochs {
                tcfg.stage1_epochs = e;
            }
            let ds = io::read_dataset(&dataset)?;
            let results = ablation_run(&ds, &ablation_grid(), &tcfg)?;
            let mut w = csv::Writer::from_path(&out).map_err(Error::from)?;
            w.write_record(["kernel", "poi_selection", "weighted", "mpd_mm"])
                .map_err(Error::from)?;
            for r in &results {
                let side = 2 * r.config.kernel_radius + 1;
                // Recomputed from the stored points so the table and the
                // points file can never disagree.
                let m = ablation_mpd(&r.tracked_px, &r.gt_px, ds.config.geometry.pixel_spacing_mm)?;
                w.write_record([
                    format!("{side}x{side}"),
                    if r.config.random_pois { "random" } else { "provided" }.to_string(),
                    r.config.use_weight.to_string(),
                    m.to_string(),
                ])
                .map_err(Error::from)?;
            }
            w.flush().map_err(|e| Error::io(&out, e))?;
            if let Some(p) = points {
                io::write_json(&p, &results)?;
            }
            Ok(())
        }
        Command::Gradcheck { seeds, desk_samples } => {
            let reports = run_all(&GradCheckConfig {
                seeds,
                desk_samples,
                ..GradCheckConfig::default()
            })?;
            let failed = reports.iter().filter(|r| !r.passed()).count();
            for r in &reports {
                println!("{r}");
            }
            if failed > 0 {
                return Err(Error::GradientMismatch(failed));
            }
            Ok(())
        }
    }
}

/// One line: `error: <kind>[ field=<name>]: <message>`.
fn describe(e: &Error) -> String {
    let line = match e {
        Error::Validation { field, message } => format!("error: validation field={field}: {message}"),
        Error::Io { .. } | Error::Json(_) | Error::Csv(_) => format!("error: io: {e}"),
        _ if e.is_numeric() => format!("error: numeric: {e}"),
        _ => format!("error: input: {e}"),
    };
    line.replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    point2::init_thread_pool();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", describe(&e));
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
