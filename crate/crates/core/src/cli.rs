//! Command-line front end: `run`, `synth`, `eval` and `render`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::dataset::load_sequence;
use crate::error::{Error, Result};
use crate::metrics::{ate_rmse, Trajectory};
use crate::pipeline::{run_sequence, InitMode, PipelineConfig};
use crate::se3::Pose;
use crate::splat::{export_render, render, CameraModel, GaussianMap};
use crate::synth::{synthesize_sequence, SyntheticSceneSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "vigs", version, about = "Visual-inertial Gaussian-splatting SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Track and map a sequence directory.
    Run {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_parser = parse_init)]
        init: Option<InitMode>,
        #[arg(long)]
        no_mapping: bool,
    },
    /// Generate a synthetic sequence from a scene spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Absolute trajectory error between two TUM files.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        no_align: bool,
    },
    /// Render a saved map from a camera-from-world pose.
    Render {
        #[arg(long)]
        map: PathBuf,
        /// "tx ty tz qx qy qz qw"
        #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
        pose: Pose,
        #[arg(long)]
        output: PathBuf,
    },
}

fn parse_init(s: &str) -> std::result::Result<InitMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_pose(s: &str) -> std::result::Result<Pose, String> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("{e}"))?;
    if v.len() != 7 {
        return Err(format!("expected 7 numbers, got {}", v.len()));
    }
    Pose::from_tum(&v).map_err(|e| e.to_string())
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Run {
            input,
            config,
            output,
            init,
            no_mapping,
        } => {
            let mut cfg = match config {
                Some(path) => PipelineConfig::load(&path)?,
                None => PipelineConfig::default(),
            };
            if let Some(mode) = init {
                cfg.init = mode;
            }
            if no_mapping {
                cfg.mapping_enabled = false;
            }
            cfg.output = Some(output.clone());
            let manifest = load_sequence(&input)?;
            let report = run_sequence(&manifest, &cfg)?;
            writeln!(out, "frames={}", report.trajectory.len())?;
            writeln!(out, "keyframes={}", report.keyframes.len())?;
            if let Some(ate) = report.metrics.ate_rmse {
                writeln!(out, "ate_rmse={ate:.6}")?;
            }
            if let Some(p) = report.metrics.mean_psnr() {
                writeln!(out, "psnr={p:.6}")?;
            }
            writeln!(out, "output={}", output.display())?;
        }
        Command::Synth { spec, output } => {
            let spec = SyntheticSceneSpec::load(&spec)?;
            let manifest = synthesize_sequence(&spec, &output)?;
            writeln!(out, "frames={}", manifest.len())?;
            writeln!(out, "imu_samples={}", manifest.imu.len())?;
            if let Some(gt) = &manifest.groundtruth {
                writeln!(out, "path_length={:.6}", gt.path_length())?;
            }
        }
        Command::Eval { est, reference, no_align } => {
            let est = Trajectory::load_tum(&est)?;
            let reference = Trajectory::load_tum(&reference)?;
            let (rmse, _) = ate_rmse(&est, &reference, !no_align)?;
            writeln!(out, "ate_rmse={rmse:.6}")?;
        }
        Command::Render { map, pose, output } => {
            let (map, intrinsics) = GaussianMap::load(&map)?;
            let intrinsics =
                intrinsics.ok_or_else(|| Error::invalid("map file has no `camera` line; cannot render"))?;
            let out_img = render(&map, &CameraModel::new(intrinsics, pose));
            export_render(&out_img, &output, None)?;
            writeln!(out, "wrote {}", output.display())?;
        }
    }
    Ok(())
}

/// Parse `argv` (program name first), run the command and return the exit
/// status: 0 on success, 1 on data errors, 2 on usage errors.
pub fn cli_main<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{rendered}")
            } else {
                write!(err, "{rendered}")
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DATA
        }
    }
}
