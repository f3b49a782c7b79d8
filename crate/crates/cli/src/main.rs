//! Command-line front end: feature extraction, registration, warping,
//! evaluation, synthetic cases and ensembles.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mindreg::deformation::{apply_warp, compose, invert_fixed_point, non_diffeomorphic_volume, warp_labels};
use mindreg::engine::{register_pair, RegistrationConfig, RegistrationResult, SimilaritySpace};
use mindreg::ensemble::{ensemble_average, run_ensemble, EnsembleConfig};
use mindreg::io::manifest::{read_json, read_landmarks, read_result, to_json, write_case, write_result};
use mindreg::io::nifti::{read_field, read_labels, read_scalar, read_volume, write_volume, VolumeData};
use mindreg::metrics::{dice, hd95, tre, DiceReport, TreReport};
use mindreg::mind::{mind_transform, MindParams, Offset, SIX_NEIGHBOURHOOD};
use mindreg::synth::{make_case, PhantomSpec};
use mindreg::volume::{MaskVolume, ScalarVolume, VectorField};
use mindreg::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "mindreg", version, about = "MIND-feature diffeomorphic B-spline registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Similarity {
    Mind,
    Raw,
}

#[derive(Clone, Copy, ValueEnum)]
enum Interp {
    Linear,
    Nearest,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the multichannel MIND feature volume of an image.
    Mind {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Gaussian patch weight width in voxels.
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        /// `six` or semicolon-separated integer triples such as `1,0,0;0,-1,0`.
        #[arg(long, default_value = "six")]
        offsets: String,
    },
    /// Register a moving image to a fixed image.
    Register {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        /// JSON registration settings; absent keys take built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dense forward field; stage structure goes to `<out-field>.json`.
        #[arg(long)]
        out_field: PathBuf,
        #[arg(long)]
        out_inverse: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Similarity::Mind)]
        similarity: Similarity,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Resample an image or label volume at x + u(x).
    Warp {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Interp::Linear)]
        interp: Interp,
    },
    /// Invert a dense displacement field by fixed-point iteration.
    Invert {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 50)]
        max_iter: usize,
    },
    /// Compose two fields, applying `first` then `second`.
    Compose {
        #[arg(long)]
        first: PathBuf,
        #[arg(long)]
        second: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice, HD95, TRE, NDV and optional endpoint error of a deformation.
    Metrics {
        /// Fixed-image labels.
        #[arg(long)]
        labels_a: PathBuf,
        /// Moving-image labels, warped by the field before comparison.
        #[arg(long)]
        labels_b: PathBuf,
        /// Forward field; the identity when omitted.
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long, requires = "landmarks_b")]
        landmarks_a: Option<PathBuf>,
        #[arg(long, requires = "landmarks_a")]
        landmarks_b: Option<PathBuf>,
        /// Reference forward field for the endpoint error.
        #[arg(long)]
        reference_field: Option<PathBuf>,
        /// Nonzero voxels restrict the endpoint error.
        #[arg(long, requires = "reference_field")]
        mask: Option<PathBuf>,
        /// JSON report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic case directory with a manifest.
    Synth {
        /// JSON phantom spec; absent keys take built-in defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the spec seed [default: the spec value]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run seeded registrations and average their stages, or average stored results.
    Ensemble {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        members: usize,
        /// Seed of member 0; member i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Initial coefficient perturbation as a fraction of each stage bound.
        #[arg(long, default_value_t = 0.1)]
        perturbation: f64,
        #[arg(long, value_enum, default_value_t = Similarity::Mind)]
        similarity: Similarity,
        /// Averaged forward field; members go to `<stem>_member<i>.nii` beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        out_inverse: Option<PathBuf>,
        /// Stored member fields to average instead of registering.
        #[arg(long, num_args = 1..)]
        average: Vec<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Usage(_) | Failure::Run(Error::InvalidParameter(_)) => EXIT_USAGE,
        Failure::Run(Error::InversionDiverged { .. } | Error::NonFiniteCoordinate) => EXIT_NUMERICAL,
        Failure::Run(_) => EXIT_DATA,
    }
}

fn parse_offsets(s: &str) -> Result<Vec<Offset>, Failure> {
    if s == "six" {
        return Ok(SIX_NEIGHBOURHOOD.to_vec());
    }
    s.split(';')
        .map(|t| {
            let v: Vec<i64> = t.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad_offsets(s))?;
            <[i64; 3]>::try_from(v).map_err(|_| bad_offsets(s))
        })
        .collect()
}

fn bad_offsets(s: &str) -> Failure {
    Failure::Usage(format!("cannot parse offsets {s:?}"))
}

fn load_config(path: Option<&Path>, similarity: Similarity, seed: u64) -> Result<RegistrationConfig, Failure> {
    let mut config: RegistrationConfig = match path {
        Some(p) => read_json(p)?,
        None => RegistrationConfig::default(),
    };
    config.similarity_space = match similarity {
        Similarity::Mind => SimilaritySpace::Mind,
        Similarity::Raw => SimilaritySpace::RawIntensity,
    };
    config.seed = seed;
    config.validate()?;
    Ok(config)
}

fn ensure_parent(path: &Path) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> CmdResult {
    print!("{}", to_json(value)?);
    Ok(())
}

#[derive(Serialize)]
struct RegistrationSummary {
    stages: usize,
    final_loss: Option<f64>,
    ndv: f64,
    inverse_consistency: f64,
    converged_flags: Vec<bool>,
}

fn summarize(result: &RegistrationResult) -> Result<RegistrationSummary, Failure> {
    let forward = result.forward_dense()?;
    Ok(RegistrationSummary {
        stages: result.forward_stack.len(),
        final_loss: result.loss_history.last().map(|r| r.total),
        ndv: non_diffeomorphic_volume(&forward),
        inverse_consistency: result.inverse_consistency_residual()?,
        converged_flags: result.converged_flags.clone(),
    })
}

fn save(result: &RegistrationResult, out: &Path, out_inverse: Option<&Path>) -> CmdResult {
    write_result(result, out)?;
    if let Some(p) = out_inverse {
        write_volume(&VolumeData::Vector(result.backward_dense()?), p)?;
    }
    Ok(())
}

fn member_path(out: &Path, i: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_member{i}.nii"))
}

fn warp_nearest(img: &ScalarVolume, u: &VectorField) -> Result<ScalarVolume, Failure> {
    img.geometry.ensure_same(&u.geometry, "warp")?;
    let g = img.geometry;
    let data = u
        .data
        .iter()
        .enumerate()
        .map(|(idx, d)| {
            let p = g.coords(idx);
            let q: [usize; 3] =
                std::array::from_fn(|a| (p[a] as f64 + d[a]).round().clamp(0.0, (g.shape[a] - 1) as f64) as usize);
            img.data[g.index(q[0], q[1], q[2])]
        })
        .collect();
    Ok(ScalarVolume::new(g, data)?)
}

#[derive(Serialize)]
struct MetricsReport {
    dice: DiceReport,
    hd95: BTreeMap<u16, f64>,
    hd95_mean: Option<f64>,
    tre: Option<TreReport>,
    ndv: f64,
    endpoint_error: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn metrics(
    labels_a: &Path,
    labels_b: &Path,
    field: Option<&Path>,
    landmarks: Option<(&Path, &Path)>,
    reference: Option<&Path>,
    mask: Option<&Path>,
    out: Option<&Path>,
) -> CmdResult {
    let a = read_labels(labels_a)?;
    let b = read_labels(labels_b)?;
    let u = match field {
        Some(p) => read_field(p)?,
        None => VectorField::zeros(a.geometry),
    };
    let warped = warp_labels(&b, &u)?;
    let dice = dice(&a, &warped)?;
    let mut hd = BTreeMap::new();
    for &label in dice.per_label.keys() {
        if let Ok(d) = hd95(&a, &warped, label) {
            hd.insert(label, d);
        }
    }
    let hd95_mean = (!hd.is_empty()).then(|| hd.values().sum::<f64>() / hd.len() as f64);
    let tre = match landmarks {
        Some((la, lb)) => Some(tre(&read_landmarks(la)?, &read_landmarks(lb)?, &u, u.geometry.spacing)?),
        None => None,
    };
    let endpoint_error = match reference {
        Some(r) => {
            let r = read_field(r)?;
            r.geometry.ensure_same(&u.geometry, "reference field")?;
            let keep = match mask {
                Some(m) => {
                    let m = read_labels(m)?;
                    MaskVolume::new(m.geometry, m.data.iter().map(|&v| v != 0).collect())?.data
                }
                None => vec![true; u.data.len()],
            };
            let errs: Vec<f64> = u
                .data
                .iter()
                .zip(&r.data)
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|((x, y), _)| (0..3).map(|c| (x[c] - y[c]).powi(2)).sum::<f64>().sqrt())
                .collect();
            if errs.is_empty() {
                return Err(Error::EmptyMask.into());
            }
            Some(errs.iter().sum::<f64>() / errs.len() as f64)
        }
        None => None,
    };
    let report = MetricsReport { dice, hd95: hd, hd95_mean, tre, ndv: non_diffeomorphic_volume(&u), endpoint_error };
    match out {
        Some(p) => Ok(std::fs::write(p, to_json(&report)?).map_err(Error::from)?),
        None => print_json(&report),
    }
}

fn run(command: Command) -> CmdResult {
    let outputs: Vec<&Path> = match &command {
        Command::Mind { out, .. } | Command::Warp { out, .. } | Command::Invert { out, .. } | Command::Compose { out, .. } => {
            vec![out]
        }
        Command::Register { out_field, out_inverse, .. } => {
            std::iter::once(out_field.as_path()).chain(out_inverse.as_deref()).collect()
        }
        Command::Ensemble { out, out_inverse, .. } => std::iter::once(out.as_path()).chain(out_inverse.as_deref()).collect(),
        Command::Metrics { out, .. } => out.as_deref().into_iter().collect(),
        Command::Synth { .. } => vec![],
    };
    for p in outputs {
        ensure_parent(p)?;
    }
    match command {
        Command::Mind { image, out, sigma, offsets } => {
            let params = MindParams { offsets: parse_offsets(&offsets)?, ..MindParams::with_sigma(sigma) };
            params.validate()?;
            let img = read_scalar(&image)?;
            let mind = mind_transform(&img, &params)?;
            write_volume(&VolumeData::Channels(mind.channels), &out)?;
            Ok(())
        }
        Command::Register { fixed, moving, config, out_field, out_inverse, similarity, seed } => {
            let config = load_config(config.as_deref(), similarity, seed)?;
            let result = register_pair(&read_scalar(&fixed)?, &read_scalar(&moving)?, &config)?;
            save(&result, &out_field, out_inverse.as_deref())?;
            print_json(&summarize(&result)?)
        }
        Command::Warp { image, field, out, interp } => {
            let u = read_field(&field)?;
            let warped = match (read_volume(&image)?, interp) {
                (VolumeData::Labels(l), Interp::Nearest) => VolumeData::Labels(warp_labels(&l, &u)?),
                (VolumeData::Labels(_), Interp::Linear) => {
                    return Err(Failure::Usage("label volumes need --interp nearest".into()));
                }
                (VolumeData::Scalar(s), Interp::Linear) => VolumeData::Scalar(apply_warp(&s, &u)?),
                (VolumeData::Scalar(s), Interp::Nearest) => VolumeData::Scalar(warp_nearest(&s, &u)?),
                _ => return Err(Error::StructureMismatch("only scalar images and labels can be warped".into()).into()),
            };
            write_volume(&warped, &out)?;
            Ok(())
        }
        Command::Invert { field, out, tol, max_iter } => {
            let inv = invert_fixed_point(&read_field(&field)?, tol, max_iter)?;
            write_volume(&VolumeData::Vector(inv), &out)?;
            Ok(())
        }
        Command::Compose { first, second, out } => {
            let c = compose(&read_field(&first)?, &read_field(&second)?)?;
            write_volume(&VolumeData::Vector(c), &out)?;
            Ok(())
        }
        Command::Metrics { labels_a, labels_b, field, landmarks_a, landmarks_b, reference_field, mask, out } => {
            let landmarks = landmarks_a.as_deref().zip(landmarks_b.as_deref());
            metrics(
                &labels_a,
                &labels_b,
                field.as_deref(),
                landmarks,
                reference_field.as_deref(),
                mask.as_deref(),
                out.as_deref(),
            )
        }
        Command::Synth { spec, out_dir, seed } => {
            let mut spec: PhantomSpec = match spec {
                Some(p) => read_json(&p)?,
                None => PhantomSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            spec.validate()?;
            let manifest = write_case(&make_case(&spec)?, &out_dir)?;
            print_json(&manifest.files)
        }
        Command::Ensemble {
            fixed,
            moving,
            config,
            members,
            seed,
            perturbation,
            similarity,
            out,
            out_inverse,
            average,
        } => {
            let config = load_config(config.as_deref(), similarity, seed)?;
            let (fixed, moving) = (read_scalar(&fixed)?, read_scalar(&moving)?);
            let results = if average.is_empty() {
                let ens = EnsembleConfig { members, seed_base: seed, perturbation_scale: perturbation };
                let results = run_ensemble(&fixed, &moving, &config, &ens)?;
                for (i, r) in results.iter().enumerate() {
                    write_result(r, &member_path(&out, i))?;
                }
                results
            } else {
                average.iter().map(|p| read_result(p)).collect::<Result<Vec<_>, _>>()?
            };
            let averaged = ensemble_average(&results, &fixed, &moving, &config)?;
            for stage in &averaged.forward_stack.stages {
                stage.check_bound()?;
            }
            save(&averaged, &out, out_inverse.as_deref())?;
            print_json(&summarize(&averaged)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Run(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
