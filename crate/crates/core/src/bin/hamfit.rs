use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use hamfit::checkpoint::{checkpoint_read, checkpoint_write};
use hamfit::dataset::{dataset_read, dataset_to_csv, dataset_write};
use hamfit::eval::{evaluate_mse, identity_check, phase_map, volume_diagnostic, Ensemble, EvalConfig, PhaseMapSpec};
use hamfit::objective::{NoiseModel, OmegaMode, SampleSharing, TermSet};
use hamfit::ode::IntegrationConfig;
use hamfit::regularizers::VolumeForm;
use hamfit::systems::{generate_dataset, GenConfig, SystemName, SystemSpec};
use hamfit::train::{ablation_runner, train, write_ablation_csv, AblationConfig, TrainConfig};
use hamfit::types::DynamicsClass;
use hamfit::{Error, Result};

#[derive(Parser)]
#[command(name = "hamfit", version, about = "Learn Hamiltonian dynamics from noisy trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a benchmark system and write a noisy dataset.
    Generate(GenerateArgs),
    /// Fit a model to a dataset.
    Train(TrainArgs),
    /// Test MSE of a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Learned vs true Hamiltonian on a grid.
    PhaseMap(PhaseMapArgs),
    /// Area evolution of a small disk under the conservative part of a model.
    VolumeCheck(VolumeArgs),
    /// Verify the energy and divergence identities on random models.
    CheckIdentities(IdentityArgs),
    /// Train and evaluate a set of regularizer configurations.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// P, S, HH, DP, DS, UD, WP, FS or DE.
    #[arg(long)]
    system: SystemName,
    #[arg(long)]
    out: PathBuf,
    /// Also write the observations as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    substeps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum VolumeFormArg {
    SquaredSum,
    MeanOfSquares,
}

#[derive(Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum SharingArg {
    PerEpoch,
    PerTrajectory,
}

#[derive(Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum OmegaArg {
    Fixed,
    Resampled,
}

/// Training options; each may also come from `--config`.
#[derive(Args, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainOpts {
    /// JSON file with any of these options (flags take precedence).
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_lambda: Option<f64>,
    /// equal, gda, gda-adam, mtadam, jd, jd2.
    #[arg(long)]
    balance: Option<String>,
    /// Regularizers to compute: any of E, L, V, or `none`.
    #[arg(long)]
    terms: Option<String>,
    /// Number of RFF bases M.
    #[arg(long)]
    num_bases: Option<usize>,
    /// Initial diagonal of the posterior factor √C.
    #[arg(long)]
    init_sqrt_c: Option<f64>,
    /// Train on the first T time points of each trajectory.
    #[arg(long)]
    horizon: Option<usize>,
    /// Start the training window at this many time points and grow it.
    #[arg(long)]
    curriculum_start: Option<usize>,
    /// Fraction of epochs over which the window reaches the full horizon.
    #[arg(long)]
    curriculum_ramp: Option<f64>,
    /// Monte Carlo samples per epoch.
    #[arg(long)]
    n_x: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Train with known observation noise (defaults to the dataset's).
    #[arg(long)]
    noise_prior: Option<bool>,
    /// Known noise level; 0 gives a plain MSE fit.
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    substeps: Option<usize>,
    #[arg(long)]
    volume_form: Option<VolumeFormArg>,
    #[arg(long)]
    volume_points: Option<usize>,
    #[arg(long)]
    sharing: Option<SharingArg>,
    #[arg(long)]
    omega: Option<OmegaArg>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOpts {
    fn merged(&self) -> Result<TrainOpts> {
        let mut base: TrainOpts = match &self.config {
            None => TrainOpts::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| Error::Format {
                    path: p.clone(),
                    message: e.to_string(),
                })?
            }
        };
        macro_rules! take {
            ($($f:ident),*) => { $( if self.$f.is_some() { base.$f = self.$f.clone(); } )* };
        }
        take!(epochs, curriculum_start, curriculum_ramp, init_sqrt_c, horizon, lr, lr_lambda, balance, terms, num_bases, n_x, batch_size, noise_prior, noise_sigma, substeps, volume_form, volume_points, sharing, omega, seed);
        Ok(base)
    }

    fn build(&self, dataset_noise: f64) -> Result<TrainConfig> {
        let o = self.merged()?;
        let mut cfg = TrainConfig::default();
        if let Some(v) = o.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = o.lr {
            cfg.lr = v;
        }
        if let Some(v) = o.lr_lambda {
            cfg.lr_lambda = v;
        }
        if let Some(b) = &o.balance {
            cfg.balance = b.parse()?;
        }
        if let Some(t) = &o.terms {
            cfg.objective.terms = parse_terms(t)?;
        }
        if let Some(v) = o.num_bases {
            cfg.init.num_bases = v;
        }
        if let Some(v) = o.init_sqrt_c {
            cfg.init.sqrt_c = v;
        }
        cfg.horizon = o.horizon;
        if let Some(start) = o.curriculum_start {
            cfg.curriculum = Some(hamfit::train::Curriculum {
                start,
                ramp: o.curriculum_ramp.unwrap_or(0.5),
            });
        }
        if let Some(v) = o.n_x {
            cfg.objective.n_x = v;
        }
        cfg.batch_size = o.batch_size;
        if o.noise_prior.unwrap_or(false) || o.noise_sigma.is_some() {
            cfg.objective.noise = NoiseModel::Known {
                sigma: o.noise_sigma.unwrap_or(dataset_noise),
            };
        }
        if let Some(v) = o.substeps {
            cfg.objective.integration.substeps = v;
        }
        if let Some(v) = o.volume_form {
            cfg.objective.volume.form = match v {
                VolumeFormArg::SquaredSum => VolumeForm::SquaredSum,
                VolumeFormArg::MeanOfSquares => VolumeForm::MeanOfSquares,
            };
        }
        if let Some(v) = o.volume_points {
            cfg.objective.volume.n_points = v;
        }
        if let Some(v) = o.sharing {
            cfg.objective.sharing = match v {
                SharingArg::PerEpoch => SampleSharing::PerEpoch,
                SharingArg::PerTrajectory => SampleSharing::PerTrajectory,
            };
        }
        if let Some(v) = o.omega {
            cfg.objective.omega_mode = match v {
                OmegaArg::Fixed => OmegaMode::FixedBase,
                OmegaArg::Resampled => OmegaMode::ResampledPerEpoch,
            };
        }
        if let Some(v) = o.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_terms(s: &str) -> Result<TermSet> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(TermSet::NONE);
    }
    let mut t = TermSet::NONE;
    for c in s.chars() {
        match c.to_ascii_uppercase() {
            'E' => t.energy = true,
            'L' => t.lyap = true,
            'V' => t.vol = true,
            ',' | ' ' => {}
            _ => return Err(Error::Invalid(format!("unknown regularizer `{c}` in --terms"))),
        }
    }
    Ok(t)
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoint.json, loss_history.csv and lambda_history.csv.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct EvalOpts {
    #[arg(long, default_value_t = 1)]
    eval_substeps: usize,
    /// Average this many sampled rollouts instead of the mean path.
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long, default_value_t = 0)]
    ensemble_seed: u64,
}

impl EvalOpts {
    fn config(&self) -> EvalConfig {
        EvalConfig {
            integration: IntegrationConfig::with_substeps(self.eval_substeps),
            ensemble: self.ensemble.map(|size| Ensemble {
                size,
                seed: self.ensemble_seed,
            }),
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-trajectory MSE as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalOpts,
}

#[derive(Args)]
struct PhaseMapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reference system for the error field.
    #[arg(long)]
    system: Option<SystemName>,
    /// q_min,q_max,p_min,p_max
    #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [-2.0, 2.0, -2.0, 2.0], allow_negative_numbers = true)]
    bounds: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    resolution: usize,
    /// Values of the remaining coordinates for d > 1, as q_2..q_d,p_2..p_d.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    slice: Vec<f64>,
}

#[derive(Args)]
struct VolumeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [2.0, -2.0], allow_negative_numbers = true)]
    center: Vec<f64>,
    #[arg(long, default_value_t = 0.2)]
    radius: f64,
    #[arg(long, default_value_t = 15.0)]
    t_end: f64,
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
    #[arg(long, default_value_t = 256)]
    points: usize,
    #[arg(long, default_value_t = 10)]
    substeps: usize,
}

#[derive(Args)]
struct IdentityArgs {
    #[arg(long, default_value_t = 100)]
    draws: usize,
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Comma-separated names such as equal_E, gda_LV, jd2, noreg.
    #[arg(long, value_delimiter = ',')]
    configs: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
    #[command(flatten)]
    eval: EvalOpts,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let spec = SystemSpec::preset(a.system);
            let mut gen = GenConfig::preset(a.system);
            gen.seed = a.seed;
            if let Some(v) = a.trajectories {
                gen.trajectories = v;
            }
            if let Some(v) = a.steps {
                gen.steps = v;
            }
            if let Some(v) = a.t_end {
                gen.t_end = v;
            }
            if let Some(v) = a.noise {
                gen.noise_sigma = v;
            }
            if let Some(v) = a.init_scale {
                gen.init_scale = v;
            }
            if let Some(v) = a.substeps {
                gen.substeps = v;
            }
            let ds = generate_dataset(&spec, &gen)?;
            dataset_write(&a.out, &ds)?;
            if let Some(p) = a.csv {
                let mut w = create(&p)?;
                dataset_to_csv(&ds, &mut w)?;
                w.flush()?;
            }
            println!("wrote {} trajectories × {} steps to {}", gen.trajectories, gen.steps, a.out.display());
        }
        Command::Train(a) => {
            let ds = dataset_read(&a.data)?;
            let cfg = a.opts.build(ds.noise_sigma)?;
            let out = train(&ds, &cfg)?;
            std::fs::create_dir_all(&a.out_dir)?;
            checkpoint_write(a.out_dir.join("checkpoint.json"), &out.model)?;
            let mut w = create(&a.out_dir.join("loss_history.csv"))?;
            out.write_loss_csv(&mut w)?;
            w.flush()?;
            let mut w = create(&a.out_dir.join("lambda_history.csv"))?;
            out.write_lambda_csv(&mut w)?;
            w.flush()?;
            if let Some(last) = out.history.last() {
                println!("epoch {}: total loss {:.6e}", last.epoch, last.total);
            }
            out.into_result()?;
        }
        Command::Evaluate(a) => {
            let params = checkpoint_read(&a.checkpoint)?;
            let ds = dataset_read(&a.data)?;
            let report = evaluate_mse(&params, &ds, &a.eval.config())?;
            if let Some(p) = a.out {
                let mut w = create(&p)?;
                report.write_csv(&mut w)?;
                w.flush()?;
            }
            println!("mse {:.6e} ± {:.6e} over {} trajectories", report.mean, report.std, report.per_trajectory.len());
        }
        Command::PhaseMap(a) => {
            let params = checkpoint_read(&a.checkpoint)?;
            let d = params.d;
            let mut base = vec![0.0; 2 * d];
            if !a.slice.is_empty() {
                if a.slice.len() != 2 * (d - 1) {
                    return Err(Error::Dimension {
                        context: "--slice".into(),
                        expected: 2 * (d - 1),
                        found: a.slice.len(),
                    });
                }
                base[1..d].copy_from_slice(&a.slice[..d - 1]);
                base[d + 1..].copy_from_slice(&a.slice[d - 1..]);
            }
            let spec = PhaseMapSpec {
                q_range: (a.bounds[0], a.bounds[1]),
                p_range: (a.bounds[2], a.bounds[3]),
                resolution: (a.resolution, a.resolution),
                base,
            };
            let truth = a.system.map(SystemSpec::preset);
            let grid = phase_map(&params, &spec, truth.as_ref())?;
            let mut w = create(&a.out)?;
            grid.write_csv(&mut w)?;
            w.flush()?;
            if let Some(e) = &grid.error {
                let rms = (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt();
                println!("gauge-aligned rms error {rms:.6e}");
            }
        }
        Command::VolumeCheck(a) => {
            let params = checkpoint_read(&a.checkpoint)?;
            if !(a.dt > 0.0 && a.t_end > 0.0) {
                return Err(Error::Invalid("--dt and --t-end must be positive".into()));
            }
            let n = (a.t_end / a.dt).round() as usize;
            let times: Vec<f64> = (0..=n).map(|k| k as f64 * a.dt).collect();
            let series = volume_diagnostic(
                &params,
                [a.center[0], a.center[1]],
                a.radius,
                &times,
                a.points,
                &IntegrationConfig::with_substeps(a.substeps),
            )?;
            let mut w = create(&a.out)?;
            series.write_csv(&mut w)?;
            w.flush()?;
            println!("max |area ratio - 1| = {:.6e}", series.max_deviation());
        }
        Command::CheckIdentities(a) => {
            let mut rows = Vec::new();
            let mut ok = true;
            for class in [DynamicsClass::Conservative, DynamicsClass::Dissipative, DynamicsClass::PortHamiltonian] {
                let r = identity_check(class, a.d, a.draws, a.seed)?;
                ok &= r.max_energy_residual < 1e-10 && r.max_port_residual < 1e-10 && r.max_divergence_residual < 1e-5;
                rows.push(r);
            }
            let sink: Box<dyn Write> = match &a.out {
                Some(p) => Box::new(create(p)?),
                None => Box::new(std::io::stdout()),
            };
            let mut w = csv::Writer::from_writer(sink);
            w.write_record(["class", "d", "draws", "max_energy_residual", "max_port_residual", "max_divergence_residual"])?;
            for r in &rows {
                w.write_record([
                    r.class.as_str().to_string(),
                    a.d.to_string(),
                    r.draws.to_string(),
                    format!("{:e}", r.max_energy_residual),
                    format!("{:e}", r.max_port_residual),
                    format!("{:e}", r.max_divergence_residual),
                ])?;
            }
            w.flush()?;
            if !ok {
                return Err(Error::Tolerance("identity residual above threshold".into()));
            }
        }
        Command::Ablate(a) => {
            let train_set = dataset_read(&a.train)?;
            let test_set = dataset_read(&a.test)?;
            let base = a.opts.build(train_set.noise_sigma)?;
            let configs = if a.configs.is_empty() {
                AblationConfig::standard()
            } else {
                a.configs.iter().map(|c| AblationConfig::parse(c)).collect::<Result<Vec<_>>>()?
            };
            let rows = ablation_runner(&train_set, &test_set, &configs, &base, &a.seeds, &a.eval.config())?;
            let mut w = create(&a.out)?;
            write_ablation_csv(&rows, &mut w)?;
            w.flush()?;
            for r in &rows {
                println!("{:<12} seed {:<4} mse {:.6e} ± {:.6e}", r.config, r.seed, r.report.mean, r.report.std);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
