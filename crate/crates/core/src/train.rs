//! The training loop and the ablation runner.

use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::balance::{jacobian_rows, upgrad_aggregate, weighted_gradient, Adam, Balance, Gda, GdaMode, LossVector, MtAdam, Weights};
use crate::elbo::InitPosterior;
use crate::error::{Error, Result};
use crate::eval::{evaluate_mse, EvalConfig, EvalReport};
use crate::objective::{evaluate, EpochNoise, GradMode, LossValues, NoiseModel, ObjectiveConfig, Term, TermSet};
use crate::params::TrainState;
use crate::rff::{InitConfig, ModelParams};
use crate::types::ObservedDataset;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_lambda: f64,
    pub balance: Balance,
    pub init: InitConfig,
    pub objective: ObjectiveConfig,
    /// `None` trains on every trajectory each epoch.
    pub batch_size: Option<usize>,
    /// Number of leading time points used per trajectory; `None` uses all.
    pub horizon: Option<usize>,
    /// Grow the training window over the first epochs.
    pub curriculum: Option<Curriculum>,
    /// Initial posterior std of each `x_i0`.
    pub init_post_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5000,
            lr: 1e-3,
            lr_lambda: 1e-3,
            balance: Balance::Equal,
            init: InitConfig::default(),
            objective: ObjectiveConfig::default(),
            batch_size: None,
            horizon: None,
            curriculum: None,
            init_post_sigma: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        for (name, v) in [("lr", self.lr), ("init_post_sigma", self.init_post_sigma)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lr_lambda >= 0.0 && self.lr_lambda.is_finite()) {
            return Err(Error::invalid("lr_lambda must be nonnegative"));
        }
        if self.horizon.is_some_and(|t| t < 2) {
            return Err(Error::invalid("horizon must cover at least two time points"));
        }
        if let Some(c) = self.curriculum {
            if c.start < 2 || !(0.0..=1.0).contains(&c.ramp) {
                return Err(Error::invalid("curriculum needs start >= 2 and ramp in [0, 1]"));
            }
        }
        if self.init.num_bases == 0 || self.objective.n_x == 0 || self.batch_size == Some(0) {
            return Err(Error::invalid("M, N_x and batch size must be positive"));
        }
        if self.objective.integration.substeps == 0 {
            return Err(Error::invalid("substeps must be positive"));
        }
        if let NoiseModel::Known { sigma } = self.objective.noise {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::invalid("known noise sigma must be nonnegative"));
            }
        }
        Ok(())
    }

    fn noise_prior(&self) -> bool {
        matches!(self.objective.noise, NoiseModel::Known { .. })
    }
}

/// Linear growth of the training window from `start` time points to the
/// full horizon over the first `ramp` fraction of epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curriculum {
    pub start: usize,
    pub ramp: f64,
}

impl Curriculum {
    pub fn steps_at(&self, epoch: usize, epochs: usize, full: usize) -> usize {
        let end = (self.ramp * epochs as f64).max(1.0);
        let frac = (epoch as f64 / end).min(1.0);
        let steps = self.start as f64 + frac * (full as f64 - self.start as f64);
        (steps.round() as usize).clamp(2.min(full), full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossValues,
    pub total: f64,
    /// Weights in effect for this epoch's parameter update.
    pub lambda: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Final parameters, or the last parameters with a finite loss.
    pub model: ModelParams,
    pub posts: Vec<InitPosterior>,
    pub weights: Weights,
    pub history: Vec<EpochRecord>,
    /// Epoch whose loss or gradient was non-finite.
    pub diverged_at: Option<usize>,
}

impl TrainOutput {
    pub fn into_result(self) -> Result<TrainOutput> {
        match self.diverged_at {
            Some(epoch) => Err(Error::Diverged { epoch }),
            None => Ok(self),
        }
    }

    /// `epoch, nll, kl_w, kl_x0, neg_elbo, lyap, energy, vol, total`
    pub fn write_loss_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "nll", "kl_w", "kl_x0", "neg_elbo", "lyap", "energy", "vol", "total"])?;
        for r in &self.history {
            let l = &r.losses;
            let vals = [l.nll, l.kl_w, l.kl_x0, l.neg_elbo(), l.lyap, l.energy, l.vol, r.total];
            let mut row = vec![r.epoch.to_string()];
            row.extend(vals.iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `epoch, lambda_1, lambda_2, lambda_3`
    pub fn write_lambda_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "lambda_1", "lambda_2", "lambda_3"])?;
        for r in &self.history {
            w.write_record([r.epoch.to_string(), r.lambda[0].to_string(), r.lambda[1].to_string(), r.lambda[2].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

enum Update {
    Adam(Adam),
    MtAdam(MtAdam),
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Runs `cfg.epochs` epochs of noise draw, per-term gradients, parameter
/// step and penalty-weight update. A non-finite loss stops training and
/// returns the last good parameters with `diverged_at` set.
pub fn train(dataset: &ObservedDataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    dataset.validate()?;
    let truncated;
    let dataset = match cfg.horizon {
        Some(t) if t < dataset.times.len() => {
            truncated = dataset.truncate(t);
            &truncated
        }
        _ => dataset,
    };
    let n_traj = dataset.num_trajectories();
    let noise_prior = cfg.noise_prior();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let model = ModelParams::init(dataset.class, dataset.d, &cfg.init, &mut rng);
    let posts: Vec<InitPosterior> = dataset
        .observations
        .iter()
        .map(|o| InitPosterior::at(o[0].as_slice(), cfg.init_post_sigma))
        .collect();
    let mut state = TrainState { model, posts };
    let layout = state.layout(noise_prior);
    let groups: Vec<_> = layout.groups.iter().map(|(_, r)| r.clone()).collect();

    let mut update = match cfg.balance {
        Balance::MtAdam => Update::MtAdam(MtAdam::new(layout.len, cfg.lr)),
        _ => Update::Adam(Adam::new(layout.len, cfg.lr)),
    };
    let mut gda = match cfg.balance {
        Balance::Gda => Some(Gda::new(GdaMode::Ascent, cfg.lr_lambda)),
        Balance::GdaAdam => Some(Gda::new(GdaMode::Adam, cfg.lr_lambda)),
        _ => None,
    };
    let terms: TermSet = cfg.objective.terms;
    let active = [terms.lyap, terms.energy, terms.vol];
    let mut weights = Weights {
        lambda: [0, 1, 2].map(|k| if active[k] { 1.0 } else { 0.0 }),
    };

    let batch = cfg.batch_size.filter(|b| *b < n_traj);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let full = dataset.times.len();
        let steps = cfg.curriculum.map_or(full, |c| c.steps_at(epoch, cfg.epochs, full));
        let windowed;
        let base = if steps < full {
            windowed = dataset.truncate(steps);
            &windowed
        } else {
            dataset
        };
        // one pass over a fresh shuffle; `None` is the full batch
        let batches: Vec<Option<Vec<usize>>> = match batch {
            Some(b) => {
                let perm = sample_indices(&mut rng, n_traj, n_traj).into_vec();
                perm.chunks(b)
                    .map(|c| {
                        let mut idx = c.to_vec();
                        idx.sort_unstable();
                        Some(idx)
                    })
                    .collect()
            }
            None => vec![None],
        };
        let lambda_at_start = weights.lambda;
        let mut epoch_losses = LossValues::default();
        let mut epoch_total = 0.0;
        for indices in &batches {
            let sub;
            let (ds, posts): (&ObservedDataset, Vec<InitPosterior>) = match indices {
                Some(idx) => {
                    sub = base.select(idx);
                    (&sub, idx.iter().map(|&i| state.posts[i].clone()).collect())
                }
                None => (base, state.posts.clone()),
            };
            let noise = EpochNoise::draw(&mut rng, &state.model, ds, &cfg.objective);
            let mut eval = match evaluate(ds, &state.model, &posts, &noise, &cfg.objective, GradMode::PerTerm) {
                Ok(e) => e,
                Err(e) if e.is_numerical() => {
                    log::error!("epoch {epoch}: {e}");
                    return Ok(diverged(state, weights, history, epoch));
                }
                Err(e) => return Err(e),
            };
            let mut grad_states = eval.grads.take().expect("per-term gradients requested");
            if let Some(idx) = indices {
                // per-trajectory terms scaled by N/B: unbiased for the full-data ELBO
                let s = n_traj as f64 / idx.len() as f64;
                eval.losses.nll *= s;
                eval.losses.kl_x0 *= s;
                for term in [Term::Nll, Term::KlX0] {
                    grad_states[term.index()].scale(s);
                }
                for g in grad_states.iter_mut() {
                    let mut full = state.posts.iter().map(|p| InitPosterior::zeros(p.mu.len())).collect::<Vec<_>>();
                    for (slot, gp) in idx.iter().zip(g.posts.drain(..)) {
                        full[*slot] = gp;
                    }
                    g.posts = full;
                }
            }
            let lv = LossVector::from(&eval.losses);
            let total = crate::balance::total_loss(&lv, &weights);
            let term_grads: Vec<Vec<f64>> = grad_states.iter().map(|g| g.flatten(noise_prior)).collect();
            if !eval.losses.is_finite() || !total.is_finite() || !term_grads.iter().all(|g| finite(g)) {
                log::error!("epoch {epoch}: non-finite loss or gradient");
                return Ok(diverged(state, weights, history, epoch));
            }
            let share = 1.0 / batches.len() as f64;
            epoch_losses.accumulate(&eval.losses, share);
            epoch_total += share * total;

            let mut flat = state.flatten(noise_prior);
            let prev = state.clone();
            match (&mut update, cfg.balance) {
                (Update::MtAdam(opt), _) => {
                    let rows = jacobian_rows(Balance::MtAdam, &term_grads, active);
                    opt.step(&mut flat, &groups, &rows);
                }
                (Update::Adam(opt), Balance::Jd | Balance::Jd2) => {
                    let rows = jacobian_rows(cfg.balance, &term_grads, active);
                    let u = upgrad_aggregate(&rows)?;
                    opt.step(&mut flat, &u);
                }
                (Update::Adam(opt), _) => {
                    let g = weighted_gradient(&term_grads, &weights);
                    opt.step(&mut flat, &g);
                }
            }
            state.assign(noise_prior, &flat);
            if !finite(&flat) || state.model.validate().is_err() {
                log::error!("epoch {epoch}: update produced invalid parameters");
                return Ok(diverged(prev, weights, history, epoch));
            }
            if let Some(g) = gda.as_mut() {
                let mut w = g.update(&weights, &lv);
                for k in 0..3 {
                    if !active[k] {
                        w.lambda[k] = 0.0;
                    }
                }
                weights = w;
            }
        }
        if epoch % 50 == 0 || epoch + 1 == cfg.epochs {
            log::info!(
                "epoch {epoch}: total {epoch_total:.5e} nll {:.4e} kl_w {:.3e} lyap {:.3e} energy {:.3e} vol {:.3e}",
                epoch_losses.nll,
                epoch_losses.kl_w,
                epoch_losses.lyap,
                epoch_losses.energy,
                epoch_losses.vol
            );
        }
        history.push(EpochRecord {
            epoch,
            losses: epoch_losses,
            total: epoch_total,
            lambda: lambda_at_start,
        });
    }
    Ok(TrainOutput {
        model: state.model,
        posts: state.posts,
        weights,
        history,
        diverged_at: None,
    })
}

fn diverged(state: TrainState, weights: Weights, history: Vec<EpochRecord>, epoch: usize) -> TrainOutput {
    TrainOutput {
        model: state.model,
        posts: state.posts,
        weights,
        history,
        diverged_at: Some(epoch),
    }
}

/// One ablation configuration: a balance mode and a regularizer subset.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub name: String,
    pub balance: Balance,
    pub terms: TermSet,
}

impl AblationConfig {
    /// Parses `noreg`, `<balance>` (all terms) or `<balance>_<E|L|V...>`.
    pub fn parse(name: &str) -> Result<Self> {
        if name == "noreg" {
            return Ok(AblationConfig {
                name: name.into(),
                balance: Balance::Equal,
                terms: TermSet::NONE,
            });
        }
        let (mode, flags) = match name.split_once('_') {
            Some((m, f)) => (m, Some(f)),
            None => (name, None),
        };
        let balance: Balance = mode.parse()?;
        let terms = match flags {
            None => TermSet::ALL,
            Some(f) => {
                let mut t = TermSet::NONE;
                for c in f.chars() {
                    match c {
                        'E' => t.energy = true,
                        'L' => t.lyap = true,
                        'V' => t.vol = true,
                        _ => return Err(Error::invalid(format!("unknown regularizer flag `{c}` in `{name}`"))),
                    }
                }
                if t.is_empty() {
                    return Err(Error::invalid(format!("`{name}` selects no regularizer")));
                }
                t
            }
        };
        Ok(AblationConfig {
            name: name.into(),
            balance,
            terms,
        })
    }

    /// Columns of the single-term ablation table.
    pub fn standard() -> Vec<AblationConfig> {
        ["equal_E", "equal_L", "equal_V", "gda_E", "gda_L", "gda_V", "noreg"]
            .iter()
            .map(|n| AblationConfig::parse(n).expect("valid name"))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub report: EvalReport,
    pub diverged_at: Option<usize>,
}

/// Trains every configuration for every seed and evaluates on `test`.
pub fn ablation_runner(
    train_set: &ObservedDataset,
    test_set: &ObservedDataset,
    configs: &[AblationConfig],
    base: &TrainConfig,
    seeds: &[u64],
    eval_cfg: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for c in configs {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.balance = c.balance;
            cfg.objective.terms = c.terms;
            cfg.seed = seed;
            log::info!("ablation {} seed {seed}", c.name);
            let out = train(train_set, &cfg)?;
            let report = evaluate_mse(&out.model, test_set, eval_cfg)?;
            rows.push(AblationRow {
                config: c.name.clone(),
                seed,
                report,
                diverged_at: out.diverged_at,
            });
        }
    }
    Ok(rows)
}

/// `config, seed, mean_mse, std_mse, diverged_at`
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["config", "seed", "mean_mse", "std_mse", "diverged_at"])?;
    for r in rows {
        w.write_record([
            r.config.clone(),
            r.seed.to_string(),
            format!("{:e}", r.report.mean),
            format!("{:e}", r.report.std),
            r.diverged_at.map(|e| e.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
