//! Uncertainty surrogates: ensemble quantile regression (E-QR), deep
//! ensembles and MC dropout, all answering the same per-output
//! `(mean, sigma_epistemic, sigma_aleatoric)` contract.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{AlphaLevel, LossKind};
use crate::nn::{self, Activation, MlpParams, TrainConfig};
use crate::normal::normal_pdf;
use crate::problems::Dataset;
use crate::seed::{derive_seed, rng_from_seed, Rng, TAG_BAG, TAG_INIT, TAG_PHASE2, TAG_PREDICT, TAG_TRAIN};

pub use crate::normal::inverse_normal_cdf;

mod container;

/// α with 2·|Φ⁻¹(α)| = 1, i.e. Φ(-1/2) ≈ 0.308538: at this level the
/// (1-α)-to-α quantile spread of a Gaussian equals its standard deviation.
pub fn alpha_for_unit_sigma() -> AlphaLevel {
    // Newton on p ↦ Φ⁻¹(p) + 1/2, using dΦ⁻¹/dp = 1/φ(Φ⁻¹(p)).
    let mut p: f64 = 0.3;
    for _ in 0..50 {
        let z = inverse_normal_cdf(p).expect("iterate stays inside (0, 0.5)");
        let step = (z + 0.5) * normal_pdf(z);
        p -= step;
        if step.abs() < 1e-17 {
            break;
        }
    }
    AlphaLevel::new(p).expect("root lies in (0, 0.5)")
}

/// Standard deviation implied by a `(1-α) - α` quantile spread of a Gaussian.
/// Negative spreads (crossed quantiles) count as zero.
pub fn sigma_from_spread(spread: f64, alpha: AlphaLevel) -> f64 {
    let z = inverse_normal_cdf(alpha.value()).expect("alpha in (0, 0.5)");
    spread.max(0.0) / (2.0 * z.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    pub mean: f64,
    pub sigma_epistemic: f64,
    pub sigma_aleatoric: f64,
}

/// Population mean and standard deviation.
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.max(0.0).sqrt())
}

/// Per-column affine scaling applied to inputs and targets before the
/// networks see them.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_mean: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
            target_mean: vec![0.0; output_dim],
            target_scale: vec![1.0; output_dim],
        }
    }

    pub fn fit(dataset: &Dataset) -> Self {
        let stats = |m: ArrayView2<'_, f64>| -> (Vec<f64>, Vec<f64>) {
            m.axis_iter(Axis(1))
                .map(|col| {
                    let (mu, sd) = mean_std(col.iter().copied());
                    (mu, if sd > 1e-12 { sd } else { 1.0 })
                })
                .unzip()
        };
        let (input_mean, input_scale) = stats(dataset.inputs());
        let (target_mean, target_scale) = stats(dataset.targets());
        Self {
            input_mean,
            input_scale,
            target_mean,
            target_scale,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.target_mean.len()
    }

    fn inputs(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (k, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.input_mean[k], self.input_scale[k]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    fn targets(&self, y: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = y.to_owned();
        for (k, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.target_mean[k], self.target_scale[k]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    fn check_input(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::shape("surrogate input", self.input_dim(), got));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: Activation::Tanh,
        }
    }
}

impl NetworkConfig {
    fn layer_sizes(&self, input_dim: usize, output_dim: usize) -> Vec<usize> {
        std::iter::once(input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(output_dim))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EqrConfig {
    pub n_members: usize,
    pub alpha: AlphaLevel,
    pub bag_fraction: f64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl Default for EqrConfig {
    fn default() -> Self {
        Self {
            n_members: 5,
            alpha: alpha_for_unit_sigma(),
            bag_fraction: 0.7,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeConfig {
    pub n_members: usize,
    pub bag_fraction: f64,
    pub network: NetworkConfig,
    /// Shared by both phases; each phase runs `train.epochs` epochs.
    pub train: TrainConfig,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            n_members: 5,
            bag_fraction: 0.7,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McDropoutConfig {
    pub n_passes: usize,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl Default for McDropoutConfig {
    fn default() -> Self {
        Self {
            n_passes: 50,
            network: NetworkConfig::default(),
            train: TrainConfig {
                dropout_rate: 0.1,
                ..TrainConfig::default()
            },
        }
    }
}

fn check_ensemble(dataset: &Dataset, n_members: usize, bag_fraction: f64) -> Result<()> {
    if n_members < 2 {
        return Err(Error::Config(format!("ensembles need at least 2 members, got {n_members}")));
    }
    if !(bag_fraction > 0.0 && bag_fraction <= 1.0) {
        return Err(Error::Config(format!("bag_fraction {bag_fraction} outside (0, 1]")));
    }
    if dataset.len() < 10 * n_members {
        return Err(Error::Config(format!(
            "dataset of {} rows is too small for {n_members} members (need at least {})",
            dataset.len(),
            10 * n_members
        )));
    }
    Ok(())
}

/// Row indices of member `member`'s subsample, drawn without replacement.
fn bag_rows(n: usize, bag_fraction: f64, master: u64, member: usize) -> Vec<usize> {
    let size = ((bag_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = rng_from_seed(derive_seed(master, &[TAG_BAG, member as u64]));
    let mut rows = rand::seq::index::sample(&mut rng, n, size).into_vec();
    rows.sort_unstable();
    rows
}

fn init_member(sizes: &[usize], network: &NetworkConfig, train: &TrainConfig, member: usize) -> Result<MlpParams> {
    let mut rng: Rng = rng_from_seed(derive_seed(train.seed, &[TAG_INIT, member as u64]));
    MlpParams::init(sizes, network.activation, train.weight_init_scale, &mut rng)
}

fn member_train_config(train: &TrainConfig, member: usize, phase: u64) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(train.seed, &[TAG_TRAIN, member as u64, phase]),
        ..train.clone()
    }
}

fn member_error(member: usize, e: Error) -> Error {
    match e {
        Error::Diverged {
            context,
            last_finite_epoch,
        } => Error::Diverged {
            context: format!("member {member}: {context}"),
            last_finite_epoch,
        },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingPhase {
    Quantiles,
    Mean,
    Variance,
    Dropout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLog {
    pub phase: TrainingPhase,
    pub epoch_losses: Vec<f64>,
}

/// Per member, the phases it was trained in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub members: Vec<Vec<PhaseLog>>,
}

/// Ensemble of quantile regressors; every member has three heads per
/// output, ordered `(q_α, q_0.5, q_{1-α})`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSurrogate {
    members: Vec<MlpParams>,
    alpha: AlphaLevel,
    bag_fraction: f64,
    scaler: Standardizer,
}

impl QuantileSurrogate {
    pub fn from_members(
        members: Vec<MlpParams>,
        alpha: AlphaLevel,
        bag_fraction: f64,
        scaler: Standardizer,
    ) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::State(format!(
                "an E-QR surrogate needs at least 2 trained members, got {}",
                members.len()
            )));
        }
        let sizes = members[0].layer_sizes();
        if members.iter().any(|m| m.layer_sizes() != sizes) {
            return Err(Error::Config("E-QR members must share layer sizes".into()));
        }
        if sizes[0] != scaler.input_dim() || *sizes.last().unwrap() != 3 * scaler.output_dim() {
            return Err(Error::shape(
                "E-QR heads",
                3 * scaler.output_dim(),
                *sizes.last().unwrap(),
            ));
        }
        Ok(Self {
            members,
            alpha,
            bag_fraction,
            scaler,
        })
    }

    pub fn members(&self) -> &[MlpParams] {
        &self.members
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn alpha(&self) -> AlphaLevel {
        self.alpha
    }

    pub fn bag_fraction(&self) -> f64 {
        self.bag_fraction
    }

    pub fn scaler(&self) -> &Standardizer {
        &self.scaler
    }

    /// Raw head values in target units, indexed `[member][row][output] -> [q_α, q_0.5, q_{1-α}]`.
    pub fn member_heads(&self, xs: ArrayView2<'_, f64>) -> Result<Vec<Vec<Vec<[f64; 3]>>>> {
        self.scaler.check_input(xs.ncols())?;
        let z = self.scaler.inputs(xs);
        let o = self.scaler.output_dim();
        self.members
            .iter()
            .map(|m| {
                let out = m.forward_batch(z.view())?;
                Ok(out
                    .rows()
                    .into_iter()
                    .map(|row| {
                        (0..o)
                            .map(|j| {
                                let (mu, s) = (self.scaler.target_mean[j], self.scaler.target_scale[j]);
                                [mu + s * row[3 * j], mu + s * row[3 * j + 1], mu + s * row[3 * j + 2]]
                            })
                            .collect()
                    })
                    .collect())
            })
            .collect()
    }
}

pub fn eqr_train(dataset: &Dataset, config: &EqrConfig) -> Result<(QuantileSurrogate, TrainingLog)> {
    check_ensemble(dataset, config.n_members, config.bag_fraction)?;
    config.train.validate()?;
    let scaler = Standardizer::fit(dataset);
    let x = scaler.inputs(dataset.inputs());
    let y = scaler.targets(dataset.targets());
    let sizes = config
        .network
        .layer_sizes(dataset.input_dim(), 3 * dataset.output_dim());
    let loss = LossKind::Pinball {
        levels: config.alpha.head_levels().to_vec(),
    };
    let trained: Vec<(MlpParams, PhaseLog)> = (0..config.n_members)
        .into_par_iter()
        .map(|member| {
            let rows = bag_rows(dataset.len(), config.bag_fraction, config.train.seed, member);
            let xb = x.select(Axis(0), &rows);
            let yb = y.select(Axis(0), &rows);
            let init = init_member(&sizes, &config.network, &config.train, member)?;
            let cfg = member_train_config(&config.train, member, 0);
            let (params, log) = nn::train(init, xb.view(), yb.view(), &loss, &cfg)
                .map_err(|e| member_error(member, e))?;
            Ok((
                params,
                PhaseLog {
                    phase: TrainingPhase::Quantiles,
                    epoch_losses: log.epoch_losses,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let (members, logs): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    let model = QuantileSurrogate::from_members(members, config.alpha, config.bag_fraction, scaler)?;
    Ok((
        model,
        TrainingLog {
            members: logs.into_iter().map(|l| vec![l]).collect(),
        },
    ))
}

pub fn eqr_predict(model: &QuantileSurrogate, xs: ArrayView2<'_, f64>) -> Result<Vec<Vec<UncertaintyEstimate>>> {
    let heads = model.member_heads(xs)?;
    let n = model.n_members() as f64;
    let o = model.scaler.output_dim();
    Ok((0..xs.nrows())
        .map(|i| {
            (0..o)
                .map(|j| {
                    let medians = heads.iter().map(|m| m[i][j][1]);
                    let (mean, sigma_epistemic) = mean_std(medians);
                    let spread = heads.iter().map(|m| m[i][j][2] - m[i][j][0]).sum::<f64>() / n;
                    UncertaintyEstimate {
                        mean,
                        sigma_epistemic,
                        sigma_aleatoric: sigma_from_spread(spread, model.alpha),
                    }
                })
                .collect()
        })
        .collect())
}

/// One deep-ensemble member: a mean network and a log-variance network,
/// fitted one after the other.
#[derive(Debug, Clone, PartialEq)]
pub struct DeMember {
    pub mean: MlpParams,
    pub log_var: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepEnsemble {
    members: Vec<DeMember>,
    bag_fraction: f64,
    scaler: Standardizer,
}

impl DeepEnsemble {
    pub fn from_members(members: Vec<DeMember>, bag_fraction: f64, scaler: Standardizer) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::State(format!(
                "a deep ensemble needs at least 2 trained members, got {}",
                members.len()
            )));
        }
        for m in &members {
            for net in [&m.mean, &m.log_var] {
                if net.input_dim() != scaler.input_dim() || net.output_dim() != scaler.output_dim() {
                    return Err(Error::shape("deep-ensemble heads", scaler.output_dim(), net.output_dim()));
                }
            }
        }
        Ok(Self {
            members,
            bag_fraction,
            scaler,
        })
    }

    pub fn members(&self) -> &[DeMember] {
        &self.members
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn bag_fraction(&self) -> f64 {
        self.bag_fraction
    }

    pub fn scaler(&self) -> &Standardizer {
        &self.scaler
    }

    /// `[member][row][output] -> (mu, sigma²)` in target units.
    pub fn member_outputs(&self, xs: ArrayView2<'_, f64>) -> Result<Vec<Vec<Vec<(f64, f64)>>>> {
        self.scaler.check_input(xs.ncols())?;
        let z = self.scaler.inputs(xs);
        let o = self.scaler.output_dim();
        self.members
            .iter()
            .map(|m| {
                let mu = m.mean.forward_batch(z.view())?;
                let lv = m.log_var.forward_batch(z.view())?;
                Ok((0..xs.nrows())
                    .map(|i| {
                        (0..o)
                            .map(|j| {
                                let s = self.scaler.target_scale[j];
                                (
                                    self.scaler.target_mean[j] + s * mu[[i, j]],
                                    s * s * lv[[i, j]].exp(),
                                )
                            })
                            .collect()
                    })
                    .collect())
            })
            .collect()
    }
}

/// Two phases per member: the mean network with squared error, then the
/// log-variance network with Gaussian NLL on the frozen mean's residuals.
pub fn de_train(dataset: &Dataset, config: &DeConfig) -> Result<(DeepEnsemble, TrainingLog)> {
    check_ensemble(dataset, config.n_members, config.bag_fraction)?;
    config.train.validate()?;
    let scaler = Standardizer::fit(dataset);
    let x = scaler.inputs(dataset.inputs());
    let y = scaler.targets(dataset.targets());
    let sizes = config.network.layer_sizes(dataset.input_dim(), dataset.output_dim());
    let trained: Vec<(DeMember, Vec<PhaseLog>)> = (0..config.n_members)
        .into_par_iter()
        .map(|member| {
            let rows = bag_rows(dataset.len(), config.bag_fraction, config.train.seed, member);
            let xb = x.select(Axis(0), &rows);
            let yb = y.select(Axis(0), &rows);
            let init = init_member(&sizes, &config.network, &config.train, member)?;
            let (mean, log_mean) = nn::train(
                init,
                xb.view(),
                yb.view(),
                &LossKind::Mse,
                &member_train_config(&config.train, member, 0),
            )
            .map_err(|e| member_error(member, e))?;

            let residuals = &yb - &mean.forward_batch(xb.view())?;
            let mut rng = rng_from_seed(derive_seed(config.train.seed, &[TAG_INIT, TAG_PHASE2, member as u64]));
            let init_var = MlpParams::init(&sizes, config.network.activation, config.train.weight_init_scale, &mut rng)?;
            let (log_var, log_var_log) = nn::train(
                init_var,
                xb.view(),
                residuals.view(),
                &LossKind::ResidualNll,
                &member_train_config(&config.train, member, TAG_PHASE2),
            )
            .map_err(|e| member_error(member, e))?;
            Ok((
                DeMember { mean, log_var },
                vec![
                    PhaseLog {
                        phase: TrainingPhase::Mean,
                        epoch_losses: log_mean.epoch_losses,
                    },
                    PhaseLog {
                        phase: TrainingPhase::Variance,
                        epoch_losses: log_var_log.epoch_losses,
                    },
                ],
            ))
        })
        .collect::<Result<_>>()?;
    let (members, logs): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    Ok((
        DeepEnsemble::from_members(members, config.bag_fraction, scaler)?,
        TrainingLog { members: logs },
    ))
}

pub fn de_predict(model: &DeepEnsemble, xs: ArrayView2<'_, f64>) -> Result<Vec<Vec<UncertaintyEstimate>>> {
    let outs = model.member_outputs(xs)?;
    let n = model.n_members() as f64;
    let o = model.scaler.output_dim();
    Ok((0..xs.nrows())
        .map(|i| {
            (0..o)
                .map(|j| {
                    let (mean, sigma_epistemic) = mean_std(outs.iter().map(|m| m[i][j].0));
                    let var = outs.iter().map(|m| m[i][j].1).sum::<f64>() / n;
                    UncertaintyEstimate {
                        mean,
                        sigma_epistemic,
                        sigma_aleatoric: var.sqrt(),
                    }
                })
                .collect()
        })
        .collect())
}

/// A single network whose spread under dropout stands in for epistemic
/// uncertainty. There is no aleatoric channel.
#[derive(Debug, Clone, PartialEq)]
pub struct McDropoutModel {
    params: MlpParams,
    dropout_rate: f64,
    n_passes: usize,
    predict_seed: u64,
    scaler: Standardizer,
}

impl McDropoutModel {
    pub fn new(
        params: MlpParams,
        dropout_rate: f64,
        n_passes: usize,
        predict_seed: u64,
        scaler: Standardizer,
    ) -> Result<Self> {
        if !(dropout_rate > 0.0 && dropout_rate < 1.0) {
            return Err(Error::Config(format!("MC dropout needs a rate in (0, 1), got {dropout_rate}")));
        }
        if n_passes < 2 {
            return Err(Error::Config(format!("MC dropout needs at least 2 passes, got {n_passes}")));
        }
        if params.input_dim() != scaler.input_dim() || params.output_dim() != scaler.output_dim() {
            return Err(Error::shape("MC dropout outputs", scaler.output_dim(), params.output_dim()));
        }
        Ok(Self {
            params,
            dropout_rate,
            n_passes,
            predict_seed,
            scaler,
        })
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn n_passes(&self) -> usize {
        self.n_passes
    }

    pub fn predict_seed(&self) -> u64 {
        self.predict_seed
    }

    pub fn scaler(&self) -> &Standardizer {
        &self.scaler
    }
}

/// Trained on the full dataset (no bagging) with squared error and dropout.
pub fn mc_dropout_train(dataset: &Dataset, config: &McDropoutConfig) -> Result<(McDropoutModel, TrainingLog)> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    config.train.validate()?;
    if config.n_passes < 2 {
        return Err(Error::Config(format!("MC dropout needs at least 2 passes, got {}", config.n_passes)));
    }
    let scaler = Standardizer::fit(dataset);
    let x = scaler.inputs(dataset.inputs());
    let y = scaler.targets(dataset.targets());
    let sizes = config.network.layer_sizes(dataset.input_dim(), dataset.output_dim());
    let init = init_member(&sizes, &config.network, &config.train, 0)?;
    let (params, log) = nn::train(
        init,
        x.view(),
        y.view(),
        &LossKind::Mse,
        &member_train_config(&config.train, 0, 0),
    )?;
    let model = McDropoutModel::new(
        params,
        config.train.dropout_rate,
        config.n_passes,
        derive_seed(config.train.seed, &[TAG_PREDICT]),
        scaler,
    )?;
    Ok((
        model,
        TrainingLog {
            members: vec![vec![PhaseLog {
                phase: TrainingPhase::Dropout,
                epoch_losses: log.epoch_losses,
            }]],
        },
    ))
}

/// `T` stochastic passes at one input.
pub fn mc_dropout_predict(model: &McDropoutModel, x: &[f64], rng: &mut Rng) -> Result<Vec<UncertaintyEstimate>> {
    model.scaler.check_input(x.len())?;
    if model.n_passes < 2 {
        return Err(Error::Config("MC dropout needs at least 2 passes".into()));
    }
    let row = ArrayView2::from_shape((1, x.len()), x).expect("contiguous");
    let z = model.scaler.inputs(row);
    let reps = z
        .broadcast((model.n_passes, x.len()))
        .expect("single row broadcasts")
        .to_owned();
    let out = model.params.forward_batch_dropout(reps.view(), model.dropout_rate, rng)?;
    Ok((0..model.scaler.output_dim())
        .map(|j| {
            let s = model.scaler.target_scale[j];
            let (m, sd) = mean_std(out.column(j).iter().copied());
            UncertaintyEstimate {
                mean: model.scaler.target_mean[j] + s * m,
                sigma_epistemic: s * sd,
                sigma_aleatoric: 0.0,
            }
        })
        .collect())
}

fn input_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// Any trained surrogate.
#[derive(Debug, Clone, PartialEq)]
pub enum Surrogate {
    Eqr(QuantileSurrogate),
    De(DeepEnsemble),
    McDropout(McDropoutModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurrogateConfig {
    Eqr(EqrConfig),
    De(DeConfig),
    McDropout(McDropoutConfig),
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig::Eqr(EqrConfig::default())
    }
}

impl SurrogateConfig {
    pub fn train_config(&self) -> &TrainConfig {
        match self {
            SurrogateConfig::Eqr(c) => &c.train,
            SurrogateConfig::De(c) => &c.train,
            SurrogateConfig::McDropout(c) => &c.train,
        }
    }

    pub fn train_config_mut(&mut self) -> &mut TrainConfig {
        match self {
            SurrogateConfig::Eqr(c) => &mut c.train,
            SurrogateConfig::De(c) => &mut c.train,
            SurrogateConfig::McDropout(c) => &mut c.train,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            SurrogateConfig::Eqr(_) => "eqr",
            SurrogateConfig::De(_) => "de",
            SurrogateConfig::McDropout(_) => "mc_dropout",
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        let check_net = |n: &NetworkConfig| {
            if n.hidden.contains(&0) {
                Err(Error::Config("hidden layer widths must be positive".into()))
            } else {
                Ok(())
            }
        };
        match self {
            SurrogateConfig::Eqr(c) => {
                check_net(&c.network)?;
                if c.n_members < 2 {
                    return Err(Error::Config("n_members must be at least 2".into()));
                }
                if !(c.bag_fraction > 0.0 && c.bag_fraction <= 1.0) {
                    return Err(Error::Config("bag_fraction must be in (0, 1]".into()));
                }
            }
            SurrogateConfig::De(c) => {
                check_net(&c.network)?;
                if c.n_members < 2 {
                    return Err(Error::Config("n_members must be at least 2".into()));
                }
                if !(c.bag_fraction > 0.0 && c.bag_fraction <= 1.0) {
                    return Err(Error::Config("bag_fraction must be in (0, 1]".into()));
                }
            }
            SurrogateConfig::McDropout(c) => {
                check_net(&c.network)?;
                if c.n_passes < 2 {
                    return Err(Error::Config("n_passes must be at least 2".into()));
                }
                if c.train.dropout_rate <= 0.0 {
                    return Err(Error::Config("mc_dropout needs dropout_rate > 0".into()));
                }
            }
        }
        Ok(())
    }
}

impl Surrogate {
    pub fn train(dataset: &Dataset, config: &SurrogateConfig) -> Result<(Self, TrainingLog)> {
        config.validate()?;
        Ok(match config {
            SurrogateConfig::Eqr(c) => {
                let (m, l) = eqr_train(dataset, c)?;
                (Surrogate::Eqr(m), l)
            }
            SurrogateConfig::De(c) => {
                let (m, l) = de_train(dataset, c)?;
                (Surrogate::De(m), l)
            }
            SurrogateConfig::McDropout(c) => {
                let (m, l) = mc_dropout_train(dataset, c)?;
                (Surrogate::McDropout(m), l)
            }
        })
    }

    fn scaler(&self) -> &Standardizer {
        match self {
            Surrogate::Eqr(m) => &m.scaler,
            Surrogate::De(m) => &m.scaler,
            Surrogate::McDropout(m) => &m.scaler,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.scaler().input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.scaler().output_dim()
    }

    /// Estimates for each row of `xs`, one per output. MC dropout keys its
    /// masks on the input bits, so results do not depend on batching.
    pub fn predict_batch(&self, xs: ArrayView2<'_, f64>) -> Result<Vec<Vec<UncertaintyEstimate>>> {
        match self {
            Surrogate::Eqr(m) => eqr_predict(m, xs),
            Surrogate::De(m) => de_predict(m, xs),
            Surrogate::McDropout(m) => xs
                .rows()
                .into_iter()
                .map(|row| {
                    let x = row.to_vec();
                    let mut rng = rng_from_seed(derive_seed(m.predict_seed, &input_key(&x)));
                    mc_dropout_predict(m, &x, &mut rng)
                })
                .collect(),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<UncertaintyEstimate>> {
        let row = ArrayView2::from_shape((1, x.len()), x).expect("contiguous");
        Ok(self.predict_batch(row)?.remove(0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, container::encode(self)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        container::decode(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        container::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        container::decode(bytes)
    }
}
