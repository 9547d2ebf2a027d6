//! Demand response to prices. Two interchangeable models stand behind the
//! environment transition:
//!
//! * an analytic redistribution, where a flexible share of each station's
//!   load moves across its closed neighbourhood in proportion to
//!   `exp(-alpha * price)`;
//! * a one-round message-passing network, pretrained on observed
//!   hour-to-hour utilization and frozen afterwards.
//!
//! Both work in utilization ratios internally and return loads clipped to
//! `[0, capacity]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetBundle, PRICE_MAX, PRICE_MIN};
use crate::error::{Error, Result};
use crate::graph::StationNetwork;
use crate::matrix::{accumulate_outer, accumulate_vec_mat, Matrix};
use crate::optim::{Optimizer, Parameters};
use crate::params_io::{self, FlatParams};

/// Per-station input width of the message-passing model.
pub const GNN_FEATURES: usize = 4;
pub const DEFAULT_GNN_HIDDEN: usize = 16;
pub const GNN_MAGIC: &str = "evb-gnn";
/// Half-width of the uniform weight initialization.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticityParams {
    /// Price sensitivity, per CNY/kWh.
    pub alpha: f64,
    /// Fraction of each station's load that is willing to move.
    pub mu: f64,
}

impl Default for ElasticityParams {
    fn default() -> Self {
        Self { alpha: 1.0, mu: 0.3 }
    }
}

impl ElasticityParams {
    pub fn new(alpha: f64, mu: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Argument(format!("alpha must be positive, got {alpha}")));
        }
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::Argument(format!("mu must lie in [0, 1], got {mu}")));
        }
        Ok(Self { alpha, mu })
    }
}

/// Redistributes flexible demand without clipping. The column total is
/// preserved up to rounding.
pub fn analytic_step_unclipped(
    loads: &[f64],
    prices: &[f64],
    network: &StationNetwork,
    params: &ElasticityParams,
) -> Vec<f64> {
    let attractiveness: Vec<f64> = prices.iter().map(|p| (-params.alpha * p).exp()).collect();
    let mut out: Vec<f64> = loads.iter().map(|l| (1.0 - params.mu) * l).collect();
    for (i, &load) in loads.iter().enumerate() {
        let flexible = params.mu * load;
        if flexible == 0.0 {
            continue;
        }
        let hood = network.neighborhood(i).expect("station index in range");
        let total: f64 = hood.iter().map(|&j| attractiveness[j]).sum();
        for &j in &hood {
            out[j] += flexible * attractiveness[j] / total;
        }
    }
    out
}

pub fn analytic_step(
    loads: &[f64],
    capacities: &[f64],
    prices: &[f64],
    network: &StationNetwork,
    params: &ElasticityParams,
) -> Vec<f64> {
    analytic_step_unclipped(loads, prices, network, params)
        .into_iter()
        .zip(capacities)
        .map(|(l, &c)| l.clamp(0.0, c))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    /// `F x H`, applied to a station's own features.
    pub w_self: Matrix,
    /// `F x H`, applied to the mean of neighbour features.
    pub w_neigh: Matrix,
    pub b_hidden: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl GnnParams {
    pub fn zeros(features: usize, hidden: usize) -> Self {
        Self {
            w_self: Matrix::zeros(features, hidden),
            w_neigh: Matrix::zeros(features, hidden),
            b_hidden: vec![0.0; hidden],
            w_out: vec![0.0; hidden],
            b_out: vec![0.0],
        }
    }

    /// Uniform in `[-INIT_SCALE, INIT_SCALE]`.
    pub fn init(features: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(features, hidden);
        for s in p.slices_mut() {
            for v in s {
                *v = rng.gen_range(-INIT_SCALE..=INIT_SCALE);
            }
        }
        p
    }

    pub fn features(&self) -> usize {
        self.w_self.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_self.cols()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        params_io::save_flat(path, GNN_MAGIC, &self.dims(), &self.flatten())
    }

    pub fn write_to<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        params_io::write_flat(out, GNN_MAGIC, &self.dims(), &self.flatten())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_flat(&params_io::load_flat(path, GNN_MAGIC)?)
    }

    pub fn from_flat(flat: &FlatParams) -> Result<Self> {
        let mut p = Self::zeros(flat.dim("F")?, flat.dim("H")?);
        fill_from(&mut p, &flat.values)?;
        Ok(p)
    }

    fn dims(&self) -> [(&'static str, usize); 2] {
        [("F", self.features()), ("H", self.hidden())]
    }
}

impl Parameters for GnnParams {
    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w_self.as_slice(),
            self.w_neigh.as_slice(),
            &self.b_hidden,
            &self.w_out,
            &self.b_out,
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_self.as_mut_slice(),
            self.w_neigh.as_mut_slice(),
            &mut self.b_hidden,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

pub(crate) fn fill_from<P: Parameters>(p: &mut P, values: &[f64]) -> Result<()> {
    let expected = p.num_params();
    if values.len() != expected {
        return Err(Error::Validation(format!(
            "parameter file holds {} values, expected {expected}",
            values.len()
        )));
    }
    let mut offset = 0;
    for s in p.slices_mut() {
        s.copy_from_slice(&values[offset..offset + s.len()]);
        offset += s.len();
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean of the feature rows of `i`'s adjacent stations; zero for an
/// isolated station.
fn neighbor_mean(features: &Matrix, network: &StationNetwork, i: usize) -> Vec<f64> {
    let mut m = vec![0.0; features.cols()];
    let nbrs = network.neighbors(i);
    if nbrs.is_empty() {
        return m;
    }
    for &j in nbrs {
        for (a, b) in m.iter_mut().zip(features.row(j)) {
            *a += b;
        }
    }
    let k = nbrs.len() as f64;
    m.iter_mut().for_each(|v| *v /= k);
    m
}

fn check_shapes(features: &Matrix, network: &StationNetwork, params: &GnnParams) -> Result<()> {
    if features.rows() != network.len() || features.cols() != params.features() {
        return Err(Error::Argument(format!(
            "features are {}x{}, expected {}x{}",
            features.rows(),
            features.cols(),
            network.len(),
            params.features()
        )));
    }
    if !features.is_finite() {
        return Err(Error::Argument("features contain non-finite values".into()));
    }
    Ok(())
}

struct GnnTrace {
    means: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    out: Vec<f64>,
}

fn gnn_trace(features: &Matrix, network: &StationNetwork, params: &GnnParams) -> GnnTrace {
    let n = features.rows();
    let mut trace = GnnTrace {
        means: Vec::with_capacity(n),
        hidden: Vec::with_capacity(n),
        out: Vec::with_capacity(n),
    };
    for i in 0..n {
        let mean = neighbor_mean(features, network, i);
        let mut z = params.b_hidden.clone();
        accumulate_vec_mat(features.row(i), &params.w_self, &mut z);
        accumulate_vec_mat(&mean, &params.w_neigh, &mut z);
        let h: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
        let o = params.b_out[0] + h.iter().zip(&params.w_out).map(|(a, b)| a * b).sum::<f64>();
        trace.out.push(sigmoid(o));
        trace.means.push(mean);
        trace.hidden.push(h);
    }
    trace
}

/// Predicted utilization per station, each in `(0, 1)`.
pub fn gnn_forward(features: &Matrix, network: &StationNetwork, params: &GnnParams) -> Result<Vec<f64>> {
    check_shapes(features, network, params)?;
    Ok(gnn_trace(features, network, params).out)
}

/// Gradient of `sum_i upstream[i] * u_i` with respect to every parameter,
/// accumulated into `grads`. Returns the forward output.
pub fn gnn_backward(
    features: &Matrix,
    network: &StationNetwork,
    params: &GnnParams,
    upstream: &[f64],
    grads: &mut GnnParams,
) -> Result<Vec<f64>> {
    check_shapes(features, network, params)?;
    let trace = gnn_trace(features, network, params);
    let hidden = params.hidden();
    let mut dz = vec![0.0; hidden];
    for i in 0..features.rows() {
        let u = trace.out[i];
        let d_out = upstream[i] * u * (1.0 - u);
        grads.b_out[0] += d_out;
        let h = &trace.hidden[i];
        for k in 0..hidden {
            grads.w_out[k] += d_out * h[k];
            dz[k] = d_out * params.w_out[k] * (1.0 - h[k] * h[k]);
            grads.b_hidden[k] += dz[k];
        }
        accumulate_outer(features.row(i), &dz, &mut grads.w_self);
        accumulate_outer(&trace.means[i], &dz, &mut grads.w_neigh);
    }
    Ok(trace.out)
}

/// Feature rows `(utilization, normalized new price, relative price change,
/// mean neighbour utilization)`.
pub fn gnn_features(
    loads: &[f64],
    capacities: &[f64],
    prev_prices: &[f64],
    new_prices: &[f64],
    network: &StationNetwork,
) -> Matrix {
    let n = loads.len();
    let util: Vec<f64> = loads.iter().zip(capacities).map(|(l, c)| l / c).collect();
    let mut x = Matrix::zeros(n, GNN_FEATURES);
    for i in 0..n {
        let nbrs = network.neighbors(i);
        let nbr_util = if nbrs.is_empty() {
            0.0
        } else {
            nbrs.iter().map(|&j| util[j]).sum::<f64>() / nbrs.len() as f64
        };
        let row = x.row_mut(i);
        row[0] = util[i];
        row[1] = normalize_price(new_prices[i]);
        row[2] = (new_prices[i] - prev_prices[i]) / prev_prices[i];
        row[3] = nbr_util;
    }
    x
}

pub fn normalize_price(p: f64) -> f64 {
    (p - PRICE_MIN) / (PRICE_MAX - PRICE_MIN)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-2,
            seed: 0,
            hidden: DEFAULT_GNN_HIDDEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub params: GnnParams,
    /// Training MSE at the returned parameters.
    pub final_loss: f64,
    /// MSE before each epoch's update.
    pub losses: Vec<f64>,
}

struct Sample {
    features: Matrix,
    target: Vec<f64>,
}

fn pretrain_samples(dataset: &DatasetBundle, network: &StationNetwork) -> Result<Vec<Sample>> {
    if dataset.station_ids() != network.station_ids() {
        return Err(Error::Argument(
            "dataset columns do not follow the network's station order".into(),
        ));
    }
    if dataset.n_steps() < 2 {
        return Err(Error::Argument("pretraining needs at least two hours".into()));
    }
    let caps = network.capacities_f64();
    Ok((0..dataset.n_steps() - 1)
        .map(|t| {
            let features = gnn_features(
                dataset.occupancy.row(t),
                &caps,
                dataset.price.row(t),
                dataset.price.row(t + 1),
                network,
            );
            let target = dataset
                .occupancy
                .row(t + 1)
                .iter()
                .zip(&caps)
                .map(|(l, c)| l / c)
                .collect();
            Sample { features, target }
        })
        .collect())
}

fn mse_and_grad(samples: &[Sample], network: &StationNetwork, params: &GnnParams) -> Result<(f64, GnnParams)> {
    let count = (samples.len() * network.len()) as f64;
    let mut grads = GnnParams::zeros(params.features(), params.hidden());
    let mut loss = 0.0;
    for s in samples {
        let u = gnn_forward(&s.features, network, params)?;
        let upstream: Vec<f64> = u.iter().zip(&s.target).map(|(a, b)| 2.0 * (a - b) / count).collect();
        loss += u.iter().zip(&s.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        gnn_backward(&s.features, network, params, &upstream, &mut grads)?;
    }
    Ok((loss / count, grads))
}

/// Fits the message-passing model to next-hour utilization by full-batch
/// Adam on mean squared error.
pub fn pretrain(dataset: &DatasetBundle, network: &StationNetwork, config: &PretrainConfig) -> Result<PretrainOutcome> {
    let samples = pretrain_samples(dataset, network)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = GnnParams::init(GNN_FEATURES, config.hidden, &mut rng);
    let mut opt = Optimizer::adam(config.lr);
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (loss, grads) = mse_and_grad(&samples, network, &params)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "pretraining epoch",
                index: epoch,
                loss,
            });
        }
        losses.push(loss);
        opt.step(&mut params, &grads);
    }
    let (final_loss, _) = mse_and_grad(&samples, network, &params)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            stage: "pretraining epoch",
            index: config.epochs,
            loss: final_loss,
        });
    }
    Ok(PretrainOutcome {
        params,
        final_loss,
        losses,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum DemandModel {
    Analytic(ElasticityParams),
    Gnn(GnnParams),
}

impl DemandModel {
    /// Loads after the move from `prev_prices` to `new_prices`, in
    /// `[0, capacity]` per station.
    pub fn predict(
        &self,
        loads: &[f64],
        capacities: &[f64],
        prev_prices: &[f64],
        new_prices: &[f64],
        network: &StationNetwork,
    ) -> Result<Vec<f64>> {
        let n = network.len();
        if [loads.len(), capacities.len(), prev_prices.len(), new_prices.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::Argument(format!("inputs must all have {n} stations")));
        }
        match self {
            DemandModel::Analytic(p) => Ok(analytic_step(loads, capacities, new_prices, network, p)),
            DemandModel::Gnn(params) => {
                let x = gnn_features(loads, capacities, prev_prices, new_prices, network);
                let u = gnn_forward(&x, network, params)?;
                Ok(u.iter().zip(capacities).map(|(u, c)| (u * c).clamp(0.0, *c)).collect())
            }
        }
    }
}
