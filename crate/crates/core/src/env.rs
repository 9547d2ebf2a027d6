//! Pricing MDP over a station network: state encoding, the balance/overload
//! reward, and a transition that applies price changes through a demand
//! model while walking consecutive dataset hours.

use crate::data::{DatasetBundle, PRICE_MAX, PRICE_MIN};
use crate::demand::{normalize_price, DemandModel};
use crate::error::{Error, Result};
use crate::graph::StationNetwork;
use crate::matrix::Matrix;

/// Relative price changes selectable per station.
pub const ACTION_DELTAS: [f64; 7] = [-0.3, -0.2, -0.1, 0.0, 0.1, 0.2, 0.3];
pub const NUM_ACTIONS: usize = ACTION_DELTAS.len();
/// Index of the zero price change.
pub const HOLD_ACTION: usize = 3;

/// Per-station input width of the Q-network.
pub const STATE_FEATURES: usize = 4;

/// Utilization at which the overload sigmoid crosses one half.
pub const OVERLOAD_THRESHOLD: f64 = 0.9;
pub const DEFAULT_KAPPA: f64 = 30.0;
pub const DEFAULT_LAMBDA: f64 = 1.0;
/// Smallest penalty sum the reward divides by, capping rewards at 1e8.
pub const PENALTY_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PriceAction(Vec<usize>);

impl PriceAction {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if let Some(bad) = indices.iter().find(|&&a| a >= NUM_ACTIONS) {
            return Err(Error::Argument(format!("action index {bad} outside 0..{NUM_ACTIONS}")));
        }
        Ok(Self(indices))
    }

    /// Same index at every station.
    pub fn uniform(n: usize, index: usize) -> Result<Self> {
        Self::new(vec![index; n])
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn delta(&self, station: usize) -> f64 {
        ACTION_DELTAS[self.0[station]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub loads: Vec<f64>,
    pub capacities: Vec<f64>,
    pub prices: Vec<f64>,
    pub hour_index: usize,
    /// Demand-model utilization forecast at unchanged prices.
    pub forecast: Vec<f64>,
}

impl NetworkState {
    pub fn utilization(&self) -> Vec<f64> {
        self.loads.iter().zip(&self.capacities).map(|(l, c)| l / c).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub variance_term: f64,
    pub overload_term: f64,
    pub lambda: f64,
    pub reward: f64,
}

/// `sum_i (L_i/C_i - sum L / sum C)^2`.
pub fn variance_term(loads: &[f64], capacities: &[f64]) -> Result<f64> {
    if let Some(k) = capacities.iter().position(|&c| c <= 0.0) {
        return Err(Error::Domain(format!("station {k} has non-positive capacity")));
    }
    let network_ratio = loads.iter().sum::<f64>() / capacities.iter().sum::<f64>();
    Ok(loads
        .iter()
        .zip(capacities)
        .map(|(l, c)| {
            let d = l / c - network_ratio;
            d * d
        })
        .sum())
}

/// `sum_i 1 / (1 + exp(-kappa (L_i/C_i - 0.9)))`.
pub fn overload_term(loads: &[f64], capacities: &[f64], kappa: f64) -> f64 {
    loads
        .iter()
        .zip(capacities)
        .map(|(l, c)| 1.0 / (1.0 + (-kappa * (l / c - OVERLOAD_THRESHOLD)).exp()))
        .sum()
}

pub fn reward(loads: &[f64], capacities: &[f64], lambda: f64, kappa: f64) -> Result<RewardBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::Argument(format!("lambda must be non-negative, got {lambda}")));
    }
    let variance = variance_term(loads, capacities)?;
    let overload = overload_term(loads, capacities, kappa);
    Ok(RewardBreakdown {
        variance_term: variance,
        overload_term: overload,
        lambda,
        reward: 1.0 / (variance + lambda * overload).max(PENALTY_FLOOR),
    })
}

/// Population variance of per-station utilization.
pub fn utilization_variance(loads: &[f64], capacities: &[f64]) -> f64 {
    let util: Vec<f64> = loads.iter().zip(capacities).map(|(l, c)| l / c).collect();
    let n = util.len() as f64;
    let mean = util.iter().sum::<f64>() / n;
    util.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / n
}

/// `p_i (1 + delta_i)`, clamped to the observed price band.
pub fn apply_action(prices: &[f64], action: &PriceAction) -> Vec<f64> {
    prices
        .iter()
        .enumerate()
        .map(|(i, p)| (p * (1.0 + action.delta(i))).clamp(PRICE_MIN, PRICE_MAX))
        .collect()
}

/// Rows `(utilization, normalized price, forecast utilization, mean
/// neighbour utilization)`.
pub fn encode_features(state: &NetworkState, network: &StationNetwork) -> Matrix {
    let util = state.utilization();
    let mut x = Matrix::zeros(util.len(), STATE_FEATURES);
    for (i, &u) in util.iter().enumerate() {
        let nbrs = network.neighbors(i);
        let nbr = if nbrs.is_empty() {
            u
        } else {
            nbrs.iter().map(|&j| util[j]).sum::<f64>() / nbrs.len() as f64
        };
        x.row_mut(i)
            .copy_from_slice(&[u, normalize_price(state.prices[i]), state.forecast[i], nbr]);
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Transition {
        next: NetworkState,
        reward: RewardBreakdown,
    },
    /// No further hour exists in the dataset.
    EpisodeEnd,
}

/// The data-driven environment: a network, an hourly dataset aligned with
/// it, a frozen demand model, and the reward weights.
#[derive(Debug, Clone, Copy)]
pub struct Environment<'a> {
    pub network: &'a StationNetwork,
    pub dataset: &'a DatasetBundle,
    pub model: &'a DemandModel,
    pub lambda: f64,
    pub kappa: f64,
}

impl<'a> Environment<'a> {
    pub fn new(
        network: &'a StationNetwork,
        dataset: &'a DatasetBundle,
        model: &'a DemandModel,
        lambda: f64,
        kappa: f64,
    ) -> Result<Self> {
        if dataset.station_ids() != network.station_ids() {
            return Err(Error::Argument(
                "dataset columns do not follow the network's station order".into(),
            ));
        }
        if !(kappa > 0.0) {
            return Err(Error::Argument(format!("kappa must be positive, got {kappa}")));
        }
        if !(lambda >= 0.0) {
            return Err(Error::Argument(format!("lambda must be non-negative, got {lambda}")));
        }
        Ok(Self {
            network,
            dataset,
            model,
            lambda,
            kappa,
        })
    }

    pub fn n_hours(&self) -> usize {
        self.dataset.n_steps()
    }

    /// State built from the recorded loads and prices at `hour`.
    pub fn observe(&self, hour: usize) -> Result<NetworkState> {
        if hour >= self.n_hours() {
            return Err(Error::Argument(format!(
                "hour {hour} beyond {} recorded hours",
                self.n_hours()
            )));
        }
        let capacities = self.network.capacities_f64();
        let loads = self.dataset.occupancy.row(hour).to_vec();
        let prices = self.dataset.price.row(hour).to_vec();
        let forecast = self.forecast(&loads, &capacities, &prices)?;
        Ok(NetworkState {
            loads,
            capacities,
            prices,
            hour_index: hour,
            forecast,
        })
    }

    fn forecast(&self, loads: &[f64], capacities: &[f64], prices: &[f64]) -> Result<Vec<f64>> {
        let projected = self.model.predict(loads, capacities, prices, prices, self.network)?;
        Ok(projected.iter().zip(capacities).map(|(l, c)| l / c).collect())
    }

    pub fn reward(&self, loads: &[f64], capacities: &[f64]) -> Result<RewardBreakdown> {
        reward(loads, capacities, self.lambda, self.kappa)
    }

    pub fn step(&self, state: &NetworkState, action: &PriceAction) -> Result<StepOutcome> {
        if action.len() != self.network.len() {
            return Err(Error::Argument(format!(
                "action covers {} stations, network has {}",
                action.len(),
                self.network.len()
            )));
        }
        if state.hour_index + 1 >= self.n_hours() {
            return Ok(StepOutcome::EpisodeEnd);
        }
        let prices = apply_action(&state.prices, action);
        let loads = self
            .model
            .predict(&state.loads, &state.capacities, &state.prices, &prices, self.network)?;
        let reward = self.reward(&loads, &state.capacities)?;
        let forecast = self.forecast(&loads, &state.capacities, &prices)?;
        Ok(StepOutcome::Transition {
            next: NetworkState {
                loads,
                capacities: state.capacities.clone(),
                prices,
                hour_index: state.hour_index + 1,
                forecast,
            },
            reward,
        })
    }
}
