//! Deep Q-learning over a factorized action space.
//!
//! The joint action (one price change per station, `7^N` combinations) is
//! split into independent per-station choices. Every station is scored by the
//! same Q-network on its own feature row, greedy selection is a per-station
//! argmax, and all stations share the global reward in their Bellman targets.

mod qnet;
mod replay;
mod schedule;

pub use qnet::{q_backward, q_forward, QParams, DEFAULT_HIDDEN, Q_MAGIC};
pub use replay::{ReplayBuffer, Transition, DEFAULT_REPLAY_CAPACITY};
pub use schedule::{EpsilonSchedule, EPSILON_DECAY, EPSILON_MIN, EPSILON_START};

use rand::Rng;

use crate::env::{PriceAction, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::optim::Optimizer;

/// Lowest index among the maxima.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Per station: a uniform random index with probability `epsilon`, else the
/// greedy index. No randomness is consumed when `epsilon` is zero.
pub fn select_action<R: Rng + ?Sized>(qvalues: &Matrix, epsilon: f64, rng: &mut R) -> PriceAction {
    let indices = (0..qvalues.rows())
        .map(|i| {
            if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
                rng.gen_range(0..NUM_ACTIONS)
            } else {
                argmax(qvalues.row(i))
            }
        })
        .collect();
    PriceAction::new(indices).expect("indices drawn in range")
}

/// Bellman targets per transition and station. With `double`, the online
/// network picks the next action and the target network scores it.
pub fn compute_targets(
    batch: &[&Transition],
    target: &QParams,
    gamma: f64,
    double: bool,
    online: &QParams,
) -> Result<Vec<Vec<f64>>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Argument(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    batch
        .iter()
        .map(|t| {
            let q_next = q_forward(target, &t.next_features)?;
            let chosen = if double {
                Some(q_forward(online, &t.next_features)?)
            } else {
                None
            };
            Ok((0..q_next.rows())
                .map(|i| {
                    let future = match &chosen {
                        Some(q_online) => q_next.get(i, argmax(q_online.row(i))),
                        None => q_next.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    };
                    t.reward + gamma * future
                })
                .collect())
        })
        .collect()
}

/// Squared error between the taken actions' Q-values and `targets`,
/// averaged over transitions and stations, with its gradient.
pub fn q_loss_and_grad(online: &QParams, batch: &[&Transition], targets: &[Vec<f64>]) -> Result<(f64, QParams)> {
    let (h1, h2) = online.hidden();
    let mut grads = QParams::zeros(online.features(), h1, h2);
    let count: usize = batch.iter().map(|t| t.features.rows()).sum();
    if count == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    for (t, y) in batch.iter().zip(targets) {
        let q = q_forward(online, &t.features)?;
        let mut upstream = Matrix::zeros(q.rows(), NUM_ACTIONS);
        for (i, &a) in t.action.indices().iter().enumerate() {
            let err = q.get(i, a) - y[i];
            loss += err * err;
            upstream.set(i, a, 2.0 * err * scale);
        }
        q_backward(online, &t.features, &upstream, &mut grads)?;
    }
    Ok((loss * scale, grads))
}

/// One optimizer update on the batch. Returns the loss before the update.
pub fn train_step(
    online: &mut QParams,
    optimizer: &mut Optimizer,
    batch: &[&Transition],
    targets: &[Vec<f64>],
) -> Result<f64> {
    let (loss, grads) = q_loss_and_grad(online, batch, targets)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            stage: "train step",
            index: optimizer.steps() as usize,
            loss,
        });
    }
    optimizer.step(online, &grads);
    Ok(loss)
}

pub fn sync_target(online: &QParams) -> QParams {
    online.clone()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub double: bool,
    pub replay_capacity: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 32,
            double: false,
            replay_capacity: DEFAULT_REPLAY_CAPACITY,
        }
    }
}

/// Online and target networks, optimizer state, replay memory and
/// exploration schedule owned by one training thread.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub online: QParams,
    pub target: QParams,
    pub optimizer: Optimizer,
    pub replay: ReplayBuffer,
    pub schedule: EpsilonSchedule,
    pub config: AgentConfig,
}

impl DqnAgent {
    pub fn new(online: QParams, optimizer: Optimizer, schedule: EpsilonSchedule, config: AgentConfig) -> Self {
        Self {
            target: sync_target(&online),
            online,
            optimizer,
            replay: ReplayBuffer::new(config.replay_capacity),
            schedule,
            config,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.schedule.epsilon()
    }

    /// Samples a batch and takes one gradient step once the buffer holds a
    /// full batch.
    pub fn learn<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<f64>> {
        let Some(batch) = self.replay.sample(self.config.batch_size, rng) else {
            return Ok(None);
        };
        let targets = compute_targets(
            &batch,
            &self.target,
            self.config.gamma,
            self.config.double,
            &self.online,
        )?;
        let loss = train_step(&mut self.online, &mut self.optimizer, &batch, &targets)?;
        Ok(Some(loss))
    }

    pub fn sync_target(&mut self) {
        self.target = sync_target(&self.online);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_transition(rng: &mut ChaCha8Rng, n: usize) -> Transition {
        let mut rand_matrix = || Matrix::from_vec(n, 4, (0..n * 4).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let features = rand_matrix();
        let next_features = rand_matrix();
        Transition {
            features,
            action: PriceAction::new((0..n).map(|_| rng.gen_range(0..NUM_ACTIONS)).collect()).unwrap(),
            reward: rng.gen_range(0.5..5.0),
            next_features,
        }
    }

    #[test]
    fn greedy_selection_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = Matrix::from_rows(&[vec![0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0], vec![1.0; 7]]).unwrap();
        assert_eq!(select_action(&q, 0.0, &mut rng).indices(), &[4, 0]);
    }

    #[test]
    fn myopic_and_zero_future_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_transition(&mut rng, 3);
        let p = QParams::init(4, 8, 8, &mut rng);
        let y = compute_targets(&[&t], &p, 0.0, false, &p).unwrap();
        assert_eq!(y[0], vec![t.reward; 3]);
        let zero = QParams::zeros(4, 8, 8);
        let y = compute_targets(&[&t], &zero, 0.99, false, &p).unwrap();
        assert_eq!(y[0], vec![t.reward; 3]);
        assert!(compute_targets(&[&t], &zero, 1.5, false, &p).is_err());
    }

    #[test]
    fn double_with_shared_params_matches_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = QParams::init(4, 8, 8, &mut rng);
        let ts: Vec<_> = (0..5).map(|_| random_transition(&mut rng, 4)).collect();
        let batch: Vec<&Transition> = ts.iter().collect();
        let a = compute_targets(&batch, &p, 0.9, false, &p).unwrap();
        let b = compute_targets(&batch, &p, 0.9, true, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matching_targets_give_zero_loss_and_no_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = QParams::init(4, 8, 8, &mut rng);
        let t = random_transition(&mut rng, 3);
        let q = q_forward(&p, &t.features).unwrap();
        let y: Vec<f64> = t
            .action
            .indices()
            .iter()
            .enumerate()
            .map(|(i, &a)| q.get(i, a))
            .collect();
        let before = p.clone();
        let mut opt = Optimizer::adam(1e-4);
        let loss = train_step(&mut p, &mut opt, &[&t], &[y]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn overfits_one_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = QParams::init(4, 16, 16, &mut rng);
        let ts: Vec<_> = (0..8).map(|_| random_transition(&mut rng, 3)).collect();
        let batch: Vec<&Transition> = ts.iter().collect();
        let targets: Vec<Vec<f64>> = ts.iter().map(|t| vec![t.reward; 3]).collect();
        let mut opt = Optimizer::adam(1e-2);
        let first = train_step(&mut p, &mut opt, &batch, &targets).unwrap();
        let mut last = first;
        for _ in 0..299 {
            last = train_step(&mut p, &mut opt, &batch, &targets).unwrap();
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn target_is_isolated_from_online_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let online = QParams::init(4, 8, 8, &mut rng);
        let mut agent = DqnAgent::new(
            online,
            Optimizer::adam(1e-2),
            EpsilonSchedule::default(),
            AgentConfig {
                batch_size: 4,
                ..Default::default()
            },
        );
        let x = Matrix::from_rows(&[vec![0.2, 0.4, 0.6, 0.8]]).unwrap();
        assert_eq!(
            q_forward(&agent.online, &x).unwrap(),
            q_forward(&agent.target, &x).unwrap()
        );
        let frozen = agent.target.clone();
        for _ in 0..6 {
            agent.replay.push(random_transition(&mut rng, 2));
        }
        assert!(agent.learn(&mut rng).unwrap().is_some());
        assert_ne!(agent.online.flatten(), frozen.flatten());
        assert_eq!(agent.target, frozen);
        agent.sync_target();
        let once = agent.target.clone();
        agent.sync_target();
        assert_eq!(agent.target, once);
        assert_eq!(agent.target, agent.online);
    }
}
