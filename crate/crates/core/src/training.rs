//! Episode loop, per-episode metrics, greedy evaluation and lambda sweeps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{q_forward, select_action, AgentConfig, DqnAgent, EpsilonSchedule, QParams};
use crate::data::DatasetBundle;
use crate::demand::DemandModel;
use crate::env::{encode_features, utilization_variance, Environment, StepOutcome, STATE_FEATURES};
use crate::error::{Error, Result};
use crate::graph::StationNetwork;
use crate::optim::{Optimizer, OptimizerKind};

pub const METRICS_HEADER: &str =
    "episode,mean_q,mean_loss,cumulative_reward,mean_util_variance,variance_penalty,overload_penalty,epsilon";
pub const COMPARISON_HEADER: &str = "lambda,final_variance_penalty,final_overload_penalty";
/// Trailing episodes averaged for lambda comparisons.
pub const FINAL_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Episodes between target-network copies.
    pub target_sync_every: usize,
    pub epsilon_start: f64,
    pub epsilon_decay: f64,
    pub epsilon_min: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub episodes: usize,
    pub seed: u64,
    pub hidden1: usize,
    pub hidden2: usize,
    pub double: bool,
    pub replay_capacity: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 1e-4,
            batch_size: 32,
            target_sync_every: 20,
            epsilon_start: 1.0,
            epsilon_decay: 0.95,
            epsilon_min: 0.1,
            lambda: 1.0,
            kappa: 30.0,
            episodes: 100,
            seed: 0,
            hidden1: 64,
            hidden2: 64,
            double: false,
            replay_capacity: 10_000,
            optimizer: OptimizerKind::adam(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("kappa", self.kappa),
            ("epsilon_decay", self.epsilon_decay),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Argument(format!("{name} must be positive, got {v}")));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("target_sync_every", self.target_sync_every),
            ("hidden1", self.hidden1),
            ("hidden2", self.hidden2),
            ("replay_capacity", self.replay_capacity),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("{name} must be positive")));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Argument(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.epsilon_min) || !(0.0..=1.0).contains(&self.epsilon_start) {
            return Err(Error::Argument("epsilon bounds must lie in [0, 1]".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Argument(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    /// 1-based.
    pub episode: usize,
    /// Mean over visited states of the station-averaged max Q.
    pub mean_q: f64,
    /// Mean training loss over the episode's updates; zero if none ran.
    pub mean_loss: f64,
    /// Sum of rewards over the episode.
    pub cumulative_reward: f64,
    /// Mean population variance of post-step utilization.
    pub mean_util_variance: f64,
    /// Mean unweighted balancedness term.
    pub variance_penalty: f64,
    /// Mean unweighted overload term.
    pub overload_penalty: f64,
    /// Exploration rate used during the episode.
    pub epsilon: f64,
}

impl EpisodeMetrics {
    pub fn is_finite(&self) -> bool {
        [
            self.mean_q,
            self.mean_loss,
            self.cumulative_reward,
            self.mean_util_variance,
            self.variance_penalty,
            self.overload_penalty,
            self.epsilon,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Metric columns after `episode`, in CSV order.
    pub fn named_values(&self) -> [(&'static str, f64); 7] {
        [
            ("mean_q", self.mean_q),
            ("mean_loss", self.mean_loss),
            ("cumulative_reward", self.cumulative_reward),
            ("mean_util_variance", self.mean_util_variance),
            ("variance_penalty", self.variance_penalty),
            ("overload_penalty", self.overload_penalty),
            ("epsilon", self.epsilon),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub metrics: Vec<EpisodeMetrics>,
    pub params: QParams,
    /// Target-network checksum at the end of each episode.
    pub target_checksums: Vec<u64>,
    /// Transitions held in replay at the end of training.
    pub replay_len: usize,
}

#[derive(Default)]
struct Accumulator {
    steps: usize,
    q_sum: f64,
    loss_sum: f64,
    updates: usize,
    reward_sum: f64,
    util_var_sum: f64,
    variance_sum: f64,
    overload_sum: f64,
}

impl Accumulator {
    fn finish(self, episode: usize, epsilon: f64) -> EpisodeMetrics {
        let steps = self.steps.max(1) as f64;
        EpisodeMetrics {
            episode,
            mean_q: self.q_sum / steps,
            mean_loss: if self.updates > 0 {
                self.loss_sum / self.updates as f64
            } else {
                0.0
            },
            cumulative_reward: self.reward_sum,
            mean_util_variance: self.util_var_sum / steps,
            variance_penalty: self.variance_sum / steps,
            overload_penalty: self.overload_sum / steps,
            epsilon,
        }
    }
}

/// One sequential pass over the environment's hours. With `learn`, each
/// transition is stored and followed by one replay update.
fn run_episode(
    env: &Environment<'_>,
    agent: &mut DqnAgent,
    epsilon: f64,
    learn: bool,
    rng: &mut ChaCha8Rng,
    episode: usize,
) -> Result<EpisodeMetrics> {
    let mut acc = Accumulator::default();
    let mut state = env.observe(0)?;
    loop {
        let features = encode_features(&state, env.network);
        let q = q_forward(&agent.online, &features)?;
        let action = select_action(&q, epsilon, rng);
        let (next, reward) = match env.step(&state, &action)? {
            StepOutcome::Transition { next, reward } => (next, reward),
            StepOutcome::EpisodeEnd => break,
        };

        let max_q = (0..q.rows())
            .map(|i| q.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / q.rows() as f64;
        acc.steps += 1;
        acc.q_sum += max_q;
        acc.reward_sum += reward.reward;
        acc.util_var_sum += utilization_variance(&next.loads, &next.capacities);
        acc.variance_sum += reward.variance_term;
        acc.overload_sum += reward.overload_term;

        if learn {
            let next_features = encode_features(&next, env.network);
            agent.replay.push(crate::agent::Transition {
                features,
                action,
                reward: reward.reward,
                next_features,
            });
            let update = agent.learn(rng).map_err(|e| match e {
                Error::Divergence { loss, .. } => Error::Divergence {
                    stage: "episode",
                    index: episode,
                    loss,
                },
                other => other,
            })?;
            if let Some(loss) = update {
                acc.loss_sum += loss;
                acc.updates += 1;
            }
        }
        // Each hour starts again from the recorded data.
        state = env.observe(next.hour_index)?;
    }
    Ok(acc.finish(episode, epsilon))
}

fn check_dataset(dataset: &DatasetBundle) -> Result<()> {
    if dataset.n_steps() < 2 {
        return Err(Error::Argument("training needs at least two hours of data".into()));
    }
    Ok(())
}

pub fn run_training(
    config: &TrainConfig,
    dataset: &DatasetBundle,
    network: &StationNetwork,
    model: &DemandModel,
) -> Result<TrainingOutcome> {
    config.validate()?;
    check_dataset(dataset)?;
    let env = Environment::new(network, dataset, model, config.lambda, config.kappa)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let online = QParams::init(STATE_FEATURES, config.hidden1, config.hidden2, &mut rng);
    let mut agent = DqnAgent::new(
        online,
        Optimizer::new(config.optimizer, config.lr),
        EpsilonSchedule::new(config.epsilon_start, config.epsilon_decay, config.epsilon_min),
        AgentConfig {
            gamma: config.gamma,
            batch_size: config.batch_size,
            double: config.double,
            replay_capacity: config.replay_capacity,
        },
    );

    let mut metrics = Vec::with_capacity(config.episodes);
    let mut target_checksums = Vec::with_capacity(config.episodes);
    for e in 1..=config.episodes {
        let epsilon = agent.epsilon();
        let m = run_episode(&env, &mut agent, epsilon, true, &mut rng, e)?;
        if e % config.target_sync_every == 0 {
            agent.sync_target();
        }
        target_checksums.push(agent.target.checksum());
        agent.schedule.decay();
        log::debug!(
            "episode {e}: reward {:.4} loss {:.4e} eps {:.3}",
            m.cumulative_reward,
            m.mean_loss,
            m.epsilon
        );
        metrics.push(m);
    }
    Ok(TrainingOutcome {
        metrics,
        params: agent.online,
        target_checksums,
        replay_len: agent.replay.len(),
    })
}

/// Greedy rollout with frozen parameters.
pub fn evaluate_policy(
    params: &QParams,
    dataset: &DatasetBundle,
    network: &StationNetwork,
    model: &DemandModel,
    lambda: f64,
    kappa: f64,
) -> Result<EpisodeMetrics> {
    check_dataset(dataset)?;
    let env = Environment::new(network, dataset, model, lambda, kappa)?;
    let mut agent = DqnAgent::new(
        params.clone(),
        Optimizer::sgd(0.0),
        EpsilonSchedule::new(0.0, 1.0, 0.0),
        AgentConfig {
            replay_capacity: 1,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    run_episode(&env, &mut agent, 0.0, false, &mut rng, 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaComparison {
    pub lambda: f64,
    pub final_variance_penalty: f64,
    pub final_overload_penalty: f64,
}

/// Means of the two penalty columns over the last `FINAL_WINDOW` episodes.
pub fn final_window_penalties(metrics: &[EpisodeMetrics]) -> (f64, f64) {
    let window = &metrics[metrics.len().saturating_sub(FINAL_WINDOW)..];
    let k = window.len().max(1) as f64;
    (
        window.iter().map(|m| m.variance_penalty).sum::<f64>() / k,
        window.iter().map(|m| m.overload_penalty).sum::<f64>() / k,
    )
}

/// One full training run per lambda, all sharing `config.seed`.
pub fn compare_lambda(
    config: &TrainConfig,
    lambdas: &[f64],
    dataset: &DatasetBundle,
    network: &StationNetwork,
    model: &DemandModel,
) -> Result<Vec<LambdaComparison>> {
    if lambdas.len() < 2 {
        return Err(Error::Argument("a lambda comparison needs at least two values".into()));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let outcome = run_training(&TrainConfig { lambda, ..*config }, dataset, network, model)?;
            let (v, o) = final_window_penalties(&outcome.metrics);
            Ok(LambdaComparison {
                lambda,
                final_variance_penalty: v,
                final_overload_penalty: o,
            })
        })
        .collect()
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_metrics<W: Write>(mut out: W, metrics: &[EpisodeMetrics]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in metrics {
        write!(out, "{}", m.episode)?;
        for (_, v) in m.named_values() {
            write!(out, ",{}", fmt17(v))?;
        }
        writeln!(out)?;
    }
    out.flush()
}

pub fn save_metrics(path: impl AsRef<Path>, metrics: &[EpisodeMetrics]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics(BufWriter::new(file), metrics).map_err(|e| Error::io(path, e))
}

pub fn load_metrics(path: impl AsRef<Path>) -> Result<Vec<EpisodeMetrics>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Schema {
            path: path.into(),
            line: 1,
            message: format!("expected header `{METRICS_HEADER}`"),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, line)| {
            let bad = || Error::Schema {
                path: path.into(),
                line: k + 2,
                message: "malformed metrics row".into(),
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(bad());
            }
            let v = |i: usize| fields[i].parse::<f64>().map_err(|_| bad());
            Ok(EpisodeMetrics {
                episode: fields[0].parse().map_err(|_| bad())?,
                mean_q: v(1)?,
                mean_loss: v(2)?,
                cumulative_reward: v(3)?,
                mean_util_variance: v(4)?,
                variance_penalty: v(5)?,
                overload_penalty: v(6)?,
                epsilon: v(7)?,
            })
        })
        .collect()
}

pub fn save_comparison(path: impl AsRef<Path>, rows: &[LambdaComparison]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(out, "{COMPARISON_HEADER}")?;
        for r in rows {
            writeln!(
                out,
                "{},{},{}",
                r.lambda,
                fmt17(r.final_variance_penalty),
                fmt17(r.final_overload_penalty)
            )?;
        }
        out.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::demand::ElasticityParams;
    use crate::env::NUM_ACTIONS;
    use crate::graph::{build_adjacency, merge_empty_regions, AdjacencyMethod};

    fn fixture(hours: usize) -> (DatasetBundle, StationNetwork, DemandModel) {
        let bundle = generate_synthetic(8, hours, 7).unwrap();
        let net = build_adjacency(
            &merge_empty_regions(&bundle.regions).unwrap(),
            AdjacencyMethod::Delaunay,
        )
        .unwrap();
        (bundle, net, DemandModel::Analytic(ElasticityParams::default()))
    }

    fn small(episodes: usize) -> TrainConfig {
        TrainConfig {
            episodes,
            hidden1: 16,
            hidden2: 16,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn single_episode_fills_replay() {
        let (bundle, net, model) = fixture(49);
        let out = run_training(&small(1), &bundle, &net, &model).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert!(out.replay_len >= 48);
        assert_eq!(out.metrics[0].epsilon, 1.0);
    }

    #[test]
    fn metrics_are_finite_positive_and_reproducible() {
        let (bundle, net, model) = fixture(30);
        let a = run_training(&small(4), &bundle, &net, &model).unwrap();
        let b = run_training(&small(4), &bundle, &net, &model).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.params, b.params);
        for m in &a.metrics {
            assert!(m.is_finite());
            assert!(m.cumulative_reward > 0.0 && m.variance_penalty > 0.0 && m.overload_penalty > 0.0);
        }
        let mut buf = Vec::new();
        write_metrics(&mut buf, &a.metrics).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with(METRICS_HEADER));
    }

    #[test]
    fn metrics_file_round_trip() {
        let (bundle, net, model) = fixture(30);
        let out = run_training(&small(2), &bundle, &net, &model).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        save_metrics(&p, &out.metrics).unwrap();
        assert_eq!(load_metrics(&p).unwrap(), out.metrics);
    }

    #[test]
    fn zero_policy_cuts_every_price() {
        let (bundle, net, model) = fixture(30);
        let zero = QParams::zeros(STATE_FEATURES, 8, 8);
        let env = Environment::new(&net, &bundle, &model, 1.0, 30.0).unwrap();
        let s = env.observe(0).unwrap();
        let q = q_forward(&zero, &encode_features(&s, &net)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = select_action(&q, 0.0, &mut rng);
        assert!(a.indices().iter().all(|&i| i == 0));
        assert!(NUM_ACTIONS == 7 && a.delta(0) == -0.3);

        let m1 = evaluate_policy(&zero, &bundle, &net, &model, 1.0, 30.0).unwrap();
        let m2 = evaluate_policy(&zero, &bundle, &net, &model, 1.0, 30.0).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.mean_q, 0.0);
        assert_eq!(m1.mean_loss, 0.0);
    }

    #[test]
    fn lambda_comparison_has_one_row_per_lambda() {
        let (bundle, net, model) = fixture(26);
        let rows = compare_lambda(&small(2), &[1.0, 10.0], &bundle, &net, &model).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].lambda, 10.0);
        assert!(compare_lambda(&small(2), &[1.0], &bundle, &net, &model).is_err());
    }

    #[test]
    fn bad_config_rejected() {
        let (bundle, net, model) = fixture(26);
        let cfg = TrainConfig { gamma: 1.5, ..small(1) };
        assert!(matches!(
            run_training(&cfg, &bundle, &net, &model),
            Err(Error::Argument(_))
        ));
        let cfg = TrainConfig {
            batch_size: 0,
            ..small(1)
        };
        assert!(run_training(&cfg, &bundle, &net, &model).is_err());
    }
}
