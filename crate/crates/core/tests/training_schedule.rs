use evbalance::data::generate_synthetic;
use evbalance::demand::{DemandModel, ElasticityParams};
use evbalance::graph::{build_adjacency, merge_empty_regions, AdjacencyMethod};
use evbalance::training::{run_training, TrainConfig};

#[test]
fn epsilon_and_target_sync_follow_the_episode_schedule() {
    let bundle = generate_synthetic(6, 24, 5).unwrap().slice_rows(0, 4);
    let net = build_adjacency(
        &merge_empty_regions(&bundle.regions).unwrap(),
        AdjacencyMethod::Delaunay,
    )
    .unwrap();
    let model = DemandModel::Analytic(ElasticityParams::default());
    let config = TrainConfig {
        episodes: 100,
        batch_size: 2,
        hidden1: 8,
        hidden2: 8,
        seed: 9,
        ..Default::default()
    };
    let out = run_training(&config, &bundle, &net, &model).unwrap();
    assert_eq!(out.metrics.len(), 100);

    for (e, m) in out.metrics.iter().enumerate() {
        let expected = 0.95f64.powi(e as i32).max(0.1);
        assert!(
            (m.epsilon - expected).abs() <= 1e-15,
            "episode {}: {}",
            m.episode,
            m.epsilon
        );
        assert_eq!(m.episode, e + 1);
    }

    let mut previous = None;
    for (e, &sum) in out.target_checksums.iter().enumerate() {
        let episode = e + 1;
        if let Some(prev) = previous {
            assert_eq!(sum != prev, episode % 20 == 0, "episode {episode}");
        }
        previous = Some(sum);
    }
}
