use evbalance::data::{
    aggregate_hourly, generate_synthetic, load_series_with_step, save_series, Region, RegionTable, SeriesKind,
    TimeSeriesFrame, HOUR_SECS, RAW_STEP_SECS,
};
use evbalance::graph::{build_adjacency, merge_empty_regions, AdjacencyMethod};
use evbalance::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_table(rng: &mut ChaCha8Rng) -> RegionTable {
    let n = rng.gen_range(20..=100);
    let empty_fraction = rng.gen_range(0.10..=0.50);
    let n_empty = ((n as f64) * empty_fraction).round() as usize;
    let regions = (0..n)
        .map(|k| Region {
            region_id: 1000 + k as i64,
            lon: 113.8 + rng.gen_range(0.0..0.5),
            lat: 22.4 + rng.gen_range(0.0..0.3),
            pile_count: if k < n_empty { 0 } else { rng.gen_range(1..=200) },
        })
        .collect();
    RegionTable::new(regions).unwrap()
}

#[test]
fn merged_graphs_are_connected_and_conserve_capacity() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..200 {
        let table = random_table(&mut rng);
        let method = if trial % 2 == 0 {
            AdjacencyMethod::Delaunay
        } else {
            AdjacencyMethod::Knn(rng.gen_range(1..5))
        };
        let net = build_adjacency(&merge_empty_regions(&table).unwrap(), method).unwrap();
        assert!(net.assert_connected().connected, "trial {trial}");
        assert_eq!(net.region_to_station().len(), table.len());
        for r in table.regions() {
            assert!(net.station_of_region(r.region_id).unwrap() < net.len());
        }
        let total: u64 = net.capacities().iter().map(|&c| u64::from(c)).sum();
        assert_eq!(total, table.total_piles());
        assert_eq!(net.len(), table.nonempty_count());
    }
}

#[test]
fn five_minute_month_aggregates_to_720_hours() {
    let rows = 8640;
    let start = 1_718_755_200;
    let times: Vec<i64> = (0..rows as i64).map(|k| start + k * RAW_STEP_SECS).collect();
    let values = Matrix::from_vec(rows, 2, (0..rows * 2).map(|k| (k % 7) as f64).collect()).unwrap();
    let frame = TimeSeriesFrame::new(SeriesKind::Occupancy, RAW_STEP_SECS, times, vec![1, 2], values).unwrap();
    let hourly = aggregate_hourly(&frame).unwrap();
    assert_eq!(hourly.len(), 720);
    assert_eq!(hourly.step_secs(), HOUR_SECS);
}

#[test]
fn synthetic_bundles_are_reproducible() {
    let a = generate_synthetic(8, 72, 7).unwrap();
    let b = generate_synthetic(8, 72, 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_synthetic(8, 72, 8).unwrap());
    assert_eq!(a.n_steps(), 72);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hourly_means_preserve_the_overall_mean(
        hours in 1usize..6,
        stations in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = hours * 12;
        let times: Vec<i64> = (0..rows as i64).map(|k| k * RAW_STEP_SECS).collect();
        let values = Matrix::from_vec(rows, stations, (0..rows * stations).map(|_| rng.gen_range(0.0..50.0)).collect()).unwrap();
        let frame = TimeSeriesFrame::new(SeriesKind::Occupancy, RAW_STEP_SECS, times, (1..=stations as i64).collect(), values.clone()).unwrap();
        let hourly = aggregate_hourly(&frame).unwrap();
        prop_assert_eq!(hourly.len(), hours);
        let raw_mean = values.as_slice().iter().sum::<f64>() / values.as_slice().len() as f64;
        let hourly_mean = hourly.values().as_slice().iter().sum::<f64>() / hourly.values().as_slice().len() as f64;
        prop_assert!((raw_mean - hourly_mean).abs() <= 1e-9 * raw_mean.abs().max(1.0));
    }

    #[test]
    fn series_survive_a_disk_round_trip(
        rows in 1usize..20,
        stations in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times: Vec<i64> = (0..rows as i64).map(|k| 1_700_000_000 + k * HOUR_SECS).collect();
        let values = Matrix::from_vec(rows, stations, (0..rows * stations).map(|_| rng.gen_range(0.54..1.47)).collect()).unwrap();
        let frame = TimeSeriesFrame::new(SeriesKind::Price, HOUR_SECS, times, (10..10 + stations as i64).collect(), values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("price.csv");
        save_series(&frame, &path).unwrap();
        let (back, report) = load_series_with_step(&path, SeriesKind::Price, HOUR_SECS).unwrap();
        prop_assert_eq!(report.clamped, 0);
        prop_assert_eq!(back, frame);
    }
}
