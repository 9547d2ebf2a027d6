//! Station graph construction: pile-less regions are folded into their
//! nearest pile-bearing neighbour, then stations are linked by a
//! geographic adjacency proxy and bridged until the graph is connected.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use spade::{DelaunayTriangulation, Point2, Triangulation};

use crate::data::{Region, RegionTable};
use crate::error::{Error, Result};

/// Offset applied to coincident centroids before triangulating, in degrees.
pub const DUPLICATE_JITTER_DEG: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdjacencyMethod {
    #[default]
    Delaunay,
    /// Symmetrized k-nearest-neighbour graph.
    Knn(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationNetwork {
    station_ids: Vec<i64>,
    capacities: Vec<u32>,
    centroids: Vec<(f64, f64)>,
    /// Sorted open neighbour lists.
    adjacency: Vec<Vec<usize>>,
    region_to_station: BTreeMap<i64, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connectivity {
    pub connected: bool,
    pub components: usize,
    /// Component label per station, numbered in order of first appearance.
    pub labels: Vec<usize>,
}

impl StationNetwork {
    /// Builds a network directly from station data and an index edge list.
    /// No bridging is applied.
    pub fn from_parts(
        station_ids: Vec<i64>,
        capacities: Vec<u32>,
        centroids: Vec<(f64, f64)>,
        edges: &[(usize, usize)],
    ) -> Result<Self> {
        let n = station_ids.len();
        if capacities.len() != n || centroids.len() != n {
            return Err(Error::Argument("station columns have different lengths".into()));
        }
        if let Some(k) = capacities.iter().position(|&c| c == 0) {
            return Err(Error::Domain(format!("station {} has zero capacity", station_ids[k])));
        }
        let region_to_station = station_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let net = Self {
            station_ids,
            capacities,
            centroids,
            adjacency: vec![Vec::new(); n],
            region_to_station,
        };
        net.with_edges(edges)
    }

    /// Replaces the edge set. Edges are symmetrized; self-loops are rejected.
    pub fn with_edges(mut self, edges: &[(usize, usize)]) -> Result<Self> {
        let n = self.len();
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Argument(format!(
                    "edge ({a}, {b}) out of range for {n} stations"
                )));
            }
            if a == b {
                return Err(Error::Argument(format!("self-loop at station {a}")));
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        self.adjacency = adjacency;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.station_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.station_ids.is_empty()
    }

    pub fn station_ids(&self) -> &[i64] {
        &self.station_ids
    }

    pub fn capacities(&self) -> &[u32] {
        &self.capacities
    }

    pub fn capacities_f64(&self) -> Vec<f64> {
        self.capacities.iter().map(|&c| f64::from(c)).collect()
    }

    pub fn centroids(&self) -> &[(f64, f64)] {
        &self.centroids
    }

    pub fn region_to_station(&self) -> &BTreeMap<i64, usize> {
        &self.region_to_station
    }

    pub fn station_of_region(&self, region_id: i64) -> Option<usize> {
        self.region_to_station.get(&region_id).copied()
    }

    /// Adjacent stations of `i`, excluding `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    /// Undirected edges as `(lo, hi)` index pairs in sorted order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, list)| list.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Closed neighbourhood `{i}` plus adjacent stations, sorted.
    pub fn neighborhood(&self, i: usize) -> Result<Vec<usize>> {
        if i >= self.len() {
            return Err(Error::Argument(format!(
                "station index {i} out of range for {} stations",
                self.len()
            )));
        }
        let mut out = self.adjacency[i].clone();
        let pos = out.binary_search(&i).unwrap_err();
        out.insert(pos, i);
        Ok(out)
    }

    pub fn assert_connected(&self) -> Connectivity {
        let n = self.len();
        let mut labels = vec![usize::MAX; n];
        let mut components = 0;
        let mut queue = VecDeque::new();
        for start in 0..n {
            if labels[start] != usize::MAX {
                continue;
            }
            labels[start] = components;
            queue.push_back(start);
            while let Some(v) = queue.pop_front() {
                for &w in &self.adjacency[v] {
                    if labels[w] == usize::MAX {
                        labels[w] = components;
                        queue.push_back(w);
                    }
                }
            }
            components += 1;
        }
        Connectivity {
            connected: components <= 1,
            components,
            labels,
        }
    }

    /// Adds the shortest centroid-distance edge between two different
    /// components until one component remains. Returns the edges added.
    pub fn connect_components(&mut self) -> Vec<(usize, usize)> {
        let mut added = Vec::new();
        loop {
            let conn = self.assert_connected();
            if conn.connected {
                return added;
            }
            let mut best: Option<(f64, usize, usize)> = None;
            for a in 0..self.len() {
                for b in a + 1..self.len() {
                    if conn.labels[a] == conn.labels[b] {
                        continue;
                    }
                    let d = dist2(self.centroids[a], self.centroids[b]);
                    if best.is_none_or(|(bd, _, _)| d < bd) {
                        best = Some((d, a, b));
                    }
                }
            }
            let (_, a, b) = best.expect("two components imply a cross pair");
            insert_sorted(&mut self.adjacency[a], b);
            insert_sorted(&mut self.adjacency[b], a);
            added.push((a, b));
        }
    }

    /// Station rows as a region table, one region per station.
    pub fn station_table(&self) -> RegionTable {
        let rows = (0..self.len())
            .map(|k| Region {
                region_id: self.station_ids[k],
                lon: self.centroids[k].0,
                lat: self.centroids[k].1,
                pile_count: self.capacities[k],
            })
            .collect();
        RegionTable::new(rows).expect("station ids are unique")
    }

    /// Checks the structural invariants of a built network.
    pub fn validate(&self) -> Result<()> {
        for (a, list) in self.adjacency.iter().enumerate() {
            for &b in list {
                if a == b {
                    return Err(Error::Validation(format!("self-loop at station {a}")));
                }
                if !self.has_edge(b, a) {
                    return Err(Error::Validation(format!("edge ({a}, {b}) is not symmetric")));
                }
            }
        }
        if !self.assert_connected().connected {
            return Err(Error::Validation("station graph is disconnected".into()));
        }
        Ok(())
    }
}

/// Keeps regions that hold piles as stations and maps every empty region to
/// its nearest station by planar distance on (lon, lat). Ties go to the lower
/// station id. The result has no edges yet.
pub fn merge_empty_regions(regions: &RegionTable) -> Result<StationNetwork> {
    let stations: Vec<&Region> = regions.regions().iter().filter(|r| r.pile_count > 0).collect();
    if stations.is_empty() {
        return Err(Error::Domain(
            "every region is empty; there is no station to merge into".into(),
        ));
    }

    let mut region_to_station = BTreeMap::new();
    for (k, s) in stations.iter().enumerate() {
        region_to_station.insert(s.region_id, k);
    }
    for r in regions.regions().iter().filter(|r| r.pile_count == 0) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, s) in stations.iter().enumerate() {
            let d = dist2((r.lon, r.lat), (s.lon, s.lat));
            if d < best_d || (d == best_d && s.region_id < stations[best].region_id) {
                best = k;
                best_d = d;
            }
        }
        region_to_station.insert(r.region_id, best);
    }

    Ok(StationNetwork {
        station_ids: stations.iter().map(|s| s.region_id).collect(),
        capacities: stations.iter().map(|s| s.pile_count).collect(),
        centroids: stations.iter().map(|s| (s.lon, s.lat)).collect(),
        adjacency: vec![Vec::new(); stations.len()],
        region_to_station,
    })
}

/// Replaces the edge set with the chosen geographic proxy, then bridges any
/// remaining components with shortest centroid-distance edges.
pub fn build_adjacency(network: &StationNetwork, method: AdjacencyMethod) -> Result<StationNetwork> {
    let n = network.len();
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 stations, got {n}")));
    }
    let points = deduplicated_points(network.centroids());
    let edges = match method {
        AdjacencyMethod::Delaunay => delaunay_edges(&points)?,
        AdjacencyMethod::Knn(k) => {
            if k == 0 {
                return Err(Error::Argument("knn needs k >= 1".into()));
            }
            knn_edges(&points, k)
        }
    };
    let mut out = network.clone().with_edges(&edges)?;
    let bridged = out.connect_components();
    if !bridged.is_empty() {
        log::debug!("added {} bridging edges to connect the station graph", bridged.len());
    }
    Ok(out)
}

/// Installs an externally supplied edge list given by station id, bridging
/// if the supplied graph is not connected.
pub fn import_adjacency(network: &StationNetwork, edges: &[(i64, i64)]) -> Result<StationNetwork> {
    let index: BTreeMap<i64, usize> = network
        .station_ids()
        .iter()
        .enumerate()
        .map(|(k, &id)| (id, k))
        .collect();
    let lookup = |id: i64| {
        index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Validation(format!("edge references unknown station {id}")))
    };
    let pairs = edges
        .iter()
        .map(|&(a, b)| Ok((lookup(a)?, lookup(b)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = network.clone().with_edges(&pairs)?;
    let bridged = out.connect_components();
    if !bridged.is_empty() {
        log::warn!(
            "imported adjacency was disconnected; added {} bridging edges",
            bridged.len()
        );
    }
    Ok(out)
}

/// Reads a `src,dst` edge list of station ids.
pub fn load_edges(path: impl AsRef<Path>) -> Result<Vec<(i64, i64)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| Error::Schema {
            path: path.into(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["src", "dst"] {
        return Err(Error::Schema {
            path: path.into(),
            line: 1,
            message: "expected header `src,dst`".into(),
        });
    }
    let mut edges = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Schema {
            path: path.into(),
            line: 0,
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let parse = |i: usize| {
            record
                .get(i)
                .and_then(|s| s.parse::<i64>().ok())
                .ok_or_else(|| Error::Schema {
                    path: path.into(),
                    line,
                    message: format!("bad station id in column {}", i + 1),
                })
        };
        edges.push((parse(0)?, parse(1)?));
    }
    Ok(edges)
}

/// Writes `stations.csv` (`station_id,lon,lat,capacity`) and `edges.csv`
/// (`src,dst`, by station id).
pub fn export_network(
    network: &StationNetwork,
    stations_path: impl AsRef<Path>,
    edges_path: impl AsRef<Path>,
) -> Result<()> {
    let sp = stations_path.as_ref();
    let mut out = BufWriter::new(File::create(sp).map_err(|e| Error::io(sp, e))?);
    let res: std::io::Result<()> = (|| {
        writeln!(out, "station_id,lon,lat,capacity")?;
        for k in 0..network.len() {
            let (lon, lat) = network.centroids[k];
            writeln!(out, "{},{lon},{lat},{}", network.station_ids[k], network.capacities[k])?;
        }
        out.flush()
    })();
    res.map_err(|e| Error::io(sp, e))?;

    let ep = edges_path.as_ref();
    let mut out = BufWriter::new(File::create(ep).map_err(|e| Error::io(ep, e))?);
    let res: std::io::Result<()> = (|| {
        writeln!(out, "src,dst")?;
        for (a, b) in network.edges() {
            writeln!(out, "{},{}", network.station_ids[a], network.station_ids[b])?;
        }
        out.flush()
    })();
    res.map_err(|e| Error::io(ep, e))
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

fn insert_sorted(list: &mut Vec<usize>, v: usize) {
    if let Err(pos) = list.binary_search(&v) {
        list.insert(pos, v);
    }
}

/// Coincident centroids are nudged apart along longitude so that the
/// triangulation keeps one vertex per station.
fn deduplicated_points(centroids: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut points = centroids.to_vec();
    let mut seen: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    let mut nudged = 0;
    for p in &mut points {
        let key = (p.0.to_bits(), p.1.to_bits());
        let count = seen.entry(key).or_insert(0);
        if *count > 0 {
            p.0 += *count as f64 * DUPLICATE_JITTER_DEG;
            nudged += 1;
        }
        *count += 1;
    }
    if nudged > 0 {
        log::warn!("{nudged} stations share a centroid; perturbed by {DUPLICATE_JITTER_DEG} degrees");
    }
    points
}

fn delaunay_edges(points: &[(f64, f64)]) -> Result<Vec<(usize, usize)>> {
    let mut tri: DelaunayTriangulation<Point2<f64>> = DelaunayTriangulation::new();
    let mut vertex_to_station = Vec::with_capacity(points.len());
    for (k, &(x, y)) in points.iter().enumerate() {
        let handle = tri
            .insert(Point2::new(x, y))
            .map_err(|e| Error::Domain(format!("cannot triangulate station {k}: {e:?}")))?;
        let idx = handle.index();
        if idx >= vertex_to_station.len() {
            vertex_to_station.resize(idx + 1, usize::MAX);
        }
        vertex_to_station[idx] = k;
    }
    Ok(tri
        .undirected_edges()
        .filter_map(|e| {
            let [a, b] = e.vertices();
            let (a, b) = (vertex_to_station[a.fix().index()], vertex_to_station[b.fix().index()]);
            (a != b && a != usize::MAX && b != usize::MAX).then_some((a, b))
        })
        .collect())
}

fn knn_edges(points: &[(f64, f64)], k: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for (a, &pa) in points.iter().enumerate() {
        let mut others: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|&(b, _)| b != a)
            .map(|(b, &pb)| (dist2(pa, pb), b))
            .collect();
        others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        edges.extend(others.iter().take(k).map(|&(_, b)| (a, b)));
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(id: i64, lon: f64, lat: f64, piles: u32) -> Region {
        Region {
            region_id: id,
            lon,
            lat,
            pile_count: piles,
        }
    }

    fn network(points: &[(f64, f64)]) -> StationNetwork {
        let n = points.len();
        StationNetwork::from_parts((1..=n as i64).collect(), vec![1; n], points.to_vec(), &[]).unwrap()
    }

    #[test]
    fn empty_region_joins_nearest_station() {
        let table = RegionTable::new(vec![
            region(1, 0.0, 0.0, 10),
            region(2, 0.1, 0.0, 0),
            region(3, 1.0, 0.0, 5),
        ])
        .unwrap();
        let net = merge_empty_regions(&table).unwrap();
        assert_eq!(net.station_ids(), &[1, 3]);
        assert_eq!(net.capacities(), &[10, 5]);
        assert_eq!(net.station_of_region(2), Some(0));
        assert_eq!(net.region_to_station().len(), 3);
    }

    #[test]
    fn equidistant_region_goes_to_lower_id() {
        let table = RegionTable::new(vec![
            region(9, 1.0, 0.0, 3),
            region(4, -1.0, 0.0, 3),
            region(5, 0.0, 0.0, 0),
        ])
        .unwrap();
        let net = merge_empty_regions(&table).unwrap();
        let station = net.station_of_region(5).unwrap();
        assert_eq!(net.station_ids()[station], 4);
    }

    #[test]
    fn all_empty_is_a_domain_error() {
        let table = RegionTable::new(vec![region(1, 0.0, 0.0, 0), region(2, 1.0, 0.0, 0)]).unwrap();
        assert!(matches!(merge_empty_regions(&table), Err(Error::Domain(_))));
    }

    #[test]
    fn merge_is_idempotent_on_station_table() {
        let table = RegionTable::new(vec![
            region(1, 0.0, 0.0, 10),
            region(2, 0.1, 0.3, 0),
            region(3, 1.0, 0.0, 5),
            region(4, 0.5, 0.5, 2),
        ])
        .unwrap();
        let once = merge_empty_regions(&table).unwrap();
        let twice = merge_empty_regions(&once.station_table()).unwrap();
        assert_eq!(once.station_ids(), twice.station_ids());
        assert_eq!(once.capacities(), twice.capacities());
        assert_eq!(once.centroids(), twice.centroids());
    }

    #[test]
    fn delaunay_triangle_and_pair() {
        let tri = build_adjacency(
            &network(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]),
            AdjacencyMethod::Delaunay,
        )
        .unwrap();
        assert_eq!(tri.edges(), vec![(0, 1), (0, 2), (1, 2)]);

        for method in [
            AdjacencyMethod::Delaunay,
            AdjacencyMethod::Knn(1),
            AdjacencyMethod::Knn(3),
        ] {
            let pair = build_adjacency(&network(&[(0.0, 0.0), (1.0, 1.0)]), method).unwrap();
            assert_eq!(pair.edges(), vec![(0, 1)]);
        }
    }

    #[test]
    fn knn_on_square_is_bridged() {
        // Two tight pairs far apart: 1-NN pairs them up, leaving two components.
        let pts = [(0.0, 0.0), (0.1, 0.0), (5.0, 5.0), (5.1, 5.0)];
        let raw = network(&pts).with_edges(&knn_edges(&pts, 1)).unwrap();
        assert_eq!(raw.assert_connected().components, 2);

        let built = build_adjacency(&network(&pts), AdjacencyMethod::Knn(1)).unwrap();
        assert!(built.assert_connected().connected);
        assert_eq!(built.edge_count(), 3);
        assert!(built.has_edge(1, 2));
    }

    #[test]
    fn collinear_and_duplicate_centroids_still_connect() {
        let line: Vec<_> = (0..6).map(|k| (k as f64, 2.0 * k as f64)).collect();
        let net = build_adjacency(&network(&line), AdjacencyMethod::Delaunay).unwrap();
        assert!(net.assert_connected().connected);

        let dup = [(1.0, 1.0), (1.0, 1.0), (2.0, 1.0), (1.0, 1.0)];
        let net = build_adjacency(&network(&dup), AdjacencyMethod::Delaunay).unwrap();
        net.validate().unwrap();
        assert_eq!(net.centroids(), &dup);
    }

    #[test]
    fn connectivity_report() {
        let tri = network(&[(0.0, 0.0); 3]).with_edges(&[(0, 1), (1, 2), (2, 0)]).unwrap();
        assert!(tri.assert_connected().connected);

        let split = network(&[(0.0, 0.0); 4]).with_edges(&[(0, 1), (2, 3)]).unwrap();
        let c = split.assert_connected();
        assert!(!c.connected);
        assert_eq!(c.components, 2);
        assert_eq!(c.labels, vec![0, 0, 1, 1]);
    }

    #[test]
    fn closed_neighborhoods() {
        let tri = network(&[(0.0, 0.0); 3]).with_edges(&[(0, 1), (1, 2), (2, 0)]).unwrap();
        assert_eq!(tri.neighborhood(0).unwrap(), vec![0, 1, 2]);

        let path = network(&[(0.0, 0.0); 3]).with_edges(&[(0, 1), (1, 2)]).unwrap();
        assert_eq!(path.neighborhood(0).unwrap(), vec![0, 1]);
        assert_eq!(path.neighborhood(1).unwrap(), vec![0, 1, 2]);
        assert!(matches!(path.neighborhood(3), Err(Error::Argument(_))));
    }

    #[test]
    fn self_loops_rejected() {
        assert!(network(&[(0.0, 0.0); 2]).with_edges(&[(1, 1)]).is_err());
    }

    #[test]
    fn imported_edges_are_bridged() {
        let net = network(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let out = import_adjacency(&net, &[(1, 2)]).unwrap();
        assert!(out.assert_connected().connected);
        assert!(import_adjacency(&net, &[(1, 7)]).is_err());
    }
}
