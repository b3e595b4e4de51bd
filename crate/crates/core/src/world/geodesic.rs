use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{euclid, Result, WorldGraph};

#[derive(Copy, Clone, PartialEq)]
struct Entry {
    dist: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(world: &WorldGraph, source: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    let n = world.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Entry { dist: 0.0, node: source });
    while let Some(Entry { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        let v = &world.viewpoints[node];
        for nb in v.neighbors() {
            let Some(j) = world.index_of(nb) else { continue };
            let nd = d + euclid(v.position, world.viewpoints[j].position);
            if nd < dist[j] {
                dist[j] = nd;
                prev[j] = Some(node);
                heap.push(Entry { dist: nd, node: j });
            }
        }
    }
    (dist, prev)
}

/// Shortest path between two viewpoints over Euclidean edge weights.
pub fn geodesic(world: &WorldGraph, a: &str, b: &str) -> Result<(f64, Vec<String>)> {
    let src = world.get(a).map(|_| world.index_of(a).unwrap_or_default())?;
    let dst = world.get(b).map(|_| world.index_of(b).unwrap_or_default())?;
    let (dist, prev) = dijkstra(world, src);
    let mut path = vec![dst];
    let mut cur = dst;
    while let Some(p) = prev[cur] {
        path.push(p);
        cur = p;
    }
    path.reverse();
    let ids = path.into_iter().map(|i| world.viewpoints[i].id.clone()).collect();
    Ok((dist[dst], ids))
}

/// Distances from `a` to every viewpoint, in `world.viewpoints` order.
pub fn geodesic_distances(world: &WorldGraph, a: &str) -> Result<Vec<f64>> {
    world.get(a)?;
    Ok(dijkstra(world, world.index_of(a).unwrap_or_default()).0)
}
