use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static kd-tree over a subset of 3D points, addressed by their original
/// indices. Neighbor queries compare squared distances and break ties
/// toward the lower index.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

impl KdTree {
    /// Tree over `positions[i]` for every `i` in `subset`.
    pub fn build(positions: &[Vector3<f64>], subset: impl IntoIterator<Item = usize>) -> Self {
        let mut entries: Vec<([f64; 3], usize)> = subset
            .into_iter()
            .map(|i| ([positions[i].x, positions[i].y, positions[i].z], i))
            .collect();
        let mut nodes = Vec::new();
        if !entries.is_empty() {
            let n = entries.len();
            Self::build_node(&mut entries, 0, n, &mut nodes);
        }
        KdTree {
            points: entries.iter().map(|e| e.0).collect(),
            ids: entries.iter().map(|e| e.1).collect(),
            nodes,
        }
    }

    pub fn over_all(positions: &[Vector3<f64>]) -> Self {
        Self::build(positions, 0..positions.len())
    }

    fn build_node(entries: &mut [([f64; 3], usize)], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
        let slot = nodes.len();
        nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return slot;
        }
        let slice = &mut entries[start..end];
        let axis = (0..3)
            .max_by(|&a, &b| {
                let extent = |k: usize| {
                    let (lo, hi) = slice
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e.0[k]), hi.max(e.0[k])));
                    hi - lo
                };
                extent(a).total_cmp(&extent(b))
            })
            .unwrap();
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |a, b| a.0[axis].total_cmp(&b.0[axis]));
        let value = slice[mid].0[axis];
        let left = Self::build_node(entries, start, start + mid, nodes);
        let right = Self::build_node(entries, start + mid, end, nodes);
        nodes[slot] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        slot
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The `k` nearest points to `query` as `(index, squared distance)`,
    /// nearest first, leaving out `skip`.
    pub fn knn(&self, query: &Vector3<f64>, k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let q = [query.x, query.y, query.z];
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_node(0, &q, k, skip, &mut heap);
        heap.into_sorted_vec().into_iter().map(|c| (c.id, c.d2)).collect()
    }

    fn knn_node(&self, node: usize, q: &[f64; 3], k: usize, skip: Option<usize>, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    if Some(self.ids[i]) == skip {
                        continue;
                    }
                    let c = Candidate {
                        d2: dist2(&self.points[i], q),
                        id: self.ids[i],
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_node(near, q, k, skip, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.knn_node(far, q, k, skip, heap);
                }
            }
        }
    }

    pub fn nearest(&self, query: &Vector3<f64>, skip: Option<usize>) -> Option<(usize, f64)> {
        self.knn(query, 1, skip).into_iter().next()
    }

    /// Indices within distance `radius` of `query` (inclusive), ascending.
    pub fn within(&self, query: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.is_empty() && radius >= 0.0 {
            self.within_node(0, &[query.x, query.y, query.z], radius * radius, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn within_node(&self, node: usize, q: &[f64; 3], r2: f64, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                out.extend((start..end).filter(|&i| dist2(&self.points[i], q) <= r2).map(|i| self.ids[i]));
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.within_node(near, q, r2, out);
                if diff * diff <= r2 {
                    self.within_node(far, q, r2, out);
                }
            }
        }
    }
}
