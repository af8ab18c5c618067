use std::cmp::Ordering;

use crate::{dist2, CoreError, ParticleFrame, Vec3};

const LEAF_SIZE: usize = 8;

/// One k-NN result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable k-d tree over a fixed point set.
///
/// Queries are exact. Results are ordered by `(distance, index)`, so equal
/// distances resolve to the lower particle index.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[inline]
fn key_cmp(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

impl SpatialIndex {
    pub fn build(frame: &ParticleFrame) -> Self {
        Self::from_points(frame.positions().to_vec()).expect("frames are never empty")
    }

    pub fn from_points(points: Vec<Vec3>) -> Result<Self, CoreError> {
        if points.is_empty() {
            return Err(CoreError::Empty);
        }
        if let Some(row) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(CoreError::NonFinite { row });
        }
        let mut index = SpatialIndex {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        let n = index.points.len();
        index.build_node(0, n);
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            let p = self.points[i];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
            .unwrap();
        if hi[axis] - lo[axis] == 0.0 {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            key_cmp((points[a][axis], a), (points[b][axis], b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end }); // placeholder
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// The `min(k, n)` nearest points to `query`, nearest first.
    pub fn knn(&self, query: Vec3, k: usize) -> Vec<Neighbor> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.search(0, &query, k, &mut best);
        best.into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
            })
            .collect()
    }

    /// Indices only, same order as [`SpatialIndex::knn`].
    pub fn knn_indices(&self, query: Vec3, k: usize) -> Vec<usize> {
        self.knn(query, k).into_iter().map(|n| n.index).collect()
    }

    pub fn nearest(&self, query: Vec3) -> Neighbor {
        self.knn(query, 1)[0]
    }

    fn search(&self, node: usize, q: &Vec3, k: usize, best: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = (dist2(&self.points[i], q), i);
                    if best.len() < k || key_cmp(cand, best[best.len() - 1]) == Ordering::Less {
                        let pos = best
                            .binary_search_by(|probe| key_cmp(*probe, cand))
                            .unwrap_or_else(|p| p);
                        best.insert(pos, cand);
                        if best.len() > k {
                            best.pop();
                        }
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
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, k, best);
                let worst = if best.len() < k {
                    f64::INFINITY
                } else {
                    best[best.len() - 1].0
                };
                // `<=` keeps equal-distance candidates with lower indices reachable.
                if diff * diff <= worst {
                    self.search(far, q, k, best);
                }
            }
        }
    }
}

/// Reference `O(n)` scan with the same ordering contract as the tree.
pub fn brute_force_knn(points: &[Vec3], query: Vec3, k: usize) -> Vec<Neighbor> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, &query), i))
        .collect();
    all.sort_by(|a, b| key_cmp(*a, *b));
    all.truncate(k);
    all.into_iter()
        .map(|(d2, index)| Neighbor {
            index,
            distance: d2.sqrt(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton() {
        let idx = SpatialIndex::from_points(vec![[0.0; 3]]).unwrap();
        assert_eq!(
            idx.knn([0.0; 3], 1),
            vec![Neighbor {
                index: 0,
                distance: 0.0
            }]
        );
    }

    #[test]
    fn empty_is_error() {
        assert_eq!(
            SpatialIndex::from_points(vec![]).unwrap_err(),
            CoreError::Empty
        );
    }

    #[test]
    fn cube_corners_tie_break_by_index() {
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push([(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]);
        }
        let idx = SpatialIndex::from_points(pts).unwrap();
        let res = idx.knn([0.5; 3], 8);
        assert_eq!(res.len(), 8);
        let ids: Vec<usize> = res.iter().map(|n| n.index).collect();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
        for n in &res {
            assert_eq!(n.distance, res[0].distance);
        }
    }

    #[test]
    fn two_points_and_clamping() {
        let idx = SpatialIndex::from_points(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let r = idx.knn([0.1, 0.0, 0.0], 1);
        assert_eq!(r[0].index, 0);
        assert!((r[0].distance - 0.1).abs() < 1e-15);
        assert_eq!(idx.knn([0.1, 0.0, 0.0], 5).len(), 2);
    }

    #[test]
    fn coincident_points() {
        let idx = SpatialIndex::from_points(vec![[2.0; 3]; 40]).unwrap();
        let ids = idx.knn_indices([2.0; 3], 5);
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }
}
