use crate::CoreError;

pub type Vec3 = [f64; 3];

fn check_finite(rows: &[Vec3]) -> Result<(), CoreError> {
    match rows.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        Some(row) => Err(CoreError::NonFinite { row }),
        None => Ok(()),
    }
}

/// An unordered set of particle positions recorded at one time instant.
///
/// Row order carries no meaning but is stable for the lifetime of the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleFrame {
    positions: Vec<Vec3>,
}

impl ParticleFrame {
    pub fn new(positions: Vec<Vec3>) -> Result<Self, CoreError> {
        if positions.is_empty() {
            return Err(CoreError::Empty);
        }
        check_finite(&positions)?;
        Ok(Self { positions })
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn into_positions(self) -> Vec<Vec3> {
        self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Frame whose row `i` is `self[i] + flow[i]`.
    pub fn advect(&self, flow: &FlowField) -> Result<ParticleFrame, CoreError> {
        if flow.len() != self.len() {
            return Err(CoreError::RowMismatch {
                expected: self.len(),
                actual: flow.len(),
            });
        }
        let positions = self
            .positions
            .iter()
            .zip(flow.vectors())
            .map(|(p, f)| [p[0] + f[0], p[1] + f[1], p[2] + f[2]])
            .collect();
        ParticleFrame::new(positions)
    }

    /// Frame with rows reordered so that row `i` of the result is `self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> ParticleFrame {
        ParticleFrame {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
        }
    }

    pub fn translated(&self, t: Vec3) -> ParticleFrame {
        ParticleFrame {
            positions: self
                .positions
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect(),
        }
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

/// Per-particle displacement vectors, row-aligned with a source frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    vectors: Vec<Vec3>,
}

impl FlowField {
    pub fn new(vectors: Vec<Vec3>) -> Result<Self, CoreError> {
        check_finite(&vectors)?;
        Ok(Self { vectors })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![[0.0; 3]; n],
        }
    }

    /// Flat row-major view (`x0 y0 z0 x1 ...`).
    pub fn from_flat(flat: &[f64]) -> Result<Self, CoreError> {
        if !flat.len().is_multiple_of(3) {
            return Err(CoreError::RowMismatch {
                expected: flat.len() / 3 * 3,
                actual: flat.len(),
            });
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.vectors
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn vectors(&self) -> &[Vec3] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn scaled(&self, c: f64) -> FlowField {
        FlowField {
            vectors: self
                .vectors
                .iter()
                .map(|v| [v[0] * c, v[1] * c, v[2] * c])
                .collect(),
        }
    }

    pub fn add(&self, other: &FlowField) -> Result<FlowField, CoreError> {
        if other.len() != self.len() {
            return Err(CoreError::RowMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(FlowField {
            vectors: self
                .vectors
                .iter()
                .zip(&other.vectors)
                .map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
                .collect(),
        })
    }

    pub fn norms(&self) -> Vec<f64> {
        self.vectors
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .collect()
    }
}
