use crate::{CoreError, ParticleFrame, Vec3};

/// Margin added to each side of the bounding box, as a fraction of its extent.
pub const DEFAULT_MARGIN: f64 = 0.05;
/// Spacing used when the particles span no volume at all.
pub const MIN_SPACING: f64 = 1e-6;

/// How a lattice is fitted to a (margin-expanded) bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GridPlacement {
    /// Outermost lattice points lie on the box: `s = extent / (G - 1)`.
    #[default]
    Enclosing,
    /// Lattice plus a one-spacing central-difference stencil fits inside the
    /// box: `s = extent / (G + 1)`.
    StencilInset,
}

/// Cubic lattice: point `(j, k, l)` sits at `origin + spacing * (j, k, l)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub origin: Vec3,
    pub spacing: f64,
    pub counts: [usize; 3],
}

impl Grid {
    pub fn len(&self) -> usize {
        self.counts[0] * self.counts[1] * self.counts[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, j: usize, k: usize, l: usize) -> Vec3 {
        [
            self.origin[0] + self.spacing * j as f64,
            self.origin[1] + self.spacing * k as f64,
            self.origin[2] + self.spacing * l as f64,
        ]
    }

    /// All lattice points, `l` varying fastest.
    pub fn points(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.counts[0] {
            for k in 0..self.counts[1] {
                for l in 0..self.counts[2] {
                    out.push(self.point(j, k, l));
                }
            }
        }
        out
    }

    /// Upper corner, `origin + s * (counts - 1)`.
    pub fn max_corner(&self) -> Vec3 {
        let mut m = self.origin;
        for (a, v) in m.iter_mut().enumerate() {
            *v += self.spacing * (self.counts[a] - 1) as f64;
        }
        m
    }

    /// Same lattice shifted by `t`.
    pub fn translated(&self, t: Vec3) -> Grid {
        Grid {
            origin: [
                self.origin[0] + t[0],
                self.origin[1] + t[1],
                self.origin[2] + t[2],
            ],
            ..*self
        }
    }

    /// Fits a `G³` lattice to the frame's bounding box expanded by
    /// `margin_fraction` of its extent on every side, centred on the box.
    pub fn fit(
        frame: &ParticleFrame,
        points_per_axis: usize,
        margin_fraction: f64,
        placement: GridPlacement,
    ) -> Result<Grid, CoreError> {
        if points_per_axis < 2 {
            return Err(CoreError::InvalidGrid(format!(
                "need at least 2 points per axis, got {points_per_axis}"
            )));
        }
        if !(margin_fraction >= 0.0) || !margin_fraction.is_finite() {
            return Err(CoreError::InvalidGrid(format!(
                "margin fraction must be finite and >= 0, got {margin_fraction}"
            )));
        }
        let (lo, hi) = frame.bounds();
        let mut extent: f64 = 0.0;
        let mut center = [0.0; 3];
        for a in 0..3 {
            let e = (hi[a] - lo[a]) * (1.0 + 2.0 * margin_fraction);
            extent = extent.max(e);
            center[a] = 0.5 * (lo[a] + hi[a]);
        }
        let intervals = match placement {
            GridPlacement::Enclosing => points_per_axis - 1,
            GridPlacement::StencilInset => points_per_axis + 1,
        };
        let mut spacing = extent / intervals as f64;
        if !(spacing >= MIN_SPACING) {
            spacing = MIN_SPACING;
        }
        let half = 0.5 * spacing * (points_per_axis - 1) as f64;
        Ok(Grid {
            origin: [center[0] - half, center[1] - half, center[2] - half],
            spacing,
            counts: [points_per_axis; 3],
        })
    }
}

/// Enclosing lattice over the bounding box expanded by `margin_fraction`.
pub fn bounding_grid(
    frame: &ParticleFrame,
    points_per_axis: usize,
    margin_fraction: f64,
) -> Result<Grid, CoreError> {
    Grid::fit(
        frame,
        points_per_axis,
        margin_fraction,
        GridPlacement::Enclosing,
    )
}
