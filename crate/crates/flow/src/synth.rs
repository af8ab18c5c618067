//! Analytic flow cases for training and verification.
//!
//! Each case samples a source frame uniformly in a box, moves every particle
//! along the case's velocity field for `dt`, and shuffles the moved particles
//! so that the target frame carries no index correspondence.

use std::f64::consts::PI;

use ffe_core::{FlowField, ParticleFrame, SpatialIndex, Vec3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{FlowError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CaseKind {
    Uniform,
    RigidRotation,
    Beltrami,
}

impl CaseKind {
    pub const ALL: [CaseKind; 3] = [
        CaseKind::Uniform,
        CaseKind::RigidRotation,
        CaseKind::Beltrami,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CaseKind::Uniform => "uniform",
            CaseKind::RigidRotation => "rotation",
            CaseKind::Beltrami => "beltrami",
        }
    }

    pub fn parse(s: &str) -> Option<CaseKind> {
        match s {
            "uniform" => Some(CaseKind::Uniform),
            "rotation" | "rigid_rotation" => Some(CaseKind::RigidRotation),
            "beltrami" => Some(CaseKind::Beltrami),
            _ => None,
        }
    }
}

/// Ethier–Steinman parameters: wave numbers `a`, `d`, viscosity `nu` and the
/// start time `t0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeltramiParams {
    pub a: f64,
    pub d: f64,
    pub nu: f64,
    pub t0: f64,
}

impl Default for BeltramiParams {
    fn default() -> Self {
        Self {
            a: PI / 4.0,
            d: PI / 2.0,
            nu: 0.01,
            t0: 0.0,
        }
    }
}

/// Exact Beltrami velocity at `(p, t)`.
pub fn beltrami_velocity(p: Vec3, t: f64, bp: &BeltramiParams) -> Vec3 {
    let (a, d) = (bp.a, bp.d);
    let [x, y, z] = p;
    let decay = (-bp.nu * d * d * t).exp();
    let (ex, ey, ez) = ((a * x).exp(), (a * y).exp(), (a * z).exp());
    [
        -a * (ex * (a * y + d * z).sin() + ez * (a * x + d * y).cos()) * decay,
        -a * (ey * (a * z + d * x).sin() + ex * (a * y + d * z).cos()) * decay,
        -a * (ez * (a * x + d * y).sin() + ey * (a * z + d * x).cos()) * decay,
    ]
}

/// Divergence of [`beltrami_velocity`] from its analytic partial derivatives.
pub fn beltrami_divergence(p: Vec3, t: f64, bp: &BeltramiParams) -> f64 {
    let (a, d) = (bp.a, bp.d);
    let [x, y, z] = p;
    let decay = (-bp.nu * d * d * t).exp();
    let (ex, ey, ez) = ((a * x).exp(), (a * y).exp(), (a * z).exp());
    let du_dx = -a * (a * ex * (a * y + d * z).sin() - a * ez * (a * x + d * y).sin());
    let dv_dy = -a * (a * ey * (a * z + d * x).sin() - a * ex * (a * y + d * z).sin());
    let dw_dz = -a * (a * ez * (a * x + d * y).sin() - a * ey * (a * z + d * x).sin());
    (du_dx + dv_dy + dw_dz) * decay
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowCase {
    pub kind: CaseKind,
    /// Uniform velocity.
    pub velocity: Vec3,
    /// Unit rotation axis, angular rate and centre of rotation.
    pub axis: Vec3,
    pub rate: f64,
    pub center: Vec3,
    pub beltrami: BeltramiParams,
    /// Frame interval; `None` picks one so the median displacement is
    /// `dt_factor` times the median nearest-neighbour spacing.
    pub dt: Option<f64>,
    pub dt_factor: f64,
    pub n: usize,
    pub seed: u64,
    pub domain: (Vec3, Vec3),
    pub rk4_substeps: usize,
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v: Vec3 = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

impl FlowCase {
    /// Defaults on the unit cube. The uniform direction and the rotation axis
    /// are drawn from the seed.
    pub fn new(kind: CaseKind, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let velocity = unit_vector(&mut rng);
        let axis = unit_vector(&mut rng);
        FlowCase {
            kind,
            velocity,
            axis,
            rate: 1.0,
            center: [0.5; 3],
            beltrami: BeltramiParams::default(),
            dt: None,
            dt_factor: 2.0,
            n,
            seed,
            domain: ([0.0; 3], [1.0; 3]),
            rk4_substeps: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlowError::Config(m));
        if self.n == 0 {
            return bad("particle count must be >= 1".into());
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return bad(format!("dt must be positive, got {dt}"));
            }
        }
        if !(self.beltrami.a > 0.0 && self.beltrami.d > 0.0) {
            return bad("Beltrami wave numbers must be positive".into());
        }
        if (0..3).any(|i| !(self.domain.1[i] > self.domain.0[i])) {
            return bad("domain box must have positive extent".into());
        }
        if self.rk4_substeps == 0 {
            return bad("need at least one integration substep".into());
        }
        Ok(())
    }

    pub fn velocity_at(&self, p: Vec3, t: f64) -> Vec3 {
        match self.kind {
            CaseKind::Uniform => self.velocity,
            CaseKind::RigidRotation => {
                let r = [
                    p[0] - self.center[0],
                    p[1] - self.center[1],
                    p[2] - self.center[2],
                ];
                let w = [
                    self.axis[0] * self.rate,
                    self.axis[1] * self.rate,
                    self.axis[2] * self.rate,
                ];
                [
                    w[1] * r[2] - w[2] * r[1],
                    w[2] * r[0] - w[0] * r[2],
                    w[0] * r[1] - w[1] * r[0],
                ]
            }
            CaseKind::Beltrami => beltrami_velocity(p, t, &self.beltrami),
        }
    }

    /// Displacement of a particle starting at `p` over `dt`: closed form for
    /// uniform and rotation, classical RK4 with `substeps` steps otherwise.
    pub fn displacement(&self, p: Vec3, dt: f64, substeps: usize) -> Vec3 {
        match self.kind {
            CaseKind::Uniform => [
                self.velocity[0] * dt,
                self.velocity[1] * dt,
                self.velocity[2] * dt,
            ],
            CaseKind::RigidRotation => {
                let r = [
                    p[0] - self.center[0],
                    p[1] - self.center[1],
                    p[2] - self.center[2],
                ];
                let rot = rotate(r, self.axis, self.rate * dt);
                [rot[0] - r[0], rot[1] - r[1], rot[2] - r[2]]
            }
            CaseKind::Beltrami => {
                let h = dt / substeps as f64;
                let mut x = p;
                let mut t = self.beltrami.t0;
                let add =
                    |a: Vec3, b: Vec3, s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
                for _ in 0..substeps {
                    let k1 = self.velocity_at(x, t);
                    let k2 = self.velocity_at(add(x, k1, h / 2.0), t + h / 2.0);
                    let k3 = self.velocity_at(add(x, k2, h / 2.0), t + h / 2.0);
                    let k4 = self.velocity_at(add(x, k3, h), t + h);
                    for a in 0..3 {
                        x[a] += h / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
                    }
                    t += h;
                }
                [x[0] - p[0], x[1] - p[1], x[2] - p[2]]
            }
        }
    }

    fn start_time(&self) -> f64 {
        match self.kind {
            CaseKind::Beltrami => self.beltrami.t0,
            _ => 0.0,
        }
    }
}

/// Rodrigues rotation of `v` about the unit `axis` by `angle`.
fn rotate(v: Vec3, axis: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    let dot = axis[0] * v[0] + axis[1] * v[1] + axis[2] * v[2];
    let cross = [
        axis[1] * v[2] - axis[2] * v[1],
        axis[2] * v[0] - axis[0] * v[2],
        axis[0] * v[1] - axis[1] * v[0],
    ];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = v[i] * c + cross[i] * s + axis[i] * dot * (1.0 - c);
    }
    out
}

/// A generated frame pair with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub source: ParticleFrame,
    pub target: ParticleFrame,
    pub flow: FlowField,
    pub dt: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median distance from each particle to its nearest other particle.
pub fn median_spacing(frame: &ParticleFrame) -> f64 {
    if frame.len() < 2 {
        return 0.0;
    }
    let index = SpatialIndex::build(frame);
    median(
        frame
            .positions()
            .iter()
            .map(|p| index.knn(*p, 2)[1].distance)
            .collect(),
    )
}

/// Median row norm of a flow field.
pub fn median_displacement(flow: &FlowField) -> f64 {
    median(flow.norms())
}

pub fn generate_pair(case: &FlowCase) -> Result<SyntheticPair> {
    case.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let (lo, hi) = case.domain;
    let positions: Vec<Vec3> = (0..case.n)
        .map(|_| {
            [
                rng.gen_range(lo[0]..hi[0]),
                rng.gen_range(lo[1]..hi[1]),
                rng.gen_range(lo[2]..hi[2]),
            ]
        })
        .collect();
    let source = ParticleFrame::new(positions)?;
    let dt = match case.dt {
        Some(dt) => dt,
        None => {
            let t0 = case.start_time();
            let speed = median(
                source
                    .positions()
                    .iter()
                    .map(|p| {
                        let v = case.velocity_at(*p, t0);
                        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
                    })
                    .collect(),
            );
            let spacing = median_spacing(&source);
            if speed > 0.0 && spacing > 0.0 {
                case.dt_factor * spacing / speed
            } else {
                1.0
            }
        }
    };
    let flow = FlowField::new(
        source
            .positions()
            .iter()
            .map(|p| case.displacement(*p, dt, case.rk4_substeps))
            .collect(),
    )?;
    let mut perm: Vec<usize> = (0..case.n).collect();
    perm.shuffle(&mut rng);
    let target = source.advect(&flow)?.permuted(&perm);
    Ok(SyntheticPair {
        source,
        target,
        flow,
        dt,
    })
}

/// `count` pairs of one kind with seeds `base_seed, base_seed + 1, …`.
pub fn generate_dataset(
    kind: CaseKind,
    count: usize,
    n: usize,
    base_seed: u64,
) -> Result<Vec<SyntheticPair>> {
    (0..count as u64)
        .map(|i| generate_pair(&FlowCase::new(kind, n, base_seed.wrapping_add(i))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_rows_equal_velocity_times_dt() {
        let case = FlowCase::new(CaseKind::Uniform, 64, 3);
        let pair = generate_pair(&case).unwrap();
        let want = [
            case.velocity[0] * pair.dt,
            case.velocity[1] * pair.dt,
            case.velocity[2] * pair.dt,
        ];
        assert!(pair.flow.vectors().iter().all(|v| *v == want));
    }

    #[test]
    fn quarter_turn_about_z() {
        let mut case = FlowCase::new(CaseKind::RigidRotation, 1, 0);
        case.axis = [0.0, 0.0, 1.0];
        case.center = [0.0; 3];
        case.rate = 2.0;
        let f = case.displacement([1.0, 0.0, 0.0], PI / 4.0, 1);
        assert!((f[0] + 1.0).abs() < 1e-15 && (f[1] - 1.0).abs() < 1e-15 && f[2] == 0.0);
    }

    #[test]
    fn target_is_a_permutation_of_the_advected_source() {
        let pair = generate_pair(&FlowCase::new(CaseKind::Beltrami, 100, 9)).unwrap();
        let moved = pair.source.advect(&pair.flow).unwrap();
        let mut a: Vec<Vec3> = moved.positions().to_vec();
        let mut b: Vec<Vec3> = pair.target.positions().to_vec();
        let key = |p: &Vec3, q: &Vec3| p[0].total_cmp(&q[0]).then(p[1].total_cmp(&q[1]));
        a.sort_by(key);
        b.sort_by(key);
        assert_eq!(a, b);
        assert_ne!(moved.positions(), pair.target.positions());
    }

    #[test]
    fn median_displacement_tracks_spacing() {
        for kind in CaseKind::ALL {
            let pair = generate_pair(&FlowCase::new(kind, 512, 1)).unwrap();
            let ratio = median_displacement(&pair.flow) / median_spacing(&pair.source);
            assert!((ratio - 2.0).abs() < 0.35, "{kind:?}: {ratio}");
        }
    }

    #[test]
    fn time_decay_factorises() {
        let bp = BeltramiParams {
            nu: 0.3,
            ..Default::default()
        };
        let p = [0.3, -0.7, 0.2];
        let u0 = beltrami_velocity(p, 0.0, &bp);
        let u1 = beltrami_velocity(p, 2.0, &bp);
        let f = (-bp.nu * bp.d * bp.d * 2.0).exp();
        for a in 0..3 {
            assert!((u1[a] - u0[a] * f).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_cases_rejected() {
        let mut c = FlowCase::new(CaseKind::Uniform, 0, 0);
        assert!(generate_pair(&c).is_err());
        c.n = 4;
        c.dt = Some(-1.0);
        assert!(generate_pair(&c).is_err());
    }
}
