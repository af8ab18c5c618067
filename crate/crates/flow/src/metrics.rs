//! Flow accuracy metrics and the neighbour distance score.

use ffe_core::{FlowField, ParticleFrame, SpatialIndex};
use serde::Serialize;

use crate::{FlowError, Result};

pub const STRICT_ABS: f64 = 0.05;
pub const STRICT_REL: f64 = 0.05;
pub const RELAX_ABS: f64 = 0.10;
pub const RELAX_REL: f64 = 0.10;
pub const OUTLIER_ABS: f64 = 0.30;
pub const OUTLIER_REL: f64 = 0.10;
pub const DEFAULT_NDS_K: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub epe: f64,
    pub nepe: f64,
    pub acc_strict: f64,
    pub acc_relax: f64,
    pub outliers: f64,
    pub n: usize,
}

impl MetricsReport {
    /// `epe=… nepe=… acc_strict=… acc_relax=… outliers=… n=…`.
    pub fn to_kv(&self) -> String {
        format!(
            "epe={:.17e} nepe={:.17e} acc_strict={:.17e} acc_relax={:.17e} outliers={:.17e} n={}",
            self.epe, self.nepe, self.acc_strict, self.acc_relax, self.outliers, self.n
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Endpoint errors and threshold accuracies of `pred` against `gt`.
///
/// Rows with zero ground-truth magnitude are left out of NEPE and judged by
/// the absolute thresholds alone.
pub fn evaluate(pred: &FlowField, gt: &FlowField) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(FlowError::Dimension(format!(
            "prediction has {} rows, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len();
    let (mut epe, mut nepe, mut n_rel) = (0.0, 0.0, 0usize);
    let (mut strict, mut relax, mut out) = (0usize, 0usize, 0usize);
    for (p, g) in pred.vectors().iter().zip(gt.vectors()) {
        let e = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt();
        let gn = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        epe += e;
        let rel = if gn > 0.0 {
            let r = e / gn;
            nepe += r;
            n_rel += 1;
            Some(r)
        } else {
            None
        };
        let below = |abs: f64, relt: f64| e < abs || rel.is_some_and(|r| r < relt);
        strict += below(STRICT_ABS, STRICT_REL) as usize;
        relax += below(RELAX_ABS, RELAX_REL) as usize;
        out += (e > OUTLIER_ABS || rel.is_some_and(|r| r > OUTLIER_REL)) as usize;
    }
    let nf = n.max(1) as f64;
    Ok(MetricsReport {
        epe: epe / nf,
        nepe: if n_rel > 0 { nepe / n_rel as f64 } else { 0.0 },
        acc_strict: strict as f64 / nf,
        acc_relax: relax as f64 / nf,
        outliers: out as f64 / nf,
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NdsReport {
    pub per_point: Vec<f64>,
    pub mean: f64,
}

/// `NDS_i = (1/k) sum_{j in N_k(i)} |f_i - f_j|²` over position-space
/// neighbours excluding `i`; `mean` is MNDS.
pub fn nds(x: &ParticleFrame, f: &FlowField, k: usize) -> Result<NdsReport> {
    if x.len() != f.len() {
        return Err(FlowError::Dimension(format!(
            "{} particles but {} flow vectors",
            x.len(),
            f.len()
        )));
    }
    if k == 0 {
        return Err(FlowError::Config("NDS needs k >= 1".into()));
    }
    if x.len() < 2 {
        return Err(FlowError::Dimension(
            "NDS needs at least two particles".into(),
        ));
    }
    let k = k.min(x.len() - 1);
    let index = SpatialIndex::build(x);
    let fv = f.vectors();
    let per_point: Vec<f64> = x
        .positions()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nb: Vec<usize> = index
                .knn_indices(*p, k + 1)
                .into_iter()
                .filter(|&j| j != i)
                .take(k)
                .collect();
            nb.iter()
                .map(|&j| (0..3).map(|a| (fv[i][a] - fv[j][a]).powi(2)).sum::<f64>())
                .sum::<f64>()
                / k as f64
        })
        .collect();
    let mean = per_point.iter().sum::<f64>() / per_point.len() as f64;
    Ok(NdsReport { per_point, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ff(v: Vec<[f64; 3]>) -> FlowField {
        FlowField::new(v).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let g = ff(vec![[1.0, 2.0, 3.0], [0.0; 3]]);
        let r = evaluate(&g, &g).unwrap();
        assert_eq!(
            (r.epe, r.nepe, r.acc_strict, r.acc_relax, r.outliers),
            (0.0, 0.0, 1.0, 1.0, 0.0)
        );
    }

    #[test]
    fn hand_examples() {
        let r = evaluate(&ff(vec![[1.2, 0.0, 0.0]]), &ff(vec![[1.0, 0.0, 0.0]])).unwrap();
        assert!((r.epe - 0.2).abs() < 1e-15);
        assert_eq!((r.acc_strict, r.acc_relax, r.outliers), (0.0, 0.0, 1.0));
        let r = evaluate(&ff(vec![[10.04, 0.0, 0.0]]), &ff(vec![[10.0, 0.0, 0.0]])).unwrap();
        assert_eq!((r.acc_strict, r.acc_relax, r.outliers), (1.0, 1.0, 0.0));
    }

    #[test]
    fn zero_ground_truth_excluded_from_nepe() {
        let r = evaluate(
            &ff(vec![[0.01, 0.0, 0.0], [1.1, 0.0, 0.0]]),
            &ff(vec![[0.0; 3], [1.0, 0.0, 0.0]]),
        )
        .unwrap();
        assert!((r.nepe - 0.1).abs() < 1e-12);
        assert_eq!(r.acc_strict, 0.5);
    }

    #[test]
    fn nds_two_points() {
        let x = ParticleFrame::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let r = nds(&x, &ff(vec![[0.0; 3], [1.0, 0.0, 0.0]]), 1).unwrap();
        assert_eq!(r.per_point, vec![1.0, 1.0]);
        assert_eq!(r.mean, 1.0);
        assert!(nds(
            &ParticleFrame::new(vec![[0.0; 3]]).unwrap(),
            &ff(vec![[0.0; 3]]),
            1
        )
        .is_err());
    }

    #[test]
    fn mismatch_is_error() {
        assert!(evaluate(&ff(vec![[0.0; 3]]), &FlowField::zeros(2)).is_err());
    }

    #[test]
    fn text_forms() {
        let r = evaluate(&ff(vec![[1.0, 0.0, 0.0]]), &ff(vec![[1.0, 0.0, 0.0]])).unwrap();
        assert!(r.to_kv().starts_with("epe=0.0"));
        assert!(r.to_kv().ends_with("n=1"));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["acc_strict"], 1.0);
    }
}
