//! Solution quality metrics: chi-square, trajectory and map RMSE, NEES.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::frame::{express, full_block};
use crate::geometry::{rot2, rot3};
use crate::join::choose_feature_frame;
use crate::localmap::{marginalize, LocalMap};
use crate::oracle;
use crate::sparse::SparseSymMatrix;
use crate::state::{Dim, FrameDescriptor, FramedState, HeadingMode, StateKey};

/// Weighted squared residual of every map at `solution`.
pub fn chi2(solution: &FramedState, maps: &[LocalMap]) -> Result<f64> {
    oracle::objective(maps, solution)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Rmse {
    pub abs_pose: f64,
    pub abs_feature: f64,
    pub rel_pose: f64,
}

fn elements(s: &FramedState) -> BTreeSet<StateKey> {
    s.state
        .keys()
        .iter()
        .copied()
        .chain(s.frame.iter().flat_map(|f| f.entities()))
        .collect()
}

/// Frame both states are compared in: the lowest-id common pose, otherwise
/// a frame built from the lowest-id usable common features.
pub fn alignment_frame(a: &FramedState, b: &FramedState) -> Result<FrameDescriptor> {
    let common: BTreeSet<StateKey> = elements(a).intersection(&elements(b)).copied().collect();
    if let Some(p) = common.iter().find(|k| k.is_pose()) {
        return Ok(FrameDescriptor::Pose(p.id()));
    }
    let feats: BTreeSet<u64> = common.iter().filter(|k| k.is_feature()).map(|k| k.id()).collect();
    if feats.is_empty() {
        return Err(Error::InvalidInput("states share no entities".into()));
    }
    choose_feature_frame(&b.state, b.dim, b.frame.as_ref(), &feats)
}

/// Root-mean-square position errors after expressing both states in
/// `align` (or the default alignment frame when `None`).
pub fn rmse(solution: &FramedState, reference: &FramedState, align: Option<&FrameDescriptor>) -> Result<Rmse> {
    if solution.dim != reference.dim {
        return Err(Error::InvalidInput("states differ in dimension".into()));
    }
    let dim = solution.dim;
    let frame = match align {
        Some(f) => *f,
        None => alignment_frame(solution, reference)?,
    };
    let sol = express(solution, HeadingMode::Estimated, &frame)?;
    let re = express(reference, HeadingMode::Estimated, &frame)?;
    let common: Vec<StateKey> = elements(&sol).intersection(&elements(&re)).copied().collect();
    if common.is_empty() {
        let missing = reference.state.keys().first().copied().unwrap_or(StateKey::Pose(0));
        return Err(Error::MissingEntity(missing));
    }
    let td = dim.trans_dim();
    let block = |s: &FramedState, k: StateKey| full_block(&s.state, dim, s.frame.as_ref(), k).expect("common key");
    let sq = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum() };
    let rms = |total: f64, n: usize| if n == 0 { 0.0 } else { (total / n as f64).sqrt() };

    let (mut pose_sum, mut pose_n, mut feat_sum, mut feat_n) = (0.0, 0, 0.0, 0);
    for &k in &common {
        let e = sq(&block(&sol, k)[..td], &block(&re, k)[..td]);
        if k.is_pose() {
            pose_sum += e;
            pose_n += 1;
        } else {
            feat_sum += e;
            feat_n += 1;
        }
    }

    let poses: Vec<StateKey> = common.iter().copied().filter(|k| k.is_pose()).collect();
    let body_delta = |s: &FramedState, a: StateKey, b: StateKey| -> Vec<f64> {
        let (va, vb) = (block(s, a), block(s, b));
        let d: Vec<f64> = (0..td).map(|i| vb[i] - va[i]).collect();
        match dim {
            Dim::D2 => {
                let r = rot2(va[2]);
                let v = r.transpose() * nalgebra::Vector2::new(d[0], d[1]);
                vec![v[0], v[1]]
            }
            Dim::D3 => {
                let r = rot3(&[va[3], va[4], va[5]]);
                let v = r.transpose() * nalgebra::Vector3::new(d[0], d[1], d[2]);
                vec![v[0], v[1], v[2]]
            }
        }
    };
    let mut rel_sum = 0.0;
    for w in poses.windows(2) {
        rel_sum += sq(&body_delta(&sol, w[0], w[1]), &body_delta(&re, w[0], w[1]));
    }

    Ok(Rmse {
        abs_pose: rms(pose_sum, pose_n),
        abs_feature: rms(feat_sum, feat_n),
        rel_pose: rms(rel_sum, poses.len().saturating_sub(1)),
    })
}

/// `e^T I e`, requiring `I` positive definite.
pub fn nees_raw(error: &[f64], info: &SparseSymMatrix) -> Result<f64> {
    if error.len() != info.dim() {
        return Err(Error::InvalidInput("error and information sizes differ".into()));
    }
    if error.is_empty() {
        return Ok(0.0);
    }
    info.cholesky()
        .map_err(|_| Error::SingularSystem("information matrix is not positive definite".into()))?;
    Ok(info.quad_form(error))
}

/// NEES over the map's features, using their marginal information and the
/// truth expressed in the map's frame. Returns the value and its degrees of
/// freedom.
pub fn nees(map: &LocalMap, truth: &FramedState) -> Result<(f64, usize)> {
    let poses: BTreeSet<StateKey> = map.estimate().keys().iter().copied().filter(|k| k.is_pose()).collect();
    let feats = marginalize(map, &poses)?;
    let t = express(truth, HeadingMode::Estimated, map.frame())?;
    let mut e = Vec::with_capacity(feats.estimate().dim());
    for (k, v) in feats.estimate().iter() {
        let tv = t.state.get(k).ok_or(Error::MissingEntity(k))?;
        e.extend(v.iter().zip(tv).map(|(a, b)| a - b));
    }
    Ok((nees_raw(&e, feats.info())?, e.len()))
}

/// Quantile of the chi-square distribution. Uses the Wilson-Hilferty cube
/// approximation for `df >= 100` and exact inversion below.
pub fn chi2_quantile(p: f64, df: u64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) || df == 0 {
        return Err(Error::InvalidInput("need 0 < p < 1 and df >= 1".into()));
    }
    let k = df as f64;
    if df >= 100 {
        let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p);
        let c = 2.0 / (9.0 * k);
        Ok(k * (1.0 - c + z * c.sqrt()).powi(3))
    } else {
        Ok(ChiSquared::new(k).expect("positive df").inverse_cdf(p))
    }
}

/// Collected metrics; unset fields were not requested.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chi2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_abs_pose: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_abs_feature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_rel_pose: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nees: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nees_bound_95: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dims: Option<usize>,
}

impl MetricReport {
    pub fn set_rmse(&mut self, r: &Rmse) {
        self.rmse_abs_pose = Some(r.abs_pose);
        self.rmse_abs_feature = Some(r.abs_feature);
        self.rmse_rel_pose = Some(r.rel_pose);
    }

    pub fn set_nees(&mut self, value: f64, dims: usize) -> Result<()> {
        self.nees = Some(value);
        self.dims = Some(dims);
        self.nees_bound_95 = if dims > 0 { Some(chi2_quantile(0.95, dims as u64)?) } else { None };
        Ok(())
    }

    /// One `key=value` line per set field.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let json = serde_json::to_value(self).expect("report serializes");
        // Field order follows the struct, not the map.
        for key in ["chi2", "rmse_abs_pose", "rmse_abs_feature", "rmse_rel_pose", "nees", "nees_bound_95", "dims"] {
            if let Some(v) = json.get(key) {
                let _ = writeln!(out, "{key}={v}");
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
