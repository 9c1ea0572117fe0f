//! Joining two local maps that share a coordinate frame.
//!
//! Both estimates are treated as observations of the joint state. Because
//! they are expressed in the same frame the observation model is a selection
//! matrix, so the fusion is one sparse linear least-squares solve. The fused
//! result is then moved into the target frame by the closed-form transform,
//! with the information matrix propagated through its Jacobian.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::frame::{full_block, COINCIDENT_TOL, COLLINEAR_TOL};
use crate::geometry::wrap;
use crate::localmap::{fixed_heading_placeholders, reframe_with_info, LocalMap};
use crate::sparse::{solve_spd, SparseMatrix, SparseSymMatrix};
use crate::state::{Dim, FrameDescriptor, HeadingMode, StateKey, StateVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JoinVariant {
    PoseFeature,
    PoseOnly,
    FeatureOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JoinKind {
    pub variant: JoinVariant,
    /// Entries stored in both maps.
    pub common: BTreeSet<StateKey>,
}

/// Column block of one joint-state entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JointEntry {
    pub key: StateKey,
    pub offset: usize,
    pub len: usize,
}

/// `min ||A x - Z||^2_{I_Z}` for the joint state `x`.
#[derive(Clone, Debug)]
pub struct LinearJoinSystem {
    pub a: SparseMatrix,
    pub z: Vec<f64>,
    pub iz: SparseSymMatrix,
    /// Joint-state layout: first-map-only entries, second-map-only entries,
    /// then common entries, each group in ascending key order.
    pub key_map: Vec<JointEntry>,
    pub dim: Dim,
    pub headings: HeadingMode,
    pub frame: FrameDescriptor,
}

/// Fused estimate in the shared frame of the two inputs, in joint-state order.
#[derive(Clone, Debug)]
pub struct JointEstimate {
    pub dim: Dim,
    pub headings: HeadingMode,
    pub frame: FrameDescriptor,
    pub estimate: StateVector,
    pub info: SparseSymMatrix,
}

impl JointEstimate {
    /// The fused map without a change of frame.
    pub fn into_local_map(self) -> Result<LocalMap> {
        LocalMap::new(self.dim, self.headings, self.frame, self.estimate, self.info)
    }
}

/// Checks that two maps can be fused in one linear step.
pub fn classify_join(m1: &LocalMap, m2: &LocalMap) -> Result<JoinKind> {
    if m1.dim() != m2.dim() {
        return Err(Error::InvalidInput("maps have different dimensions".into()));
    }
    if m1.headings() != m2.headings() {
        return Err(Error::InvalidInput("maps disagree on heading mode".into()));
    }
    let dim = m1.dim();
    let shared: BTreeSet<StateKey> = m1.elements().intersection(&m2.elements()).copied().collect();
    let (f1, f2) = (*m1.frame(), *m2.frame());
    let variant = match (f1.is_pose_frame(), f2.is_pose_frame()) {
        (true, true) => {
            if !shared.iter().any(|k| k.is_pose()) {
                return Err(Error::NotJoinable("no common pose".into()));
            }
            if f1 != f2 {
                return Err(Error::FrameMismatch(f1, f2));
            }
            if m1.has_features() || m2.has_features() {
                JoinVariant::PoseFeature
            } else {
                JoinVariant::PoseOnly
            }
        }
        (false, false) => {
            let feats: Vec<StateKey> = shared.iter().copied().filter(|k| k.is_feature()).collect();
            let need = dim.spatial();
            if feats.len() < need {
                return Err(Error::NotJoinable(format!(
                    "{} common features, at least {need} required",
                    feats.len()
                )));
            }
            if dim == Dim::D3 {
                let pts: Vec<Vec<f64>> = feats
                    .iter()
                    .map(|&k| full_block(m1.estimate(), dim, Some(&f1), k).expect("shared feature"))
                    .collect();
                if collinear(&pts) {
                    return Err(Error::DegenerateCommonSet);
                }
            }
            if f1 != f2 {
                return Err(Error::FrameMismatch(f1, f2));
            }
            JoinVariant::FeatureOnly
        }
        _ => return Err(Error::FrameMismatch(f1, f2)),
    };
    let common = m1.keys().iter().copied().filter(|&k| m2.estimate().contains(k)).collect();
    Ok(JoinKind { variant, common })
}

/// True when the points span at most a line: the second singular value of
/// the centered point matrix is tiny relative to the first.
fn collinear(pts: &[Vec<f64>]) -> bool {
    let n = pts.len();
    let mut m = DMatrix::from_fn(n, 3, |i, j| pts[i][j]);
    let mean = m.row_mean();
    for mut row in m.row_iter_mut() {
        row -= &mean;
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv[0] == 0.0 || sv.get(1).copied().unwrap_or(0.0) < COLLINEAR_TOL * sv[0]
}

/// Shifts the second map's common pose angles by multiples of `2 pi` so they
/// lie within `(-pi, pi]` of the first map's.
pub fn wrap_common_angles(m1: &LocalMap, m2: &LocalMap, common: &BTreeSet<StateKey>) -> Result<LocalMap> {
    let td = m1.dim().trans_dim();
    let mut est = m2.estimate().clone();
    for &key in common.iter().filter(|k| k.is_pose()) {
        let a1 = m1.estimate().get(key).ok_or(Error::MissingEntity(key))?.to_vec();
        let a2 = est.get_mut(key).ok_or(Error::MissingEntity(key))?;
        for i in td..a2.len() {
            let d = a2[i] - a1[i];
            let k = ((wrap(d) - d) / (2.0 * PI)).round();
            a2[i] += 2.0 * PI * k;
        }
    }
    m2.with_estimate(est)
}

/// Builds the stacked linear system for two maps in the same frame.
pub fn assemble_system(m1: &LocalMap, m2: &LocalMap, kind: &JoinKind) -> LinearJoinSystem {
    let groups = [
        m1.keys().iter().filter(|k| !kind.common.contains(k)).copied().collect::<Vec<_>>(),
        m2.keys().iter().filter(|k| !kind.common.contains(k)).copied().collect(),
        kind.common.iter().copied().collect(),
    ];
    let mut key_map = Vec::new();
    let mut offset = 0;
    let mut col_of = std::collections::HashMap::new();
    for (g, keys) in groups.iter().enumerate() {
        for &key in keys {
            let src = if g == 1 { m2 } else { m1 };
            let (_, len) = src.estimate().span(key).expect("key from map");
            col_of.insert(key, offset);
            key_map.push(JointEntry { key, offset, len });
            offset += len;
        }
    }
    let n = offset;
    let d1 = m1.estimate().dim();
    let d2 = m2.estimate().dim();
    let mut trip = Vec::with_capacity(d1 + d2);
    for (row0, m) in [(0, m1), (d1, m2)] {
        for (key, block) in m.estimate().iter() {
            let (off, _) = m.estimate().span(key).unwrap();
            for j in 0..block.len() {
                trip.push((row0 + off + j, col_of[&key] + j, 1.0));
            }
        }
    }
    let a = SparseMatrix::from_triplets(d1 + d2, n, trip).expect("indices in range");
    let mut z = m1.estimate().values().to_vec();
    z.extend_from_slice(m2.estimate().values());
    let iz = SparseSymMatrix::from_triplets(
        d1 + d2,
        m1.info().triplets().chain(m2.info().triplets().map(|(r, c, v)| (r + d1, c + d1, v))),
    )
    .expect("indices in range");
    LinearJoinSystem {
        a,
        z,
        iz,
        key_map,
        dim: m1.dim(),
        headings: m1.headings(),
        frame: *m1.frame(),
    }
}

/// Solves the normal equations `A^T I_Z A x = A^T I_Z Z`.
pub fn solve_join(sys: &LinearJoinSystem) -> Result<JointEstimate> {
    let normal = sys.iz.congruence(&sys.a);
    let rhs = sys.a.tr_mul_vec(&sys.iz.mul_vec(&sys.z));
    let x = solve_spd(&normal, &rhs)?;
    let td = sys.dim.trans_dim();
    let mut estimate = StateVector::new();
    for e in &sys.key_map {
        let mut block = x[e.offset..e.offset + e.len].to_vec();
        if e.key.is_pose() {
            for v in block.iter_mut().skip(td) {
                *v = wrap(*v);
            }
        }
        estimate.push(e.key, &block)?;
    }
    let info = match sys.headings {
        HeadingMode::Estimated => normal,
        HeadingMode::Fixed => fixed_heading_placeholders(sys.dim, &estimate, &normal)?,
    };
    Ok(JointEstimate {
        dim: sys.dim,
        headings: sys.headings,
        frame: sys.frame,
        estimate,
        info,
    })
}

/// Moves a pose-framed joint estimate into the frame of pose `new_pose`.
pub fn transform_pose_frame(joint: &JointEstimate, new_pose: u64) -> Result<LocalMap> {
    if !joint.frame.is_pose_frame() {
        return Err(Error::InvalidInput("estimate is not in a pose frame".into()));
    }
    transform(joint, &FrameDescriptor::Pose(new_pose))
}

/// Moves a joint estimate into a frame defined by features.
pub fn transform_feature_frame(joint: &JointEstimate, new_frame: &FrameDescriptor) -> Result<LocalMap> {
    if new_frame.is_pose_frame() {
        return Err(Error::InvalidInput("target is not a feature frame".into()));
    }
    transform(joint, new_frame)
}

fn transform(joint: &JointEstimate, to: &FrameDescriptor) -> Result<LocalMap> {
    let (est, info) = reframe_with_info(joint.dim, joint.headings, &joint.estimate, &joint.info, &joint.frame, to)?;
    LocalMap::new(joint.dim, joint.headings, *to, est, info)
}

/// Feature frame built from the smallest-id candidates that are not
/// degenerate: origin first, then the next non-coincident feature as x axis,
/// then (3D) the next non-collinear feature for the plane.
pub fn choose_feature_frame(
    state: &StateVector,
    dim: Dim,
    frame: Option<&FrameDescriptor>,
    candidates: &BTreeSet<u64>,
) -> Result<FrameDescriptor> {
    let pts: Vec<(u64, nalgebra::Vector3<f64>)> = candidates
        .iter()
        .filter_map(|&id| {
            let v = full_block(state, dim, frame, StateKey::Feature(id))?;
            Some((id, nalgebra::Vector3::new(v[0], v[1], v.get(2).copied().unwrap_or(0.0))))
        })
        .collect();
    let Some(&(o, po)) = pts.first() else {
        return Err(Error::DegenerateCommonSet);
    };
    let Some(&(x, px)) = pts.iter().skip(1).find(|(_, p)| (p - po).norm() >= COINCIDENT_TOL) else {
        return Err(Error::DegenerateCommonSet);
    };
    if dim == Dim::D2 {
        return Ok(FrameDescriptor::Features2 { origin: o, x_axis: x });
    }
    let v1 = px - po;
    let plane = pts.iter().filter(|(id, _)| *id != o && *id != x).find(|(_, p)| {
        let w = p - po;
        w.norm() >= COINCIDENT_TOL && v1.cross(&w).norm() > COLLINEAR_TOL * v1.norm() * w.norm()
    });
    match plane {
        Some(&(p, _)) => Ok(FrameDescriptor::Features3 {
            origin: o,
            x_axis: x,
            plane: p,
        }),
        None => Err(Error::DegenerateCommonSet),
    }
}

/// Fuses two maps sharing a frame and moves the result to the default
/// target frame: the last pose of the second map for pose frames, or a frame
/// built from common features for feature frames.
pub fn join_two_maps(m1: &LocalMap, m2: &LocalMap) -> Result<LocalMap> {
    join_two_maps_in(m1, m2, None)
}

/// Like [`join_two_maps`], with an explicit target frame. The target's
/// entities must belong to the joint map.
pub fn join_two_maps_in(m1: &LocalMap, m2: &LocalMap, target: Option<&FrameDescriptor>) -> Result<LocalMap> {
    let kind = classify_join(m1, m2)?;
    let m2w = wrap_common_angles(m1, m2, &kind.common)?;
    let sys = assemble_system(m1, &m2w, &kind);
    let joint = solve_join(&sys)?;
    let to = match target {
        Some(t) => Some(*t),
        None => default_target(m1, m2, &joint, kind.variant)?,
    };
    match to {
        None => joint.into_local_map(),
        Some(t) if t == joint.frame => joint.into_local_map(),
        Some(FrameDescriptor::Pose(p)) => transform_pose_frame(&joint, p),
        Some(t) => transform_feature_frame(&joint, &t),
    }
}

fn default_target(m1: &LocalMap, m2: &LocalMap, joint: &JointEstimate, variant: JoinVariant) -> Result<Option<FrameDescriptor>> {
    match variant {
        JoinVariant::PoseFeature | JoinVariant::PoseOnly => {
            let end = m2.elements().iter().filter(|k| k.is_pose()).map(|k| k.id()).max();
            Ok(end.map(FrameDescriptor::Pose))
        }
        JoinVariant::FeatureOnly => {
            let shared: BTreeSet<u64> = m1
                .elements()
                .intersection(&m2.elements())
                .filter(|k| k.is_feature())
                .map(|k| k.id())
                .collect();
            choose_feature_frame(&joint.estimate, joint.dim, Some(&joint.frame), &shared).map(Some)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(frame: FrameDescriptor, entries: &[(StateKey, &[f64])], info_diag: f64) -> LocalMap {
        let est = StateVector::from_entries(entries.iter().map(|(k, v)| (*k, v.to_vec()))).unwrap();
        let info = SparseSymMatrix::from_triplets(est.dim(), (0..est.dim()).map(|i| (i, i, info_diag))).unwrap();
        LocalMap::new(Dim::D2, HeadingMode::Estimated, frame, est, info).unwrap()
    }

    #[test]
    fn classify_examples() {
        let f = FrameDescriptor::Pose(1);
        let m1 = map(f, &[(StateKey::Feature(3), &[1.0, 2.0]), (StateKey::Feature(1), &[0.0, 1.0])], 1.0);
        let m2 = map(f, &[(StateKey::Feature(3), &[1.1, 2.0]), (StateKey::Pose(2), &[1.0, 0.0, 0.1])], 1.0);
        let k = classify_join(&m1, &m2).unwrap();
        assert_eq!(k.variant, JoinVariant::PoseFeature);
        assert_eq!(k.common, BTreeSet::from([StateKey::Feature(3)]));

        let p1 = map(f, &[(StateKey::Pose(2), &[1.0, 0.0, 0.1]), (StateKey::Pose(3), &[2.0, 0.0, 0.1])], 1.0);
        let p2 = map(f, &[(StateKey::Pose(2), &[1.0, 0.1, 0.1]), (StateKey::Pose(3), &[2.0, 0.1, 0.1])], 1.0);
        let k = classify_join(&p1, &p2).unwrap();
        assert_eq!(k.variant, JoinVariant::PoseOnly);
        assert_eq!(k.common.len(), 2);

        let ff = FrameDescriptor::Features2 { origin: 10, x_axis: 11 };
        let ff2 = FrameDescriptor::Features2 { origin: 20, x_axis: 21 };
        let a = map(ff, &[(StateKey::Feature(11), &[1.0]), (StateKey::Feature(5), &[0.3, 0.4])], 1.0);
        let b = map(ff2, &[(StateKey::Feature(21), &[1.0]), (StateKey::Feature(5), &[0.3, 0.4])], 1.0);
        assert!(matches!(classify_join(&a, &b), Err(Error::NotJoinable(_))));

        let other = map(FrameDescriptor::Pose(9), &[(StateKey::Pose(2), &[0.0, 0.0, 0.0])], 1.0);
        assert!(matches!(classify_join(&p1, &other), Err(Error::FrameMismatch(..))));
    }

    #[test]
    fn wrap_example() {
        let f = FrameDescriptor::Pose(0);
        let m1 = map(f, &[(StateKey::Pose(1), &[0.0, 0.0, 3.0])], 1.0);
        let m2 = map(f, &[(StateKey::Pose(1), &[0.0, 0.0, -3.0])], 1.0);
        let common = BTreeSet::from([StateKey::Pose(1)]);
        let w = wrap_common_angles(&m1, &m2, &common).unwrap();
        let a = w.estimate().get(StateKey::Pose(1)).unwrap()[2];
        assert!((a - (2.0 * PI - 3.0)).abs() < 1e-15);
        let same = wrap_common_angles(&m1, &m1, &common).unwrap();
        assert_eq!(same, m1);
    }

    #[test]
    fn scalar_fusion() {
        let f = FrameDescriptor::Pose(0);
        let m1 = map(f, &[(StateKey::Feature(1), &[1.0, 5.0])], 1.0);
        let m2 = map(f, &[(StateKey::Feature(1), &[3.0, 5.0])], 1.0);
        let kind = JoinKind {
            variant: JoinVariant::PoseFeature,
            common: BTreeSet::from([StateKey::Feature(1)]),
        };
        let j = solve_join(&assemble_system(&m1, &m2, &kind)).unwrap();
        assert_eq!(j.estimate.get(StateKey::Feature(1)).unwrap(), &[2.0, 5.0]);
        assert_eq!(j.info.to_dense(), DMatrix::identity(2, 2) * 2.0);
    }

    #[test]
    fn no_common_entries_concatenates() {
        let f = FrameDescriptor::Pose(0);
        let m1 = map(f, &[(StateKey::Feature(1), &[1.0, 2.0])], 2.0);
        let m2 = map(f, &[(StateKey::Pose(4), &[3.0, 4.0, 0.5])], 3.0);
        let kind = JoinKind {
            variant: JoinVariant::PoseFeature,
            common: BTreeSet::new(),
        };
        let sys = assemble_system(&m1, &m2, &kind);
        assert_eq!(sys.a.to_dense(), DMatrix::identity(5, 5));
        let j = solve_join(&sys).unwrap();
        let expect = [1.0, 2.0, 3.0, 4.0, 0.5];
        assert!(j.estimate.values().iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn self_join_doubles_information() {
        let f = FrameDescriptor::Pose(0);
        let m = map(
            f,
            &[
                (StateKey::Pose(1), &[1.0, 0.5, 0.3]),
                (StateKey::Feature(2), &[2.0, -1.0]),
            ],
            4.0,
        );
        let kind = classify_join(&m, &m).unwrap();
        let j = solve_join(&assemble_system(&m, &m, &kind)).unwrap();
        let out = j.into_local_map().unwrap();
        assert_eq!(out.estimate().values(), m.estimate().values());
        assert_eq!(out.info().to_dense(), m.info().to_dense() * 2.0);
        // The full join also moves the result to pose 1's frame.
        let joined = join_two_maps(&m, &m).unwrap();
        assert_eq!(*joined.frame(), FrameDescriptor::Pose(1));
    }

    #[test]
    fn feature_frame_choice_skips_coincident() {
        let est = StateVector::from_entries([
            (StateKey::Feature(1), vec![0.0, 0.0]),
            (StateKey::Feature(2), vec![0.0, 0.0]),
            (StateKey::Feature(3), vec![1.0, 0.0]),
        ])
        .unwrap();
        let f = choose_feature_frame(&est, Dim::D2, None, &BTreeSet::from([1, 2, 3])).unwrap();
        assert_eq!(f, FrameDescriptor::Features2 { origin: 1, x_axis: 3 });
    }
}
