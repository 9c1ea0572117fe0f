//! Local maps: construction from raw odometry and observations, re-framing,
//! and marginalization.

use std::collections::{BTreeSet, HashMap, VecDeque};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::frame::change_frame;
use crate::geometry::{relative_point, relative_pose, rot2, rot3, euler_from_rot3, wrap};
use crate::sparse::{solve_spd, SparseCholesky, SparseSymMatrix};
use crate::state::{Dim, FrameDescriptor, FramedState, HeadingMode, StateKey, StateVector};

/// An estimate with its information matrix, expressed in the frame given by
/// `frame`. Entries are kept sorted by key.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalMap {
    dim: Dim,
    headings: HeadingMode,
    frame: FrameDescriptor,
    estimate: StateVector,
    info: SparseSymMatrix,
}

impl LocalMap {
    /// Validates the layout against the frame and sorts entries by key.
    /// Positive semidefiniteness is not checked here; see [`LocalMap::check_psd`].
    pub fn new(
        dim: Dim,
        headings: HeadingMode,
        frame: FrameDescriptor,
        estimate: StateVector,
        info: SparseSymMatrix,
    ) -> Result<LocalMap> {
        frame.validate(dim)?;
        if headings == HeadingMode::Fixed && !frame.is_pose_frame() {
            return Err(Error::InvalidInput(
                "fixed-heading maps must use a pose frame".into(),
            ));
        }
        if info.dim() != estimate.dim() {
            return Err(Error::InvalidInput(format!(
                "information matrix has dimension {} but the estimate has {}",
                info.dim(),
                estimate.dim()
            )));
        }
        for (key, block) in estimate.iter() {
            let want = frame.stored_len(key, dim);
            if want == 0 {
                return Err(Error::InvalidInput(format!("{key} defines the frame and cannot be stored")));
            }
            if block.len() != want {
                return Err(Error::InvalidInput(format!(
                    "{key} has {} values, expected {want}",
                    block.len()
                )));
            }
        }
        for key in frame.entities() {
            if frame.stored_len(key, dim) > 0 && !estimate.contains(key) {
                return Err(Error::MissingEntity(key));
            }
        }
        if estimate.is_sorted() {
            return Ok(LocalMap {
                dim,
                headings,
                frame,
                estimate,
                info,
            });
        }
        let order = estimate.sort_order();
        let mut sorted = StateVector::new();
        let mut map = vec![0usize; estimate.dim()];
        for &i in &order {
            let (key, block) = estimate.entry(i);
            let (off, len) = estimate.span(key).unwrap();
            let new_off = sorted.dim();
            for j in 0..len {
                map[off + j] = new_off + j;
            }
            sorted.push(key, block)?;
        }
        let info = info.embed(sorted.dim(), &map);
        Ok(LocalMap {
            dim,
            headings,
            frame,
            estimate: sorted,
            info,
        })
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn headings(&self) -> HeadingMode {
        self.headings
    }

    pub fn frame(&self) -> &FrameDescriptor {
        &self.frame
    }

    pub fn estimate(&self) -> &StateVector {
        &self.estimate
    }

    pub fn info(&self) -> &SparseSymMatrix {
        &self.info
    }

    pub fn framed_state(&self) -> FramedState {
        FramedState {
            dim: self.dim,
            frame: Some(self.frame),
            state: self.estimate.clone(),
        }
    }

    pub fn keys(&self) -> &[StateKey] {
        self.estimate.keys()
    }

    /// Keys of the map's entries together with its frame-defining entities.
    pub fn elements(&self) -> BTreeSet<StateKey> {
        let mut s: BTreeSet<StateKey> = self.keys().iter().copied().collect();
        s.extend(self.frame.entities());
        s
    }

    pub fn pose_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.keys().iter().filter(|k| k.is_pose()).map(|k| k.id())
    }

    pub fn feature_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.keys().iter().filter(|k| k.is_feature()).map(|k| k.id())
    }

    pub fn has_features(&self) -> bool {
        self.keys().iter().any(|k| k.is_feature())
    }

    pub fn check_psd(&self) -> Result<()> {
        if self.info.is_psd() {
            Ok(())
        } else {
            Err(Error::InvalidInput("information matrix is not positive semidefinite".into()))
        }
    }

    /// Same map with a different estimate of identical layout.
    pub fn with_estimate(&self, estimate: StateVector) -> Result<LocalMap> {
        LocalMap::new(self.dim, self.headings, self.frame, estimate, self.info.clone())
    }
}

/// Re-expresses `(estimate, info)` from frame `from` in frame `to`.
/// The information matrix is propagated through the Jacobian of the inverse
/// transform evaluated at the new estimate.
pub(crate) fn reframe_with_info(
    dim: Dim,
    headings: HeadingMode,
    estimate: &StateVector,
    info: &SparseSymMatrix,
    from: &FrameDescriptor,
    to: &FrameDescriptor,
) -> Result<(StateVector, SparseSymMatrix)> {
    if from == to {
        return Ok((estimate.clone(), info.clone()));
    }
    let fwd = change_frame(estimate, dim, headings, Some(from), to, false)?;
    let back = change_frame(&fwd.state, dim, headings, Some(to), from, true)?;
    let nabla = back.jacobian.expect("jacobian requested");
    let finish = |info: SparseSymMatrix| -> Result<SparseSymMatrix> {
        match headings {
            HeadingMode::Estimated => Ok(info),
            HeadingMode::Fixed => fixed_heading_placeholders(dim, &fwd.state, &info),
        }
    };
    if back.state.keys() == estimate.keys() {
        let propagated = info.congruence(&nabla);
        return Ok((fwd.state.clone(), finish(propagated)?));
    }
    // The inverse transform emits keys in sorted order; bring the
    // information matrix into that order before propagating.
    let mut map = vec![0usize; estimate.dim()];
    for (key, _) in estimate.iter() {
        let (a, len) = estimate.span(key).unwrap();
        let (b, _) = back.state.span(key).ok_or(Error::MissingEntity(key))?;
        for j in 0..len {
            map[a + j] = b + j;
        }
    }
    let info = info.embed(estimate.dim(), &map);
    let propagated = finish(info.congruence(&nabla))?;
    Ok((fwd.state, propagated))
}

/// With fixed headings the pose angles are constants: their rows and
/// columns carry no information, only a unit diagonal placeholder.
pub(crate) fn fixed_heading_placeholders(dim: Dim, estimate: &StateVector, info: &SparseSymMatrix) -> Result<SparseSymMatrix> {
    let mut angle = vec![false; estimate.dim()];
    for (key, block) in estimate.iter() {
        if key.is_pose() {
            let (off, _) = estimate.span(key).unwrap();
            for i in dim.trans_dim()..block.len() {
                angle[off + i] = true;
            }
        }
    }
    let t = info
        .triplets()
        .filter(|&(r, c, _)| !angle[r] && !angle[c])
        .chain((0..angle.len()).filter(|&i| angle[i]).map(|i| (i, i, 1.0)));
    SparseSymMatrix::from_triplets(estimate.dim(), t)
}

/// Moves a map into another frame.
pub fn reframe_map(map: &LocalMap, new_frame: &FrameDescriptor) -> Result<LocalMap> {
    if *new_frame == map.frame {
        return Ok(map.clone());
    }
    let (est, info) = reframe_with_info(map.dim, map.headings, &map.estimate, &map.info, &map.frame, new_frame)?;
    LocalMap::new(map.dim, map.headings, *new_frame, est, info)
}

/// Removes entries while preserving the marginal distribution of the rest.
pub fn marginalize(map: &LocalMap, remove: &BTreeSet<StateKey>) -> Result<LocalMap> {
    if remove.is_empty() {
        return Ok(map.clone());
    }
    let mut removed_idx = Vec::new();
    for &key in remove {
        let (off, len) = map.estimate.span(key).ok_or(Error::MissingEntity(key))?;
        if len < map.dim.full_dim(key) {
            return Err(Error::InvalidInput(format!("{key} partially defines the frame and cannot be removed")));
        }
        removed_idx.extend(off..off + len);
    }
    removed_idx.sort_unstable();
    let mut kept = StateVector::new();
    let mut kept_idx = Vec::new();
    for (key, block) in map.estimate.iter() {
        if !remove.contains(&key) {
            let (off, len) = map.estimate.span(key).unwrap();
            kept_idx.extend(off..off + len);
            kept.push(key, block)?;
        }
    }
    if kept.is_empty() {
        return Err(Error::InvalidInput("marginalization would leave an empty map".into()));
    }
    let info = schur_complement(&map.info, &kept_idx, &removed_idx)?;
    LocalMap::new(map.dim, map.headings, map.frame, kept, info)
}

/// `I_kk - I_kr I_rr^-1 I_rk` over the index sets `keep` and `remove`.
pub(crate) fn schur_complement(info: &SparseSymMatrix, keep: &[usize], remove: &[usize]) -> Result<SparseSymMatrix> {
    let n = info.dim();
    const KEPT: usize = usize::MAX;
    let mut rpos = vec![KEPT; n];
    for (i, &r) in remove.iter().enumerate() {
        rpos[r] = i;
    }
    let mut kpos = vec![usize::MAX; n];
    for (i, &k) in keep.iter().enumerate() {
        kpos[k] = i;
    }
    // Kept indices coupled to removed ones.
    let mut boundary = BTreeSet::new();
    let mut coupling = Vec::new();
    for (r, c, v) in info.triplets() {
        let (kr, rr) = match (rpos[r] != KEPT, rpos[c] != KEPT) {
            (true, false) => (c, r),
            (false, true) => (r, c),
            _ => continue,
        };
        if kpos[kr] != usize::MAX {
            boundary.insert(kpos[kr]);
            coupling.push((kpos[kr], rpos[rr], v));
        }
    }
    let boundary: Vec<usize> = boundary.into_iter().collect();
    let mut bpos = HashMap::new();
    for (i, &b) in boundary.iter().enumerate() {
        bpos.insert(b, i);
    }
    let nb = boundary.len();
    let nr = remove.len();
    let mut ibr = DMatrix::zeros(nb, nr);
    for &(k, r, v) in &coupling {
        ibr[(bpos[&k], r)] += v;
    }
    let irr = info.submatrix(remove);
    let x = if nr < 64 {
        let chol = irr.to_dense().cholesky().ok_or(Error::SingularMarginalization)?;
        chol.solve(&ibr.transpose())
    } else {
        let chol = SparseCholesky::factor(&irr, 0.0).map_err(|_| Error::SingularMarginalization)?;
        let mut x = DMatrix::zeros(nr, nb);
        for j in 0..nb {
            let col: Vec<f64> = ibr.row(j).iter().copied().collect();
            x.set_column(j, &DVector::from_vec(chol.solve(&col)));
        }
        x
    };
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularMarginalization);
    }
    let s = &ibr * x;
    let mut t: Vec<(usize, usize, f64)> = info.submatrix(keep).triplets().collect();
    for i in 0..nb {
        for j in 0..=i {
            t.push((boundary[i], boundary[j], -s[(i, j)]));
        }
    }
    SparseSymMatrix::from_triplets(keep.len(), t)
}

/// Relative pose measurement between two poses of a chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct OdometryEdge {
    pub from: u64,
    pub to: u64,
    /// Pose of `to` in the frame of `from`.
    pub measurement: Vec<f64>,
    pub info: DMatrix<f64>,
}

/// Cartesian position of a feature in the frame of the observing pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub pose: u64,
    pub feature: u64,
    pub measurement: Vec<f64>,
    pub info: DMatrix<f64>,
}

/// Raw data for one local map.
#[derive(Clone, Debug, PartialEq)]
pub struct RawLocalData {
    pub dim: Dim,
    pub headings: HeadingMode,
    pub poses: Vec<u64>,
    pub odometry: Vec<OdometryEdge>,
    pub observations: Vec<Observation>,
}

fn check_block(what: &str, v: &[f64], m: &DMatrix<f64>, len: usize) -> Result<()> {
    if v.len() != len || m.nrows() != len || m.ncols() != len {
        return Err(Error::InvalidInput(format!("{what} has the wrong dimension")));
    }
    if v.iter().chain(m.iter()).any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} has non-finite values")));
    }
    Ok(())
}

impl RawLocalData {
    pub fn validate(&self) -> Result<()> {
        if self.poses.is_empty() {
            return Err(Error::InvalidInput("chunk has no poses".into()));
        }
        let poses: BTreeSet<u64> = self.poses.iter().copied().collect();
        if poses.len() != self.poses.len() {
            return Err(Error::InvalidInput("duplicate pose id in chunk".into()));
        }
        for e in &self.odometry {
            check_block("odometry edge", &e.measurement, &e.info, self.dim.pose_dim())?;
            for p in [e.from, e.to] {
                if !poses.contains(&p) {
                    return Err(Error::MissingEntity(StateKey::Pose(p)));
                }
            }
            if e.from == e.to {
                return Err(Error::InvalidInput(format!("odometry edge from pose {} to itself", e.from)));
            }
        }
        for o in &self.observations {
            check_block("observation", &o.measurement, &o.info, self.dim.feature_dim())?;
            if !poses.contains(&o.pose) {
                return Err(Error::MissingEntity(StateKey::Pose(o.pose)));
            }
        }
        Ok(())
    }

    pub fn feature_ids(&self) -> BTreeSet<u64> {
        self.observations.iter().map(|o| o.feature).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussNewtonConfig {
    pub max_iters: usize,
    /// Stop when the relative objective decrease falls below this.
    pub rel_tol: f64,
    /// Stop when the largest update component falls below this.
    pub step_tol: f64,
}

impl Default for GaussNewtonConfig {
    fn default() -> Self {
        GaussNewtonConfig {
            max_iters: 50,
            rel_tol: 1e-12,
            step_tol: 1e-10,
        }
    }
}

impl GaussNewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.rel_tol > 0.0) || !(self.step_tol > 0.0) {
            return Err(Error::InvalidInput("Gauss-Newton settings must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of [`build_local_map`].
#[derive(Clone, Debug)]
pub struct BuiltMap {
    pub map: LocalMap,
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
}

impl BuiltMap {
    /// The map, or `NotConverged` if the solver stopped early.
    pub fn into_converged(self) -> Result<LocalMap> {
        if self.converged {
            Ok(self.map)
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
            })
        }
    }
}

/// Variable layout of a local problem: every entity except the anchor pose.
struct Layout {
    keys: Vec<StateKey>,
    /// Offset of each key's free variables, and which of its coordinates are free.
    var: HashMap<StateKey, (usize, Vec<usize>)>,
    nvars: usize,
}

impl Layout {
    fn new(dim: Dim, headings: HeadingMode, keys: Vec<StateKey>) -> Layout {
        let mut var = HashMap::new();
        let mut nvars = 0;
        for &k in &keys {
            let coords: Vec<usize> = match k {
                StateKey::Pose(_) if headings == HeadingMode::Fixed => (0..dim.trans_dim()).collect(),
                _ => (0..dim.full_dim(k)).collect(),
            };
            let n = coords.len();
            var.insert(k, (nvars, coords));
            nvars += n;
        }
        Layout { keys, var, nvars }
    }
}

struct Linearized {
    objective: f64,
    h: SparseSymMatrix,
    g: Vec<f64>,
}

struct LocalProblem<'a> {
    data: &'a RawLocalData,
    anchor: u64,
    layout: Layout,
}

impl LocalProblem<'_> {
    fn value<'v>(&self, x: &'v HashMap<StateKey, Vec<f64>>, k: StateKey) -> &'v [f64] {
        &x[&k]
    }

    /// Residual, and Jacobian blocks per involved key.
    fn terms(&self, x: &HashMap<StateKey, Vec<f64>>, mut visit: impl FnMut(&DVector<f64>, &DMatrix<f64>, &[(StateKey, DMatrix<f64>)])) -> Result<()> {
        let dim = self.data.dim;
        let td = dim.trans_dim();
        for e in &self.data.odometry {
            let (a, b) = (StateKey::Pose(e.from), StateKey::Pose(e.to));
            let rel = relative_pose(dim, self.value(x, a), self.value(x, b))?;
            let mut r = rel.value.clone();
            for i in 0..dim.pose_dim() {
                r[i] -= e.measurement[i];
                if i >= td {
                    r[i] = wrap(r[i]);
                }
            }
            visit(&r, &e.info, &[(a, rel.d_frame), (b, rel.d_own)]);
        }
        for o in &self.data.observations {
            let (p, f) = (StateKey::Pose(o.pose), StateKey::Feature(o.feature));
            let rel = relative_point(dim, self.value(x, p), self.value(x, f));
            let mut r = rel.value.clone();
            for i in 0..td {
                r[i] -= o.measurement[i];
            }
            visit(&r, &o.info, &[(p, rel.d_frame), (f, rel.d_own)]);
        }
        Ok(())
    }

    fn objective(&self, x: &HashMap<StateKey, Vec<f64>>) -> Result<f64> {
        let mut total = 0.0;
        self.terms(x, |r, info, _| total += (r.transpose() * info * r)[(0, 0)])?;
        Ok(total)
    }

    fn linearize(&self, x: &HashMap<StateKey, Vec<f64>>) -> Result<Linearized> {
        let mut total = 0.0;
        let mut trip = Vec::new();
        let mut g = vec![0.0; self.layout.nvars];
        self.terms(x, |r, info, blocks| {
            total += (r.transpose() * info * r)[(0, 0)];
            // Restrict each block to its free columns.
            let parts: Vec<(usize, DMatrix<f64>)> = blocks
                .iter()
                .filter_map(|(k, j)| {
                    let (off, coords) = self.layout.var.get(k)?;
                    Some((*off, j.select_columns(coords.iter())))
                })
                .collect();
            let ir = info * r;
            for (ia, (oa, ja)) in parts.iter().enumerate() {
                let ga = ja.transpose() * &ir;
                for (i, v) in ga.iter().enumerate() {
                    g[oa + i] += v;
                }
                let ija = info * ja;
                for (ob, jb) in &parts[..=ia] {
                    let blk = jb.transpose() * &ija;
                    for rr in 0..blk.nrows() {
                        for cc in 0..blk.ncols() {
                            let (row, col) = (ob + rr, oa + cc);
                            // Off-diagonal blocks are mirrored by the assembly.
                            if ob == oa && row < col {
                                continue;
                            }
                            trip.push((row, col, blk[(rr, cc)]));
                        }
                    }
                }
            }
        })?;
        Ok(Linearized {
            objective: total,
            h: SparseSymMatrix::from_triplets(self.layout.nvars, trip)?,
            g,
        })
    }

    fn apply(&self, x: &HashMap<StateKey, Vec<f64>>, delta: &[f64], alpha: f64) -> HashMap<StateKey, Vec<f64>> {
        let td = self.data.dim.trans_dim();
        let mut out = x.clone();
        for k in &self.layout.keys {
            let (off, coords) = &self.layout.var[k];
            let v = out.get_mut(k).unwrap();
            for (i, &c) in coords.iter().enumerate() {
                v[c] += alpha * delta[off + i];
                if k.is_pose() && c >= td {
                    v[c] = wrap(v[c]);
                }
            }
        }
        out
    }
}

/// Initial values by breadth-first dead reckoning from the anchor pose.
fn dead_reckoning(data: &RawLocalData, anchor: u64) -> Result<HashMap<StateKey, Vec<f64>>> {
    let dim = data.dim;
    let mut x: HashMap<StateKey, Vec<f64>> = HashMap::new();
    x.insert(StateKey::Pose(anchor), vec![0.0; dim.pose_dim()]);
    let mut edges: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, e) in data.odometry.iter().enumerate() {
        edges.entry(e.from).or_default().push(i);
        edges.entry(e.to).or_default().push(i);
    }
    let mut obs: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, o) in data.observations.iter().enumerate() {
        obs.entry(o.pose).or_default().push(i);
    }
    let mut queue = VecDeque::from([anchor]);
    while let Some(p) = queue.pop_front() {
        let xp = x[&StateKey::Pose(p)].clone();
        for &i in obs.get(&p).map(Vec::as_slice).unwrap_or(&[]) {
            let o = &data.observations[i];
            x.entry(StateKey::Feature(o.feature))
                .or_insert_with(|| compose_point(dim, &xp, &o.measurement));
        }
        for &i in edges.get(&p).map(Vec::as_slice).unwrap_or(&[]) {
            let e = &data.odometry[i];
            let (other, rel) = if e.from == p {
                (e.to, e.measurement.clone())
            } else {
                (e.from, invert_pose(dim, &e.measurement)?)
            };
            if let std::collections::hash_map::Entry::Vacant(v) = x.entry(StateKey::Pose(other)) {
                v.insert(compose_pose(dim, &xp, &rel)?);
                queue.push_back(other);
            }
        }
    }
    for &p in &data.poses {
        if !x.contains_key(&StateKey::Pose(p)) {
            return Err(Error::InvalidInput(format!("pose {p} is not connected to pose {anchor}")));
        }
    }
    Ok(x)
}

fn compose_point(dim: Dim, a: &[f64], z: &[f64]) -> Vec<f64> {
    match dim {
        Dim::D2 => {
            let p = rot2(a[2]) * nalgebra::Vector2::new(z[0], z[1]);
            vec![a[0] + p.x, a[1] + p.y]
        }
        Dim::D3 => {
            let p = rot3(&[a[3], a[4], a[5]]) * nalgebra::Vector3::new(z[0], z[1], z[2]);
            vec![a[0] + p.x, a[1] + p.y, a[2] + p.z]
        }
    }
}

fn compose_pose(dim: Dim, a: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let mut out = compose_point(dim, a, z);
    match dim {
        Dim::D2 => out.push(wrap(a[2] + z[2])),
        Dim::D3 => {
            let r = rot3(&[a[3], a[4], a[5]]) * rot3(&[z[3], z[4], z[5]]);
            out.extend_from_slice(&euler_from_rot3(&r)?);
        }
    }
    Ok(out)
}

fn invert_pose(dim: Dim, z: &[f64]) -> Result<Vec<f64>> {
    match dim {
        Dim::D2 => {
            let t = rot2(z[2]).transpose() * nalgebra::Vector2::new(z[0], z[1]);
            Ok(vec![-t.x, -t.y, wrap(-z[2])])
        }
        Dim::D3 => {
            let rt = rot3(&[z[3], z[4], z[5]]).transpose();
            let t = -(rt * nalgebra::Vector3::new(z[0], z[1], z[2]));
            let a = euler_from_rot3(&rt)?;
            Ok(vec![t.x, t.y, t.z, a[0], a[1], a[2]])
        }
    }
}

/// Builds a local map by Gauss-Newton over all odometry and observation terms.
///
/// Pose-frame maps fix the frame pose at the origin. Feature-frame maps are
/// built in the frame of the first pose and then re-framed.
pub fn build_local_map(data: &RawLocalData, frame: &FrameDescriptor, cfg: &GaussNewtonConfig) -> Result<BuiltMap> {
    data.validate()?;
    cfg.validate()?;
    frame.validate(data.dim)?;
    let anchor = match *frame {
        FrameDescriptor::Pose(p) => {
            if !data.poses.contains(&p) {
                return Err(Error::MissingEntity(StateKey::Pose(p)));
            }
            p
        }
        _ => {
            if data.headings == HeadingMode::Fixed {
                return Err(Error::InvalidInput("feature frames are not available with fixed headings".into()));
            }
            data.poses[0]
        }
    };
    let mut x = dead_reckoning(data, anchor)?;
    let mut keys: Vec<StateKey> = x.keys().copied().filter(|&k| k != StateKey::Pose(anchor)).collect();
    keys.sort();
    let problem = LocalProblem {
        data,
        anchor,
        layout: Layout::new(data.dim, data.headings, keys),
    };
    let mut lin = problem.linearize(&x)?;
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        if problem.layout.nvars == 0 {
            converged = true;
            break;
        }
        let neg_g: Vec<f64> = lin.g.iter().map(|v| -v).collect();
        let delta = solve_spd(&lin.h, &neg_g)?;
        if delta.iter().fold(0.0f64, |m, v| m.max(v.abs())) < cfg.step_tol {
            converged = true;
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=10 {
            let cand = problem.apply(&x, &delta, alpha);
            let obj = problem.objective(&cand)?;
            if obj <= lin.objective {
                accepted = Some((cand, obj));
                break;
            }
            alpha *= 0.5;
        }
        let Some((cand, obj)) = accepted else {
            // No step lowers the objective: accept the point if the model
            // predicts only a rounding-level decrease.
            let predicted = 0.5 * neg_g.iter().zip(&delta).map(|(g, d)| g * d).sum::<f64>();
            converged = predicted <= 1e-9 * lin.objective.max(f64::MIN_POSITIVE);
            break;
        };
        iterations += 1;
        let decrease = (lin.objective - obj) / lin.objective.max(f64::MIN_POSITIVE);
        x = cand;
        lin = problem.linearize(&x)?;
        if decrease < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    let map = assemble_built(&problem, &x, &lin.h)?;
    let objective = lin.objective;
    let map = match frame {
        FrameDescriptor::Pose(_) => map,
        f => reframe_map(&map, f)?,
    };
    Ok(BuiltMap {
        map,
        iterations,
        objective,
        converged,
    })
}

fn assemble_built(problem: &LocalProblem, x: &HashMap<StateKey, Vec<f64>>, h: &SparseSymMatrix) -> Result<LocalMap> {
    let data = problem.data;
    let mut est = StateVector::new();
    // Map each variable column to its position in the estimate.
    let mut map = vec![0usize; problem.layout.nvars];
    let mut placeholders = Vec::new();
    for k in &problem.layout.keys {
        let off = est.dim();
        let (voff, coords) = &problem.layout.var[k];
        for (i, &c) in coords.iter().enumerate() {
            map[voff + i] = off + c;
        }
        let full = data.dim.full_dim(*k);
        placeholders.extend((0..full).filter(|c| !coords.contains(c)).map(|c| off + c));
        est.push(*k, &x[k])?;
    }
    let mut t: Vec<(usize, usize, f64)> = h.triplets().map(|(r, c, v)| (map[r], map[c], v)).collect();
    t.extend(placeholders.into_iter().map(|i| (i, i, 1.0)));
    let info = SparseSymMatrix::from_triplets(est.dim(), t)?;
    LocalMap::new(data.dim, data.headings, FrameDescriptor::Pose(problem.anchor), est, info)
}
