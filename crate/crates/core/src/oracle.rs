//! Reference nonlinear solvers used to verify the linear joining pipeline.
//!
//! Each local map is treated as an observation of the global state: the
//! predicted value of a map entry is the global entity expressed in the frame
//! defined by the map's frame entities (looked up in the global state). The
//! solvers minimize the information-weighted sum of squared residuals by
//! Gauss-Newton with finite-difference Jacobians, so they share no derivative
//! code with the analytic transforms they check.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::frame::full_block;
use crate::geometry::{euler_from_rot3, rot3, wrap};
use crate::localmap::LocalMap;
use crate::sparse::{solve_spd, SparseSymMatrix};
use crate::state::{Dim, FrameDescriptor, FramedState, HeadingMode, StateKey, StateVector};

/// Above this many unknowns the normal equations are solved sparsely.
const DENSE_LIMIT: usize = 500;
/// Finite-difference step.
const FD_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleConfig {
    pub max_iters: usize,
    /// Converged when the largest update component is below this.
    pub step_tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            max_iters: 50,
            step_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub solution: LocalMap,
    /// Weighted squared residual at the solution.
    pub final_objective: f64,
    /// Linearize-and-solve cycles, including the one that detected convergence.
    pub iterations: usize,
    pub converged: bool,
    /// Largest component of the last computed update.
    pub last_step: f64,
}

impl OracleReport {
    /// The report, or `NotConverged` if the solver stopped early.
    pub fn require_converged(self) -> Result<OracleReport> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
            })
        }
    }
}

/// Rigid frame `(R, t)` in global coordinates, with the 2D heading.
struct RigidFrame {
    r: DMatrix<f64>,
    t: DVector<f64>,
    phi: f64,
}

fn lookup(values: &HashMap<StateKey, Vec<f64>>, key: StateKey) -> Result<&[f64]> {
    values.get(&key).map(Vec::as_slice).ok_or(Error::MissingEntity(key))
}

fn map_frame(dim: Dim, frame: &FrameDescriptor, values: &HashMap<StateKey, Vec<f64>>) -> Result<RigidFrame> {
    match (*frame, dim) {
        (FrameDescriptor::Pose(p), Dim::D2) => {
            let v = lookup(values, StateKey::Pose(p))?;
            let (s, c) = v[2].sin_cos();
            Ok(RigidFrame {
                r: DMatrix::from_row_slice(2, 2, &[c, -s, s, c]),
                t: DVector::from_column_slice(&v[..2]),
                phi: v[2],
            })
        }
        (FrameDescriptor::Pose(p), Dim::D3) => {
            let v = lookup(values, StateKey::Pose(p))?;
            let r = rot3(&[v[3], v[4], v[5]]);
            Ok(RigidFrame {
                r: DMatrix::from_column_slice(3, 3, r.as_slice()),
                t: DVector::from_column_slice(&v[..3]),
                phi: 0.0,
            })
        }
        (FrameDescriptor::Features2 { origin, x_axis }, Dim::D2) => {
            let o = lookup(values, StateKey::Feature(origin))?;
            let x = lookup(values, StateKey::Feature(x_axis))?;
            let phi = (x[1] - o[1]).atan2(x[0] - o[0]);
            let (s, c) = phi.sin_cos();
            let r = Matrix2::new(c, -s, s, c);
            Ok(RigidFrame {
                r: DMatrix::from_column_slice(2, 2, r.as_slice()),
                t: DVector::from_column_slice(o),
                phi,
            })
        }
        (
            FrameDescriptor::Features3 {
                origin,
                x_axis,
                plane,
            },
            Dim::D3,
        ) => {
            let o = Vector3::from_column_slice(lookup(values, StateKey::Feature(origin))?);
            let x = Vector3::from_column_slice(lookup(values, StateKey::Feature(x_axis))?);
            let p = Vector3::from_column_slice(lookup(values, StateKey::Feature(plane))?);
            let ex = (x - o).normalize();
            let ez = ex.cross(&(p - o)).normalize();
            let ey = ez.cross(&ex);
            let r = Matrix3::from_columns(&[ex, ey, ez]);
            Ok(RigidFrame {
                r: DMatrix::from_column_slice(3, 3, r.as_slice()),
                t: DVector::from_column_slice(o.as_slice()),
                phi: 0.0,
            })
        }
        (f, d) => Err(Error::InvalidInput(format!("{f} is not valid for {d:?} maps"))),
    }
}

/// Residual of one map at the global values (angles wrapped).
fn map_residual(map: &LocalMap, values: &HashMap<StateKey, Vec<f64>>) -> Result<Vec<f64>> {
    let dim = map.dim();
    let td = dim.trans_dim();
    let f = map_frame(dim, map.frame(), values)?;
    let rt = f.r.transpose();
    let mut res = Vec::with_capacity(map.estimate().dim());
    for (key, z) in map.estimate().iter() {
        let v = lookup(values, key)?;
        let p = &rt * (DVector::from_column_slice(&v[..td]) - &f.t);
        let mut pred: Vec<f64> = p.iter().copied().collect();
        if key.is_pose() {
            match dim {
                Dim::D2 => pred.push(v[2] - f.phi),
                Dim::D3 => {
                    let rb = Matrix3::from_iterator(rt.iter().copied());
                    let rel = rb * rot3(&[v[3], v[4], v[5]]);
                    pred.extend_from_slice(&euler_from_rot3(&rel)?);
                }
            }
        }
        for (i, zi) in z.iter().enumerate() {
            let d = pred[i] - zi;
            res.push(if key.is_pose() && i >= td { wrap(d) } else { d });
        }
    }
    Ok(res)
}

/// Global state values with their frame entities restored.
fn global_values(s: &FramedState, keys: impl Iterator<Item = StateKey>) -> HashMap<StateKey, Vec<f64>> {
    let mut out = HashMap::new();
    for key in keys.chain(s.frame.iter().flat_map(|f| f.entities())) {
        if let Some(v) = full_block(&s.state, s.dim, s.frame.as_ref(), key) {
            out.insert(key, v);
        }
    }
    out
}

fn needed_keys(maps: &[LocalMap]) -> Vec<StateKey> {
    let mut keys: Vec<StateKey> = maps.iter().flat_map(|m| m.elements()).collect();
    keys.sort();
    keys.dedup();
    keys
}

/// Sum over maps of `e^T I e` at the given global state.
pub fn objective(maps: &[LocalMap], solution: &FramedState) -> Result<f64> {
    let values = global_values(solution, needed_keys(maps).into_iter());
    let mut total = 0.0;
    for m in maps {
        if m.dim() != solution.dim {
            return Err(Error::InvalidInput("maps and solution differ in dimension".into()));
        }
        let r = map_residual(m, &values)?;
        total += m.info().quad_form(&r);
    }
    Ok(total)
}

/// Free scalar coordinates of the global state.
struct Unknowns {
    /// `(key, coordinate within the full block)` per unknown.
    coords: Vec<(StateKey, usize)>,
    /// Unknown index for each `(key, stored coordinate)`.
    index: HashMap<(StateKey, usize), usize>,
    /// Stored-coordinate positions held fixed (heading placeholders).
    held: Vec<usize>,
}

fn unknowns(state: &StateVector, dim: Dim, headings: HeadingMode) -> Unknowns {
    let mut coords = Vec::new();
    let mut index = HashMap::new();
    let mut held = Vec::new();
    for (key, block) in state.iter() {
        let (off, _) = state.span(key).unwrap();
        for i in 0..block.len() {
            if key.is_pose() && i >= dim.trans_dim() && headings == HeadingMode::Fixed {
                held.push(off + i);
                continue;
            }
            index.insert((key, i), coords.len());
            coords.push((key, i));
        }
    }
    Unknowns { coords, index, held }
}

struct Linearization {
    objective: f64,
    h: DMatrix<f64>,
    g: DVector<f64>,
    sparse_h: Option<SparseSymMatrix>,
}

fn linearize(
    maps: &[LocalMap],
    values: &mut HashMap<StateKey, Vec<f64>>,
    unk: &Unknowns,
    dense: bool,
) -> Result<Linearization> {
    let n = unk.coords.len();
    let mut objective = 0.0;
    let mut h = DMatrix::zeros(if dense { n } else { 0 }, if dense { n } else { 0 });
    let mut trip = Vec::new();
    let mut g = DVector::zeros(n);
    for m in maps {
        let r0 = DVector::from_vec(map_residual(m, values)?);
        let info = m.info().to_dense();
        objective += (r0.transpose() * &info * &r0)[(0, 0)];
        let mut cols: Vec<usize> = Vec::new();
        for key in m.elements() {
            for i in 0..m.dim().full_dim(key) {
                if let Some(&u) = unk.index.get(&(key, i)) {
                    cols.push(u);
                }
            }
        }
        let mut jac = DMatrix::zeros(r0.len(), cols.len());
        for (j, &u) in cols.iter().enumerate() {
            let (key, i) = unk.coords[u];
            let x0 = values[&key][i];
            let mut eval = |delta: f64| -> Result<DVector<f64>> {
                values.get_mut(&key).unwrap()[i] = x0 + delta;
                let r = map_residual(m, values);
                values.get_mut(&key).unwrap()[i] = x0;
                Ok(DVector::from_vec(r?))
            };
            let h1 = FD_STEP;
            let (p1, m1, p2, m2) = (eval(h1)?, eval(-h1)?, eval(2.0 * h1)?, eval(-2.0 * h1)?);
            let mut col = DVector::zeros(r0.len());
            for k in 0..r0.len() {
                // Residual differences are wrapped so angle jumps do not leak in.
                let d1 = wrap(p1[k] - m1[k]);
                let d2 = wrap(p2[k] - m2[k]);
                col[k] = (8.0 * d1 - d2) / (12.0 * h1);
            }
            jac.set_column(j, &col);
        }
        let ij = &info * &jac;
        let hb = jac.transpose() * &ij;
        let gb = jac.transpose() * (&info * &r0);
        for (a, &ua) in cols.iter().enumerate() {
            g[ua] += gb[a];
            for (b, &ub) in cols.iter().enumerate() {
                if dense {
                    h[(ua, ub)] += hb[(a, b)];
                } else if ua >= ub {
                    trip.push((ua, ub, hb[(a, b)]));
                }
            }
        }
    }
    let sparse_h = if dense {
        None
    } else {
        Some(SparseSymMatrix::from_triplets(n, trip)?)
    };
    Ok(Linearization {
        objective,
        h,
        g,
        sparse_h,
    })
}

fn solve(lin: &Linearization) -> Result<DVector<f64>> {
    let neg: Vec<f64> = lin.g.iter().map(|v| -v).collect();
    match &lin.sparse_h {
        Some(h) => Ok(DVector::from_vec(solve_spd(h, &neg)?)),
        None => {
            let chol = lin
                .h
                .clone()
                .cholesky()
                .ok_or_else(|| Error::SingularSystem("oracle normal matrix is not positive definite".into()))?;
            Ok(chol.solve(&DVector::from_vec(neg)))
        }
    }
}

fn apply(values: &HashMap<StateKey, Vec<f64>>, unk: &Unknowns, dim: Dim, delta: &DVector<f64>, alpha: f64) -> HashMap<StateKey, Vec<f64>> {
    let mut out = values.clone();
    for (u, &(key, i)) in unk.coords.iter().enumerate() {
        let v = &mut out.get_mut(&key).unwrap()[i];
        *v += alpha * delta[u];
        if key.is_pose() && i >= dim.trans_dim() {
            *v = wrap(*v);
        }
    }
    out
}

/// Gauss-Newton over all maps' residuals with the global state expressed in
/// `frame`, starting from `init`.
pub fn full_nonlinear_ls(maps: &[LocalMap], init: &StateVector, frame: &FrameDescriptor) -> Result<OracleReport> {
    full_nonlinear_ls_with(maps, init, frame, &OracleConfig::default())
}

pub fn full_nonlinear_ls_with(
    maps: &[LocalMap],
    init: &StateVector,
    frame: &FrameDescriptor,
    cfg: &OracleConfig,
) -> Result<OracleReport> {
    let first = maps.first().ok_or_else(|| Error::InvalidInput("no maps".into()))?;
    let dim = first.dim();
    let headings = first.headings();
    if maps.iter().any(|m| m.dim() != dim || m.headings() != headings) {
        return Err(Error::InvalidInput("maps differ in dimension or heading mode".into()));
    }
    let start = FramedState {
        dim,
        frame: Some(*frame),
        state: init.clone(),
    };
    // Validates the layout of the initial state against the frame.
    LocalMap::new(dim, headings, *frame, init.clone(), SparseSymMatrix::zeros(init.dim()))?;
    let keys = needed_keys(maps);
    let mut values = global_values(&start, keys.iter().copied());
    if let Some(k) = keys.iter().find(|k| !values.contains_key(k)) {
        return Err(Error::MissingEntity(*k));
    }
    let unk = unknowns(init, dim, headings);
    let dense = unk.coords.len() < DENSE_LIMIT;

    let mut lin = linearize(maps, &mut values, &unk, dense)?;
    let mut iterations = 0;
    let mut converged = false;
    let mut last_step = 0.0;
    while iterations < cfg.max_iters {
        iterations += 1;
        if unk.coords.is_empty() {
            converged = true;
            break;
        }
        let delta = solve(&lin)?;
        last_step = delta.amax();
        if last_step < cfg.step_tol {
            converged = true;
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=10 {
            let cand = apply(&values, &unk, dim, &delta, alpha);
            let sol = FramedState {
                dim,
                frame: Some(*frame),
                state: to_state(init, &cand)?,
            };
            let obj = objective(maps, &sol)?;
            if obj <= lin.objective {
                accepted = Some(cand);
                break;
            }
            alpha *= 0.5;
        }
        let Some(cand) = accepted else {
            // No step lowers the objective: accept the point if the model
            // predicts only a rounding-level decrease.
            let predicted = -0.5 * lin.g.dot(&delta);
            converged = predicted <= 1e-9 * lin.objective.max(f64::MIN_POSITIVE);
            break;
        };
        values = cand;
        lin = linearize(maps, &mut values, &unk, dense)?;
    }

    let state = to_state(init, &values)?;
    let n = init.dim();
    let mut trip = Vec::new();
    let pos: Vec<usize> = unk
        .coords
        .iter()
        .map(|&(k, i)| init.span(k).unwrap().0 + i)
        .collect();
    match &lin.sparse_h {
        Some(h) => trip.extend(h.triplets().map(|(r, c, v)| (pos[r], pos[c], v))),
        None => {
            for c in 0..pos.len() {
                for r in c..pos.len() {
                    if lin.h[(r, c)] != 0.0 {
                        trip.push((pos[r], pos[c], lin.h[(r, c)]));
                    }
                }
            }
        }
    }
    trip.extend(unk.held.iter().map(|&i| (i, i, 1.0)));
    let info = SparseSymMatrix::from_triplets(n, trip)?;
    Ok(OracleReport {
        solution: LocalMap::new(dim, headings, *frame, state, info)?,
        final_objective: lin.objective,
        iterations,
        converged,
        last_step,
    })
}

fn to_state(layout: &StateVector, values: &HashMap<StateKey, Vec<f64>>) -> Result<StateVector> {
    let mut s = StateVector::new();
    for (key, block) in layout.iter() {
        s.push(key, &values[&key][..block.len()])?;
    }
    Ok(s)
}

/// Nonlinear joint of two maps in `target_frame`.
pub fn nonlinear_join(m1: &LocalMap, m2: &LocalMap, init: &StateVector, target_frame: &FrameDescriptor) -> Result<OracleReport> {
    full_nonlinear_ls(&[m1.clone(), m2.clone()], init, target_frame)
}
