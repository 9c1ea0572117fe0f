//! Closed-form change of coordinate frame for a whole state vector.
//!
//! A state expressed in frame `A` is re-expressed in frame `B`, where `B` is
//! defined by entities of the state (a pose, or two/three features). Entities
//! fixed by `A` are first restored at their known coordinates (the frame pose
//! at the origin, the origin feature at zero, the partially stored axis
//! features padded with zeros), then every entity is mapped through
//! `x -> R_B^T (x - t_B)` and the coordinates fixed by `B` are dropped.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{euler_differential, euler_from_rot3, rot2, rot2_deriv, rot3, rot3_partials, wrap};
use crate::sparse::SparseMatrix;
use crate::state::{Dim, FrameDescriptor, FramedState, HeadingMode, StateKey, StateVector};

/// Frame features closer than this are coincident.
pub const COINCIDENT_TOL: f64 = 1e-9;
/// Ratio below which three frame features count as collinear.
pub const COLLINEAR_TOL: f64 = 1e-8;

/// Result of [`change_frame`].
#[derive(Clone, Debug)]
pub struct Reframed {
    /// The re-expressed state, sorted by key.
    pub state: StateVector,
    /// `d(output) / d(input)` when requested.
    pub jacobian: Option<SparseMatrix>,
}

struct Entity {
    key: StateKey,
    value: Vec<f64>,
    /// Input column of each coordinate, `None` for constants.
    src: Vec<Option<usize>>,
}

struct Source {
    col: usize,
    dt: DVector<f64>,
    dr: DMatrix<f64>,
    dphi: f64,
}

struct Frame {
    t: DVector<f64>,
    r: DMatrix<f64>,
    phi: f64,
    sources: Vec<Source>,
}

/// Re-expresses `state` (stored under frame `from`, `None` for world
/// coordinates) in frame `to`.
pub fn change_frame(
    state: &StateVector,
    dim: Dim,
    headings: HeadingMode,
    from: Option<&FrameDescriptor>,
    to: &FrameDescriptor,
    with_jacobian: bool,
) -> Result<Reframed> {
    to.validate(dim)?;
    if let Some(f) = from {
        f.validate(dim)?;
    }
    if headings == HeadingMode::Fixed && !to.is_pose_frame() {
        return Err(Error::InvalidInput(
            "feature-defined frames are not available with fixed headings".into(),
        ));
    }
    if from == Some(to) {
        return Ok(Reframed {
            state: state.clone(),
            jacobian: with_jacobian.then(|| SparseMatrix::identity(state.dim())),
        });
    }

    let entities = expand(state, dim, from)?;
    let lookup: HashMap<StateKey, usize> = entities.iter().enumerate().map(|(i, e)| (e.key, i)).collect();
    let find = |k: StateKey| lookup.get(&k).map(|&i| &entities[i]).ok_or(Error::MissingEntity(k));
    let frame = match (*to, dim) {
        (FrameDescriptor::Pose(p), _) => pose_frame(dim, headings, find(StateKey::Pose(p))?),
        (FrameDescriptor::Features2 { origin, x_axis }, _) => {
            feature_frame_2d(find(StateKey::Feature(origin))?, find(StateKey::Feature(x_axis))?)?
        }
        (
            FrameDescriptor::Features3 {
                origin,
                x_axis,
                plane,
            },
            _,
        ) => feature_frame_3d(
            find(StateKey::Feature(origin))?,
            find(StateKey::Feature(x_axis))?,
            find(StateKey::Feature(plane))?,
        )?,
    };

    let mut out = StateVector::new();
    let mut triplets = Vec::new();
    for e in &entities {
        let keep = to.stored_len(e.key, dim);
        if keep == 0 {
            continue;
        }
        let row0 = out.dim();
        let (value, rows) = transform_entity(dim, &frame, e, with_jacobian)?;
        out.push(e.key, &value[..keep])?;
        triplets.extend(
            rows.into_iter()
                .filter(|&(r, _, _)| r < keep)
                .map(|(r, c, v)| (row0 + r, c, v)),
        );
    }
    let jacobian = if with_jacobian {
        Some(SparseMatrix::from_triplets(out.dim(), state.dim(), triplets)?)
    } else {
        None
    };
    Ok(Reframed {
        state: out,
        jacobian,
    })
}

/// Expresses a framed state in another frame (values only).
pub fn express(s: &FramedState, headings: HeadingMode, to: &FrameDescriptor) -> Result<FramedState> {
    let r = change_frame(&s.state, s.dim, headings, s.frame.as_ref(), to, false)?;
    Ok(FramedState {
        dim: s.dim,
        frame: Some(*to),
        state: r.state,
    })
}

/// Full-length coordinates of `key` in the frame `frame`: stored values
/// padded with zeros, zeros for entities fixed by the frame, `None` if the
/// entity is unknown.
pub fn full_block(state: &StateVector, dim: Dim, frame: Option<&FrameDescriptor>, key: StateKey) -> Option<Vec<f64>> {
    let full = dim.full_dim(key);
    if let Some(v) = state.get(key) {
        let mut v = v.to_vec();
        v.resize(full, 0.0);
        return Some(v);
    }
    frame
        .filter(|f| f.entities().contains(&key))
        .map(|_| vec![0.0; full])
}

/// Full-length blocks for every entity of the state plus the entities fixed
/// by `from`, sorted by key.
fn expand(state: &StateVector, dim: Dim, from: Option<&FrameDescriptor>) -> Result<Vec<Entity>> {
    let mut entities = Vec::with_capacity(state.len() + 3);
    let mut offset = 0;
    for (key, block) in state.iter() {
        let full = dim.full_dim(key);
        let stored = from.map_or(full, |f| f.stored_len(key, dim));
        if stored == 0 {
            return Err(Error::InvalidInput(format!("{key} defines the frame but is stored in the state")));
        }
        if block.len() != stored {
            return Err(Error::InvalidInput(format!(
                "{key} has {} values, expected {stored}",
                block.len()
            )));
        }
        let mut value = block.to_vec();
        value.resize(full, 0.0);
        let src = (0..full).map(|i| (i < stored).then_some(offset + i)).collect();
        entities.push(Entity { key, value, src });
        offset += stored;
    }
    if let Some(f) = from {
        for key in f.entities() {
            if state.contains(key) {
                continue;
            }
            if f.stored_len(key, dim) != 0 {
                return Err(Error::MissingEntity(key));
            }
            let full = dim.full_dim(key);
            entities.push(Entity {
                key,
                value: vec![0.0; full],
                src: vec![None; full],
            });
        }
    }
    entities.sort_by_key(|e| e.key);
    Ok(entities)
}

fn unit(n: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[i] = 1.0;
    v
}

fn pose_frame(dim: Dim, headings: HeadingMode, e: &Entity) -> Frame {
    let td = dim.trans_dim();
    let mut sources = Vec::new();
    for i in 0..td {
        if let Some(col) = e.src[i] {
            sources.push(Source {
                col,
                dt: unit(td, i),
                dr: DMatrix::zeros(td, td),
                dphi: 0.0,
            });
        }
    }
    let (r, phi) = match dim {
        Dim::D2 => {
            let phi = e.value[2];
            if headings == HeadingMode::Estimated {
                if let Some(col) = e.src[2] {
                    let d = rot2_deriv(phi);
                    sources.push(Source {
                        col,
                        dt: DVector::zeros(2),
                        dr: DMatrix::from_column_slice(2, 2, d.as_slice()),
                        dphi: 1.0,
                    });
                }
            }
            (DMatrix::from_column_slice(2, 2, rot2(phi).as_slice()), phi)
        }
        Dim::D3 => {
            let a = [e.value[3], e.value[4], e.value[5]];
            if headings == HeadingMode::Estimated {
                let parts = rot3_partials(&a);
                for k in 0..3 {
                    if let Some(col) = e.src[3 + k] {
                        sources.push(Source {
                            col,
                            dt: DVector::zeros(3),
                            dr: DMatrix::from_column_slice(3, 3, parts[k].as_slice()),
                            dphi: 0.0,
                        });
                    }
                }
            }
            (DMatrix::from_column_slice(3, 3, rot3(&a).as_slice()), 0.0)
        }
    };
    Frame {
        t: DVector::from_column_slice(&e.value[..td]),
        r,
        phi,
        sources,
    }
}

fn feature_frame_2d(o: &Entity, x: &Entity) -> Result<Frame> {
    let (dx, dy) = (x.value[0] - o.value[0], x.value[1] - o.value[1]);
    let r2 = dx * dx + dy * dy;
    if r2.sqrt() < COINCIDENT_TOL {
        return Err(Error::DegenerateFrame(format!("{} and {} coincide", o.key, x.key)));
    }
    let phi = dy.atan2(dx);
    let g = [-dy / r2, dx / r2];
    let dr = rot2_deriv(phi);
    let mut sources = Vec::new();
    for i in 0..2 {
        if let Some(col) = o.src[i] {
            sources.push(Source {
                col,
                dt: unit(2, i),
                dr: DMatrix::from_column_slice(2, 2, (dr * -g[i]).as_slice()),
                dphi: -g[i],
            });
        }
        if let Some(col) = x.src[i] {
            sources.push(Source {
                col,
                dt: DVector::zeros(2),
                dr: DMatrix::from_column_slice(2, 2, (dr * g[i]).as_slice()),
                dphi: g[i],
            });
        }
    }
    Ok(Frame {
        t: DVector::from_column_slice(&o.value[..2]),
        r: DMatrix::from_column_slice(2, 2, rot2(phi).as_slice()),
        phi,
        sources,
    })
}

fn v3(e: &Entity) -> Vector3<f64> {
    Vector3::new(e.value[0], e.value[1], e.value[2])
}

fn normalized_diff(v: &Vector3<f64>, dv: &Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    let u = v / n;
    (dv - u * u.dot(dv)) / n
}

fn feature_frame_3d(o: &Entity, x: &Entity, p: &Entity) -> Result<Frame> {
    let (fo, fx, fp) = (v3(o), v3(x), v3(p));
    let v1 = fx - fo;
    let w = fp - fo;
    if v1.norm() < COINCIDENT_TOL || w.norm() < COINCIDENT_TOL {
        return Err(Error::DegenerateFrame("frame features coincide".into()));
    }
    let v3v = v1.cross(&w);
    if v3v.norm() <= COLLINEAR_TOL * v1.norm() * w.norm() {
        return Err(Error::DegenerateFrame("frame features are collinear".into()));
    }
    let v2 = v3v.cross(&v1);
    let r = Matrix3::from_columns(&[v1.normalize(), v2.normalize(), v3v.normalize()]);
    let mut sources = Vec::new();
    for (which, e) in [(0, o), (1, x), (2, p)] {
        for i in 0..3 {
            let Some(col) = e.src[i] else { continue };
            let d = Vector3::ith(i, 1.0);
            let (d_o, d_x, d_p) = match which {
                0 => (d, Vector3::zeros(), Vector3::zeros()),
                1 => (Vector3::zeros(), d, Vector3::zeros()),
                _ => (Vector3::zeros(), Vector3::zeros(), d),
            };
            let dv1 = d_x - d_o;
            let dw = d_p - d_o;
            let dv3 = dv1.cross(&w) + v1.cross(&dw);
            let dv2 = dv3.cross(&v1) + v3v.cross(&dv1);
            let dr = Matrix3::from_columns(&[
                normalized_diff(&v1, &dv1),
                normalized_diff(&v2, &dv2),
                normalized_diff(&v3v, &dv3),
            ]);
            sources.push(Source {
                col,
                dt: DVector::from_column_slice(d_o.as_slice()),
                dr: DMatrix::from_column_slice(3, 3, dr.as_slice()),
                dphi: 0.0,
            });
        }
    }
    Ok(Frame {
        t: DVector::from_column_slice(fo.as_slice()),
        r: DMatrix::from_column_slice(3, 3, r.as_slice()),
        phi: 0.0,
        sources,
    })
}

type Rows = Vec<(usize, usize, f64)>;

fn transform_entity(dim: Dim, f: &Frame, e: &Entity, jac: bool) -> Result<(Vec<f64>, Rows)> {
    let td = dim.trans_dim();
    let d = DVector::from_column_slice(&e.value[..td]) - &f.t;
    let rt = f.r.transpose();
    let p = &rt * &d;
    let mut value: Vec<f64> = p.iter().copied().collect();
    let mut rows = Vec::new();
    if jac {
        for i in 0..td {
            if let Some(c) = e.src[i] {
                for j in 0..td {
                    rows.push((j, c, rt[(j, i)]));
                }
            }
        }
        for s in &f.sources {
            let col = s.dr.transpose() * &d - &rt * &s.dt;
            for j in 0..td {
                rows.push((j, s.col, col[j]));
            }
        }
    }
    if e.key.is_feature() {
        return Ok((value, rows));
    }
    match dim {
        Dim::D2 => {
            value.push(wrap(e.value[2] - f.phi));
            if jac {
                if let Some(c) = e.src[2] {
                    rows.push((2, c, 1.0));
                }
                for s in &f.sources {
                    if s.dphi != 0.0 {
                        rows.push((2, s.col, -s.dphi));
                    }
                }
            }
        }
        Dim::D3 => {
            let a = [e.value[3], e.value[4], e.value[5]];
            let re = rot3(&a);
            let rb = Matrix3::from_iterator(f.r.iter().copied());
            let rp = rb.transpose() * re;
            value.extend_from_slice(&euler_from_rot3(&rp)?);
            if jac {
                let parts = rot3_partials(&a);
                for k in 0..3 {
                    if let Some(c) = e.src[3 + k] {
                        let da = euler_differential(&rp, &(rb.transpose() * parts[k]));
                        for j in 0..3 {
                            rows.push((3 + j, c, da[j]));
                        }
                    }
                }
                for s in &f.sources {
                    let drb = Matrix3::from_iterator(s.dr.iter().copied());
                    if drb.amax() == 0.0 {
                        continue;
                    }
                    let da = euler_differential(&rp, &(drb.transpose() * re));
                    for j in 0..3 {
                        rows.push((3 + j, s.col, da[j]));
                    }
                }
            }
        }
    }
    Ok((value, rows))
}
