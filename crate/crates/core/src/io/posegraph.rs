//! Pose graphs in the common `VERTEX_SE2` / `EDGE_SE2` and
//! `VERTEX_SE3:QUAT` / `EDGE_SE3:QUAT` text format.
//!
//! Edge information in those files weights the error of the measured
//! relative pose expressed in the measurement frame, with the rotation error
//! taken as the vector part of a quaternion. Here it is converted to weight
//! the plain difference of translations and angles used by the local map
//! builder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix3, Quaternion, UnitQuaternion};

use super::{decode, num, record_err, Record};
use crate::error::{Error, Result};
use crate::geometry::{euler_unchecked, rot2, rot3};
use crate::localmap::{OdometryEdge, RawLocalData};
use crate::sparse::SparseSymMatrix;
use crate::state::{Dim, HeadingMode};

/// Pitch beyond which a rotation is reported as close to gimbal lock.
const GIMBAL_WARN_COS: f64 = 0.02;
const QUAT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseGraph {
    pub dim: Dim,
    /// Vertex poses: translation followed by the heading (2D) or roll,
    /// pitch and yaw (3D).
    pub vertices: BTreeMap<u64, Vec<f64>>,
    pub edges: Vec<OdometryEdge>,
    /// Non-fatal findings: skipped records and rotations near gimbal lock.
    pub warnings: Vec<String>,
}

/// Maps roll, pitch and yaw increments to the body-frame rotation vector.
fn euler_rate_map(e: &[f64]) -> Matrix3<f64> {
    let (sr, cr) = e[0].sin_cos();
    let (sp, cp) = e[1].sin_cos();
    Matrix3::new(1.0, 0.0, -sp, 0.0, cr, sr * cp, 0.0, -sr, cr * cp)
}

/// Jacobian of the file's edge error with respect to the difference of
/// translations and angles, at the measurement.
fn error_jacobian(dim: Dim, meas: &[f64]) -> DMatrix<f64> {
    let n = dim.pose_dim();
    let mut j = DMatrix::zeros(n, n);
    match dim {
        Dim::D2 => {
            let rt = rot2(meas[2]).transpose();
            j.view_mut((0, 0), (2, 2)).copy_from(&rt);
            j[(2, 2)] = 1.0;
        }
        Dim::D3 => {
            let r = rot3(&[meas[3], meas[4], meas[5]]);
            j.view_mut((0, 0), (3, 3)).copy_from(&r.transpose());
            j.view_mut((3, 3), (3, 3)).copy_from(&(0.5 * euler_rate_map(&meas[3..])));
        }
    }
    j
}

fn upper_to_sym(n: usize, values: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut it = values.iter();
    for r in 0..n {
        for c in r..n {
            let v = *it.next().expect("caller checked the count");
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
    m
}

fn euler_of(r: &Matrix3<f64>, line: usize, warnings: &mut Vec<String>) -> [f64; 3] {
    let e = euler_unchecked(r);
    if e[1].cos() < GIMBAL_WARN_COS {
        warnings.push(format!("line {line}: rotation is close to gimbal lock"));
    }
    e
}

fn quat_rotation(rec: &Record, q: &[f64]) -> Result<Matrix3<f64>> {
    let quat = Quaternion::new(q[3], q[0], q[1], q[2]);
    if (quat.norm() - 1.0).abs() > QUAT_NORM_TOL {
        return Err(record_err(rec.line, format!("quaternion norm {} is not 1", quat.norm())));
    }
    Ok(*UnitQuaternion::from_quaternion(quat).to_rotation_matrix().matrix())
}

pub fn parse_pose_graph_bytes(bytes: &[u8]) -> Result<PoseGraph> {
    parse_pose_graph(decode(bytes)?)
}

pub fn parse_pose_graph(text: &str) -> Result<PoseGraph> {
    let mut dim: Option<Dim> = None;
    let mut vertices = BTreeMap::new();
    let mut edges = Vec::new();
    let mut warnings = Vec::new();
    let mut last_line = 0;
    for (i, l) in text.lines().enumerate() {
        let l = l.trim();
        last_line = i + 1;
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let rec = Record {
            line: i + 1,
            tokens: l.split_whitespace().collect(),
        };
        let this_dim = match rec.tokens[0] {
            "VERTEX_SE2" | "EDGE_SE2" => Dim::D2,
            "VERTEX_SE3:QUAT" | "EDGE_SE3:QUAT" => Dim::D3,
            other => {
                warnings.push(format!("line {}: skipped '{other}' record", rec.line));
                continue;
            }
        };
        if *dim.get_or_insert(this_dim) != this_dim {
            return Err(record_err(rec.line, "2D and 3D records are mixed"));
        }
        match rec.tokens[0] {
            "VERTEX_SE2" => {
                let a = rec.expect("VERTEX_SE2", 4)?;
                let id = rec.id(a[0])?;
                let v = rec.reals(&a[1..])?;
                if vertices.insert(id, v).is_some() {
                    return Err(record_err(rec.line, format!("vertex {id} declared twice")));
                }
            }
            "VERTEX_SE3:QUAT" => {
                let a = rec.expect("VERTEX_SE3:QUAT", 8)?;
                let id = rec.id(a[0])?;
                let v = rec.reals(&a[1..])?;
                let e = euler_of(&quat_rotation(&rec, &v[3..])?, rec.line, &mut warnings);
                if vertices.insert(id, vec![v[0], v[1], v[2], e[0], e[1], e[2]]).is_some() {
                    return Err(record_err(rec.line, format!("vertex {id} declared twice")));
                }
            }
            tag => {
                let (n_meas, n) = if this_dim == Dim::D2 { (3, 3) } else { (7, 6) };
                let a = rec.expect(tag, 2 + n_meas + n * (n + 1) / 2)?;
                let (from, to) = (rec.id(a[0])?, rec.id(a[1])?);
                if from == to {
                    return Err(record_err(rec.line, "edge connects a vertex to itself"));
                }
                let v = rec.reals(&a[2..])?;
                let measurement = if this_dim == Dim::D2 {
                    v[..3].to_vec()
                } else {
                    let e = euler_of(&quat_rotation(&rec, &v[3..7])?, rec.line, &mut warnings);
                    vec![v[0], v[1], v[2], e[0], e[1], e[2]]
                };
                let file_info = upper_to_sym(n, &v[n_meas..]);
                if !SparseSymMatrix::from_dense(&file_info).is_psd() {
                    return Err(record_err(rec.line, "information block is not positive semidefinite"));
                }
                let j = error_jacobian(this_dim, &measurement);
                let info = j.transpose() * file_info * j;
                let info = (&info + info.transpose()) * 0.5;
                edges.push(OdometryEdge {
                    from,
                    to,
                    measurement,
                    info,
                });
            }
        }
    }
    let Some(dim) = dim else {
        return Err(Error::Parse {
            line: last_line.max(1),
            msg: "no vertex or edge records".into(),
        });
    };
    Ok(PoseGraph {
        dim,
        vertices,
        edges,
        warnings,
    })
}

fn push_nums(s: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        s.push(' ');
        s.push_str(&num(v));
    }
}

fn quat_of(e: &[f64]) -> UnitQuaternion<f64> {
    let r = nalgebra::Rotation3::from_matrix_unchecked(rot3(&[e[0], e[1], e[2]]));
    UnitQuaternion::from_rotation_matrix(&r)
}

/// Writes the graph back in the file format. Fails with
/// `DegenerateRotation` if an edge information block cannot be converted
/// because its measurement sits at gimbal lock.
pub fn format_pose_graph(g: &PoseGraph) -> Result<String> {
    let mut s = String::new();
    let (vtag, etag) = match g.dim {
        Dim::D2 => ("VERTEX_SE2", "EDGE_SE2"),
        Dim::D3 => ("VERTEX_SE3:QUAT", "EDGE_SE3:QUAT"),
    };
    let pose_values = |v: &[f64]| -> Vec<f64> {
        match g.dim {
            Dim::D2 => v.to_vec(),
            Dim::D3 => {
                let q = quat_of(&v[3..]);
                vec![v[0], v[1], v[2], q.i, q.j, q.k, q.w]
            }
        }
    };
    for (id, v) in &g.vertices {
        let _ = write!(s, "{vtag} {id}");
        push_nums(&mut s, pose_values(v));
        s.push('\n');
    }
    for e in &g.edges {
        let j = error_jacobian(g.dim, &e.measurement);
        let jinv = j.try_inverse().ok_or(Error::DegenerateRotation)?;
        let file_info = jinv.transpose() * &e.info * jinv;
        let n = g.dim.pose_dim();
        let _ = write!(s, "{etag} {} {}", e.from, e.to);
        push_nums(&mut s, pose_values(&e.measurement));
        for r in 0..n {
            for c in r..n {
                push_nums(&mut s, [0.5 * (file_info[(r, c)] + file_info[(c, r)])]);
            }
        }
        s.push('\n');
    }
    Ok(s)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Splits a pose graph into pose-only chunks of `k` consecutive steps over
/// the sorted vertex ids. Neighbouring chunks share their boundary pose. An
/// edge goes to the chunk holding both of its endpoints; otherwise to the
/// chunk holding its later endpoint, which then also includes the earlier
/// endpoint.
pub fn partition_pose_graph(g: &PoseGraph, k: usize) -> Result<Vec<RawLocalData>> {
    if k < 2 {
        return Err(Error::InvalidInput("chunks need at least two steps".into()));
    }
    let ids: Vec<u64> = g
        .vertices
        .keys()
        .copied()
        .chain(g.edges.iter().flat_map(|e| [e.from, e.to]))
        .collect::<BTreeSet<u64>>()
        .into_iter()
        .collect();
    if ids.len() < 2 {
        return Err(Error::InvalidInput("the graph needs at least two poses".into()));
    }
    let pos: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    for e in &g.edges {
        let (a, b) = (find(&mut parent, pos[&e.from]), find(&mut parent, pos[&e.to]));
        parent[a] = b;
    }
    let root = find(&mut parent, 0);
    if (0..ids.len()).any(|i| find(&mut parent, i) != root) {
        return Err(Error::InvalidInput("the pose graph is not connected".into()));
    }

    let last = ids.len() - 1;
    let n_chunks = last.div_ceil(k);
    let mut poses: Vec<BTreeSet<u64>> = (0..n_chunks)
        .map(|c| ids[c * k..=((c + 1) * k).min(last)].iter().copied().collect())
        .collect();
    let mut edges: Vec<Vec<OdometryEdge>> = vec![Vec::new(); n_chunks];
    for e in &g.edges {
        let (pa, pb) = (pos[&e.from], pos[&e.to]);
        let (lo, hi) = (pa.min(pb), pa.max(pb));
        let c = (hi.max(1) - 1) / k;
        if lo < c * k {
            poses[c].insert(ids[lo]);
        }
        edges[c].push(e.clone());
    }
    Ok(poses
        .into_iter()
        .zip(edges)
        .map(|(p, odometry)| RawLocalData {
            dim: g.dim,
            headings: HeadingMode::Estimated,
            poses: p.into_iter().collect(),
            odometry,
            observations: Vec::new(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain_2d(n: u64) -> String {
        let mut s = String::new();
        for i in 0..n {
            let _ = writeln!(s, "VERTEX_SE2 {i} {} 0 0", i as f64);
        }
        for i in 1..n {
            let _ = writeln!(s, "EDGE_SE2 {} {i} 1 0 0 1 0 0 1 0 1", i - 1);
        }
        s
    }

    #[test]
    fn two_vertex_graph() {
        let g = parse_pose_graph("VERTEX_SE2 0 0 0 0\nVERTEX_SE2 1 1 0 0\nEDGE_SE2 0 1 1 0 0 10 0 0 10 0 20\n").unwrap();
        assert_eq!(g.dim, Dim::D2);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].measurement, vec![1.0, 0.0, 0.0]);
        assert_eq!(g.edges[0].info[(2, 2)], 20.0);
    }

    #[test]
    fn identity_quaternion_gives_zero_angles() {
        let g = parse_pose_graph("VERTEX_SE3:QUAT 3 1 2 3 0 0 0 1\n").unwrap();
        assert_eq!(g.vertices[&3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let err = parse_pose_graph("VERTEX_SE3:QUAT 3 1 2 3 0 0 0 1.1\n").unwrap_err();
        assert!(matches!(err, Error::InvalidRecord { line: 1, .. }));
        let g = parse_pose_graph("VERTEX_SE3:QUAT 3 0 0 0 0 0.7071067811865476 0 0.7071067811865476\n").unwrap();
        assert_eq!(g.warnings.len(), 1);
    }

    #[test]
    fn mixed_and_malformed_records() {
        assert_eq!(parse_pose_graph("VERTEX_SE2 0 0 0 0\nVERTEX_SE3:QUAT 1 0 0 0 0 0 0 1\n").unwrap_err().line(), Some(2));
        assert_eq!(parse_pose_graph("VERTEX_SE2 0 0 0\n").unwrap_err().line(), Some(1));
        assert_eq!(parse_pose_graph("\n\n").unwrap_err().line(), Some(2));
        let g = parse_pose_graph("FIX 0\nVERTEX_SE2 0 0 0 0\n").unwrap();
        assert_eq!(g.warnings.len(), 1);
    }

    #[test]
    fn rate_map_matches_rotation_derivative() {
        let e = [0.3, -0.4, 1.2];
        let r = rot3(&e);
        let h = 1e-6;
        for k in 0..3 {
            let mut ep = e;
            ep[k] += h;
            let mut em = e;
            em[k] -= h;
            let d = r.transpose() * (rot3(&ep) - rot3(&em)) / (2.0 * h);
            let w = nalgebra::Vector3::new(d[(2, 1)], d[(0, 2)], d[(1, 0)]);
            let expect = euler_rate_map(&e).column(k).into_owned();
            assert!((w - expect).amax() < 1e-8);
        }
    }

    fn random_graph(dim: Dim, seed: u64) -> PoseGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dim.pose_dim();
        let mut vertices = BTreeMap::new();
        let mut edges = Vec::new();
        let pose = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            if dim == Dim::D3 {
                v[4] *= 0.4;
            }
            v
        };
        for i in 0..20u64 {
            vertices.insert(i, pose(&mut rng));
            if i > 0 {
                let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
                edges.push(OdometryEdge {
                    from: i - 1,
                    to: i,
                    measurement: pose(&mut rng),
                    info: &a * a.transpose() + DMatrix::identity(n, n),
                });
            }
        }
        PoseGraph {
            dim,
            vertices,
            edges,
            warnings: Vec::new(),
        }
    }

    #[test]
    fn written_graphs_read_back() {
        for dim in [Dim::D2, Dim::D3] {
            for seed in 0..5 {
                let g = random_graph(dim, seed);
                let back = parse_pose_graph(&format_pose_graph(&g).unwrap()).unwrap();
                assert_eq!(back.vertices.len(), g.vertices.len());
                for (id, v) in &g.vertices {
                    let w = &back.vertices[id];
                    assert!(v.iter().zip(w).all(|(a, b)| (a - b).abs() < 1e-9), "{v:?} {w:?}");
                }
                for (a, b) in g.edges.iter().zip(&back.edges) {
                    assert_eq!((a.from, a.to), (b.from, b.to));
                    assert!(a.measurement.iter().zip(&b.measurement).all(|(x, y)| (x - y).abs() < 1e-9));
                    assert!((&a.info - &b.info).amax() < 1e-8 * a.info.amax());
                }
            }
        }
    }

    #[test]
    fn chain_partition() {
        let g = parse_pose_graph(&chain_2d(10)).unwrap();
        let chunks = partition_pose_graph(&g, 5).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].poses, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(chunks[1].poses, vec![5, 6, 7, 8, 9]);
    }

    #[test]
    fn loop_edge_goes_to_later_chunk() {
        let text = format!("{}EDGE_SE2 1 9 1 0 0 1 0 0 1 0 1\n", chain_2d(10));
        let g = parse_pose_graph(&text).unwrap();
        let chunks = partition_pose_graph(&g, 5).unwrap();
        assert!(chunks[1].odometry.iter().any(|e| (e.from, e.to) == (1, 9)));
        assert!(chunks[1].poses.contains(&1) && chunks[0].poses.contains(&1));
        for c in &chunks {
            c.validate().unwrap();
        }
    }

    #[test]
    fn partition_keeps_every_edge_once() {
        let mut g = random_graph(Dim::D2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..15 {
            let a = rng.gen_range(0..20u64);
            let b = rng.gen_range(0..20u64);
            if a != b {
                g.edges.push(OdometryEdge {
                    from: a,
                    to: b,
                    measurement: vec![0.0; 3],
                    info: DMatrix::identity(3, 3),
                });
            }
        }
        for k in 2..8 {
            let chunks = partition_pose_graph(&g, k).unwrap();
            let mut got: Vec<(u64, u64)> = chunks.iter().flat_map(|c| c.odometry.iter().map(|e| (e.from, e.to))).collect();
            let mut want: Vec<(u64, u64)> = g.edges.iter().map(|e| (e.from, e.to)).collect();
            got.sort();
            want.sort();
            assert_eq!(got, want);
            for c in &chunks {
                c.validate().unwrap();
            }
        }
    }

    #[test]
    fn disconnected_graph_rejected() {
        let g = parse_pose_graph("VERTEX_SE2 0 0 0 0\nVERTEX_SE2 1 1 0 0\nVERTEX_SE2 2 2 0 0\nEDGE_SE2 0 1 1 0 0 1 0 0 1 0 1\n")
            .unwrap();
        assert!(matches!(partition_pose_graph(&g, 2), Err(Error::InvalidInput(_))));
        assert!(partition_pose_graph(&g, 1).is_err());
    }
}
