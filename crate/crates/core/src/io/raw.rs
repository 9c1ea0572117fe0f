use std::fmt::Write as _;

use nalgebra::DMatrix;

use super::{decode, dim_tag, headings_tag, magic, num, parse_dim, parse_headings, record_err, Record, Records};
use crate::error::Result;
use crate::localmap::{Observation, OdometryEdge, RawLocalData};
use crate::sparse::SparseSymMatrix;

/// Lower triangle of a symmetric block, row by row.
fn lower_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for r in 0..m.nrows() {
        for c in 0..=r {
            out.push(m[(r, c)]);
        }
    }
    out
}

fn block_from_lower(n: usize, values: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut it = values.iter();
    for r in 0..n {
        for c in 0..=r {
            let v = *it.next().expect("caller checked the count");
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
    m
}

fn push_values(s: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        s.push(' ');
        s.push_str(&num(v));
    }
}

pub fn format_raw(data: &RawLocalData) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "RAW 1");
    let _ = writeln!(s, "dim {}", dim_tag(data.dim));
    let _ = writeln!(s, "headings {}", headings_tag(data.headings));
    let _ = write!(s, "poses {}", data.poses.len());
    for p in &data.poses {
        let _ = write!(s, " {p}");
    }
    s.push('\n');
    let _ = writeln!(s, "odometry {}", data.odometry.len());
    for e in &data.odometry {
        let _ = write!(s, "odo {} {}", e.from, e.to);
        push_values(&mut s, e.measurement.iter().copied());
        push_values(&mut s, lower_row_major(&e.info));
        s.push('\n');
    }
    let _ = writeln!(s, "observations {}", data.observations.len());
    for o in &data.observations {
        let _ = write!(s, "obs {} {}", o.pose, o.feature);
        push_values(&mut s, o.measurement.iter().copied());
        push_values(&mut s, lower_row_major(&o.info));
        s.push('\n');
    }
    s.push_str("end\n");
    s
}

pub fn parse_raw_bytes(bytes: &[u8]) -> Result<RawLocalData> {
    parse_raw(decode(bytes)?)
}

/// Two ids, a measurement and its information block.
fn parse_measurement(r: &Record, keyword: &str, len: usize) -> Result<(u64, u64, Vec<f64>, DMatrix<f64>)> {
    let args = r.expect(keyword, 2 + len + len * (len + 1) / 2)?;
    let (a, b) = (r.id(args[0])?, r.id(args[1])?);
    let values = r.reals(&args[2..])?;
    let info = block_from_lower(len, &values[len..]);
    if !SparseSymMatrix::from_dense(&info).is_psd() {
        return Err(record_err(r.line, "information block is not positive semidefinite"));
    }
    Ok((a, b, values[..len].to_vec(), info))
}

pub fn parse_raw(text: &str) -> Result<RawLocalData> {
    let mut recs = Records::new(text)?;
    magic(&recs.next()?, "RAW")?;
    let dim = parse_dim(&recs.next()?)?;
    let headings = parse_headings(&recs.next()?)?;

    let pr = recs.next()?;
    if pr.tokens[0] != "poses" || pr.tokens.len() < 2 {
        return Err(pr.err("expected 'poses' with a count"));
    }
    let n = pr.count(pr.tokens[1])?;
    if pr.tokens.len() != n + 2 {
        return Err(pr.err(format!("expected {n} pose ids, found {}", pr.tokens.len() - 2)));
    }
    let poses = pr.tokens[2..].iter().map(|t| pr.id(t)).collect::<Result<Vec<u64>>>()?;

    let or = recs.next()?;
    let n_odo = or.count(or.expect("odometry", 1)?[0])?;
    let mut odometry = Vec::new();
    for _ in 0..n_odo {
        let r = recs.next()?;
        let (from, to, measurement, info) = parse_measurement(&r, "odo", dim.pose_dim())?;
        odometry.push(OdometryEdge {
            from,
            to,
            measurement,
            info,
        });
    }

    let br = recs.next()?;
    let n_obs = br.count(br.expect("observations", 1)?[0])?;
    let mut observations = Vec::new();
    for _ in 0..n_obs {
        let r = recs.next()?;
        let (pose, feature, measurement, info) = parse_measurement(&r, "obs", dim.feature_dim())?;
        observations.push(Observation {
            pose,
            feature,
            measurement,
            info,
        });
    }
    let end = recs.finish()?;
    let data = RawLocalData {
        dim,
        headings,
        poses,
        odometry,
        observations,
    };
    data.validate().map_err(|e| record_err(end, e))?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, ScenarioConfig};
    use crate::state::Dim;

    #[test]
    fn simulated_chunks_round_trip() {
        for dim in [Dim::D2, Dim::D3] {
            let sc = generate(&ScenarioConfig {
                dim,
                poses: 12,
                feature_density: 0.05,
                ..ScenarioConfig::default()
            })
            .unwrap();
            for c in &sc.chunks {
                let text = format_raw(c);
                assert_eq!(&parse_raw(&text).unwrap(), c);
            }
        }
    }

    #[test]
    fn bad_records_are_positioned() {
        let text = "RAW 1\ndim 2d\nheadings estimated\nposes 2 0 1\nodometry 1\nodo 0 1 1 0 0 1 0 1 0 0 -1\n\
                    observations 0\nend\n";
        let err = parse_raw(text).unwrap_err();
        assert_eq!(err.line(), Some(6));
        let missing = "RAW 1\ndim 2d\nheadings estimated\nposes 1 0\nodometry 1\nodo 0 1 1 0 0 1 0 1 0 0 1\n\
                       observations 0\nend\n";
        assert_eq!(parse_raw(missing).unwrap_err().line(), Some(8));
    }
}
