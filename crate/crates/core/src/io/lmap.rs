use std::fmt::Write as _;

use super::{
    decode, dim_tag, frame_line, headings_tag, key_line, magic, num, parse_dim, parse_frame, parse_headings, parse_key,
    record_err, Records,
};
use crate::error::Result;
use crate::localmap::LocalMap;
use crate::sparse::SparseSymMatrix;
use crate::state::{Dim, FrameDescriptor, FramedState, StateVector};

/// Canonical text of a local map.
pub fn format_map(map: &LocalMap) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "LMAP 1");
    let _ = writeln!(s, "dim {}", dim_tag(map.dim()));
    let _ = writeln!(s, "headings {}", headings_tag(map.headings()));
    let _ = writeln!(s, "{}", frame_line(Some(map.frame())));
    let _ = writeln!(s, "entries {}", map.estimate().len());
    for (k, v) in map.estimate().iter() {
        let _ = writeln!(s, "{}", key_line(k, v));
    }
    let trip: Vec<_> = map.info().triplets().collect();
    let _ = writeln!(s, "info {}", trip.len());
    for (r, c, v) in trip {
        let _ = writeln!(s, "{r} {c} {}", num(v));
    }
    s.push_str("end\n");
    s
}

pub fn parse_map_bytes(bytes: &[u8]) -> Result<LocalMap> {
    parse_map(decode(bytes)?)
}

fn parse_entries(recs: &mut Records, dim: Dim, frame: Option<&FrameDescriptor>) -> Result<StateVector> {
    let r = recs.next()?;
    let n = r.count(r.expect("entries", 1)?[0])?;
    let mut state = StateVector::new();
    for _ in 0..n {
        let r = recs.next()?;
        let key = parse_key(&r)?;
        let expected = match frame {
            Some(f) => f.stored_len(key, dim),
            None => dim.full_dim(key),
        };
        if expected == 0 {
            return Err(r.err(format!("{key} defines the frame and has no stored values")));
        }
        let values = &r.tokens[2..];
        if values.len() != expected {
            return Err(r.err(format!("{key} needs {expected} values, found {}", values.len())));
        }
        state.push(key, &r.reals(values)?).map_err(|e| record_err(r.line, e))?;
    }
    Ok(state)
}

pub fn parse_map(text: &str) -> Result<LocalMap> {
    let mut recs = Records::new(text)?;
    magic(&recs.next()?, "LMAP")?;
    let dim = parse_dim(&recs.next()?)?;
    let headings = parse_headings(&recs.next()?)?;
    let fr = recs.next()?;
    let frame = parse_frame(&fr, dim, false)?.expect("world frames are rejected");
    let state = parse_entries(&mut recs, dim, Some(&frame))?;

    let ir = recs.next()?;
    let m = ir.count(ir.expect("info", 1)?[0])?;
    let n = state.dim();
    let mut trip = Vec::new();
    for _ in 0..m {
        let r = recs.next()?;
        if r.tokens.len() != 3 {
            return Err(r.err("information entries are 'row col value'"));
        }
        let (row, col): (usize, usize) = (r.num(r.tokens[0], "row")?, r.num(r.tokens[1], "column")?);
        let v = r.real(r.tokens[2])?;
        if row >= n || col >= n {
            return Err(r.err(format!("index ({row}, {col}) outside a {n}-dimensional state")));
        }
        if row < col {
            return Err(r.err("information entries must be on or below the diagonal"));
        }
        trip.push((row, col, v));
    }
    let end = recs.finish()?;
    let info = SparseSymMatrix::from_triplets(n, trip).map_err(|e| record_err(ir.line, e))?;
    let map = LocalMap::new(dim, headings, frame, state, info).map_err(|e| record_err(end, e))?;
    map.check_psd().map_err(|e| record_err(ir.line, e))?;
    Ok(map)
}

/// Text of a state vector with its frame (`frame world` for world
/// coordinates).
pub fn format_state(s: &FramedState) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "STATE 1");
    let _ = writeln!(out, "dim {}", dim_tag(s.dim));
    let _ = writeln!(out, "{}", frame_line(s.frame.as_ref()));
    let _ = writeln!(out, "entries {}", s.state.len());
    for (k, v) in s.state.iter() {
        let _ = writeln!(out, "{}", key_line(k, v));
    }
    out.push_str("end\n");
    out
}

pub fn parse_state_bytes(bytes: &[u8]) -> Result<FramedState> {
    parse_state(decode(bytes)?)
}

pub fn parse_state(text: &str) -> Result<FramedState> {
    let mut recs = Records::new(text)?;
    magic(&recs.next()?, "STATE")?;
    let dim = parse_dim(&recs.next()?)?;
    let frame = parse_frame(&recs.next()?, dim, true)?;
    let state = parse_entries(&mut recs, dim, frame.as_ref())?;
    recs.finish()?;
    Ok(FramedState { dim, frame, state })
}
