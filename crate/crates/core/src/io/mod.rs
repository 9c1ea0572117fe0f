//! Readers and writers for the text formats described in `docs/formats.md`.
//!
//! Every reader reports failures as [`Error::Parse`] (malformed text) or
//! [`Error::InvalidRecord`] (well-formed but unacceptable content), both
//! carrying the 1-based line number.

mod lmap;
mod plot;
mod posegraph;
mod raw;

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::state::{Dim, FrameDescriptor, HeadingMode, StateKey};

pub use lmap::{format_map, format_state, parse_map, parse_map_bytes, parse_state, parse_state_bytes};
pub use plot::{map_plot_csv, metrics_csv};
pub use posegraph::{
    format_pose_graph, parse_pose_graph, parse_pose_graph_bytes, partition_pose_graph, PoseGraph,
};
pub use raw::{format_raw, parse_raw, parse_raw_bytes};

use crate::eval::MetricReport;
use crate::localmap::{LocalMap, RawLocalData};
use crate::state::FramedState;

fn read_text(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

pub fn read_map_file(path: &Path) -> Result<LocalMap> {
    parse_map_bytes(&read_text(path)?)
}

pub fn write_map_file(map: &LocalMap, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, format_map(map))?)
}

pub fn read_state_file(path: &Path) -> Result<FramedState> {
    parse_state_bytes(&read_text(path)?)
}

pub fn write_state_file(state: &FramedState, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, format_state(state))?)
}

pub fn read_raw_file(path: &Path) -> Result<RawLocalData> {
    parse_raw_bytes(&read_text(path)?)
}

pub fn write_raw_file(data: &RawLocalData, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, format_raw(data))?)
}

pub fn read_pose_graph(path: &Path) -> Result<PoseGraph> {
    parse_pose_graph_bytes(&read_text(path)?)
}

pub fn write_pose_graph(graph: &PoseGraph, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, format_pose_graph(graph)?)?)
}

pub fn write_plot_data(map: &LocalMap, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, map_plot_csv(map))?)
}

pub fn write_metrics_csv(report: &MetricReport, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, metrics_csv(report))?)
}

/// Decodes UTF-8, reporting the line of the first invalid byte.
fn decode(bytes: &[u8]) -> Result<&str> {
    std::str::from_utf8(bytes).map_err(|e| {
        let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        Error::Parse {
            line,
            msg: "invalid UTF-8".into(),
        }
    })
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn record_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::InvalidRecord {
        line,
        msg: msg.to_string(),
    }
}

/// One non-blank, non-comment line split into tokens.
struct Record<'a> {
    line: usize,
    tokens: Vec<&'a str>,
}

impl<'a> Record<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        parse_err(self.line, msg)
    }

    /// Checks the leading keyword and the number of following tokens.
    fn expect(&self, keyword: &str, args: usize) -> Result<&[&'a str]> {
        if self.tokens[0] != keyword {
            return Err(self.err(format!("expected '{keyword}', found '{}'", self.tokens[0])));
        }
        if self.tokens.len() != args + 1 {
            return Err(self.err(format!(
                "'{keyword}' takes {args} values, found {}",
                self.tokens.len() - 1
            )));
        }
        Ok(&self.tokens[1..])
    }

    fn num<T: FromStr>(&self, token: &str, what: &str) -> Result<T> {
        token
            .parse()
            .map_err(|_| self.err(format!("invalid {what} '{token}'")))
    }

    fn real(&self, token: &str) -> Result<f64> {
        let v: f64 = self.num(token, "number")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(format!("non-finite number '{token}'")))
        }
    }

    fn reals(&self, tokens: &[&str]) -> Result<Vec<f64>> {
        tokens.iter().map(|t| self.real(t)).collect()
    }

    fn count(&self, token: &str) -> Result<usize> {
        self.num(token, "count")
    }

    fn id(&self, token: &str) -> Result<u64> {
        self.num(token, "id")
    }
}

/// Line cursor over a document that must end with a newline and an `end`
/// record, so that every truncation is detected.
struct Records<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    last_line: usize,
}

impl<'a> Records<'a> {
    fn new(text: &'a str) -> Result<Records<'a>> {
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(parse_err(text.lines().count(), "missing newline at end of file"));
        }
        Ok(Records {
            lines: text.lines().enumerate(),
            last_line: 0,
        })
    }

    fn next_opt(&mut self) -> Option<Record<'a>> {
        for (i, l) in self.lines.by_ref() {
            self.last_line = i + 1;
            let l = l.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            return Some(Record {
                line: i + 1,
                tokens: l.split_whitespace().collect(),
            });
        }
        None
    }

    fn next(&mut self) -> Result<Record<'a>> {
        self.next_opt()
            .ok_or_else(|| parse_err(self.last_line + 1, "unexpected end of file"))
    }

    /// Consumes the `end` record and checks nothing follows it.
    fn finish(&mut self) -> Result<usize> {
        let r = self.next()?;
        r.expect("end", 0)?;
        if let Some(extra) = self.next_opt() {
            return Err(extra.err("content after 'end'"));
        }
        Ok(r.line)
    }
}

fn magic(r: &Record, name: &str) -> Result<()> {
    let args = r.expect(name, 1)?;
    if args[0] != "1" {
        return Err(r.err(format!("unsupported {name} version '{}'", args[0])));
    }
    Ok(())
}

fn parse_dim(r: &Record) -> Result<Dim> {
    match r.expect("dim", 1)?[0] {
        "2d" => Ok(Dim::D2),
        "3d" => Ok(Dim::D3),
        other => Err(r.err(format!("unknown dimension '{other}'"))),
    }
}

fn dim_tag(dim: Dim) -> &'static str {
    match dim {
        Dim::D2 => "2d",
        Dim::D3 => "3d",
    }
}

fn parse_headings(r: &Record) -> Result<HeadingMode> {
    match r.expect("headings", 1)?[0] {
        "estimated" => Ok(HeadingMode::Estimated),
        "fixed" => Ok(HeadingMode::Fixed),
        other => Err(r.err(format!("unknown heading mode '{other}'"))),
    }
}

fn headings_tag(h: HeadingMode) -> &'static str {
    match h {
        HeadingMode::Estimated => "estimated",
        HeadingMode::Fixed => "fixed",
    }
}

/// `frame pose ID`, `frame features O X [P]`, or `frame world` when allowed.
fn parse_frame(r: &Record, dim: Dim, allow_world: bool) -> Result<Option<FrameDescriptor>> {
    if r.tokens[0] != "frame" || r.tokens.len() < 2 {
        return Err(r.err("expected 'frame' with a kind"));
    }
    let args = &r.tokens[2..];
    let frame = match (r.tokens[1], args.len()) {
        ("world", 0) if allow_world => return Ok(None),
        ("pose", 1) => FrameDescriptor::Pose(r.id(args[0])?),
        ("features", 2) => FrameDescriptor::Features2 {
            origin: r.id(args[0])?,
            x_axis: r.id(args[1])?,
        },
        ("features", 3) => FrameDescriptor::Features3 {
            origin: r.id(args[0])?,
            x_axis: r.id(args[1])?,
            plane: r.id(args[2])?,
        },
        _ => return Err(r.err("malformed frame descriptor")),
    };
    frame.validate(dim).map_err(|e| record_err(r.line, e))?;
    Ok(Some(frame))
}

fn frame_line(frame: Option<&FrameDescriptor>) -> String {
    match frame {
        None => "frame world".into(),
        Some(FrameDescriptor::Pose(p)) => format!("frame pose {p}"),
        Some(FrameDescriptor::Features2 { origin, x_axis }) => format!("frame features {origin} {x_axis}"),
        Some(FrameDescriptor::Features3 {
            origin,
            x_axis,
            plane,
        }) => format!("frame features {origin} {x_axis} {plane}"),
    }
}

fn parse_key(r: &Record) -> Result<StateKey> {
    if r.tokens.len() < 2 {
        return Err(r.err("entry needs a kind and an id"));
    }
    let id = r.id(r.tokens[1])?;
    match r.tokens[0] {
        "pose" => Ok(StateKey::Pose(id)),
        "feature" => Ok(StateKey::Feature(id)),
        other => Err(r.err(format!("unknown entry kind '{other}'"))),
    }
}

fn key_line(key: StateKey, values: &[f64]) -> String {
    let (kind, id) = match key {
        StateKey::Pose(i) => ("pose", i),
        StateKey::Feature(i) => ("feature", i),
    };
    let mut s = format!("{kind} {id}");
    for v in values {
        s.push(' ');
        s.push_str(&num(*v));
    }
    s
}

/// Locale-independent scientific notation with 17 significant digits.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}
