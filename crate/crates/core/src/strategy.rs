//! Multi-map fusion: sequential and divide-and-conquer drivers, and the
//! operation-count model comparing them with a full batch solve.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::join::{choose_feature_frame, join_two_maps_in};
use crate::localmap::{build_local_map, reframe_map, GaussNewtonConfig, LocalMap, RawLocalData};
use crate::state::{FrameDescriptor, StateKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JoinMode {
    Sequential,
    DivideConquer,
}

/// One pairwise join. Indices below the map count refer to input maps;
/// index `n + s` refers to the result of step `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JoinStep {
    pub level: usize,
    pub left: usize,
    pub right: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JoinPlan {
    pub mode: JoinMode,
    pub maps: usize,
    pub steps: Vec<JoinStep>,
}

impl JoinPlan {
    pub fn new(mode: JoinMode, maps: usize) -> JoinPlan {
        let mut steps = Vec::new();
        match mode {
            JoinMode::Sequential => {
                let mut acc = 0;
                for i in 1..maps {
                    steps.push(JoinStep {
                        level: i - 1,
                        left: acc,
                        right: i,
                    });
                    acc = maps + steps.len() - 1;
                }
            }
            JoinMode::DivideConquer => {
                let mut current: Vec<usize> = (0..maps).collect();
                let mut level = 0;
                while current.len() > 1 {
                    let mut next = Vec::with_capacity(current.len().div_ceil(2));
                    for pair in current.chunks(2) {
                        if let [l, r] = *pair {
                            steps.push(JoinStep { level, left: l, right: r });
                            next.push(maps + steps.len() - 1);
                        } else {
                            next.push(pair[0]);
                        }
                    }
                    current = next;
                    level += 1;
                }
            }
        }
        JoinPlan { mode, maps, steps }
    }

    pub fn levels(&self) -> usize {
        self.steps.last().map_or(0, |s| s.level + 1)
    }

    /// Frame side of every node (inputs, then step results). A node joined
    /// as the right operand is kept in its start pose, every other node in
    /// its end pose, so both operands of each join share a frame.
    pub fn sides(&self) -> Vec<FrameSide> {
        let mut sides = vec![FrameSide::End; self.maps + self.steps.len()];
        for s in &self.steps {
            sides[s.right] = FrameSide::Start;
        }
        sides
    }

    /// First and last input map covered by every node.
    fn ranges(&self) -> Vec<(usize, usize)> {
        let mut r: Vec<(usize, usize)> = (0..self.maps).map(|i| (i, i)).collect();
        for s in &self.steps {
            r.push((r[s.left].0, r[s.right].1));
        }
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameSide {
    Start,
    End,
}

fn last_pose(map: &LocalMap) -> Option<u64> {
    map.elements().iter().filter(|k| k.is_pose()).map(|k| k.id()).max()
}

/// Builds each chunk directly in the frame its position in the plan calls
/// for, so that no join needs an approximate change of frame. Chunks are
/// expected in trajectory order, each starting at the last pose of the
/// previous one.
pub fn build_for_plan(plan: &JoinPlan, chunks: &[RawLocalData], cfg: &GaussNewtonConfig) -> Result<Vec<LocalMap>> {
    if plan.maps != chunks.len() {
        return Err(Error::InvalidInput("plan does not match the number of chunks".into()));
    }
    let last = |c: &RawLocalData| c.poses.iter().copied().max();
    let sides = plan.sides();
    chunks
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let pose = match sides[i] {
                FrameSide::Start if i > 0 => last(&chunks[i - 1]).filter(|p| c.poses.contains(p)),
                FrameSide::Start => c.poses.iter().copied().min(),
                FrameSide::End => last(c),
            }
            .ok_or_else(|| Error::InvalidInput(format!("chunk {i} does not start at the previous chunk's last pose")))?;
            build_local_map(c, &FrameDescriptor::Pose(pose), cfg)?.into_converged()
        })
        .collect()
}

/// Result of a multi-map join.
#[derive(Clone, Debug)]
pub struct JoinOutcome {
    pub map: LocalMap,
    /// Number of pairwise joins performed.
    pub joins: usize,
}

/// Brings two maps into a common frame: the first map's frame if the second
/// map knows its entities, otherwise the second map's frame if the first
/// knows those, otherwise a frame built from shared entities.
pub fn align_frames(m1: &LocalMap, m2: &LocalMap) -> Result<(LocalMap, LocalMap)> {
    if m1.frame() == m2.frame() {
        return Ok((m1.clone(), m2.clone()));
    }
    let (e1, e2) = (m1.elements(), m2.elements());
    if m1.frame().entities().iter().all(|k| e2.contains(k)) {
        return Ok((m1.clone(), reframe_map(m2, m1.frame())?));
    }
    if m2.frame().entities().iter().all(|k| e1.contains(k)) {
        return Ok((reframe_map(m1, m2.frame())?, m2.clone()));
    }
    let shared: BTreeSet<StateKey> = e1.intersection(&e2).copied().collect();
    let frame = if let Some(p) = shared.iter().find(|k| k.is_pose()) {
        FrameDescriptor::Pose(p.id())
    } else {
        let feats: BTreeSet<u64> = shared.iter().filter(|k| k.is_feature()).map(|k| k.id()).collect();
        if feats.len() < m1.dim().spatial() {
            return Err(Error::NotJoinable("maps share too few entities".into()));
        }
        choose_feature_frame(m1.estimate(), m1.dim(), Some(m1.frame()), &feats)?
    };
    Ok((reframe_map(m1, &frame)?, reframe_map(m2, &frame)?))
}

/// Aligns frames, then joins into the default target frame.
pub fn join_pair(m1: &LocalMap, m2: &LocalMap) -> Result<LocalMap> {
    join_pair_in(m1, m2, None)
}

pub fn join_pair_in(m1: &LocalMap, m2: &LocalMap, target: Option<&FrameDescriptor>) -> Result<LocalMap> {
    let (a, b) = align_frames(m1, m2)?;
    join_two_maps_in(&a, &b, target)
}

/// Left fold of pairwise joins.
pub fn join_sequential(maps: &[LocalMap]) -> Result<JoinOutcome> {
    run_plan(&JoinPlan::new(JoinMode::Sequential, maps.len()), maps, 1)
}

/// Hierarchical pairwise joins. Joins of one level may run on up to
/// `threads` workers; the pairing is fixed so the result does not depend on
/// the thread count.
pub fn join_divide_conquer(maps: &[LocalMap], threads: usize) -> Result<JoinOutcome> {
    run_plan(&JoinPlan::new(JoinMode::DivideConquer, maps.len()), maps, threads)
}

pub fn run_plan(plan: &JoinPlan, maps: &[LocalMap], threads: usize) -> Result<JoinOutcome> {
    if maps.is_empty() {
        return Err(Error::InvalidInput("no maps to join".into()));
    }
    if plan.maps != maps.len() {
        return Err(Error::InvalidInput("plan does not match the number of maps".into()));
    }
    let sides = plan.sides();
    // A right operand covering maps a..=b is kept in the last pose of map
    // a - 1, which its left partner ends at; other results end at their own
    // last pose.
    let ends: Vec<Option<u64>> = maps.iter().map(last_pose).collect();
    let targets: Vec<Option<FrameDescriptor>> = plan
        .ranges()
        .into_iter()
        .zip(&sides)
        .skip(maps.len())
        .map(|((first, last), side)| {
            let pose = match side {
                FrameSide::Start if first > 0 => ends[first - 1],
                _ => ends[last],
            };
            pose.map(FrameDescriptor::Pose)
        })
        .collect();
    let mut results: Vec<Option<LocalMap>> = maps.iter().cloned().map(Some).collect();
    results.resize(maps.len() + plan.steps.len(), None);
    let pool = if threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let mut start = 0;
    while start < plan.steps.len() {
        let level = plan.steps[start].level;
        let end = start + plan.steps[start..].iter().take_while(|s| s.level == level).count();
        let batch: Vec<(usize, LocalMap, LocalMap)> = (start..end)
            .map(|i| {
                let s = plan.steps[i];
                let l = results[s.left].take().expect("input consumed once");
                let r = results[s.right].take().expect("input consumed once");
                (i, l, r)
            })
            .collect();
        let run = |(i, l, r): &(usize, LocalMap, LocalMap)| {
            join_pair_in(l, r, targets[*i].as_ref()).map_err(|e| Error::JoinStep {
                step: *i,
                source: Box::new(e),
            })
        };
        let out: Vec<Result<LocalMap>> = match &pool {
            Some(p) if batch.len() > 1 => p.install(|| batch.par_iter().map(run).collect()),
            _ => batch.iter().map(run).collect(),
        };
        for (i, r) in (start..end).zip(out) {
            results[maps.len() + i] = Some(r?);
        }
        start = end;
    }
    let map = results.into_iter().rev().flatten().next().expect("one result remains");
    Ok(JoinOutcome {
        map,
        joins: plan.steps.len(),
    })
}

/// Inputs of the operation-count model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityParams {
    /// Total number of observations.
    pub og: f64,
    /// Total number of state entities.
    pub sg: f64,
    /// Iterations of a nonlinear solve.
    pub m: f64,
    /// Number of local maps.
    pub n: u64,
}

/// Costs relative to a batch nonlinear solve, `m * O_G + m * S_G^3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub local_build: f64,
    pub seq_join: f64,
    pub seq_total: f64,
    pub dc_join: f64,
    pub dc_total: f64,
    /// The same drivers when every join is a nonlinear solve of `m` iterations.
    pub nonlinear_seq_join: f64,
    pub nonlinear_seq_total: f64,
    pub nonlinear_dc_join: f64,
    pub nonlinear_dc_total: f64,
}

pub fn complexity_model(p: &ComplexityParams) -> Result<ComplexityReport> {
    if p.n < 2 {
        return Err(Error::InvalidInput("at least two local maps are required".into()));
    }
    if !(p.og > 0.0 && p.sg > 0.0 && p.m > 0.0) {
        return Err(Error::InvalidInput("counts must be positive".into()));
    }
    let (o, s, m) = (p.og, p.sg, p.m);
    let n = p.n as f64;
    let baseline = m * o + m * s.powi(3);
    let local = m * o + m / (n * n) * s.powi(3);

    let mut seq = 0.0;
    let mut nl_seq = 0.0;
    for i in 2..=p.n {
        let size = i as f64 / n * s;
        seq += 2.0 * size + size.powi(3);
        nl_seq += m * size + m * size.powi(3);
    }

    let levels = (p.n as f64).log2().ceil() as u32;
    let mut dc = 2.0 * s + s.powi(3);
    let mut nl_dc = m * s + m * s.powi(3);
    for k in 1..levels {
        let size = 2f64.powi(k as i32) / n * s;
        let joins = (p.n >> k) as f64;
        dc += (2.0 * size + size.powi(3)) * joins;
        nl_dc += (m * size + m * size.powi(3)) * joins;
    }

    let r = |x: f64| x / baseline;
    Ok(ComplexityReport {
        local_build: r(local),
        seq_join: r(seq),
        seq_total: r(local + seq),
        dc_join: r(dc),
        dc_total: r(local + dc),
        nonlinear_seq_join: r(nl_seq),
        nonlinear_seq_total: r(local + nl_seq),
        nonlinear_dc_join: r(nl_dc),
        nonlinear_dc_total: r(local + nl_dc),
    })
}
