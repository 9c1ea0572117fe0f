//! State keys, ordered state vectors and frame descriptors.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dim {
    #[serde(rename = "2d")]
    D2,
    #[serde(rename = "3d")]
    D3,
}

impl Dim {
    pub fn from_spatial(n: usize) -> Option<Dim> {
        match n {
            2 => Some(Dim::D2),
            3 => Some(Dim::D3),
            _ => None,
        }
    }

    pub fn spatial(self) -> usize {
        match self {
            Dim::D2 => 2,
            Dim::D3 => 3,
        }
    }

    pub fn trans_dim(self) -> usize {
        self.spatial()
    }

    pub fn rot_dim(self) -> usize {
        match self {
            Dim::D2 => 1,
            Dim::D3 => 3,
        }
    }

    pub fn pose_dim(self) -> usize {
        self.trans_dim() + self.rot_dim()
    }

    pub fn feature_dim(self) -> usize {
        self.spatial()
    }

    pub fn full_dim(self, key: StateKey) -> usize {
        match key {
            StateKey::Pose(_) => self.pose_dim(),
            StateKey::Feature(_) => self.feature_dim(),
        }
    }
}

/// Whether pose orientations are estimated or held at known values.
///
/// With fixed headings every model in the pipeline is affine in the
/// remaining unknowns. Rotation entries of a fixed-heading map carry an
/// identity placeholder information block that is decoupled from the rest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadingMode {
    #[default]
    Estimated,
    Fixed,
}

/// Identifies a pose or a feature. Ids are shared across maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StateKey {
    Pose(u64),
    Feature(u64),
}

impl StateKey {
    pub fn id(self) -> u64 {
        match self {
            StateKey::Pose(id) | StateKey::Feature(id) => id,
        }
    }

    pub fn is_pose(self) -> bool {
        matches!(self, StateKey::Pose(_))
    }

    pub fn is_feature(self) -> bool {
        matches!(self, StateKey::Feature(_))
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateKey::Pose(id) => write!(f, "pose {id}"),
            StateKey::Feature(id) => write!(f, "feature {id}"),
        }
    }
}

/// Which entities define a map's coordinate frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameDescriptor {
    /// The frame of a pose.
    Pose(u64),
    /// Origin at one feature, x axis towards another.
    Features2 { origin: u64, x_axis: u64 },
    /// Origin at one feature, x axis towards a second, xy plane through a third.
    Features3 { origin: u64, x_axis: u64, plane: u64 },
}

impl fmt::Display for FrameDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameDescriptor::Pose(p) => write!(f, "pose frame {p}"),
            FrameDescriptor::Features2 { origin, x_axis } => {
                write!(f, "feature frame ({origin}, {x_axis})")
            }
            FrameDescriptor::Features3 {
                origin,
                x_axis,
                plane,
            } => write!(f, "feature frame ({origin}, {x_axis}, {plane})"),
        }
    }
}

impl FrameDescriptor {
    pub fn is_pose_frame(&self) -> bool {
        matches!(self, FrameDescriptor::Pose(_))
    }

    pub fn entities(&self) -> Vec<StateKey> {
        match *self {
            FrameDescriptor::Pose(p) => vec![StateKey::Pose(p)],
            FrameDescriptor::Features2 { origin, x_axis } => {
                vec![StateKey::Feature(origin), StateKey::Feature(x_axis)]
            }
            FrameDescriptor::Features3 {
                origin,
                x_axis,
                plane,
            } => vec![
                StateKey::Feature(origin),
                StateKey::Feature(x_axis),
                StateKey::Feature(plane),
            ],
        }
    }

    /// Checks the descriptor is usable for maps of dimension `dim`.
    pub fn validate(&self, dim: Dim) -> Result<()> {
        match (*self, dim) {
            (FrameDescriptor::Pose(_), _) => Ok(()),
            (FrameDescriptor::Features2 { origin, x_axis }, Dim::D2) if origin != x_axis => Ok(()),
            (
                FrameDescriptor::Features3 {
                    origin,
                    x_axis,
                    plane,
                },
                Dim::D3,
            ) if origin != x_axis && origin != plane && x_axis != plane => Ok(()),
            _ => Err(Error::InvalidInput(format!("{self} is not valid for {dim:?} maps"))),
        }
    }

    /// Number of leading coordinates of `key` stored in a map with this
    /// frame. Zero means the entity is fully fixed by the frame.
    pub fn stored_len(&self, key: StateKey, dim: Dim) -> usize {
        match (*self, key) {
            (FrameDescriptor::Pose(p), StateKey::Pose(q)) if p == q => 0,
            (FrameDescriptor::Features2 { origin, x_axis }, StateKey::Feature(f)) => {
                if f == origin {
                    0
                } else if f == x_axis {
                    1
                } else {
                    dim.feature_dim()
                }
            }
            (
                FrameDescriptor::Features3 {
                    origin,
                    x_axis,
                    plane,
                },
                StateKey::Feature(f),
            ) => {
                if f == origin {
                    0
                } else if f == x_axis {
                    1
                } else if f == plane {
                    2
                } else {
                    dim.feature_dim()
                }
            }
            _ => dim.full_dim(key),
        }
    }
}

/// Ordered key to value-block container.
#[derive(Clone, Debug, Default)]
pub struct StateVector {
    keys: Vec<StateKey>,
    offsets: Vec<usize>,
    values: Vec<f64>,
    index: HashMap<StateKey, usize>,
}

impl PartialEq for StateVector {
    fn eq(&self, other: &Self) -> bool {
        self.keys == other.keys && self.offsets == other.offsets && self.values == other.values
    }
}

impl StateVector {
    pub fn new() -> StateVector {
        StateVector::default()
    }

    pub fn from_entries<I, V>(entries: I) -> Result<StateVector>
    where
        I: IntoIterator<Item = (StateKey, V)>,
        V: AsRef<[f64]>,
    {
        let mut s = StateVector::new();
        for (k, v) in entries {
            s.push(k, v.as_ref())?;
        }
        Ok(s)
    }

    pub fn push(&mut self, key: StateKey, block: &[f64]) -> Result<()> {
        if self.index.contains_key(&key) {
            return Err(Error::InvalidInput(format!("duplicate {key}")));
        }
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("{key} has a non-finite value")));
        }
        self.index.insert(key, self.keys.len());
        self.keys.push(key);
        self.offsets.push(self.values.len());
        self.values.extend_from_slice(block);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Total scalar dimension.
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn keys(&self) -> &[StateKey] {
        &self.keys
    }

    pub fn contains(&self, key: StateKey) -> bool {
        self.index.contains_key(&key)
    }

    pub fn position(&self, key: StateKey) -> Option<usize> {
        self.index.get(&key).copied()
    }

    fn range(&self, i: usize) -> std::ops::Range<usize> {
        let end = self.offsets.get(i + 1).copied().unwrap_or(self.values.len());
        self.offsets[i]..end
    }

    /// Scalar offset and length of `key`'s block.
    pub fn span(&self, key: StateKey) -> Option<(usize, usize)> {
        self.position(key).map(|i| {
            let r = self.range(i);
            (r.start, r.len())
        })
    }

    pub fn get(&self, key: StateKey) -> Option<&[f64]> {
        self.position(key).map(|i| &self.values[self.range(i)])
    }

    pub fn get_mut(&mut self, key: StateKey) -> Option<&mut [f64]> {
        let i = self.position(key)?;
        let r = self.range(i);
        Some(&mut self.values[r])
    }

    pub fn entry(&self, i: usize) -> (StateKey, &[f64]) {
        (self.keys[i], &self.values[self.range(i)])
    }

    pub fn iter(&self) -> impl Iterator<Item = (StateKey, &[f64])> + '_ {
        (0..self.len()).map(move |i| self.entry(i))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Replaces all scalar values, keeping the layout.
    pub fn with_values(&self, values: &[f64]) -> Result<StateVector> {
        if values.len() != self.values.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        let mut s = self.clone();
        s.values.copy_from_slice(values);
        Ok(s)
    }

    pub fn is_sorted(&self) -> bool {
        self.keys.windows(2).all(|w| w[0] < w[1])
    }

    /// Permutation `p` such that entry `p[i]` of `self` is entry `i` of the
    /// key-sorted vector.
    pub fn sort_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.keys[i]);
        order
    }
}

/// A state vector together with the frame it is expressed in. `None` means
/// the world frame, where every entity is stored with its full block.
#[derive(Clone, Debug, PartialEq)]
pub struct FramedState {
    pub dim: Dim,
    pub frame: Option<FrameDescriptor>,
    pub state: StateVector,
}

impl FramedState {
    pub fn world(dim: Dim, state: StateVector) -> FramedState {
        FramedState {
            dim,
            frame: None,
            state,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_rejected() {
        let mut s = StateVector::new();
        s.push(StateKey::Pose(1), &[0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            s.push(StateKey::Pose(1), &[1.0, 0.0, 0.0]),
            Err(Error::InvalidInput(_))
        ));
        s.push(StateKey::Feature(1), &[2.0, 3.0]).unwrap();
        assert_eq!(s.dim(), 5);
        assert_eq!(s.span(StateKey::Feature(1)), Some((3, 2)));
        assert_eq!(s.get(StateKey::Feature(1)).unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn stored_lengths() {
        let f2 = FrameDescriptor::Features2 {
            origin: 1,
            x_axis: 2,
        };
        assert_eq!(f2.stored_len(StateKey::Feature(1), Dim::D2), 0);
        assert_eq!(f2.stored_len(StateKey::Feature(2), Dim::D2), 1);
        assert_eq!(f2.stored_len(StateKey::Feature(3), Dim::D2), 2);
        assert_eq!(f2.stored_len(StateKey::Pose(1), Dim::D2), 3);
        let f3 = FrameDescriptor::Features3 {
            origin: 1,
            x_axis: 2,
            plane: 3,
        };
        assert_eq!(f3.stored_len(StateKey::Feature(3), Dim::D3), 2);
        assert_eq!(FrameDescriptor::Pose(4).stored_len(StateKey::Pose(4), Dim::D3), 0);
        assert!(f3.validate(Dim::D2).is_err());
        assert!(f2.validate(Dim::D2).is_ok());
    }

    #[test]
    fn key_order_puts_poses_first() {
        assert!(StateKey::Pose(100) < StateKey::Feature(0));
        assert!(StateKey::Feature(1) < StateKey::Feature(2));
    }
}
