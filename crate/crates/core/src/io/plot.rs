//! CSV exports for plotting and spreadsheets.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::num;
use crate::eval::MetricReport;
use crate::localmap::LocalMap;
use crate::state::StateKey;

/// One row per pose and feature with its position in the map frame and the
/// marginal standard deviation of each coordinate. Coordinates fixed by the
/// frame have deviation 0. When the information matrix is singular the
/// deviation fields are left empty.
pub fn map_plot_csv(map: &LocalMap) -> String {
    let dim = map.dim();
    let spatial = dim.spatial();
    let axes = ["x", "y", "z"];
    let mut s = String::from("kind,id");
    for a in &axes[..spatial] {
        let _ = write!(s, ",{a}");
    }
    for a in &axes[..spatial] {
        let _ = write!(s, ",sigma_{a}");
    }
    s.push('\n');

    let factor = map.info().cholesky().ok();
    let n = map.estimate().dim();
    let variance = |i: usize| -> f64 {
        let f = factor.as_ref().expect("checked by caller");
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        f.solve(&e)[i]
    };

    let keys: BTreeSet<StateKey> = map
        .estimate()
        .keys()
        .iter()
        .copied()
        .chain(map.frame().entities())
        .collect();
    for key in keys {
        let (kind, id) = match key {
            StateKey::Pose(i) => ("pose", i),
            StateKey::Feature(i) => ("feature", i),
        };
        let stored = map.estimate().get(key).unwrap_or(&[]);
        let offset = map.estimate().span(key).map_or(0, |(o, _)| o);
        let _ = write!(s, "{kind},{id}");
        for j in 0..spatial {
            let _ = write!(s, ",{}", num(stored.get(j).copied().unwrap_or(0.0)));
        }
        for j in 0..spatial {
            if j >= stored.len() {
                s.push_str(",0");
            } else if factor.is_some() {
                let _ = write!(s, ",{}", num(variance(offset + j).max(0.0).sqrt()));
            } else {
                s.push(',');
            }
        }
        s.push('\n');
    }
    s
}

/// Two-column `metric,value` table of the metrics that were computed.
pub fn metrics_csv(report: &MetricReport) -> String {
    let mut s = String::from("metric,value\n");
    for line in report.to_key_value().lines() {
        if let Some((k, v)) = line.split_once('=') {
            let _ = writeln!(s, "{k},{v}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::SparseSymMatrix;
    use crate::state::{Dim, FrameDescriptor, HeadingMode, StateVector};
    use nalgebra::DMatrix;

    fn parse_rows(csv: &str) -> Vec<Vec<String>> {
        csv.lines().skip(1).map(|l| l.split(',').map(str::to_owned).collect()).collect()
    }

    #[test]
    fn unit_information_gives_unit_sigmas() {
        let est = StateVector::from_entries([(StateKey::Pose(1), vec![1.0, 2.0, 0.5]), (StateKey::Feature(3), vec![4.0, 5.0])])
            .unwrap();
        let info = SparseSymMatrix::from_dense(&DMatrix::identity(5, 5));
        let m = LocalMap::new(Dim::D2, HeadingMode::Estimated, FrameDescriptor::Pose(0), est, info).unwrap();
        let csv = map_plot_csv(&m);
        assert!(csv.starts_with("kind,id,x,y,sigma_x,sigma_y\n"));
        let rows = parse_rows(&csv);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0][..2], ["pose", "0"]);
        assert_eq!(rows[0][4..], ["0", "0"]);
        for r in &rows[1..] {
            assert_eq!(r[4].parse::<f64>().unwrap(), 1.0);
            assert_eq!(r[5].parse::<f64>().unwrap(), 1.0);
        }
    }

    #[test]
    fn empty_map_has_header_only() {
        let f = FrameDescriptor::Features2 { origin: 1, x_axis: 2 };
        let est = StateVector::from_entries([(StateKey::Feature(2), vec![3.0])]).unwrap();
        let m = LocalMap::new(Dim::D2, HeadingMode::Estimated, f, est, SparseSymMatrix::from_dense(&DMatrix::from_element(1, 1, 4.0)))
            .unwrap();
        let rows = parse_rows(&map_plot_csv(&m));
        assert_eq!(rows[0], ["feature", "1", &num(0.0), &num(0.0), "0", "0"]);
        assert_eq!(rows[1][2].parse::<f64>().unwrap(), 3.0);
        assert_eq!(rows[1][4].parse::<f64>().unwrap(), 0.5);
        assert_eq!(rows[1][5], "0");

        let m = LocalMap::new(Dim::D3, HeadingMode::Estimated, FrameDescriptor::Pose(0), StateVector::new(), SparseSymMatrix::from_dense(&DMatrix::zeros(0, 0)))
            .unwrap();
        let csv = map_plot_csv(&m);
        assert_eq!(csv.lines().next().unwrap(), "kind,id,x,y,z,sigma_x,sigma_y,sigma_z");
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn sigmas_match_dense_inverse() {
        let est = StateVector::from_entries([(StateKey::Feature(1), vec![1.0, 2.0]), (StateKey::Feature(2), vec![3.0, 4.0])]).unwrap();
        let a = DMatrix::from_fn(4, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let info = &a * a.transpose() + DMatrix::identity(4, 4);
        let cov = info.clone().try_inverse().unwrap();
        let m = LocalMap::new(Dim::D2, HeadingMode::Estimated, FrameDescriptor::Pose(0), est, SparseSymMatrix::from_dense(&info)).unwrap();
        let rows = parse_rows(&map_plot_csv(&m));
        for (i, r) in rows[1..].iter().enumerate() {
            for j in 0..2 {
                let got: f64 = r[4 + j].parse().unwrap();
                assert!((got - cov[(2 * i + j, 2 * i + j)].sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_information_leaves_sigmas_empty() {
        let est = StateVector::from_entries([(StateKey::Feature(1), vec![1.0, 2.0])]).unwrap();
        let m = LocalMap::new(Dim::D2, HeadingMode::Estimated, FrameDescriptor::Pose(0), est, SparseSymMatrix::from_dense(&DMatrix::zeros(2, 2)))
            .unwrap();
        let rows = parse_rows(&map_plot_csv(&m));
        assert_eq!(rows[1][4..], ["", ""]);
    }

    #[test]
    fn metrics_table() {
        let r = MetricReport {
            chi2: Some(2.5),
            ..MetricReport::default()
        };
        assert_eq!(metrics_csv(&r), "metric,value\nchi2,2.5\n");
    }
}
