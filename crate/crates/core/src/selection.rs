//! SA view selection topologies and scanning orders.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Position = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanOrder {
    RowMajor,
    Snake,
}

/// How the two parallax directions of the `*-hv` kinds are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HvMode {
    /// Horizontal views followed by vertical views in one sequence.
    CombinedScan,
    /// Two sequences, scored independently and sum-fused.
    ScoreFusion,
}

/// Regular subgrid of the high-density topology: rows and columns
/// `offset, offset + stride, ...` that stay strictly inside the grid border
/// when `offset >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subgrid {
    pub offset: usize,
    pub stride: usize,
}

impl Default for Subgrid {
    fn default() -> Self {
        Subgrid { offset: 1, stride: 2 }
    }
}

impl Subgrid {
    fn indices(&self, len: usize) -> Vec<usize> {
        let stride = self.stride.max(1);
        if self.offset == 0 {
            return (0..len).step_by(stride).collect();
        }
        // Keep the outer border out of the subgrid.
        (self.offset..len.saturating_sub(1)).step_by(stride).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Topology {
    HighDensity { scan: ScanOrder, subgrid: Subgrid },
    MaxDisparity,
    MidDensityH,
    MidDensityV,
    MidDensityHV(HvMode),
    LowDensityH,
    LowDensityV,
    LowDensityHV(HvMode),
}

impl Topology {
    pub const NAMES: [&'static str; 11] = [
        "high-row",
        "high-snake",
        "corner",
        "mid-h",
        "mid-v",
        "mid-hv-scan",
        "mid-hv-fuse",
        "low-h",
        "low-v",
        "low-hv-scan",
        "low-hv-fuse",
    ];

    pub fn all() -> Vec<Topology> {
        Self::NAMES.iter().map(|n| n.parse().unwrap()).collect()
    }

    pub fn name(&self) -> &'static str {
        use HvMode::*;
        match self {
            Topology::HighDensity { scan: ScanOrder::RowMajor, .. } => "high-row",
            Topology::HighDensity { scan: ScanOrder::Snake, .. } => "high-snake",
            Topology::MaxDisparity => "corner",
            Topology::MidDensityH => "mid-h",
            Topology::MidDensityV => "mid-v",
            Topology::MidDensityHV(CombinedScan) => "mid-hv-scan",
            Topology::MidDensityHV(ScoreFusion) => "mid-hv-fuse",
            Topology::LowDensityH => "low-h",
            Topology::LowDensityV => "low-v",
            Topology::LowDensityHV(CombinedScan) => "low-hv-scan",
            Topology::LowDensityHV(ScoreFusion) => "low-hv-fuse",
        }
    }

    /// Number of independently scored sequences (2 for score fusion).
    pub fn branch_count(&self) -> usize {
        match self {
            Topology::MidDensityHV(HvMode::ScoreFusion) | Topology::LowDensityHV(HvMode::ScoreFusion) => 2,
            _ => 1,
        }
    }

    pub fn is_fusion(&self) -> bool {
        self.branch_count() == 2
    }

    fn needs_center(&self) -> bool {
        !matches!(self, Topology::HighDensity { .. } | Topology::MaxDisparity)
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use HvMode::*;
        Ok(match s {
            "high-row" => Topology::HighDensity {
                scan: ScanOrder::RowMajor,
                subgrid: Subgrid::default(),
            },
            "high-snake" => Topology::HighDensity {
                scan: ScanOrder::Snake,
                subgrid: Subgrid::default(),
            },
            "corner" => Topology::MaxDisparity,
            "mid-h" => Topology::MidDensityH,
            "mid-v" => Topology::MidDensityV,
            "mid-hv-scan" => Topology::MidDensityHV(CombinedScan),
            "mid-hv-fuse" => Topology::MidDensityHV(ScoreFusion),
            "low-h" => Topology::LowDensityH,
            "low-v" => Topology::LowDensityV,
            "low-hv-scan" => Topology::LowDensityHV(CombinedScan),
            "low-hv-fuse" => Topology::LowDensityHV(ScoreFusion),
            other => return Err(Error::UnknownTopology(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSequence {
    pub positions: Vec<Position>,
    pub label: String,
}

impl ViewSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Orders a rectangular set of rows × columns.
pub fn scan_grid(rows: &[usize], cols: &[usize], order: ScanOrder) -> Vec<Position> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for (i, &u) in rows.iter().enumerate() {
        if order == ScanOrder::Snake && i % 2 == 1 {
            out.extend(cols.iter().rev().map(|&v| (u, v)));
        } else {
            out.extend(cols.iter().map(|&v| (u, v)));
        }
    }
    out
}

/// Outer ring, clockwise from `(0, 0)`: top row, right column, bottom row,
/// left column.
fn ring(views_u: usize, views_v: usize) -> Vec<Position> {
    let (lu, lv) = (views_u - 1, views_v - 1);
    let mut out: Vec<Position> = (0..views_v).map(|v| (0, v)).collect();
    if views_u > 1 {
        out.extend((1..views_u).map(|u| (u, lv)));
        if views_v > 1 {
            out.extend((0..lv).rev().map(|v| (lu, v)));
            out.extend((1..lu).rev().map(|u| (u, 0)));
        }
    }
    out
}

pub fn select_views(
    topology: &Topology,
    views_u: usize,
    views_v: usize,
    valid_mask: &[bool],
) -> Result<Vec<ViewSequence>> {
    if views_u == 0 || views_v == 0 || valid_mask.len() != views_u * views_v {
        return Err(Error::shape(
            "select_views",
            format!("{views_u}x{views_v} grid"),
            format!("mask of {}", valid_mask.len()),
        ));
    }
    if topology.needs_center() && (views_u % 2 == 0 || views_v % 2 == 0) {
        return Err(Error::EvenGrid {
            topology: topology.name().into(),
            views_u,
            views_v,
        });
    }
    let valid = |&(u, v): &Position| valid_mask[u * views_v + v];
    let keep = |positions: Vec<Position>| -> Vec<Position> { positions.into_iter().filter(valid).collect() };
    let (cu, cv) = (views_u / 2, views_v / 2);
    let row: Vec<Position> = keep((0..views_v).map(|v| (cu, v)).collect());
    let col: Vec<Position> = keep((0..views_u).map(|u| (u, cv)).collect());
    let low = |line: &[Position]| -> Vec<Position> {
        match (line.first(), line.last()) {
            (Some(&first), Some(&last)) if first != last => {
                let center = (cu, cv);
                let mut out = vec![first];
                if valid(&center) {
                    out.push(center);
                }
                out.push(last);
                out
            }
            _ => line.to_vec(),
        }
    };
    let branches: Vec<Vec<Position>> = match topology {
        Topology::HighDensity { scan, subgrid } => {
            let rows = subgrid.indices(views_u);
            let cols = subgrid.indices(views_v);
            vec![keep(scan_grid(&rows, &cols, *scan))]
        }
        Topology::MaxDisparity => vec![keep(ring(views_u, views_v))],
        Topology::MidDensityH => vec![row],
        Topology::MidDensityV => vec![col],
        Topology::MidDensityHV(HvMode::CombinedScan) => vec![[row, col].concat()],
        Topology::MidDensityHV(HvMode::ScoreFusion) => vec![row, col],
        Topology::LowDensityH => vec![low(&row)],
        Topology::LowDensityV => vec![low(&col)],
        Topology::LowDensityHV(HvMode::CombinedScan) => vec![[low(&row), low(&col)].concat()],
        Topology::LowDensityHV(HvMode::ScoreFusion) => vec![low(&row), low(&col)],
    };
    if branches.iter().any(Vec::is_empty) {
        return Err(Error::EmptySelection(topology.name().into()));
    }
    let fused = branches.len() == 2;
    Ok(branches
        .into_iter()
        .enumerate()
        .map(|(i, positions)| ViewSequence {
            positions,
            label: match (fused, i) {
                (false, _) => topology.name().to_string(),
                (true, 0) => format!("{}/h", topology.name()),
                (true, _) => format!("{}/v", topology.name()),
            },
        })
        .collect())
}

/// Per-branch sequence lengths.
pub fn sequence_length(
    topology: &Topology,
    views_u: usize,
    views_v: usize,
    valid_mask: &[bool],
) -> Result<Vec<usize>> {
    Ok(select_views(topology, views_u, views_v, valid_mask)?
        .iter()
        .map(ViewSequence::len)
        .collect())
}
