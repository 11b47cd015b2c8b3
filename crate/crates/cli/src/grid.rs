//! Value grids for plotting two-dimensional bundles.

use std::collections::BTreeMap;

use nmlf::model::{ModeId, SwitchedSystem};
use nmlf::net::MlfBundle;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct Axis {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    /// Lattice coordinates `lo + (hi − lo)·k/resolution`, `k < resolution`.
    pub points: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct SwitchOutline {
    pub from: ModeId,
    pub to: ModeId,
    #[serde(rename = "box")]
    pub region: Vec<f64>,
}

/// Per-mode values on a lattice over the domain's bounding box. Rows follow
/// the first state variable, columns the second. Cells outside the domain
/// carry no value; `mask` marks membership in `D_V`.
#[derive(Debug)]
pub struct GridExport {
    pub axes: [Axis; 2],
    pub values: BTreeMap<ModeId, Vec<Vec<Option<f64>>>>,
    pub mask: Vec<Vec<bool>>,
    pub switches: Vec<SwitchOutline>,
    pub epsilon_b: f64,
    pub equilibrium: Vec<f64>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    resolution: usize,
    rows: &'a str,
    cols: &'a str,
    axes: &'a [Axis; 2],
    modes: BTreeMap<String, String>,
    mask: &'a str,
    switches: &'a [SwitchOutline],
    epsilon_b: f64,
    equilibrium: &'a [f64],
}

impl GridExport {
    pub fn build(bundle: &MlfBundle, sys: &SwitchedSystem, resolution: usize) -> GridExport {
        let bbox = sys.domain.shape.bounding_box();
        let axis = |k: usize| {
            let i = &bbox.0[k];
            Axis {
                name: sys.state_vars[k].clone(),
                lo: i.lo(),
                hi: i.hi(),
                points: (0..resolution)
                    .map(|j| i.lo() + i.width() * j as f64 / resolution as f64)
                    .collect(),
            }
        };
        let axes = [axis(0), axis(1)];
        let mut values = BTreeMap::new();
        for (m, net) in bundle.iter() {
            let rows = axes[0]
                .points
                .iter()
                .map(|a| {
                    axes[1]
                        .points
                        .iter()
                        .map(|b| {
                            let x = [*a, *b];
                            sys.domain.shape.contains(&x).then(|| net.value(&x))
                        })
                        .collect()
                })
                .collect();
            values.insert(m, rows);
        }
        let mask = axes[0]
            .points
            .iter()
            .map(|a| axes[1].points.iter().map(|b| sys.in_verification_region(&[*a, *b])).collect())
            .collect();
        let switches = sys
            .switches
            .iter()
            .map(|((i, j), b)| SwitchOutline {
                from: *i,
                to: *j,
                region: b.to_flat(),
            })
            .collect();
        GridExport {
            axes,
            values,
            mask,
            switches,
            epsilon_b: sys.domain.exclusion_radius,
            equilibrium: sys.equilibrium.clone(),
        }
    }

    fn csv<T>(rows: &[Vec<T>], cell: impl Fn(&T) -> String) -> String {
        let mut out = String::new();
        for row in rows {
            let line: Vec<String> = row.iter().map(&cell).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// File names and contents: `V_<mode>.csv`, `mask.csv`, `manifest.json`.
    pub fn files(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut modes = BTreeMap::new();
        for (m, rows) in &self.values {
            let name = format!("V_{m}.csv");
            out.push((name.clone(), Self::csv(rows, |v| v.map_or(String::new(), |v| v.to_string()))));
            modes.insert(m.to_string(), name);
        }
        out.push(("mask.csv".into(), Self::csv(&self.mask, |b| if *b { "1" } else { "0" }.into())));
        let manifest = Manifest {
            resolution: self.axes[0].points.len(),
            rows: &self.axes[0].name,
            cols: &self.axes[1].name,
            axes: &self.axes,
            modes,
            mask: "mask.csv",
            switches: &self.switches,
            epsilon_b: self.epsilon_b,
            equilibrium: &self.equilibrium,
        };
        out.push((
            "manifest.json".into(),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        ));
        out
    }
}
