use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Subsystem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MobilityModel {
    /// Nodes on a square grid, row-major, `spacing` metres apart.
    StaticGrid { spacing: f64 },
    /// Nodes evenly spaced on a circle of `radius` metres.
    StaticRing { radius: f64 },
    /// Explicit fixed coordinates.
    StaticPositions { positions: Vec<(f64, f64)> },
    RandomWaypoint {
        arena: (f64, f64),
        speed_min: f64,
        speed_max: f64,
    },
    /// Contacts replayed from a CSV file with columns `t,from,to,distance`.
    Trace { path: String },
}

impl MobilityModel {
    pub fn is_static(&self) -> bool {
        matches!(
            self,
            MobilityModel::StaticGrid { .. }
                | MobilityModel::StaticRing { .. }
                | MobilityModel::StaticPositions { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: u64,
    pub from: usize,
    pub to: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub target: (f64, f64),
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityState {
    pub model: MobilityModel,
    pub positions: Vec<(f64, f64)>,
    pub waypoints: Vec<Waypoint>,
    /// Distance moved by each node during the last step.
    pub speeds: Vec<f64>,
    pub tick: u64,
    pub seed: u64,
    /// Contact trace rows (trace model only), sorted by `t`.
    pub trace: Vec<TraceRow>,
}

fn uniform_point(arena: (f64, f64), rng: &mut impl Rng) -> (f64, f64) {
    (rng.random::<f64>() * arena.0, rng.random::<f64>() * arena.1)
}

fn new_waypoint(arena: (f64, f64), smin: f64, smax: f64, rng: &mut impl Rng) -> Waypoint {
    let target = uniform_point(arena, rng);
    let speed = if smax > smin {
        rng.random_range(smin..smax)
    } else {
        smin
    };
    Waypoint { target, speed }
}

pub fn load_contact_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Ingestion {
            row: 1,
            message: format!("{other:?}"),
        },
    })?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<TraceRow>().enumerate() {
        let row = rec.map_err(|e| Error::Ingestion {
            row: i + 2,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    rows.sort_by_key(|r| (r.t, r.from, r.to));
    Ok(rows)
}

impl MobilityState {
    pub fn new(model: MobilityModel, nodes: usize, seed: u64, trace: Vec<TraceRow>) -> Result<Self> {
        let positions: Vec<(f64, f64)> = match &model {
            MobilityModel::StaticGrid { spacing } => {
                let side = (nodes as f64).sqrt().ceil().max(1.0) as usize;
                (0..nodes)
                    .map(|i| ((i % side) as f64 * spacing, (i / side) as f64 * spacing))
                    .collect()
            }
            MobilityModel::StaticRing { radius } => (0..nodes)
                .map(|i| {
                    let a = 2.0 * std::f64::consts::PI * i as f64 / nodes as f64;
                    (radius * a.cos(), radius * a.sin())
                })
                .collect(),
            MobilityModel::StaticPositions { positions } => {
                if positions.len() != nodes {
                    return Err(Error::config(format!(
                        "{} positions given for {nodes} nodes",
                        positions.len()
                    )));
                }
                positions.clone()
            }
            MobilityModel::RandomWaypoint { arena, .. } => (0..nodes)
                .map(|i| uniform_point(*arena, &mut rng::stream(seed, Subsystem::Mobility, i as u64, 0)))
                .collect(),
            MobilityModel::Trace { .. } => vec![(0.0, 0.0); nodes],
        };
        let waypoints = match &model {
            MobilityModel::RandomWaypoint {
                arena,
                speed_min,
                speed_max,
            } => (0..nodes)
                .map(|i| {
                    let mut r = rng::stream(seed, Subsystem::Mobility, i as u64, 1);
                    new_waypoint(*arena, *speed_min, *speed_max, &mut r)
                })
                .collect(),
            _ => Vec::new(),
        };
        Ok(Self {
            model,
            positions,
            waypoints,
            speeds: vec![0.0; nodes],
            tick: 0,
            seed,
            trace,
        })
    }

    /// True once a trace-driven run has replayed every row.
    pub fn exhausted(&self) -> bool {
        matches!(self.model, MobilityModel::Trace { .. })
            && self.trace.last().is_none_or(|r| self.tick > r.t)
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.positions[i], self.positions[j]);
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    }
}

/// Advance every node by `dt` ticks of motion.
pub fn step_mobility(m: &MobilityState, dt: f64) -> Result<MobilityState> {
    if !(dt > 0.0) {
        return Err(Error::usage("mobility step needs dt > 0"));
    }
    let mut next = m.clone();
    next.tick += 1;
    if let MobilityModel::RandomWaypoint {
        arena,
        speed_min,
        speed_max,
    } = m.model
    {
        for i in 0..next.positions.len() {
            let (px, py) = next.positions[i];
            let wp = &next.waypoints[i];
            let (dx, dy) = (wp.target.0 - px, wp.target.1 - py);
            let dist = (dx * dx + dy * dy).sqrt();
            let step = wp.speed * dt;
            if dist <= step {
                next.positions[i] = wp.target;
                next.speeds[i] = dist;
                let mut r = rng::stream(m.seed, Subsystem::Mobility, i as u64, next.tick + 1);
                next.waypoints[i] = new_waypoint(arena, speed_min, speed_max, &mut r);
            } else {
                let f = step / dist;
                next.positions[i] = (px + dx * f, py + dy * f);
                next.speeds[i] = step;
            }
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rwp(nodes: usize, seed: u64) -> MobilityState {
        MobilityState::new(
            MobilityModel::RandomWaypoint {
                arena: (100.0, 50.0),
                speed_min: 0.5,
                speed_max: 2.0,
            },
            nodes,
            seed,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn static_positions_never_move() {
        let m = MobilityState::new(MobilityModel::StaticGrid { spacing: 10.0 }, 9, 1, vec![]).unwrap();
        let n = step_mobility(&m, 1.0).unwrap();
        assert_eq!(m.positions, n.positions);
        assert_eq!(m.positions[4], (10.0, 10.0));
    }

    #[test]
    fn waypoint_motion_is_exact_kinematics() {
        let mut m = rwp(1, 3);
        m.positions[0] = (0.0, 0.0);
        m.waypoints[0] = Waypoint {
            target: (3.0, 4.0),
            speed: 1.0,
        };
        let n = step_mobility(&m, 1.0).unwrap();
        let before = 5.0;
        let after = ((3.0 - n.positions[0].0).powi(2) + (4.0 - n.positions[0].1).powi(2)).sqrt();
        assert!((before - after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_waypoint_is_reproducible_and_bounded() {
        let mut a = rwp(5, 42);
        let mut b = rwp(5, 42);
        for _ in 0..500 {
            a = step_mobility(&a, 1.0).unwrap();
            b = step_mobility(&b, 1.0).unwrap();
            for &(x, y) in &a.positions {
                assert!((0.0..=100.0).contains(&x) && (0.0..=50.0).contains(&y));
            }
        }
        assert_eq!(a, b);
        assert_ne!(a.positions, rwp(5, 43).positions);
    }

    #[test]
    fn nonpositive_dt_is_rejected() {
        assert!(step_mobility(&rwp(2, 1), 0.0).is_err());
    }
}
