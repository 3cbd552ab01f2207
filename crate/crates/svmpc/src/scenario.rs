//! Scenario files: the self-describing JSON documents that pin a benchmark
//! run — model bounds, obstacles, goal, horizons, grid, and cost weights.

use crate::dynamics::Dubins4d;
use crate::grid::{Axis, Grid, GridError};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

/// Signed distance reported in obstacle-free scenarios. Large enough that
/// every state is safe, finite so value fields stay finite.
pub const FREE_SPACE_DISTANCE: f64 = 1e6;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("io error reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema version {0}, expected {SCHEMA_VERSION}")]
    SchemaVersion(u32),
    #[error("model kind {0:?} is not supported")]
    UnknownModel(String),
    #[error("control bound {index}: lo {lo} must be strictly below hi {hi}")]
    BadControlBounds { index: usize, lo: f64, hi: f64 },
    #[error("state bound {index}: lo {lo} must be strictly below hi {hi}")]
    BadStateBounds { index: usize, lo: f64, hi: f64 },
    #[error("obstacle {index} has non-positive radius {radius}")]
    BadObstacleRadius { index: usize, radius: f64 },
    #[error("obstacle {index} is not contained in the spatial box")]
    ObstacleOutsideBox { index: usize },
    #[error("goal lies inside obstacle {index}")]
    GoalInsideObstacle { index: usize },
    #[error("goal lies outside the spatial box")]
    GoalOutsideBox,
    #[error("task horizon {t} is not an integral multiple of dt {dt}")]
    NonIntegralHorizon { t: f64, dt: f64 },
    #[error("dt must be positive, got {0}")]
    BadDt(f64),
    #[error("task horizon must be positive, got {0}")]
    BadHorizon(f64),
    #[error("grid must have {expected} axes, got {got}")]
    GridDims { expected: usize, got: usize },
    #[error("grid axis {axis} box [{glo}, {ghi}] is smaller than the simulation box [{slo}, {shi}]")]
    GridSmallerThanBox { axis: usize, glo: f64, ghi: f64, slo: f64, shi: f64 },
    #[error("grid axis {axis} periodicity does not match the model (expected periodic = {expected})")]
    GridPeriodicity { axis: usize, expected: bool },
    #[error("control regularization weight must be non-negative, got {0}")]
    BadControlReg(f64),
    #[error("goal radius must be positive, got {0}")]
    BadGoalRadius(f64),
    #[error("invalid grid: {0}")]
    Grid(#[from] GridError),
}

/// A circular obstacle in the x-y plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Obstacle {
    /// Signed distance from a point to this obstacle: positive outside,
    /// negative inside, zero on the boundary.
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt() - self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: String,
    pub control_lo: Vec<f64>,
    pub control_hi: Vec<f64>,
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
}

/// A benchmark scenario. All knobs of a run live here so outputs are
/// reproducible from the file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema: u32,
    pub name: String,
    pub model: ModelSpec,
    pub obstacles: Vec<Obstacle>,
    pub goal: Goal,
    /// Task horizon in seconds; the closed loop runs `task_horizon / dt` steps.
    pub task_horizon: f64,
    pub dt: f64,
    pub grid: Vec<Axis>,
    /// Control regularization weight added to the solver's running cost.
    pub control_reg: f64,
    /// Goal-reached threshold on planar distance, in meters.
    pub goal_radius: f64,
}

impl Scenario {
    /// The stock Dubins benchmark: three obstacles, goal in the upper-right
    /// quadrant, CI-sized grid.
    pub fn dubins_default() -> Self {
        Scenario {
            schema: SCHEMA_VERSION,
            name: "dubins-default".to_string(),
            model: ModelSpec {
                kind: "dubins4d".to_string(),
                control_lo: vec![-2.0, -1.0],
                control_hi: vec![2.0, 1.0],
                state_lo: vec![-4.0, -4.0, -PI, 0.1],
                state_hi: vec![4.0, 4.0, PI, 3.0],
            },
            obstacles: vec![
                Obstacle { cx: -1.2, cy: 0.8, radius: 0.6 },
                Obstacle { cx: 0.3, cy: -0.5, radius: 0.6 },
                Obstacle { cx: 1.5, cy: 1.2, radius: 0.6 },
            ],
            goal: Goal { x: 2.5, y: 2.5 },
            task_horizon: 2.0,
            dt: 0.01,
            grid: vec![
                Axis::new(-4.0, 4.0, 41),
                Axis::new(-4.0, 4.0, 41),
                Axis::periodic(-PI, PI, 41),
                Axis::new(0.1, 3.0, 21),
            ],
            control_reg: 1e-3,
            goal_radius: 0.2,
        }
    }

    /// Same scenario with the paper-scale 50x50x50x30 grid.
    pub fn with_paper_scale_grid(mut self) -> Self {
        let counts = [50usize, 50, 50, 30];
        for (ax, &c) in self.grid.iter_mut().zip(&counts) {
            ax.count = c;
        }
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        let scenario: Scenario = serde_json::from_str(&text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema != SCHEMA_VERSION {
            return Err(ScenarioError::SchemaVersion(self.schema));
        }
        if self.model.kind != "dubins4d" {
            return Err(ScenarioError::UnknownModel(self.model.kind.clone()));
        }
        for (i, (lo, hi)) in self.model.control_lo.iter().zip(&self.model.control_hi).enumerate() {
            if !(lo < hi) {
                return Err(ScenarioError::BadControlBounds { index: i, lo: *lo, hi: *hi });
            }
        }
        for (i, (lo, hi)) in self.model.state_lo.iter().zip(&self.model.state_hi).enumerate() {
            if !(lo < hi) {
                return Err(ScenarioError::BadStateBounds { index: i, lo: *lo, hi: *hi });
            }
        }
        let (xlo, xhi) = (self.model.state_lo[0], self.model.state_hi[0]);
        let (ylo, yhi) = (self.model.state_lo[1], self.model.state_hi[1]);
        for (i, ob) in self.obstacles.iter().enumerate() {
            if ob.radius <= 0.0 {
                return Err(ScenarioError::BadObstacleRadius { index: i, radius: ob.radius });
            }
            if ob.cx - ob.radius < xlo
                || ob.cx + ob.radius > xhi
                || ob.cy - ob.radius < ylo
                || ob.cy + ob.radius > yhi
            {
                return Err(ScenarioError::ObstacleOutsideBox { index: i });
            }
            if ob.signed_distance(self.goal.x, self.goal.y) <= 0.0 {
                return Err(ScenarioError::GoalInsideObstacle { index: i });
            }
        }
        if self.goal.x < xlo || self.goal.x > xhi || self.goal.y < ylo || self.goal.y > yhi {
            return Err(ScenarioError::GoalOutsideBox);
        }
        if self.dt <= 0.0 {
            return Err(ScenarioError::BadDt(self.dt));
        }
        if self.task_horizon <= 0.0 {
            return Err(ScenarioError::BadHorizon(self.task_horizon));
        }
        let k = (self.task_horizon / self.dt).round();
        if k < 1.0 || (k * self.dt - self.task_horizon).abs() > 1e-9 * self.task_horizon.max(1.0) {
            return Err(ScenarioError::NonIntegralHorizon { t: self.task_horizon, dt: self.dt });
        }
        let n = self.model.state_lo.len();
        if self.grid.len() != n {
            return Err(ScenarioError::GridDims { expected: n, got: self.grid.len() });
        }
        let model = self.build_model_unchecked();
        use crate::dynamics::Dynamics;
        for (i, ax) in self.grid.iter().enumerate() {
            let expected = model.periodic_dims().contains(&i);
            if ax.periodic != expected {
                return Err(ScenarioError::GridPeriodicity { axis: i, expected });
            }
            if !ax.periodic && (ax.lo > self.model.state_lo[i] || ax.hi < self.model.state_hi[i]) {
                return Err(ScenarioError::GridSmallerThanBox {
                    axis: i,
                    glo: ax.lo,
                    ghi: ax.hi,
                    slo: self.model.state_lo[i],
                    shi: self.model.state_hi[i],
                });
            }
        }
        Grid::new(self.grid.clone())?;
        if self.control_reg < 0.0 {
            return Err(ScenarioError::BadControlReg(self.control_reg));
        }
        if self.goal_radius <= 0.0 {
            return Err(ScenarioError::BadGoalRadius(self.goal_radius));
        }
        Ok(())
    }

    /// Number of closed-loop steps, `task_horizon / dt`.
    pub fn task_steps(&self) -> usize {
        (self.task_horizon / self.dt).round() as usize
    }

    fn build_model_unchecked(&self) -> Dubins4d {
        Dubins4d::new(
            [self.model.control_lo[0], self.model.control_lo[1]],
            [self.model.control_hi[0], self.model.control_hi[1]],
            [
                self.model.state_lo[0],
                self.model.state_lo[1],
                self.model.state_lo[2],
                self.model.state_lo[3],
            ],
            [
                self.model.state_hi[0],
                self.model.state_hi[1],
                self.model.state_hi[2],
                self.model.state_hi[3],
            ],
        )
    }

    pub fn build_model(&self) -> Dubins4d {
        self.build_model_unchecked()
    }

    pub fn build_grid(&self) -> Result<Grid, GridError> {
        Grid::new(self.grid.clone())
    }

    /// Signed distance in the x-y plane to the union of obstacles: positive
    /// outside, negative inside. Overlapping obstacles take the minimum of
    /// the per-obstacle distances.
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.signed_distance(x, y))
            .fold(FREE_SPACE_DISTANCE, f64::min)
    }

    /// Gradient of [`Self::signed_distance`] with respect to `(x, y)`: the
    /// unit vector pointing away from the nearest obstacle center. Zero when
    /// obstacle-free or exactly at a center.
    pub fn signed_distance_gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let mut best = FREE_SPACE_DISTANCE;
        let mut grad = (0.0, 0.0);
        for o in &self.obstacles {
            let d = o.signed_distance(x, y);
            if d < best {
                best = d;
                let norm = ((x - o.cx).powi(2) + (y - o.cy).powi(2)).sqrt();
                grad = if norm > 1e-12 {
                    ((x - o.cx) / norm, (y - o.cy) / norm)
                } else {
                    (0.0, 0.0)
                };
            }
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_validates() {
        let s = Scenario::dubins_default();
        s.validate().unwrap();
        assert_eq!(s.task_steps(), 200);
        let p = s.clone().with_paper_scale_grid();
        p.validate().unwrap();
        assert_eq!(p.grid.iter().map(|a| a.count).collect::<Vec<_>>(), vec![50, 50, 50, 30]);
    }

    #[test]
    fn json_round_trip() {
        let s = Scenario::dubins_default();
        let text = serde_json::to_string(&s).unwrap();
        let back: Scenario = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn rejects_goal_inside_obstacle() {
        let mut s = Scenario::dubins_default();
        s.goal = Goal { x: -1.2, y: 0.8 };
        assert!(matches!(s.validate(), Err(ScenarioError::GoalInsideObstacle { index: 0 })));
    }

    #[test]
    fn rejects_non_integral_horizon() {
        let mut s = Scenario::dubins_default();
        s.task_horizon = 2.005;
        assert!(matches!(s.validate(), Err(ScenarioError::NonIntegralHorizon { .. })));
    }

    #[test]
    fn rejects_grid_smaller_than_box() {
        let mut s = Scenario::dubins_default();
        s.grid[0] = Axis::new(-3.0, 4.0, 41);
        assert!(matches!(s.validate(), Err(ScenarioError::GridSmallerThanBox { axis: 0, .. })));
    }

    #[test]
    fn rejects_wrong_schema_and_model() {
        let mut s = Scenario::dubins_default();
        s.schema = 2;
        assert!(matches!(s.validate(), Err(ScenarioError::SchemaVersion(2))));
        let mut s = Scenario::dubins_default();
        s.model.kind = "unicycle".to_string();
        assert!(matches!(s.validate(), Err(ScenarioError::UnknownModel(_))));
    }

    #[test]
    fn signed_distance_geometry() {
        let mut s = Scenario::dubins_default();
        s.obstacles = vec![Obstacle { cx: 0.0, cy: 0.0, radius: 1.0 }];
        assert!((s.signed_distance(2.0, 0.0) - 1.0).abs() < 1e-12);
        assert!((s.signed_distance(0.0, 0.0) + 1.0).abs() < 1e-12);

        s.obstacles = vec![
            Obstacle { cx: 0.0, cy: 0.0, radius: 1.0 },
            Obstacle { cx: 3.0, cy: 0.0, radius: 1.0 },
        ];
        assert!((s.signed_distance(1.5, 0.0) - 0.5).abs() < 1e-12);

        s.obstacles.clear();
        assert_eq!(s.signed_distance(0.0, 0.0), FREE_SPACE_DISTANCE);
        assert_eq!(s.signed_distance_gradient(0.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn distance_gradient_is_unit_outward() {
        let mut s = Scenario::dubins_default();
        s.obstacles = vec![Obstacle { cx: 1.0, cy: 0.0, radius: 0.5 }];
        let (gx, gy) = s.signed_distance_gradient(3.0, 0.0);
        assert!((gx - 1.0).abs() < 1e-12 && gy.abs() < 1e-12);
        assert_eq!(s.signed_distance_gradient(1.0, 0.0), (0.0, 0.0));
    }
}
