use std::collections::VecDeque;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Action, ActionSpace, EnvSnapshot, EnvSpec, Environment, Step};
use crate::{Error, Result};

/// Grid cell as `(row, column)`, row 0 at the top.
pub type Cell = (usize, usize);

/// Wall grid parsed from text: `#` wall, `.` free, `S` free start cell.
/// Blank lines are ignored; all rows must have equal width. When no `S`
/// is present every free cell is a start cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeLayout {
    rows: usize,
    cols: usize,
    walls: Vec<bool>,
    starts: Vec<Cell>,
}

impl MazeLayout {
    pub const BUILTIN: [&'static str; 3] = ["empty_5x5", "spiral_11x11", "nine_rooms"];

    pub fn builtin(name: &str) -> Option<Result<Self>> {
        let text = match name {
            "empty_5x5" => include_str!("layouts/empty_5x5.txt"),
            "spiral_11x11" => include_str!("layouts/spiral_11x11.txt"),
            "nine_rooms" => include_str!("layouts/nine_rooms.txt"),
            _ => return None,
        };
        Some(Self::parse(text))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(Error::Config("maze layout is empty".into()));
        }
        let cols = lines[0].chars().count();
        let mut walls = Vec::with_capacity(lines.len() * cols);
        let mut starts = Vec::new();
        for (r, line) in lines.iter().enumerate() {
            if line.chars().count() != cols {
                return Err(Error::Config(format!(
                    "maze row {r} has width {} (expected {cols})",
                    line.chars().count()
                )));
            }
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    'S' => {
                        walls.push(false);
                        starts.push((r, c));
                    }
                    other => {
                        return Err(Error::Config(format!(
                            "unexpected maze character {other:?} at ({r}, {c})"
                        )))
                    }
                }
            }
        }
        let mut layout = MazeLayout {
            rows: lines.len(),
            cols,
            walls,
            starts,
        };
        if layout.starts.is_empty() {
            layout.starts = layout.free_cells();
        }
        if layout.starts.is_empty() {
            return Err(Error::Config("maze has no free cells".into()));
        }
        Ok(layout)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_free(&self, r: isize, c: isize) -> bool {
        r >= 0
            && c >= 0
            && (r as usize) < self.rows
            && (c as usize) < self.cols
            && !self.walls[r as usize * self.cols + c as usize]
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| !self.walls[r * self.cols + c])
            .collect()
    }

    pub fn start_cells(&self) -> Vec<Cell> {
        self.starts.clone()
    }

    fn neighbours(&self, (r, c): Cell) -> impl Iterator<Item = Cell> + '_ {
        [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)]
            .into_iter()
            .map(move |(dr, dc)| (r as isize + dr, c as isize + dc))
            .filter(|&(nr, nc)| self.is_free(nr, nc))
            .map(|(nr, nc)| (nr as usize, nc as usize))
    }
}

/// BFS hop count on the 4-connected free grid; `Ok(None)` when unreachable.
pub fn shortest_path_distance(layout: &MazeLayout, from: Cell, to: Cell) -> Result<Option<usize>> {
    for cell in [from, to] {
        if !layout.is_free(cell.0 as isize, cell.1 as isize) {
            return Err(Error::Env(format!("cell {cell:?} is not free")));
        }
    }
    let mut dist = vec![usize::MAX; layout.rows * layout.cols];
    let mut queue = VecDeque::new();
    dist[from.0 * layout.cols + from.1] = 0;
    queue.push_back(from);
    while let Some(cell) = queue.pop_front() {
        let d = dist[cell.0 * layout.cols + cell.1];
        if cell == to {
            return Ok(Some(d));
        }
        for n in layout.neighbours(cell) {
            let slot = &mut dist[n.0 * layout.cols + n.1];
            if *slot == usize::MAX {
                *slot = d + 1;
                queue.push_back(n);
            }
        }
    }
    Ok(None)
}

/// BFS hop count from every cell to `target`, indexed `[row][col]`;
/// `None` for walls and unreachable cells.
pub fn distance_field(layout: &MazeLayout, target: Cell) -> Result<Vec<Vec<Option<usize>>>> {
    if !layout.is_free(target.0 as isize, target.1 as isize) {
        return Err(Error::Env(format!("cell {target:?} is not free")));
    }
    let mut dist = vec![vec![None; layout.cols]; layout.rows];
    let mut queue = VecDeque::new();
    dist[target.0][target.1] = Some(0);
    queue.push_back(target);
    while let Some(cell) = queue.pop_front() {
        let d = dist[cell.0][cell.1].expect("queued cells are labelled");
        for n in layout.neighbours(cell) {
            if dist[n.0][n.1].is_none() {
                dist[n.0][n.1] = Some(d + 1);
                queue.push_back(n);
            }
        }
    }
    Ok(dist)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMazeConfig {
    /// Side length of a grid cell, meters.
    pub cell_size: f64,
    /// Per-coordinate displacement bound per step, meters. At most `cell_size`.
    pub max_step: f64,
    pub max_episode_steps: usize,
    pub success_radius: f64,
    /// Uniform jitter (meters, per axis) around the start-cell centre.
    pub start_noise: f64,
}

impl Default for PointMazeConfig {
    fn default() -> Self {
        PointMazeConfig {
            cell_size: 1.0,
            max_step: 0.5,
            max_episode_steps: 50,
            success_radius: 0.5,
            start_noise: 0.0,
        }
    }
}

/// Continuous 2D point agent in a wall grid. Observation and goal are the
/// `(x, y)` position in meters, `x` along columns and `y` along rows.
///
/// Collision rule: the clipped displacement is applied one axis at a time
/// (x first); an axis move whose destination lies in a wall cell or outside
/// the grid is dropped, so the agent slides along walls.
#[derive(Debug, Clone)]
pub struct PointMaze {
    layout: MazeLayout,
    config: PointMazeConfig,
    spec: EnvSpec,
    position: [f64; 2],
    goal: Vec<f64>,
    steps: usize,
    done: bool,
}

impl PointMaze {
    pub fn new(layout: MazeLayout, config: PointMazeConfig) -> Result<Self> {
        if !(config.cell_size > 0.0)
            || !(config.max_step > 0.0)
            || config.max_step > config.cell_size
        {
            return Err(Error::Config("maze needs 0 < max_step <= cell_size".into()));
        }
        if config.max_episode_steps == 0 || !(config.success_radius >= 0.0) {
            return Err(Error::Config(
                "maze needs a positive horizon and non-negative success radius".into(),
            ));
        }
        if !(0.0..0.5).contains(&(config.start_noise / config.cell_size)) {
            return Err(Error::Config(
                "start_noise must be below half a cell".into(),
            ));
        }
        let spec = EnvSpec {
            observation_dim: 2,
            goal_dim: 2,
            action: ActionSpace::Continuous {
                bound: vec![config.max_step; 2],
            },
            success_radius: config.success_radius,
            max_episode_steps: config.max_episode_steps,
        };
        let centre = Self::centre_of(&config, layout.starts[0]);
        Ok(PointMaze {
            layout,
            config,
            spec,
            position: centre,
            goal: centre.to_vec(),
            steps: 0,
            done: true,
        })
    }

    pub fn layout(&self) -> &MazeLayout {
        &self.layout
    }

    pub fn config(&self) -> &PointMazeConfig {
        &self.config
    }

    pub fn position(&self) -> [f64; 2] {
        self.position
    }

    fn centre_of(config: &PointMazeConfig, (r, c): Cell) -> [f64; 2] {
        [
            (c as f64 + 0.5) * config.cell_size,
            (r as f64 + 0.5) * config.cell_size,
        ]
    }

    pub fn cell_centre(&self, cell: Cell) -> [f64; 2] {
        Self::centre_of(&self.config, cell)
    }

    /// Grid cell containing a point, `None` outside the grid.
    pub fn cell_of(&self, point: &[f64]) -> Option<Cell> {
        let c = (point[0] / self.config.cell_size).floor();
        let r = (point[1] / self.config.cell_size).floor();
        if r < 0.0 || c < 0.0 || r as usize >= self.layout.rows || c as usize >= self.layout.cols {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn in_free_space(&self, point: &[f64]) -> bool {
        point.len() == 2
            && point.iter().all(|v| v.is_finite())
            && self
                .cell_of(point)
                .is_some_and(|(r, c)| self.layout.is_free(r as isize, c as isize))
    }

    /// Places the agent at an arbitrary free position (scripted rollouts, tests).
    pub fn set_position(&mut self, position: [f64; 2]) -> Result<()> {
        if !self.in_free_space(&position) {
            return Err(Error::Env(format!(
                "position {position:?} is not in free space"
            )));
        }
        self.position = position;
        Ok(())
    }
}

impl Environment for PointMaze {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, goal: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        if !self.in_free_space(goal) {
            return Err(Error::Env(format!("goal {goal:?} is not in free space")));
        }
        let cell = self.layout.starts[rng.random_range(0..self.layout.starts.len())];
        let mut p = self.cell_centre(cell);
        if self.config.start_noise > 0.0 {
            for v in &mut p {
                *v += rng.random_range(-self.config.start_noise..self.config.start_noise);
            }
        }
        self.position = p;
        self.goal = goal.to_vec();
        self.steps = 0;
        self.done = false;
        Ok(p.to_vec())
    }

    fn step(&mut self, action: &Action, _rng: &mut dyn RngCore) -> Result<Step> {
        if self.done {
            return Err(Error::Env("step called on a finished episode".into()));
        }
        let a = match action {
            Action::Continuous(a) if a.len() == 2 && a.iter().all(|v| v.is_finite()) => a,
            other => return Err(Error::Env(format!("invalid maze action {other:?}"))),
        };
        let bound = self.config.max_step;
        for axis in 0..2 {
            let mut candidate = self.position;
            candidate[axis] += a[axis].clamp(-bound, bound);
            if self.in_free_space(&candidate) {
                self.position = candidate;
            }
        }
        self.steps += 1;
        self.done = self.steps >= self.spec.max_episode_steps;
        Ok(Step {
            observation: self.position.to_vec(),
            done: self.done,
        })
    }

    fn sample_goal(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let free = self.layout.free_cells();
        self.cell_centre(free[rng.random_range(0..free.len())])
            .to_vec()
    }

    fn goal(&self) -> &[f64] {
        &self.goal
    }

    fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            values: self.position.to_vec(),
            goal: self.goal.clone(),
            steps: self.steps,
            done: self.done,
        }
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()> {
        if snapshot.values.len() != 2 {
            return Err(Error::Env(
                "snapshot does not describe a maze position".into(),
            ));
        }
        self.position = [snapshot.values[0], snapshot.values[1]];
        self.goal = snapshot.goal.clone();
        self.steps = snapshot.steps;
        self.done = snapshot.done;
        Ok(())
    }
}
