use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::policy::ChunkPolicy;
use super::ContextDemos;
use crate::error::{Error, Result};
use crate::nets::{ActionTrajectory, IoShape, NfeCounter};

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Point,
    pub radius: f64,
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Distance from `p` to the segment `a–b`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return dist(p, a);
    }
    let s = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + s * dx, a[1] + s * dy])
}

impl Obstacle {
    /// True when any segment of the polyline comes within `radius` of the
    /// center (touching counts).
    pub fn hits(&self, path: &[Point]) -> bool {
        match path {
            [] => false,
            [p] => dist(*p, self.center) <= self.radius,
            _ => path
                .windows(2)
                .any(|w| point_segment_distance(self.center, w[0], w[1]) <= self.radius),
        }
    }
}

/// Collision test for a planar waypoint chunk.
pub fn collision_check(traj: &ActionTrajectory<f64>, obstacle: &Obstacle) -> Result<bool> {
    if traj.action_dim != 2 {
        return Err(Error::InvalidArgument(format!(
            "collision check needs 2-D waypoints, got {}",
            traj.action_dim
        )));
    }
    let pts: Vec<Point> = (0..traj.horizon)
        .map(|h| {
            let w = traj.waypoint(h);
            [w[0], w[1]]
        })
        .collect();
    Ok(obstacle.hits(&pts))
}

/// Reach from `start` to `goal` around a disc sitting on the straight line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObstacleTask {
    pub start: Point,
    pub goal: Point,
    pub center: Point,
    pub radius: f64,
    /// Minimum clearance of the expert arcs beyond the radius.
    pub margin: f64,
    /// Extra lateral amplitude drawn uniformly from `[0, jitter]` per demo.
    pub jitter: f64,
    /// Waypoint intervals along one full expert path.
    pub path_steps: usize,
    pub demos_per_mode: usize,
    /// Path indices at which training contexts are taken; `path_steps` itself
    /// gives a context that holds at the goal.
    pub context_steps: Vec<usize>,
    pub horizon: usize,
    pub obs_steps: usize,
    /// Waypoints executed per chunk.
    pub exec_steps: usize,
    /// Step budget of one rollout.
    pub max_steps: usize,
    pub goal_tolerance: f64,
    /// Standard deviation of Gaussian noise added to executed waypoints.
    pub waypoint_noise: f64,
}

impl Default for ObstacleTask {
    fn default() -> Self {
        Self {
            start: [0.0, 0.0],
            goal: [0.0, 2.0],
            center: [0.0, 1.0],
            radius: 0.3,
            margin: 0.1,
            jitter: 0.05,
            path_steps: 24,
            demos_per_mode: 20,
            context_steps: vec![0, 4, 8, 12, 16, 20, 24],
            horizon: 16,
            obs_steps: 2,
            exec_steps: 8,
            max_steps: 48,
            goal_tolerance: 0.05,
            waypoint_noise: 0.0,
        }
    }
}

impl ObstacleTask {
    pub const ACTION_DIM: usize = 2;

    pub fn obstacle(&self) -> Obstacle {
        Obstacle {
            center: self.center,
            radius: self.radius,
        }
    }

    pub fn shape(&self) -> IoShape {
        IoShape {
            action_dim: Self::ACTION_DIM,
            horizon: self.horizon,
            state_dim: 2,
            obs_steps: self.obs_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.radius > 0.0 && self.margin > 0.0 && self.jitter >= 0.0) {
            return bad("obstacle radius and margin must be positive, jitter non-negative".into());
        }
        if dist(self.start, self.goal) <= 0.0 {
            return bad("obstacle start and goal coincide".into());
        }
        if self.path_steps < 2 || self.demos_per_mode == 0 || self.context_steps.is_empty() {
            return bad("obstacle task needs path_steps ≥ 2, demos and contexts".into());
        }
        if let Some(&k) = self.context_steps.iter().find(|&&k| k > self.path_steps) {
            return bad(format!("context step {k} is beyond the path ({})", self.path_steps));
        }
        if self.horizon < self.obs_steps || self.obs_steps == 0 {
            return bad("obstacle horizon must cover the observation window".into());
        }
        if self.exec_steps == 0 || self.exec_steps > self.horizon {
            return bad(format!(
                "exec_steps must lie in 1..={}, got {}",
                self.horizon, self.exec_steps
            ));
        }
        if self.max_steps == 0 || !(self.goal_tolerance > 0.0) || self.waypoint_noise < 0.0 {
            return bad("max_steps and goal_tolerance must be positive".into());
        }
        Ok(())
    }

    /// Unit normal to the start–goal line; positive amplitudes go this way.
    fn normal(&self) -> Point {
        let (dx, dy) = (self.goal[0] - self.start[0], self.goal[1] - self.start[1]);
        let l = dx.hypot(dy);
        [dy / l, -dx / l]
    }

    /// Half-sine arc with signed lateral amplitude, `path_steps + 1` points.
    pub fn arc(&self, amplitude: f64) -> Vec<Point> {
        let n = self.normal();
        (0..=self.path_steps)
            .map(|i| {
                let s = i as f64 / self.path_steps as f64;
                let lat = amplitude * (std::f64::consts::PI * s).sin();
                [
                    self.start[0] + s * (self.goal[0] - self.start[0]) + lat * n[0],
                    self.start[1] + s * (self.goal[1] - self.start[1]) + lat * n[1],
                ]
            })
            .collect()
    }

    /// Observation window ending at path index `k` (earlier indices clamp to 0).
    pub fn window(&self, path: &[Point], k: usize) -> Vec<Point> {
        (0..self.obs_steps)
            .map(|j| path[(k + j + 1).saturating_sub(self.obs_steps)])
            .collect()
    }

    /// Chunk aligned with the window: row `obs_steps − 1` is the waypoint
    /// after `path[k]`; indices past the goal repeat the goal.
    pub fn chunk(&self, path: &[Point], k: usize) -> Vec<f64> {
        let last = path.len() - 1;
        let base = (k + 2) as isize - self.obs_steps as isize;
        (0..self.horizon)
            .flat_map(|r| {
                let idx = (base + r as isize).clamp(0, last as isize) as usize;
                path[idx]
            })
            .collect()
    }

    /// Expert paths, `demos_per_mode` per side; mode 0 passes on the
    /// negative side of the normal.
    pub fn expert_paths(&self, seed: u64) -> Result<Vec<(usize, Vec<Point>)>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obstacle = self.obstacle();
        let mut out = Vec::new();
        for mode in 0..2 {
            let sign = if mode == 0 { -1.0 } else { 1.0 };
            for _ in 0..self.demos_per_mode {
                let a = self.radius + self.margin + rng.random_range(0.0..=self.jitter);
                let path = self.arc(sign * a);
                if obstacle.hits(&path) || dist(*path.last().unwrap(), self.goal) > self.goal_tolerance {
                    return Err(Error::InvalidArgument(format!(
                        "expert arc with amplitude {a} is infeasible for this geometry"
                    )));
                }
                out.push((mode, path));
            }
        }
        Ok(out)
    }
}

/// Contexts: one per context step, split by side once the path has left the
/// start (where both sides share the observation).
pub fn gen_obstacle_demos(task: &ObstacleTask, seed: u64) -> Result<Vec<ContextDemos>> {
    let paths = task.expert_paths(seed)?;
    let mut out = Vec::new();
    for &k in &task.context_steps {
        let groups: Vec<Vec<usize>> = if k == 0 {
            vec![vec![0, 1]]
        } else {
            vec![vec![0], vec![1]]
        };
        for modes in groups {
            let members: Vec<&(usize, Vec<Point>)> = paths.iter().filter(|(m, _)| modes.contains(m)).collect();
            let mut states = vec![vec![0.0; 2]; task.obs_steps];
            for (_, p) in &members {
                for (s, w) in states.iter_mut().zip(task.window(p, k)) {
                    s[0] += w[0] / members.len() as f64;
                    s[1] += w[1] / members.len() as f64;
                }
            }
            let demos: Vec<Vec<f64>> = members.iter().map(|(_, p)| task.chunk(p, k)).collect();
            let labels: Vec<usize> = members.iter().map(|(m, _)| *m).collect();
            let centers = modes
                .iter()
                .map(|&m| {
                    let rows: Vec<&Vec<f64>> = demos.iter().zip(&labels).filter(|(_, &l)| l == m).map(|(d, _)| d).collect();
                    let mut c = vec![0.0; rows[0].len()];
                    for r in &rows {
                        for (ci, v) in c.iter_mut().zip(r.iter()) {
                            *ci += v / rows.len() as f64;
                        }
                    }
                    c
                })
                .collect();
            let labels = labels
                .iter()
                .map(|l| modes.iter().position(|m| m == l).unwrap())
                .collect();
            out.push(ContextDemos {
                id: out.len(),
                states,
                demos,
                modes: labels,
                centers,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutResult {
    /// Start position followed by every executed waypoint.
    pub path: Vec<Point>,
    pub collision: bool,
    pub success: bool,
    pub chunks: usize,
    pub nfe: u64,
}

/// Closed-loop execution: observe the last `obs_steps` positions, plan a
/// chunk, execute `exec_steps` waypoints starting at the row aligned with the
/// current step, repeat until the goal or the step budget is reached.
pub fn receding_rollout<P: ChunkPolicy + ?Sized>(
    policy: &P,
    task: &ObstacleTask,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutResult> {
    task.validate()?;
    let nfe = NfeCounter::new();
    let first = task.obs_steps - 1;
    let per_chunk = task.exec_steps.min(task.horizon - first);
    let mut path = vec![task.start];
    let mut chunks = 0;
    let mut steps = 0;
    while steps < task.max_steps {
        let k = path.len() - 1;
        let window: Vec<f64> = task.window(&path, k).into_iter().flatten().collect();
        let chunk = policy.plan(&window, rng, &nfe)?;
        chunks += 1;
        for r in first..first + per_chunk {
            if steps == task.max_steps {
                break;
            }
            let mut p = [chunk[2 * r], chunk[2 * r + 1]];
            if task.waypoint_noise > 0.0 {
                for v in &mut p {
                    let e: f64 = StandardNormal.sample(rng);
                    *v += task.waypoint_noise * e;
                }
            }
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::InvalidArgument("policy produced a non-finite waypoint".into()));
            }
            path.push(p);
            steps += 1;
        }
        if dist(*path.last().unwrap(), task.goal) <= task.goal_tolerance {
            break;
        }
    }
    let collision = task.obstacle().hits(&path);
    let success = !collision && dist(*path.last().unwrap(), task.goal) <= task.goal_tolerance;
    Ok(RolloutResult {
        path,
        collision,
        success,
        chunks,
        nfe: nfe.get(),
    })
}
