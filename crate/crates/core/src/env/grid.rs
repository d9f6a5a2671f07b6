use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{one_hot, Environment, StepOutcome};
use crate::data::{Dataset, Trajectory};
use crate::error::{DmmError, Result};
use crate::train::argmax;

/// `(x, y)` grid coordinates.
pub type Cell = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridAction {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl GridAction {
    pub const ALL: [GridAction; 4] = [Self::Up, Self::Down, Self::Left, Self::Right];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| DmmError::invalid("GridAction", format!("invalid action index {i}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Deterministic gridworld with a step cost and a goal bonus.
#[derive(Clone, Debug, PartialEq)]
pub struct GridStitchEnv {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub goal: Cell,
    pub horizon: usize,
    pub step_reward: f64,
    pub goal_reward: f64,
    pos: Cell,
    t: usize,
}

impl Default for GridStitchEnv {
    fn default() -> Self {
        Self::new(7, 7, (0, 3), (6, 3), 40).expect("valid default geometry")
    }
}

impl GridStitchEnv {
    pub fn new(width: usize, height: usize, start: Cell, goal: Cell, horizon: usize) -> Result<Self> {
        let inside = |c: Cell| c.0 < width && c.1 < height;
        if width == 0 || height == 0 || !inside(start) || !inside(goal) || horizon == 0 {
            return Err(DmmError::invalid(
                "GridStitchEnv",
                "start and goal must lie inside a non-empty grid",
            ));
        }
        Ok(Self {
            width,
            height,
            start,
            goal,
            horizon,
            step_reward: -1.0,
            goal_reward: 10.0,
            pos: start,
            t: 0,
        })
    }

    pub fn midpoint(&self) -> Cell {
        (self.width / 2, self.height / 2)
    }

    pub fn position(&self) -> Cell {
        self.pos
    }

    pub fn elapsed(&self) -> usize {
        self.t
    }

    pub fn reset_to(&mut self, cell: Cell) -> Vec<f64> {
        self.pos = cell;
        self.t = 0;
        self.observe(cell)
    }

    pub fn observe(&self, c: Cell) -> Vec<f64> {
        let norm = |v: usize, n: usize| if n > 1 { v as f64 / (n - 1) as f64 } else { 0.0 };
        vec![norm(c.0, self.width), norm(c.1, self.height)]
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    fn cell_index(&self, c: Cell) -> usize {
        c.1 * self.width + c.0
    }

    fn move_cell(&self, c: Cell, a: GridAction) -> Cell {
        let (x, y) = c;
        match a {
            GridAction::Up => (x, (y + 1).min(self.height - 1)),
            GridAction::Down => (x, y.saturating_sub(1)),
            GridAction::Left => (x.saturating_sub(1), y),
            GridAction::Right => ((x + 1).min(self.width - 1), y),
        }
    }

    /// Pure transition from `cell` after `t` elapsed steps. Walls clamp movement.
    pub fn env_step(&self, cell: Cell, t: usize, action: usize) -> Result<(Cell, f64, bool)> {
        let a = GridAction::from_index(action)?;
        let next = self.move_cell(cell, a);
        if next == self.goal {
            return Ok((next, self.goal_reward, true));
        }
        Ok((next, self.step_reward, t + 1 >= self.horizon))
    }

    pub fn step_index(&mut self, action: usize) -> Result<StepOutcome> {
        let (next, reward, done) = self.env_step(self.pos, self.t, action)?;
        self.pos = next;
        self.t += 1;
        Ok(StepOutcome {
            observation: self.observe(next),
            reward,
            done,
        })
    }
}

impl Environment for GridStitchEnv {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        4
    }

    fn discrete(&self) -> bool {
        true
    }

    fn reset(&mut self) -> Vec<f64> {
        self.reset_to(self.start)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != 4 {
            return Err(DmmError::shape("GridStitchEnv::step", &[4], &[action.len()]));
        }
        self.step_index(argmax(action))
    }

    fn random_action(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        one_hot(rng.gen_range(0..4), 4)
    }
}

/// Finite-horizon optimal values and greedy actions.
#[derive(Clone, Debug)]
pub struct ValueTable {
    width: usize,
    /// `values[h][cell]`: best return with `h` steps left.
    values: Vec<Vec<f64>>,
    /// `policy[h][cell]`: lowest-index maximizing action with `h` steps left (`h >= 1`).
    policy: Vec<Vec<usize>>,
}

impl ValueTable {
    pub fn value(&self, steps_left: usize, c: Cell) -> f64 {
        self.values[steps_left][c.1 * self.width + c.0]
    }

    pub fn action(&self, steps_left: usize, c: Cell) -> usize {
        self.policy[steps_left][c.1 * self.width + c.0]
    }

    /// Optimal return of a fresh episode from `env.start`.
    pub fn optimal_return(&self, env: &GridStitchEnv) -> f64 {
        self.value(env.horizon, env.start)
    }

    /// Follows the greedy policy from the start; returns `(return, steps, cells visited)`.
    pub fn greedy_rollout(&self, env: &GridStitchEnv) -> (f64, usize, Vec<Cell>) {
        let mut e = env.clone();
        e.reset_to(env.start);
        let mut ret = 0.0;
        let mut cells = vec![env.start];
        loop {
            let a = self.action(env.horizon - e.elapsed(), e.position());
            let out = e.step_index(a).expect("policy actions are valid");
            ret += out.reward;
            cells.push(e.position());
            if out.done {
                return (ret, e.elapsed(), cells);
            }
        }
    }
}

/// Exact dynamic programming over the horizon.
pub fn value_iteration(env: &GridStitchEnv) -> ValueTable {
    let n = env.num_cells();
    let mut values = vec![vec![0.0; n]];
    let mut policy = vec![vec![0; n]];
    for h in 1..=env.horizon {
        let t = env.horizon - h;
        let mut v = vec![0.0; n];
        let mut p = vec![0; n];
        for y in 0..env.height {
            for x in 0..env.width {
                let c = (x, y);
                let mut best = f64::NEG_INFINITY;
                for a in GridAction::ALL {
                    let (next, r, done) = env.env_step(c, t, a.index()).expect("valid action");
                    let q = r + if done { 0.0 } else { values[h - 1][env.cell_index(next)] };
                    if q > best {
                        best = q;
                        p[env.cell_index(c)] = a.index();
                    }
                }
                v[env.cell_index(c)] = best;
            }
        }
        values.push(v);
        policy.push(p);
    }
    ValueTable {
        width: env.width,
        values,
        policy,
    }
}

/// Breadth-first shortest path length in moves, ignoring the horizon.
pub fn shortest_path_len(env: &GridStitchEnv, from: Cell, to: Cell) -> Option<usize> {
    let mut dist = vec![usize::MAX; env.num_cells()];
    let mut queue = std::collections::VecDeque::from([from]);
    dist[env.cell_index(from)] = 0;
    while let Some(c) = queue.pop_front() {
        if c == to {
            return Some(dist[env.cell_index(c)]);
        }
        for a in GridAction::ALL {
            let next = env.move_cell(c, a);
            if dist[env.cell_index(next)] == usize::MAX {
                dist[env.cell_index(next)] = dist[env.cell_index(c)] + 1;
                queue.push_back(next);
            }
        }
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StitchFamily {
    /// Start to midpoint, then a detour over a random higher row to the goal.
    A,
    /// Side start to midpoint, then straight to the goal.
    B,
}

/// Two suboptimal families meeting at the midpoint.
///
/// Family A walks from the start to the midpoint, then up to a random row
/// above it, across to the goal column and down to the goal. Family B starts at
/// `detour_start`, reaches the midpoint along a random monotone path and
/// goes straight to the goal. The optimum is A's prefix followed by B's suffix.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchDatasetSpec {
    pub n_per_family: usize,
    /// Probability of replacing the behaviour action by a uniform one.
    pub noise: f64,
    pub detour_start: Cell,
    pub seed: u64,
}

impl Default for StitchDatasetSpec {
    fn default() -> Self {
        Self {
            n_per_family: 200,
            noise: 0.1,
            detour_start: (1, 0),
            seed: 0,
        }
    }
}

fn toward(from: Cell, to: Cell, rng: &mut impl Rng) -> usize {
    let horizontal = if to.0 > from.0 {
        Some(GridAction::Right)
    } else if to.0 < from.0 {
        Some(GridAction::Left)
    } else {
        None
    };
    let vertical = if to.1 > from.1 {
        Some(GridAction::Up)
    } else if to.1 < from.1 {
        Some(GridAction::Down)
    } else {
        None
    };
    match (horizontal, vertical) {
        (Some(h), Some(v)) => {
            if rng.gen_bool(0.5) {
                h.index()
            } else {
                v.index()
            }
        }
        (Some(a), None) | (None, Some(a)) => a.index(),
        (None, None) => GridAction::Right.index(),
    }
}

fn behaviour_episode(
    env: &GridStitchEnv,
    start: Cell,
    waypoints: &[Cell],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Trajectory, Vec<Cell>)> {
    let mut e = env.clone();
    let mut obs = e.reset_to(start);
    let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
    let mut cells = vec![start];
    let mut next_wp = 0;
    loop {
        while next_wp < waypoints.len() && e.position() == waypoints[next_wp] {
            next_wp += 1;
        }
        let target = waypoints.get(next_wp).copied().unwrap_or(env.goal);
        let a = if rng.gen_bool(noise) {
            rng.gen_range(0..4)
        } else {
            toward(e.position(), target, rng)
        };
        let out = e.step_index(a)?;
        states.push(obs);
        actions.push(one_hot(a, 4));
        rewards.push(out.reward);
        cells.push(e.position());
        obs = out.observation;
        if out.done {
            break;
        }
    }
    Ok((Trajectory::from_rows(&states, &actions, &rewards)?, cells))
}

/// Generates both families, rejecting any episode that reaches the optimal return.
///
/// Fails when too many episodes must be rejected or when either family
/// never passes through the midpoint.
pub fn generate_stitch_dataset(env: &GridStitchEnv, spec: &StitchDatasetSpec) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(DmmError::invalid("generate_stitch_dataset", "noise must lie in [0, 1]"));
    }
    let optimum = value_iteration(env).optimal_return(env);
    let mid = env.midpoint();
    let top = env.height - 1;
    let families = [(StitchFamily::A, env.start), (StitchFamily::B, spec.detour_start)];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for (family, start) in families {
        if start.0 >= env.width || start.1 >= env.height {
            return Err(DmmError::invalid(
                "generate_stitch_dataset",
                "family start outside the grid",
            ));
        }
        let mut kept = 0;
        let mut attempts = 0;
        let mut visits_mid = false;
        while kept < spec.n_per_family {
            attempts += 1;
            if attempts > 20 * spec.n_per_family.max(1) {
                return Err(DmmError::invalid(
                    "generate_stitch_dataset",
                    format!("family {family:?} keeps reaching the optimal return"),
                ));
            }
            let waypoints = match family {
                StitchFamily::A => {
                    let row = if mid.1 < top {
                        rng.gen_range(mid.1 + 1..=top)
                    } else {
                        top
                    };
                    vec![mid, (mid.0, row), (env.goal.0, row), env.goal]
                }
                StitchFamily::B => vec![mid, env.goal],
            };
            let (traj, cells) = behaviour_episode(env, start, &waypoints, spec.noise, &mut rng)?;
            if traj.total_return() >= optimum {
                continue;
            }
            visits_mid |= cells.contains(&mid);
            out.push(traj);
            kept += 1;
        }
        if spec.n_per_family > 0 && !visits_mid {
            return Err(DmmError::invalid(
                "generate_stitch_dataset",
                format!("family {family:?} never visits the midpoint"),
            ));
        }
    }
    let ds = Dataset::new(out)?;
    if let Some(best) = ds.max_return() {
        if best >= optimum {
            return Err(DmmError::invalid("generate_stitch_dataset", "a trajectory is optimal"));
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn goal_step_and_walls() {
        let env = GridStitchEnv::default();
        let (next, r, done) = env.env_step((5, 3), 0, GridAction::Right.index()).unwrap();
        assert_eq!((next, r, done), ((6, 3), 10.0, true));
        let (next, r, done) = env.env_step((0, 3), 0, GridAction::Left.index()).unwrap();
        assert_eq!((next, r, done), ((0, 3), -1.0, false));
        assert!(env.env_step((0, 0), 0, 4).is_err());
        let (_, _, done) = env.env_step((0, 0), 39, 0).unwrap();
        assert!(done);
    }

    #[test]
    fn single_step_grid() {
        let env = GridStitchEnv::new(2, 1, (0, 0), (1, 0), 5).unwrap();
        let vt = value_iteration(&env);
        assert_eq!(vt.optimal_return(&env), 10.0);
        assert_eq!(vt.greedy_rollout(&env).1, 1);
    }

    #[test]
    fn default_optimum_and_greedy_path() {
        let env = GridStitchEnv::default();
        let vt = value_iteration(&env);
        assert_eq!(vt.optimal_return(&env), 5.0);
        let (ret, steps, cells) = vt.greedy_rollout(&env);
        assert_eq!((ret, steps), (5.0, 6));
        assert!(cells.contains(&env.midpoint()));
    }

    #[test]
    fn dataset_is_deterministic_and_suboptimal() {
        let env = GridStitchEnv::default();
        let spec = StitchDatasetSpec {
            n_per_family: 30,
            ..StitchDatasetSpec::default()
        };
        let a = generate_stitch_dataset(&env, &spec).unwrap();
        let b = generate_stitch_dataset(&env, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 60);
        assert!(a.max_return().unwrap() < 5.0);
    }
}
