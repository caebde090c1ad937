//! Grid pursuit: pursuers (the agents) chase randomly moving evaders.
//!
//! Each step the pursuers move (blocked moves leave them in place), then
//! rewards are paid: every pursuer standing on an evader's cell together
//! with at least `capture_threshold - 1` other pursuers earns
//! `capture_reward` and the evaders there are captured; a pursuer alone on
//! an evader's cell earns `encounter_reward`. Captured evaders respawn on a
//! random free cell, the rest step to a uniformly chosen free neighbour or
//! stay put.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CacError, Result};
use crate::features::LinearFeatures;
use crate::mdp::{Environment, JointAction, Transition};
use crate::policy::{PolicyFeatures, Sharing};

pub type Cell = (usize, usize);

/// Stay, left, right, up, down.
pub const N_MOVES: usize = 5;
const MOVES: [(isize, isize); N_MOVES] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PursuitConfig {
    pub width: usize,
    pub height: usize,
    pub n_pursuers: usize,
    pub n_evaders: usize,
    pub obstacles: Vec<Cell>,
    pub capture_reward: f64,
    pub encounter_reward: f64,
    pub capture_threshold: usize,
    pub discount: f64,
}

impl Default for PursuitConfig {
    fn default() -> Self {
        Self {
            width: 15,
            height: 15,
            n_pursuers: 4,
            n_evaders: 2,
            obstacles: vec![],
            capture_reward: 5.0,
            encounter_reward: 0.1,
            capture_threshold: 2,
            discount: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PursuitState {
    pub pursuers: Vec<Cell>,
    pub evaders: Vec<Cell>,
}

#[derive(Debug, Clone)]
pub struct PursuitGrid {
    config: PursuitConfig,
    blocked: Vec<bool>,
    free_cells: Vec<Cell>,
    action_counts: Vec<usize>,
}

fn manhattan(a: Cell, b: Cell) -> usize {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
}

impl PursuitGrid {
    pub fn new(config: PursuitConfig) -> Result<Self> {
        let PursuitConfig {
            width,
            height,
            n_pursuers,
            n_evaders,
            ..
        } = config;
        if width == 0 || height == 0 || n_pursuers == 0 {
            return Err(CacError::InvalidModel(
                "pursuit grid needs positive width, height and pursuer count".into(),
            ));
        }
        if !(config.discount > 0.0 && config.discount < 1.0) {
            return Err(CacError::InvalidModel(format!(
                "discount must lie in (0, 1), got {}",
                config.discount
            )));
        }
        let mut blocked = vec![false; width * height];
        for &(x, y) in &config.obstacles {
            if x >= width || y >= height {
                return Err(CacError::InvalidModel(format!("obstacle ({x}, {y}) is off the grid")));
            }
            blocked[y * width + x] = true;
        }
        let free_cells: Vec<Cell> = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .filter(|&(x, y)| !blocked[y * width + x])
            .collect();
        if free_cells.is_empty() {
            return Err(CacError::InvalidModel("obstacles leave no free cell".into()));
        }
        if free_cells.len() < n_pursuers + n_evaders {
            return Err(CacError::InvalidModel(format!(
                "{} free cells cannot hold {n_pursuers} pursuers and {n_evaders} evaders",
                free_cells.len()
            )));
        }
        Ok(Self {
            action_counts: vec![N_MOVES; n_pursuers],
            config,
            blocked,
            free_cells,
        })
    }

    pub fn config(&self) -> &PursuitConfig {
        &self.config
    }

    pub fn is_free(&self, cell: Cell) -> bool {
        cell.0 < self.config.width
            && cell.1 < self.config.height
            && !self.blocked[cell.1 * self.config.width + cell.0]
    }

    /// Destination of `mv` from `cell`; blocked or off-grid moves stay.
    pub fn apply_move(&self, cell: Cell, mv: usize) -> Cell {
        let (dx, dy) = MOVES[mv];
        let x = cell.0 as isize + dx;
        let y = cell.1 as isize + dy;
        if x < 0 || y < 0 {
            return cell;
        }
        let next = (x as usize, y as usize);
        if self.is_free(next) {
            next
        } else {
            cell
        }
    }

    /// Pursuer positions after the joint move.
    pub fn moved_pursuers(&self, state: &PursuitState, joint_action: &JointAction) -> Vec<Cell> {
        state
            .pursuers
            .iter()
            .zip(joint_action.actions())
            .map(|(&c, &a)| self.apply_move(c, a))
            .collect()
    }

    /// Per-pursuer rewards for the given post-move pursuer positions, plus
    /// the indices of captured evaders.
    pub fn payoffs(&self, pursuers: &[Cell], evaders: &[Cell]) -> (Vec<f64>, Vec<usize>) {
        let mut rewards = vec![0.0; pursuers.len()];
        let mut captured = vec![];
        for (p, &cell) in pursuers.iter().enumerate() {
            if !evaders.contains(&cell) {
                continue;
            }
            let together = pursuers.iter().filter(|&&c| c == cell).count();
            rewards[p] = if together >= self.config.capture_threshold {
                self.config.capture_reward
            } else {
                self.config.encounter_reward
            };
        }
        for (e, cell) in evaders.iter().enumerate() {
            let together = pursuers.iter().filter(|&c| c == cell).count();
            if together >= self.config.capture_threshold {
                captured.push(e);
            }
        }
        (rewards, captured)
    }

    /// `(capturing pursuers, lone encountering pursuers)` after the move.
    pub fn event_counts(&self, state: &PursuitState, joint_action: &JointAction) -> (usize, usize) {
        let moved = self.moved_pursuers(state, joint_action);
        let (rewards, _) = self.payoffs(&moved, &state.evaders);
        let capturing = rewards.iter().filter(|&&r| r == self.config.capture_reward).count();
        let alone = rewards
            .iter()
            .filter(|&&r| r == self.config.encounter_reward && r != self.config.capture_reward)
            .count();
        (capturing, alone)
    }

    fn random_free_cell<R: Rng + ?Sized>(&self, rng: &mut R, avoid: &[Cell]) -> Cell {
        let options: Vec<Cell> = self
            .free_cells
            .iter()
            .copied()
            .filter(|c| !avoid.contains(c))
            .collect();
        let pool = if options.is_empty() { &self.free_cells } else { &options };
        pool[rng.random_range(0..pool.len())]
    }

    fn evader_step<R: Rng + ?Sized>(&self, cell: Cell, rng: &mut R) -> Cell {
        let options: Vec<Cell> = (0..N_MOVES)
            .map(|m| self.apply_move(cell, m))
            .enumerate()
            .filter(|&(m, c)| m == 0 || c != cell)
            .map(|(_, c)| c)
            .collect();
        options[rng.random_range(0..options.len())]
    }
}

impl Environment for PursuitGrid {
    type State = PursuitState;

    fn n_agents(&self) -> usize {
        self.config.n_pursuers
    }

    fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    fn discount(&self) -> f64 {
        self.config.discount
    }

    fn reward_bound(&self) -> f64 {
        self.config.capture_reward.abs().max(self.config.encounter_reward.abs())
    }

    /// Distinct uniformly random free cells for every entity.
    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> PursuitState {
        let mut taken: Vec<Cell> = Vec::new();
        for _ in 0..self.config.n_pursuers + self.config.n_evaders {
            let c = self.random_free_cell(rng, &taken);
            taken.push(c);
        }
        let evaders = taken.split_off(self.config.n_pursuers);
        PursuitState {
            pursuers: taken,
            evaders,
        }
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: &PursuitState,
        joint_action: &JointAction,
        rng: &mut R,
        _noise_rng: &mut R,
    ) -> Transition<PursuitState> {
        let pursuers = self.moved_pursuers(state, joint_action);
        let (rewards, captured) = self.payoffs(&pursuers, &state.evaders);
        let evaders = state
            .evaders
            .iter()
            .enumerate()
            .map(|(e, &cell)| {
                if captured.contains(&e) {
                    self.random_free_cell(rng, &pursuers)
                } else {
                    self.evader_step(cell, rng)
                }
            })
            .collect();
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
        Transition {
            state: state.clone(),
            joint_action: joint_action.clone(),
            next_state: PursuitState { pursuers, evaders },
            rewards,
            mean_reward,
        }
    }
}

/// Coarse 3x3 occupancy fractions of pursuers and evaders plus a constant,
/// scaled to unit norm. The last region of each group is left out since
/// the fractions of a group sum to one. Reward features are the fractions of capturing and
/// of lone encountering pursuers, in which the team reward is linear.
#[derive(Debug, Clone)]
pub struct PursuitValueFeatures {
    grid: PursuitGrid,
}

pub const COARSE: usize = 3;
const REGIONS: usize = COARSE * COARSE - 1;
pub const VALUE_DIM: usize = 1 + 2 * REGIONS;

impl PursuitValueFeatures {
    pub fn new(grid: &PursuitGrid) -> Self {
        Self { grid: grid.clone() }
    }

    fn region(&self, cell: Cell) -> usize {
        let c = &self.grid.config;
        let rx = (cell.0 * COARSE / c.width).min(COARSE - 1);
        let ry = (cell.1 * COARSE / c.height).min(COARSE - 1);
        ry * COARSE + rx
    }
}

impl LinearFeatures<PursuitState> for PursuitValueFeatures {
    fn value_dim(&self) -> usize {
        VALUE_DIM
    }

    fn reward_dim(&self) -> usize {
        2
    }

    fn value_features(&self, state: &PursuitState, out: &mut [f64]) {
        out.fill(0.0);
        let scale = 1.0 / 3f64.sqrt();
        out[0] = scale;
        let np = state.pursuers.len().max(1) as f64;
        let ne = state.evaders.len().max(1) as f64;
        for &c in &state.pursuers {
            let r = self.region(c);
            if r < REGIONS {
                out[1 + r] += scale / np;
            }
        }
        for &c in &state.evaders {
            let r = self.region(c);
            if r < REGIONS {
                out[1 + REGIONS + r] += scale / ne;
            }
        }
    }

    fn reward_features(&self, state: &PursuitState, joint_action: &JointAction, out: &mut [f64]) {
        let (capturing, alone) = self.grid.event_counts(state, joint_action);
        let n = self.grid.config.n_pursuers as f64;
        let scale = std::f64::consts::FRAC_1_SQRT_2;
        out[0] = scale * capturing as f64 / n;
        out[1] = scale * alone as f64 / n;
    }
}

/// Egocentric per-action features: the action indicator, the indicator
/// times the change in distance to the nearest evader, and the indicator
/// times the change in distance to the nearest other pursuer.
#[derive(Debug, Clone)]
pub struct PursuitPolicyFeatures {
    grid: PursuitGrid,
    sharing: Sharing,
}

pub const POLICY_BLOCK: usize = 3 * N_MOVES;

impl PursuitPolicyFeatures {
    pub fn new(grid: &PursuitGrid, sharing: Sharing) -> Self {
        Self {
            grid: grid.clone(),
            sharing,
        }
    }

    fn raw(&self, agent: usize, state: &PursuitState, action: usize, out: &mut [f64]) {
        out.fill(0.0);
        let me = state.pursuers[agent];
        let next = self.grid.apply_move(me, action);
        let nearest = |cells: &mut dyn Iterator<Item = Cell>, from: Cell| cells.map(|c| manhattan(c, from)).min();
        let progress = |targets: Vec<Cell>| -> f64 {
            match (
                nearest(&mut targets.iter().copied(), me),
                nearest(&mut targets.iter().copied(), next),
            ) {
                (Some(before), Some(after)) => before as f64 - after as f64,
                _ => 0.0,
            }
        };
        let to_evader = progress(state.evaders.clone());
        let others: Vec<Cell> = state
            .pursuers
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != agent)
            .map(|(_, &c)| c)
            .collect();
        let to_pursuer = progress(others);
        let scale = 1.0 / 3f64.sqrt();
        out[action] = scale;
        out[N_MOVES + action] = scale * to_evader;
        out[2 * N_MOVES + action] = scale * to_pursuer;
    }
}

impl PolicyFeatures<PursuitState> for PursuitPolicyFeatures {
    fn n_agents(&self) -> usize {
        self.grid.config.n_pursuers
    }

    fn n_actions(&self, _agent: usize) -> usize {
        N_MOVES
    }

    fn shared_dim(&self) -> usize {
        match self.sharing {
            Sharing::Personal => 0,
            _ => POLICY_BLOCK,
        }
    }

    fn personal_dim(&self, _agent: usize) -> usize {
        match self.sharing {
            Sharing::Full => 0,
            _ => POLICY_BLOCK,
        }
    }

    fn features(
        &self,
        agent: usize,
        state: &PursuitState,
        action: usize,
        shared_out: &mut [f64],
        personal_out: &mut [f64],
    ) {
        let mut raw = [0.0; POLICY_BLOCK];
        self.raw(agent, state, action, &mut raw);
        let scale = if self.sharing == Sharing::Split {
            std::f64::consts::FRAC_1_SQRT_2
        } else {
            1.0
        };
        for (dst, src) in shared_out.iter_mut().zip(&raw) {
            *dst = scale * src;
        }
        for (dst, src) in personal_out.iter_mut().zip(&raw) {
            *dst = scale * src;
        }
    }

    fn feature_bound(&self) -> f64 {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn grid(n_pursuers: usize, obstacles: Vec<Cell>) -> PursuitGrid {
        PursuitGrid::new(PursuitConfig {
            width: 5,
            height: 5,
            n_pursuers,
            n_evaders: 1,
            obstacles,
            ..PursuitConfig::default()
        })
        .unwrap()
    }

    fn rngs() -> (crate::rng::Rng, crate::rng::Rng) {
        (stream(0, Stream::Sampling), stream(0, Stream::Noise))
    }

    #[test]
    fn lone_pursuer_gets_encounter_reward() {
        let g = grid(1, vec![]);
        let s = PursuitState {
            pursuers: vec![(1, 2)],
            evaders: vec![(2, 2)],
        };
        let (mut r, mut n) = rngs();
        let t = g.step(&s, &JointAction::new(vec![2]), &mut r, &mut n);
        assert_eq!(t.rewards, vec![0.1]);
        assert_eq!(t.next_state.evaders.len(), 1);
        // the evader survived: it stayed or moved to a neighbour
        assert!(manhattan(t.next_state.evaders[0], (2, 2)) <= 1);
    }

    #[test]
    fn two_pursuers_capture() {
        let g = grid(2, vec![]);
        let s = PursuitState {
            pursuers: vec![(1, 2), (3, 2)],
            evaders: vec![(2, 2)],
        };
        let (mut r, mut n) = rngs();
        let t = g.step(&s, &JointAction::new(vec![2, 1]), &mut r, &mut n);
        assert_eq!(t.rewards, vec![5.0, 5.0]);
        assert_eq!(t.mean_reward, 5.0);
    }

    #[test]
    fn blocked_moves_are_no_ops() {
        let g = grid(1, vec![(2, 2)]);
        assert_eq!(g.apply_move((1, 2), 2), (1, 2));
        assert_eq!(g.apply_move((0, 0), 1), (0, 0));
        assert_eq!(g.apply_move((0, 0), 3), (0, 0));
        assert_eq!(g.apply_move((4, 4), 4), (4, 4));
        assert_eq!(g.apply_move((1, 1), 4), (1, 2));
    }

    #[test]
    fn invalid_layouts_rejected() {
        let all: Vec<Cell> = (0..2).flat_map(|y| (0..2).map(move |x| (x, y))).collect();
        let cfg = PursuitConfig {
            width: 2,
            height: 2,
            n_pursuers: 1,
            n_evaders: 1,
            obstacles: all,
            ..PursuitConfig::default()
        };
        assert!(PursuitGrid::new(cfg).is_err());
    }

    #[test]
    fn reward_features_reproduce_team_reward() {
        let g = grid(3, vec![(0, 4)]);
        let f = PursuitValueFeatures::new(&g);
        let lambda = [5.0 * 2f64.sqrt(), 0.1 * 2f64.sqrt()];
        let mut rng = stream(3, Stream::Environment);
        let (_, mut n) = rngs();
        let mut s = g.initial_state(&mut rng);
        for _ in 0..2000 {
            let a = JointAction::new((0..3).map(|_| rng.random_range(0..N_MOVES)).collect());
            let mut psi = [0.0; 2];
            f.reward_features(&s, &a, &mut psi);
            let t = g.step(&s, &a, &mut rng, &mut n);
            let pred = psi[0] * lambda[0] + psi[1] * lambda[1];
            assert!((pred - t.mean_reward).abs() < 1e-12);
            let mut phi = [0.0; VALUE_DIM];
            f.value_features(&s, &mut phi);
            assert!(phi.iter().map(|v| v * v).sum::<f64>() <= 1.0 + 1e-12);
            s = t.next_state;
        }
    }

    #[test]
    fn value_features_have_full_column_rank_on_random_states() {
        let g = PursuitGrid::new(PursuitConfig::default()).unwrap();
        let f = PursuitValueFeatures::new(&g);
        let mut rng = stream(8, Stream::Environment);
        let rows = 500;
        let mut m = nalgebra::DMatrix::zeros(rows, VALUE_DIM);
        for r in 0..rows {
            let mut phi = [0.0; VALUE_DIM];
            f.value_features(&g.initial_state(&mut rng), &mut phi);
            for (k, v) in phi.iter().enumerate() {
                m[(r, k)] = *v;
            }
        }
        assert!(crate::features::FeatureMatrix::Dense(m).has_full_column_rank());
    }

    #[test]
    fn policy_features_bounded() {
        let g = grid(3, vec![]);
        let pf = PursuitPolicyFeatures::new(&g, Sharing::Split);
        let mut rng = stream(4, Stream::Environment);
        for _ in 0..200 {
            let s = g.initial_state(&mut rng);
            for i in 0..3 {
                for a in 0..N_MOVES {
                    let mut fs = vec![0.0; pf.shared_dim()];
                    let mut fp = vec![0.0; pf.personal_dim(i)];
                    pf.features(i, &s, a, &mut fs, &mut fp);
                    let norm: f64 = fs.iter().chain(&fp).map(|v| v * v).sum::<f64>().sqrt();
                    assert!(norm <= pf.feature_bound() + 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn entities_conserved_and_off_obstacles(seed in 0u64..5_000, n_p in 1usize..5, n_e in 1usize..4) {
            let cfg = PursuitConfig {
                width: 6,
                height: 5,
                n_pursuers: n_p,
                n_evaders: n_e,
                obstacles: vec![(2, 2), (3, 2), (1, 4)],
                ..PursuitConfig::default()
            };
            let g = PursuitGrid::new(cfg).unwrap();
            let mut rng = stream(seed, Stream::Environment);
            let mut noise = stream(seed, Stream::Noise);
            let mut s = g.initial_state(&mut rng);
            for _ in 0..60 {
                let a = JointAction::new((0..n_p).map(|_| rng.random_range(0..N_MOVES)).collect());
                s = g.step(&s, &a, &mut rng, &mut noise).next_state;
                prop_assert_eq!(s.pursuers.len(), n_p);
                prop_assert_eq!(s.evaders.len(), n_e);
                prop_assert!(s.pursuers.iter().chain(&s.evaders).all(|&c| g.is_free(c)));
            }
        }
    }
}
