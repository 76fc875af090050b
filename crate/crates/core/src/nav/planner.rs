//! Grid search over a costmap. Edge weights are integers so A* and the
//! Dijkstra oracle agree exactly rather than to rounding.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::grid::Cell;
use crate::nav::costmap::{Costmap, INSCRIBED, LETHAL};

/// Straight and diagonal step lengths in hundredths of a cell (141 < 100·√2 keeps
/// the octile heuristic consistent).
const STRAIGHT: u64 = 100;
const DIAGONAL: u64 = 141;
/// Cost-free traversal weight per step; cell cost adds on top.
const BASE: u64 = INSCRIBED as u64 - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerParams {
    /// How strongly inflation cost lengthens an edge.
    pub cost_weight: u64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self { cost_weight: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub cells: Vec<Cell>,
    pub waypoints: Vec<Pose2D>,
    /// Discrete search cost.
    pub cost: u64,
}

impl Path {
    /// Polyline length through the waypoints, meters.
    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| w[0].distance_to(&w[1])).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }
}

const NEIGHBORS: [(i64, i64, u64); 8] = [
    (1, 0, STRAIGHT),
    (-1, 0, STRAIGHT),
    (0, 1, STRAIGHT),
    (0, -1, STRAIGHT),
    (1, 1, DIAGONAL),
    (1, -1, DIAGONAL),
    (-1, 1, DIAGONAL),
    (-1, -1, DIAGONAL),
];

fn octile(a: Cell, b: Cell) -> u64 {
    let dx = a.ix.abs_diff(b.ix);
    let dy = a.iy.abs_diff(b.iy);
    let (lo, hi) = (dx.min(dy), dx.max(dy));
    (STRAIGHT * (hi - lo) + DIAGONAL * lo) * BASE
}

/// Neighbors with edge weights; diagonals may not cut untraversable corners.
fn expand(cm: &Costmap, c: Cell, params: &PlannerParams, mut f: impl FnMut(Cell, u64)) {
    for (dx, dy, step) in NEIGHBORS {
        let n = Cell::new(c.ix + dx, c.iy + dy);
        if !cm.is_traversable(n) {
            continue;
        }
        if dx != 0 && dy != 0 && !(cm.is_traversable(Cell::new(c.ix + dx, c.iy)) && cm.is_traversable(Cell::new(c.ix, c.iy + dy))) {
            continue;
        }
        f(n, step * (BASE + params.cost_weight * cm.cost(n) as u64));
    }
}

fn check_endpoints(cm: &Costmap, start: Cell, goal: Cell) -> Result<()> {
    if !cm.contains(goal) {
        return Err(Error::InvalidGoal("goal lies outside the map".into()));
    }
    if !cm.is_traversable(goal) {
        return Err(Error::InvalidGoal(format!("goal cell ({}, {}) is lethal or unknown", goal.ix, goal.iy)));
    }
    if cm.cost(start) == LETHAL {
        return Err(Error::InvalidArgument("start lies on a lethal cell".into()));
    }
    Ok(())
}

fn search(cm: &Costmap, start: Cell, goal: Cell, params: &PlannerParams, heuristic: impl Fn(Cell) -> u64) -> Option<(u64, Vec<Cell>)> {
    let n = cm.width() * cm.height();
    let mut g = vec![u64::MAX; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let si = cm.index(start)?;
    let gi = cm.index(goal)?;
    g[si] = 0;
    let mut open = BinaryHeap::new();
    open.push(Reverse((heuristic(start), 0u64, si)));
    while let Some(Reverse((_, gc, i))) = open.pop() {
        if closed[i] || gc > g[i] {
            continue;
        }
        closed[i] = true;
        if i == gi {
            break;
        }
        expand(cm, cm.cell_of_index(i), params, |nc, w| {
            let j = cm.index(nc).expect("traversable cells are on the map");
            let cand = gc + w;
            if cand < g[j] {
                g[j] = cand;
                parent[j] = i;
                open.push(Reverse((cand + heuristic(nc), cand, j)));
            }
        });
    }
    if g[gi] == u64::MAX {
        return None;
    }
    let mut cells = vec![goal];
    let mut i = gi;
    while i != si {
        i = parent[i];
        cells.push(cm.cell_of_index(i));
    }
    cells.reverse();
    Some((g[gi], cells))
}

fn to_path(cm: &Costmap, cells: Vec<Cell>, cost: u64, goal: &Pose2D) -> Path {
    let mut pts: Vec<(f64, f64)> = cells.iter().map(|&c| cm.cell_center(c)).collect();
    if let Some(last) = pts.last_mut() {
        *last = (goal.x, goal.y);
    }
    let mut waypoints: Vec<Pose2D> = pts
        .windows(2)
        .map(|w| Pose2D::new(w[0].0, w[0].1, (w[1].1 - w[0].1).atan2(w[1].0 - w[0].0)))
        .collect();
    // The goal itself, not its cell center, ends the path.
    waypoints.push(*goal);
    Path { cells, waypoints, cost }
}

/// 8-connected A* with an octile heuristic.
pub fn plan_global(cm: &Costmap, start: &Pose2D, goal: &Pose2D, params: &PlannerParams) -> Result<Path> {
    let (s, g) = (cm.world_to_cell(start.x, start.y), cm.world_to_cell(goal.x, goal.y));
    check_endpoints(cm, s, g)?;
    let (cost, cells) = search(cm, s, g, params, |c| octile(c, g)).ok_or(Error::Unreachable)?;
    Ok(to_path(cm, cells, cost, goal))
}

/// Uninformed search; the optimality oracle for `plan_global`.
pub fn plan_dijkstra(cm: &Costmap, start: &Pose2D, goal: &Pose2D, params: &PlannerParams) -> Result<Path> {
    let (s, g) = (cm.world_to_cell(start.x, start.y), cm.world_to_cell(goal.x, goal.y));
    check_endpoints(cm, s, g)?;
    let (cost, cells) = search(cm, s, g, params, |_| 0).ok_or(Error::Unreachable)?;
    Ok(to_path(cm, cells, cost, goal))
}

/// Recomputes the discrete cost of a cell sequence (consistency check).
pub fn path_cost(cm: &Costmap, cells: &[Cell], params: &PlannerParams) -> u64 {
    cells
        .windows(2)
        .map(|w| {
            let step = if w[0].ix != w[1].ix && w[0].iy != w[1].iy { DIAGONAL } else { STRAIGHT };
            step * (BASE + params.cost_weight * cm.cost(w[1]) as u64)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CellState, TrinaryMap};
    use crate::nav::costmap::{build_costmap, CostmapParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> CostmapParams {
        CostmapParams {
            robot_radius: 0.03,
            padding: 0.0,
            inflation_radius: 0.15,
            cost_decay: 10.0,
            unknown_is_lethal: true,
        }
    }

    fn map(n: usize, cells: Vec<CellState>) -> TrinaryMap {
        TrinaryMap {
            width: n,
            height: n,
            resolution: 0.05,
            origin: Pose2D::identity(),
            cells,
        }
    }

    fn center(cm: &Costmap, c: Cell) -> Pose2D {
        let (x, y) = cm.cell_center(c);
        Pose2D::new(x, y, 0.0)
    }

    #[test]
    fn straight_corridor() {
        let n = 30;
        let cm = build_costmap(&map(n, vec![CellState::Free; n * n]), &CostmapParams { unknown_is_lethal: true, ..params() }).unwrap();
        let p = plan_global(&cm, &center(&cm, Cell::new(5, 15)), &center(&cm, Cell::new(25, 15)), &PlannerParams::default()).unwrap();
        assert_eq!(p.cells.len(), 21);
        assert!(p.cells.iter().all(|c| c.iy == 15));
        assert!((p.length() - 1.0).abs() < 1e-9);
        assert_eq!(p.cost, 20 * STRAIGHT * BASE);
    }

    #[test]
    fn walled_off_goal_is_unreachable_and_bad_goals_rejected() {
        let n = 30;
        let mut cells = vec![CellState::Free; n * n];
        for i in 18..=24 {
            for j in [18, 24] {
                cells[j * n + i] = CellState::Occupied;
                cells[i * n + j] = CellState::Occupied;
            }
        }
        cells[2 * n + 2] = CellState::Unknown;
        let cm = build_costmap(&map(n, cells), &params()).unwrap();
        let start = center(&cm, Cell::new(5, 5));
        assert!(matches!(plan_global(&cm, &start, &center(&cm, Cell::new(21, 21)), &PlannerParams::default()), Err(Error::Unreachable)));
        assert!(matches!(plan_global(&cm, &start, &center(&cm, Cell::new(2, 2)), &PlannerParams::default()), Err(Error::InvalidGoal(_))));
        assert!(matches!(plan_global(&cm, &start, &Pose2D::new(-5.0, 0.0, 0.0), &PlannerParams::default()), Err(Error::InvalidGoal(_))));
    }

    /// Random 50×50 maps: A* cost equals the Dijkstra oracle on every instance.
    pub(crate) fn random_instance(seed: u64) -> (Costmap, Pose2D, Pose2D) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 50;
        let density = rng.random_range(0.05..0.3);
        let cells: Vec<CellState> = (0..n * n)
            .map(|_| if rng.random_bool(density) { CellState::Occupied } else { CellState::Free })
            .collect();
        let cm = build_costmap(&map(n, cells), &params()).unwrap();
        let free: Vec<Cell> = (0..n * n).map(|i| cm.cell_of_index(i)).filter(|&c| cm.is_traversable(c)).collect();
        let a = free[rng.random_range(0..free.len())];
        let b = free[rng.random_range(0..free.len())];
        let (pa, pb) = (center(&cm, a), center(&cm, b));
        (cm, pa, pb)
    }

    #[test]
    fn astar_matches_dijkstra() {
        let mut solved = 0;
        for seed in 0..100 {
            let (cm, a, b) = random_instance(seed);
            let pp = PlannerParams::default();
            match (plan_global(&cm, &a, &b, &pp), plan_dijkstra(&cm, &a, &b, &pp)) {
                (Ok(x), Ok(y)) => {
                    assert_eq!(x.cost, y.cost, "seed {seed}");
                    assert_eq!(path_cost(&cm, &x.cells, &pp), x.cost);
                    assert!(x.cells.iter().all(|&c| cm.is_traversable(c)));
                    assert!(x.cells.windows(2).all(|w| w[0].ix.abs_diff(w[1].ix) <= 1 && w[0].iy.abs_diff(w[1].iy) <= 1));
                    solved += 1;
                }
                (Err(Error::Unreachable), Err(Error::Unreachable)) => {}
                other => panic!("seed {seed}: disagreement {other:?}"),
            }
        }
        assert!(solved > 50);
    }

    #[test]
    fn goal_equals_start() {
        let (cm, a, _) = random_instance(3);
        let p = plan_global(&cm, &a, &a, &PlannerParams::default()).unwrap();
        assert_eq!(p.cells.len(), 1);
        assert_eq!(p.cost, 0);
    }
}
