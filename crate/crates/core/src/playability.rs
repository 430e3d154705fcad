//! Static playability checks for Zelda-style tile levels.
//!
//! A level is playable when all seven heuristics hold: exactly one avatar,
//! key, and door; enemies below 60% of the walkable floor; the avatar can
//! reach both the key and the door; and a full wall border. Only walls block
//! movement — enemies and objects are walkable.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::level::{LevelGrid, TileId};

/// `(row, col)` grid coordinate.
pub type Cell = (usize, usize);

/// Verdicts for the seven heuristics plus witness paths for the two
/// reachability checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlayabilityReport {
    pub single_avatar: bool,
    pub single_key: bool,
    pub single_door: bool,
    pub enemy_density_ok: bool,
    pub key_reachable: bool,
    pub door_reachable: bool,
    pub wall_border: bool,
    /// Conjunction of all seven verdicts.
    pub playable: bool,
    pub key_path: Option<Vec<Cell>>,
    pub door_path: Option<Vec<Cell>>,
}

impl PlayabilityReport {
    /// The seven verdicts in heuristic order.
    pub fn verdicts(&self) -> [bool; 7] {
        [
            self.single_avatar,
            self.single_key,
            self.single_door,
            self.enemy_density_ok,
            self.key_reachable,
            self.door_reachable,
            self.wall_border,
        ]
    }

    /// Stable short names for the seven heuristics, matching `verdicts`.
    pub const HEURISTIC_NAMES: [&'static str; 7] = [
        "single_avatar",
        "single_key",
        "single_door",
        "enemy_density",
        "key_reachable",
        "door_reachable",
        "wall_border",
    ];
}

/// Enemies as a fraction of the walkable floor they stand on: enemy tiles
/// over enemy plus empty tiles. Zero enemies always passes; strict `< 0.6`.
fn enemy_density_ok(enemies: u32, empty: u32) -> bool {
    if enemies == 0 {
        return true;
    }
    f64::from(enemies) / f64::from(enemies + empty) < 0.6
}

/// Runs all seven heuristics. Always produces a report; never fails.
pub fn check_playability(grid: &LevelGrid) -> PlayabilityReport {
    let features = crate::level::extract_features(grid);
    let counts = features.counts;
    let single_avatar = counts[TileId::Avatar.index()] == 1;
    let single_key = counts[TileId::Key.index()] == 1;
    let single_door = counts[TileId::Door.index()] == 1;
    let density_ok = enemy_density_ok(
        counts[4] + counts[5] + counts[6],
        counts[TileId::Empty.index()],
    );

    let (h, w) = (grid.height(), grid.width());
    let mut wall_border = true;
    'border: for row in 0..h {
        for col in 0..w {
            if (row == 0 || row == h - 1 || col == 0 || col == w - 1)
                && grid.get(row, col) != TileId::Wall
            {
                wall_border = false;
                break 'border;
            }
        }
    }

    // Reachability is only well-posed with a unique avatar, key, and door.
    let (mut key_path, mut door_path) = (None, None);
    if single_avatar && single_key && single_door {
        let avatar = grid.positions_of(TileId::Avatar)[0];
        let key = grid.positions_of(TileId::Key)[0];
        let door = grid.positions_of(TileId::Door)[0];
        key_path = shortest_path(grid, avatar, key);
        door_path = shortest_path(grid, avatar, door);
    }
    let key_reachable = key_path.is_some();
    let door_reachable = door_path.is_some();

    let playable = single_avatar
        && single_key
        && single_door
        && density_ok
        && key_reachable
        && door_reachable
        && wall_border;
    PlayabilityReport {
        single_avatar,
        single_key,
        single_door,
        enemy_density_ok: density_ok,
        key_reachable,
        door_reachable,
        wall_border,
        playable,
        key_path,
        door_path,
    }
}

/// Playability reports for a whole set of levels.
pub fn check_many(grids: &[LevelGrid]) -> Vec<PlayabilityReport> {
    grids.iter().map(check_playability).collect()
}

/// A* shortest path over 4-connected moves with a Manhattan heuristic.
///
/// Walls are impassable; every other tile (including enemies, key, door) is
/// walkable. Returns the minimal-length cell sequence from `from` to `to`
/// inclusive, or `None` when unreachable. `from == to` yields a single-cell
/// path. The endpoints themselves may be any non-wall tile; a wall endpoint
/// is unreachable by definition.
pub fn shortest_path(grid: &LevelGrid, from: Cell, to: Cell) -> Option<Vec<Cell>> {
    let (h, w) = (grid.height(), grid.width());
    if from.0 >= h || from.1 >= w || to.0 >= h || to.1 >= w {
        return None;
    }
    if grid.get(from.0, from.1) == TileId::Wall || grid.get(to.0, to.1) == TileId::Wall {
        return None;
    }
    if from == to {
        return Some(vec![from]);
    }

    let idx = |c: Cell| c.0 * w + c.1;
    let manhattan =
        |c: Cell| (c.0.abs_diff(to.0) + c.1.abs_diff(to.1)) as u32;

    let mut g_score = vec![u32::MAX; h * w];
    let mut came_from = vec![usize::MAX; h * w];
    // Heap entries: Reverse((f, insertion ordinal, cell index)); the ordinal
    // makes pop order independent of heap internals.
    let mut open: BinaryHeap<Reverse<(u32, usize, usize)>> = BinaryHeap::new();
    let mut ordinal = 0usize;

    g_score[idx(from)] = 0;
    open.push(Reverse((manhattan(from), ordinal, idx(from))));

    while let Some(Reverse((_, _, current))) = open.pop() {
        let cur_cell = (current / w, current % w);
        if cur_cell == to {
            let mut path = vec![cur_cell];
            let mut at = current;
            while came_from[at] != usize::MAX {
                at = came_from[at];
                path.push((at / w, at % w));
            }
            path.reverse();
            return Some(path);
        }
        let g = g_score[current];
        let (r, c) = cur_cell;
        let neighbors = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        for (nr, nc) in neighbors {
            if nr >= h || nc >= w || grid.get(nr, nc) == TileId::Wall {
                continue;
            }
            let ni = nr * w + nc;
            let tentative = g + 1;
            if tentative < g_score[ni] {
                g_score[ni] = tentative;
                came_from[ni] = current;
                ordinal += 1;
                open.push(Reverse((tentative + manhattan((nr, nc)), ordinal, ni)));
            }
        }
    }
    None
}
