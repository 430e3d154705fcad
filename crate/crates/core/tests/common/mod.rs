//! Shared test oracles, kept independent of the library's implementations:
//! a brute-force BFS playability checker, a central finite-difference
//! gradient checker, and random grid generators.

use std::collections::VecDeque;
use std::path::PathBuf;

use rand::Rng;

use tilegan::level::{parse_level, LevelGrid, TileId};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn load_fixtures() -> Vec<LevelGrid> {
    (0..5)
        .map(|i| {
            let path = fixture_dir().join(format!("zelda_lvl{i}.txt"));
            let text = std::fs::read_to_string(&path)
                .unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
            parse_level(&text).unwrap()
        })
        .collect()
}

// ============================================================
// BFS playability oracle
// ============================================================

/// Brute-force re-derivation of the seven playability verdicts, built on a
/// plain breadth-first flood fill instead of A*.
pub fn bfs_verdicts(grid: &LevelGrid) -> [bool; 7] {
    let (h, w) = (grid.height(), grid.width());
    let mut avatars = Vec::new();
    let mut keys = Vec::new();
    let mut doors = Vec::new();
    let mut enemies = 0u32;
    let mut empties = 0u32;
    for r in 0..h {
        for c in 0..w {
            match grid.get(r, c) {
                TileId::Avatar => avatars.push((r, c)),
                TileId::Key => keys.push((r, c)),
                TileId::Door => doors.push((r, c)),
                TileId::Enemy1 | TileId::Enemy2 | TileId::Enemy3 => enemies += 1,
                TileId::Empty => empties += 1,
                TileId::Wall => {}
            }
        }
    }
    let one_avatar = avatars.len() == 1;
    let one_key = keys.len() == 1;
    let one_door = doors.len() == 1;
    let density_ok = enemies == 0
        || (f64::from(enemies) / f64::from(enemies + empties)) < 0.6;

    let mut border = true;
    for c in 0..w {
        border &= grid.get(0, c) == TileId::Wall && grid.get(h - 1, c) == TileId::Wall;
    }
    for r in 0..h {
        border &= grid.get(r, 0) == TileId::Wall && grid.get(r, w - 1) == TileId::Wall;
    }

    let (mut key_ok, mut door_ok) = (false, false);
    if one_avatar && one_key && one_door {
        let reach = bfs_flood(grid, avatars[0]);
        key_ok = reach[keys[0].0 * w + keys[0].1];
        door_ok = reach[doors[0].0 * w + doors[0].1];
    }
    [
        one_avatar, one_key, one_door, density_ok, key_ok, door_ok, border,
    ]
}

pub fn bfs_playable(grid: &LevelGrid) -> bool {
    bfs_verdicts(grid).iter().all(|&v| v)
}

fn bfs_flood(grid: &LevelGrid, start: (usize, usize)) -> Vec<bool> {
    let (h, w) = (grid.height(), grid.width());
    let mut seen = vec![false; h * w];
    if grid.get(start.0, start.1) == TileId::Wall {
        return seen;
    }
    let mut queue = VecDeque::new();
    seen[start.0 * w + start.1] = true;
    queue.push_back(start);
    while let Some((r, c)) = queue.pop_front() {
        let neighbors = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        for (nr, nc) in neighbors {
            if nr < h && nc < w && !seen[nr * w + nc] && grid.get(nr, nc) != TileId::Wall {
                seen[nr * w + nc] = true;
                queue.push_back((nr, nc));
            }
        }
    }
    seen
}

/// Shortest-path length in cells (inclusive of both endpoints) by BFS.
pub fn bfs_path_len(grid: &LevelGrid, from: (usize, usize), to: (usize, usize)) -> Option<usize> {
    let (h, w) = (grid.height(), grid.width());
    if grid.get(from.0, from.1) == TileId::Wall || grid.get(to.0, to.1) == TileId::Wall {
        return None;
    }
    let mut dist = vec![usize::MAX; h * w];
    let mut queue = VecDeque::new();
    dist[from.0 * w + from.1] = 1;
    queue.push_back(from);
    while let Some((r, c)) = queue.pop_front() {
        if (r, c) == to {
            return Some(dist[r * w + c]);
        }
        let d = dist[r * w + c];
        let neighbors = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        for (nr, nc) in neighbors {
            if nr < h
                && nc < w
                && dist[nr * w + nc] == usize::MAX
                && grid.get(nr, nc) != TileId::Wall
            {
                dist[nr * w + nc] = d + 1;
                queue.push_back((nr, nc));
            }
        }
    }
    None
}

// ============================================================
// Random grids
// ============================================================

/// Every cell drawn uniformly from the eight tile kinds.
pub fn uniform_grid(rng: &mut impl Rng, h: usize, w: usize) -> LevelGrid {
    let cells: Vec<TileId> = (0..h * w)
        .map(|_| TileId::from_index(rng.gen_range(0..8)).unwrap())
        .collect();
    LevelGrid::new(h, w, cells).unwrap()
}

/// A bordered grid with random interior walls/enemies and (usually) one
/// avatar, key, and door, so reachability verdicts vary.
pub fn structured_grid(rng: &mut impl Rng, h: usize, w: usize) -> LevelGrid {
    let mut grid = LevelGrid::filled(h, w, TileId::Wall).unwrap();
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let roll: f64 = rng.gen();
            let tile = if roll < 0.62 {
                TileId::Empty
            } else if roll < 0.87 {
                TileId::Wall
            } else {
                TileId::from_index(4 + rng.gen_range(0..3)).unwrap()
            };
            grid.set(r, c, tile);
        }
    }
    let mut place = |tile: TileId, rng: &mut dyn rand::RngCore| {
        let r = rng.gen_range(1..h - 1);
        let c = rng.gen_range(1..w - 1);
        grid.set(r, c, tile);
    };
    // Occasionally skip or duplicate an object so count verdicts vary too.
    if rng.gen_bool(0.9) {
        place(TileId::Avatar, rng);
    }
    if rng.gen_bool(0.9) {
        place(TileId::Key, rng);
    }
    if rng.gen_bool(0.9) {
        place(TileId::Door, rng);
    }
    if rng.gen_bool(0.1) {
        place(TileId::Avatar, rng);
    }
    grid
}

// ============================================================
// Finite-difference gradient checking
// ============================================================

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_REL_TOL_BN: f64 = 1e-3;

/// Compares analytic gradients against central finite differences.
///
/// `f` evaluates the scalar function from scratch on the given inputs. For
/// every checked component i of every input tensor t, requires
/// `|analytic - fd| / max(|analytic|, |fd|) < rel_tol` where
/// `|analytic| > 1e-6`, and `|fd| < 1e-4` where the analytic gradient is
/// (near) zero — a missing backward rule fails loudly. `samples` limits how
/// many components per tensor are checked (`None` checks all).
pub fn check_gradients(
    inputs: &[Vec<f64>],
    analytic: &[Vec<f64>],
    f: &dyn Fn(&[Vec<f64>]) -> f64,
    rel_tol: f64,
    samples: Option<usize>,
    rng: &mut impl Rng,
    label: &str,
) {
    assert_eq!(inputs.len(), analytic.len(), "{label}: grad count");
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    for t in 0..inputs.len() {
        let len = inputs[t].len();
        let indices: Vec<usize> = match samples {
            Some(k) if k < len => (0..k).map(|_| rng.gen_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for i in indices {
            let orig = work[t][i];
            work[t][i] = orig + FD_STEP;
            let plus = f(&work);
            work[t][i] = orig - FD_STEP;
            let minus = f(&work);
            work[t][i] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[t][i];
            if a.abs() > 1e-6 {
                let rel = (a - fd).abs() / a.abs().max(fd.abs());
                assert!(
                    rel < rel_tol,
                    "{label}: tensor {t} component {i}: analytic {a:.3e} vs fd {fd:.3e} (rel {rel:.3e})"
                );
            } else {
                assert!(
                    fd.abs() < 1e-4,
                    "{label}: tensor {t} component {i}: analytic ~0 but fd {fd:.3e}"
                );
            }
        }
    }
}

/// Uniform values in [-1, -lo] U [lo, 1]: random but clear of relu kinks.
pub fn random_away_from_zero(rng: &mut impl Rng, n: usize, lo: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(lo..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}
