//! Canonical tile-grid level representation and codecs.
//!
//! Levels are plain ASCII text files in the GVGAI Zelda convention: one
//! character per tile, one line per row, using the eight-symbol alphabet
//! `w . + g 1 2 3 A`. A directory of `*.txt` files in this format is a
//! training corpus.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of distinct tile identities.
pub const TILE_COUNT: usize = 8;

/// The eight tile kinds of the Zelda grid, in identity order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum TileId {
    Wall = 0,
    Empty = 1,
    Key = 2,
    Door = 3,
    Enemy1 = 4,
    Enemy2 = 5,
    Enemy3 = 6,
    Avatar = 7,
}

impl TileId {
    pub const ALL: [TileId; TILE_COUNT] = [
        TileId::Wall,
        TileId::Empty,
        TileId::Key,
        TileId::Door,
        TileId::Enemy1,
        TileId::Enemy2,
        TileId::Enemy3,
        TileId::Avatar,
    ];

    /// Numeric identity in `[0, 7]`.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<TileId> {
        TileId::ALL.get(i).copied()
    }

    /// ASCII symbol for this tile.
    pub fn symbol(self) -> char {
        match self {
            TileId::Wall => 'w',
            TileId::Empty => '.',
            TileId::Key => '+',
            TileId::Door => 'g',
            TileId::Enemy1 => '1',
            TileId::Enemy2 => '2',
            TileId::Enemy3 => '3',
            TileId::Avatar => 'A',
        }
    }

    pub fn from_symbol(c: char) -> Option<TileId> {
        match c {
            'w' => Some(TileId::Wall),
            '.' => Some(TileId::Empty),
            '+' => Some(TileId::Key),
            'g' => Some(TileId::Door),
            '1' => Some(TileId::Enemy1),
            '2' => Some(TileId::Enemy2),
            '3' => Some(TileId::Enemy3),
            'A' => Some(TileId::Avatar),
            _ => None,
        }
    }

    /// True for the three enemy kinds.
    pub fn is_enemy(self) -> bool {
        matches!(self, TileId::Enemy1 | TileId::Enemy2 | TileId::Enemy3)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line} has length {got}, expected {expected}")]
    RaggedLines {
        line: usize,
        got: usize,
        expected: usize,
    },
    #[error("unknown symbol {symbol:?} at row {row}, col {col}")]
    UnknownSymbol { row: usize, col: usize, symbol: char },
    #[error("grid {height}x{width} is below the 3x3 minimum")]
    TooSmall { height: usize, width: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("cell data length {got} does not match {height}x{width}")]
    CellCountMismatch {
        height: usize,
        width: usize,
        got: usize,
    },
    #[error("grid {height}x{width} is below the 3x3 minimum")]
    TooSmall { height: usize, width: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("non-finite value in logits")]
    NonFiniteInput,
    #[error("logit data length {got} does not match 8x{height}x{width}")]
    LengthMismatch {
        height: usize,
        width: usize,
        got: usize,
    },
    #[error("grid {height}x{width} is below the 3x3 minimum")]
    TooSmall { height: usize, width: usize },
}

/// A rectangular level: row-major tile identities.
///
/// Levels are at least 3x3 so a wall border can enclose an interior cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LevelGrid {
    height: usize,
    width: usize,
    cells: Vec<TileId>,
}

impl LevelGrid {
    pub fn new(height: usize, width: usize, cells: Vec<TileId>) -> Result<LevelGrid, GridError> {
        if height < 3 || width < 3 {
            return Err(GridError::TooSmall { height, width });
        }
        if cells.len() != height * width {
            return Err(GridError::CellCountMismatch {
                height,
                width,
                got: cells.len(),
            });
        }
        Ok(LevelGrid {
            height,
            width,
            cells,
        })
    }

    /// Grid filled with a single tile kind.
    pub fn filled(height: usize, width: usize, tile: TileId) -> Result<LevelGrid, GridError> {
        LevelGrid::new(height, width, vec![tile; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[TileId] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> TileId {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, tile: TileId) {
        self.cells[row * self.width + col] = tile;
    }

    /// Positions of all cells holding `tile`, in row-major order.
    pub fn positions_of(&self, tile: TileId) -> Vec<(usize, usize)> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == tile)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }
}

/// Per-tile-kind occurrence counts; the conditioning input for the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureVector {
    pub counts: [u32; TILE_COUNT],
}

impl FeatureVector {
    /// Counts normalized by the cell total, for the network boundary.
    pub fn normalized(&self, height: usize, width: usize) -> [f64; TILE_COUNT] {
        let total = (height * width) as f64;
        let mut out = [0.0; TILE_COUNT];
        for (o, &c) in out.iter_mut().zip(self.counts.iter()) {
            *o = f64::from(c) / total;
        }
        out
    }
}

/// One-hot channel encoding of a grid: `[8 x height x width]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotLevel {
    pub height: usize,
    pub width: usize,
    /// Channel-major data, length `8 * height * width`, values in {0.0, 1.0}.
    pub data: Vec<f64>,
}

/// Parses an ASCII level into a grid.
///
/// Accepts an optional trailing newline; every line must have equal length
/// and draw only from the eight-symbol alphabet.
pub fn parse_level(text: &str) -> Result<LevelGrid, ParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let height = lines.len();
    let width = lines.first().map_or(0, |l| l.chars().count());
    for (row, line) in lines.iter().enumerate() {
        let got = line.chars().count();
        if got != width {
            return Err(ParseError::RaggedLines {
                line: row,
                got,
                expected: width,
            });
        }
    }
    if height < 3 || width < 3 {
        return Err(ParseError::TooSmall { height, width });
    }
    let mut cells = Vec::with_capacity(height * width);
    for (row, line) in lines.iter().enumerate() {
        for (col, c) in line.chars().enumerate() {
            match TileId::from_symbol(c) {
                Some(t) => cells.push(t),
                None => {
                    return Err(ParseError::UnknownSymbol {
                        row,
                        col,
                        symbol: c,
                    })
                }
            }
        }
    }
    Ok(LevelGrid {
        height,
        width,
        cells,
    })
}

/// Renders a grid back to its ASCII form: rows joined by `\n`, no trailing
/// newline. Inverse of [`parse_level`].
pub fn serialize_level(grid: &LevelGrid) -> String {
    let mut out = String::with_capacity(grid.height * (grid.width + 1));
    for row in 0..grid.height {
        if row > 0 {
            out.push('\n');
        }
        for col in 0..grid.width {
            out.push(grid.get(row, col).symbol());
        }
    }
    out
}

/// Expands a grid into its one-hot channel tensor.
pub fn encode_onehot(grid: &LevelGrid) -> OneHotLevel {
    let (h, w) = (grid.height, grid.width);
    let plane = h * w;
    let mut data = vec![0.0; TILE_COUNT * plane];
    for (i, &tile) in grid.cells.iter().enumerate() {
        data[tile.index() * plane + i] = 1.0;
    }
    OneHotLevel {
        height: h,
        width: w,
        data,
    }
}

/// Collapses channel logits `[8 x height x width]` to a grid by per-cell
/// argmax; ties break toward the lowest tile identity.
pub fn decode_onehot(logits: &[f64], height: usize, width: usize) -> Result<LevelGrid, DecodeError> {
    if height < 3 || width < 3 {
        return Err(DecodeError::TooSmall { height, width });
    }
    let plane = height * width;
    if logits.len() != TILE_COUNT * plane {
        return Err(DecodeError::LengthMismatch {
            height,
            width,
            got: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(DecodeError::NonFiniteInput);
    }
    let mut cells = Vec::with_capacity(plane);
    for pos in 0..plane {
        let mut best = 0usize;
        let mut best_v = logits[pos];
        for ch in 1..TILE_COUNT {
            let v = logits[ch * plane + pos];
            if v > best_v {
                best = ch;
                best_v = v;
            }
        }
        cells.push(TileId::from_index(best).unwrap());
    }
    Ok(LevelGrid {
        height,
        width,
        cells,
    })
}

/// Counts each tile kind in the grid.
pub fn extract_features(grid: &LevelGrid) -> FeatureVector {
    let mut counts = [0u32; TILE_COUNT];
    for &tile in grid.cells.iter() {
        counts[tile.index()] += 1;
    }
    FeatureVector { counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_symbol_map() {
        let grid = parse_level("www\nwAw\nwww").unwrap();
        assert_eq!(grid.height(), 3);
        assert_eq!(grid.width(), 3);
        let ids: Vec<usize> = grid.cells().iter().map(|t| t.index()).collect();
        assert_eq!(ids, vec![0, 0, 0, 0, 7, 0, 0, 0, 0]);
    }

    #[test]
    fn parse_all_wall() {
        let grid = parse_level("www\nwww\nwww").unwrap();
        assert!(grid.cells().iter().all(|&t| t == TileId::Wall));
    }

    #[test]
    fn parse_accepts_trailing_newline() {
        let a = parse_level("www\nwAw\nwww").unwrap();
        let b = parse_level("www\nwAw\nwww\n").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parse_rejects_ragged() {
        let err = parse_level("www\nww\nwww").unwrap_err();
        assert_eq!(
            err,
            ParseError::RaggedLines {
                line: 1,
                got: 2,
                expected: 3
            }
        );
    }

    #[test]
    fn parse_rejects_unknown_symbol() {
        let err = parse_level("www\nwXw\nwww").unwrap_err();
        assert_eq!(
            err,
            ParseError::UnknownSymbol {
                row: 1,
                col: 1,
                symbol: 'X'
            }
        );
    }

    #[test]
    fn parse_rejects_tiny() {
        assert!(matches!(
            parse_level("ww\nww"),
            Err(ParseError::TooSmall { .. })
        ));
        assert!(matches!(parse_level(""), Err(ParseError::TooSmall { .. })));
    }

    #[test]
    fn serialize_all_wall() {
        let grid = LevelGrid::filled(3, 3, TileId::Wall).unwrap();
        assert_eq!(serialize_level(&grid), "www\nwww\nwww");
    }

    #[test]
    fn grid_rejects_small_dims() {
        assert!(matches!(
            LevelGrid::filled(1, 13, TileId::Wall),
            Err(GridError::TooSmall { .. })
        ));
    }

    #[test]
    fn encode_all_wall() {
        let grid = LevelGrid::filled(3, 3, TileId::Wall).unwrap();
        let oh = encode_onehot(&grid);
        assert_eq!(&oh.data[..9], &[1.0; 9]);
        assert!(oh.data[9..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_single_avatar_channel() {
        let mut grid = LevelGrid::filled(3, 3, TileId::Wall).unwrap();
        grid.set(1, 1, TileId::Avatar);
        let oh = encode_onehot(&grid);
        let avatar_plane = &oh.data[7 * 9..8 * 9];
        assert_eq!(avatar_plane.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(avatar_plane[4], 1.0);
    }

    #[test]
    fn decode_ties_break_low() {
        let logits = vec![0.5; 8 * 9];
        let grid = decode_onehot(&logits, 3, 3).unwrap();
        assert!(grid.cells().iter().all(|&t| t == TileId::Wall));
    }

    #[test]
    fn decode_rejects_nonfinite() {
        let mut logits = vec![0.0; 8 * 9];
        logits[3] = f64::NAN;
        assert_eq!(
            decode_onehot(&logits, 3, 3).unwrap_err(),
            DecodeError::NonFiniteInput
        );
    }

    #[test]
    fn extract_counts() {
        let grid = LevelGrid::filled(3, 3, TileId::Wall).unwrap();
        assert_eq!(extract_features(&grid).counts, [9, 0, 0, 0, 0, 0, 0, 0]);

        let mut grid = grid;
        grid.set(1, 1, TileId::Avatar);
        assert_eq!(extract_features(&grid).counts, [8, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn feature_normalization() {
        let mut grid = LevelGrid::filled(3, 3, TileId::Wall).unwrap();
        grid.set(1, 1, TileId::Avatar);
        let u = extract_features(&grid).normalized(3, 3);
        assert!((u[0] - 8.0 / 9.0).abs() < 1e-12);
        assert!((u[7] - 1.0 / 9.0).abs() < 1e-12);
    }
}
