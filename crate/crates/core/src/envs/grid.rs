//! Shared square-grid helpers.

use rand::Rng;

/// A grid cell; `x` grows right, `y` grows up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn manhattan(self, other: Cell) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    /// One cell closer to `target`, closing the larger gap first (x on ties).
    pub fn toward(self, target: Cell) -> Cell {
        let dx = target.x - self.x;
        let dy = target.y - self.y;
        if dx == 0 && dy == 0 {
            self
        } else if dx.abs() >= dy.abs() {
            Cell::new(self.x + dx.signum(), self.y)
        } else {
            Cell::new(self.x, self.y + dy.signum())
        }
    }

    /// Offset to `other` scaled by the grid size, each axis in `[-1, 1]`.
    pub fn relative(self, other: Cell, size: i32) -> [f64; 2] {
        let s = (size - 1).max(1) as f64;
        [(other.x - self.x) as f64 / s, (other.y - self.y) as f64 / s]
    }

    pub fn normalized(self, size: i32) -> [f64; 2] {
        let s = (size - 1).max(1) as f64;
        [self.x as f64 / s, self.y as f64 / s]
    }

    pub fn in_bounds(self, size: i32) -> bool {
        (0..size).contains(&self.x) && (0..size).contains(&self.y)
    }

    pub fn word(self) -> u64 {
        ((self.x as u32 as u64) << 32) | self.y as u32 as u64
    }
}

/// The five discrete moves shared by the grid environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Stay,
    Up,
    Down,
    Left,
    Right,
}

impl Move {
    pub const COUNT: usize = 5;

    pub fn from_index(a: usize) -> Move {
        match a {
            1 => Move::Up,
            2 => Move::Down,
            3 => Move::Left,
            4 => Move::Right,
            _ => Move::Stay,
        }
    }

    /// Destination of the move, held at the border.
    pub fn apply(self, c: Cell, size: i32) -> Cell {
        let (dx, dy) = match self {
            Move::Stay => (0, 0),
            Move::Up => (0, 1),
            Move::Down => (0, -1),
            Move::Left => (-1, 0),
            Move::Right => (1, 0),
        };
        let next = Cell::new(c.x + dx, c.y + dy);
        if next.in_bounds(size) {
            next
        } else {
            c
        }
    }
}

/// Uniform cell not in `taken`.
pub(crate) fn free_cell<R: Rng + ?Sized>(rng: &mut R, size: i32, taken: &[Cell]) -> Cell {
    let free: Vec<Cell> = (0..size)
        .flat_map(|x| (0..size).map(move |y| Cell::new(x, y)))
        .filter(|c| !taken.contains(c))
        .collect();
    free[rng.gen_range(0..free.len())]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moves_stop_at_walls() {
        assert_eq!(Move::Left.apply(Cell::new(0, 3), 5), Cell::new(0, 3));
        assert_eq!(Move::Up.apply(Cell::new(2, 3), 5), Cell::new(2, 4));
        assert_eq!(Move::Up.apply(Cell::new(2, 4), 5), Cell::new(2, 4));
    }

    #[test]
    fn toward_reduces_distance() {
        let t = Cell::new(4, 1);
        let mut c = Cell::new(0, 5);
        for d in (0..8).rev() {
            c = c.toward(t);
            assert_eq!(c.manhattan(t), d);
        }
        assert_eq!(c.toward(t), t);
    }
}
