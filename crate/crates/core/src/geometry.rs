use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("array must have at least one row and one column")]
    Empty,
    #[error("pitch must be positive, got ({0}, {1})")]
    InvalidPitch(f64, f64),
    #[error("wire order is not a permutation of 0..{0}")]
    NotAPermutation(usize),
}

/// Pixel layout of a SPAD array and the order of its bond wires.
///
/// Pixels are numbered column-major: pixel `i` sits at column `i / rows`
/// and row `i % rows`, so that on the default 4x4 array pixels 5 and 9 are
/// horizontal neighbours (30 um apart) and pixels 0 and 15 are opposite
/// corners (~158 um apart).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryConfig", into = "GeometryConfig")]
pub struct ArrayGeometry {
    rows: usize,
    cols: usize,
    pitch_x: f64,
    pitch_y: f64,
    wire_order: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GeometryConfig {
    #[serde(default = "default_rows")]
    rows: usize,
    #[serde(default = "default_cols")]
    cols: usize,
    #[serde(default = "default_pitch_x")]
    pitch_x: f64,
    #[serde(default = "default_pitch_y")]
    pitch_y: f64,
    #[serde(default)]
    wire_order: Option<Vec<usize>>,
}

fn default_rows() -> usize {
    4
}
fn default_cols() -> usize {
    4
}
fn default_pitch_x() -> f64 {
    30e-6
}
fn default_pitch_y() -> f64 {
    43e-6
}

impl TryFrom<GeometryConfig> for ArrayGeometry {
    type Error = GeometryError;

    fn try_from(c: GeometryConfig) -> Result<Self, Self::Error> {
        let geometry = ArrayGeometry::new(c.rows, c.cols, c.pitch_x, c.pitch_y)?;
        match c.wire_order {
            Some(order) => geometry.with_wire_order(order),
            None => Ok(geometry),
        }
    }
}

impl From<ArrayGeometry> for GeometryConfig {
    fn from(g: ArrayGeometry) -> Self {
        GeometryConfig {
            rows: g.rows,
            cols: g.cols,
            pitch_x: g.pitch_x,
            pitch_y: g.pitch_y,
            wire_order: Some(g.wire_order),
        }
    }
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        ArrayGeometry::new(4, 4, 30e-6, 43e-6).expect("default geometry is valid")
    }
}

impl ArrayGeometry {
    /// Array with bond wires ordered by pixel index.
    pub fn new(rows: usize, cols: usize, pitch_x: f64, pitch_y: f64) -> Result<Self, GeometryError> {
        if rows == 0 || cols == 0 {
            return Err(GeometryError::Empty);
        }
        if !(pitch_x > 0.0 && pitch_y > 0.0 && pitch_x.is_finite() && pitch_y.is_finite()) {
            return Err(GeometryError::InvalidPitch(pitch_x, pitch_y));
        }
        Ok(ArrayGeometry {
            rows,
            cols,
            pitch_x,
            pitch_y,
            wire_order: (0..rows * cols).collect(),
        })
    }

    /// A single row of `n` pixels at the default horizontal pitch.
    pub fn row_of(n: usize) -> Self {
        ArrayGeometry::new(1, n, 30e-6, 43e-6).expect("row geometry is valid")
    }

    pub fn with_wire_order(mut self, order: Vec<usize>) -> Result<Self, GeometryError> {
        let n = self.pixel_count();
        let mut seen = vec![false; n];
        if order.len() != n {
            return Err(GeometryError::NotAPermutation(n));
        }
        for &w in &order {
            if w >= n || seen[w] {
                return Err(GeometryError::NotAPermutation(n));
            }
            seen[w] = true;
        }
        self.wire_order = order;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixel_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn wire_order(&self) -> &[usize] {
        &self.wire_order
    }

    /// Pixel centre in metres relative to pixel 0.
    pub fn position(&self, pixel: usize) -> (f64, f64) {
        let col = pixel / self.rows;
        let row = pixel % self.rows;
        (col as f64 * self.pitch_x, row as f64 * self.pitch_y)
    }

    pub fn pixel_at(&self, row: usize, col: usize) -> usize {
        col * self.rows + row
    }

    /// Euclidean detector separation in metres.
    pub fn baseline(&self, i: usize, j: usize) -> f64 {
        let (xi, yi) = self.position(i);
        let (xj, yj) = self.position(j);
        (xi - xj).hypot(yi - yj)
    }

    pub fn wire_distance(&self, i: usize, j: usize) -> usize {
        self.wire_order[i].abs_diff(self.wire_order[j])
    }

    pub fn wire_adjacent(&self, i: usize, j: usize) -> bool {
        self.wire_distance(i, j) == 1
    }

    /// Pixels of one array row, left to right.
    pub fn row_pixels(&self, row: usize) -> Vec<usize> {
        (0..self.cols).map(|c| self.pixel_at(row, c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_array_baselines() {
        let g = ArrayGeometry::default();
        assert_eq!(g.pixel_count(), 16);
        assert!((g.baseline(5, 9) - 30e-6).abs() < 1e-12);
        assert!((g.baseline(0, 15) - 157.3e-6).abs() < 0.1e-6);
        assert_eq!(g.baseline(7, 7), 0.0);
        assert!(g.wire_adjacent(8, 7) && g.wire_adjacent(8, 9));
        assert!(!g.wire_adjacent(8, 10));
    }

    #[test]
    fn wire_order_must_be_bijection() {
        let g = ArrayGeometry::new(1, 3, 1e-6, 1e-6).unwrap();
        assert!(g.clone().with_wire_order(vec![2, 0, 1]).is_ok());
        assert_eq!(
            g.clone().with_wire_order(vec![0, 0, 1]),
            Err(GeometryError::NotAPermutation(3))
        );
        assert!(g.with_wire_order(vec![0, 1]).is_err());
    }

    #[test]
    fn toml_defaults() {
        let g: ArrayGeometry = toml::from_str("rows = 1\ncols = 4\n").unwrap();
        assert_eq!(g.pixel_count(), 4);
        assert_eq!(g.wire_order(), &[0, 1, 2, 3]);
        let bad: Result<ArrayGeometry, _> = toml::from_str("rows = 1\ncols = 2\nwire_order = [1, 1]\n");
        assert!(bad.is_err());
    }
}
