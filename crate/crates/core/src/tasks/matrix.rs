//! Integer grid manipulation: a fixed vocabulary of shape and value ops.

use serde::{Deserialize, Serialize};

use crate::error::{CbrlError, Result};
use crate::rng::RngStream;

pub type Matrix = Vec<Vec<i64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixOp {
    Transpose,
    Rotate90Cw,
    Rotate90Ccw,
    Rotate180,
    FlipHorizontal,
    FlipVertical,
    /// Keep rows `start..end` (zero-based, end exclusive).
    RowSlice(usize, usize),
    /// Keep columns `start..end` (zero-based, end exclusive).
    ColSlice(usize, usize),
    ScalarAdd(i64),
    ScalarMul(i64),
}

impl MatrixOp {
    pub fn describe(&self) -> String {
        match *self {
            MatrixOp::Transpose => "transpose".into(),
            MatrixOp::Rotate90Cw => "rotate 90 degrees clockwise".into(),
            MatrixOp::Rotate90Ccw => "rotate 90 degrees counterclockwise".into(),
            MatrixOp::Rotate180 => "rotate 180 degrees".into(),
            MatrixOp::FlipHorizontal => "flip horizontally".into(),
            MatrixOp::FlipVertical => "flip vertically".into(),
            MatrixOp::RowSlice(a, b) => format!("keep rows {a} to {} (0-based)", b - 1),
            MatrixOp::ColSlice(a, b) => format!("keep columns {a} to {} (0-based)", b - 1),
            MatrixOp::ScalarAdd(c) => format!("add {c} to every element"),
            MatrixOp::ScalarMul(c) => format!("multiply every element by {c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub min_rows: usize,
    pub max_rows: usize,
    pub min_cols: usize,
    pub max_cols: usize,
    pub min_transforms: usize,
    pub max_transforms: usize,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            min_rows: 2,
            max_rows: 10,
            min_cols: 2,
            max_cols: 10,
            min_transforms: 1,
            max_transforms: 10,
        }
    }
}

impl MatrixConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lo, hi) in [
            ("rows", self.min_rows, self.max_rows),
            ("cols", self.min_cols, self.max_cols),
            ("transforms", self.min_transforms, self.max_transforms),
        ] {
            if lo > hi {
                return Err(CbrlError::config(format!(
                    "manipulate_matrix: min_{name} {lo} > max_{name} {hi}"
                )));
            }
        }
        if self.min_rows == 0 || self.min_cols == 0 {
            return Err(CbrlError::config("manipulate_matrix: grids need at least one row and column"));
        }
        Ok(())
    }
}

fn dims(m: &Matrix) -> (usize, usize) {
    (m.len(), m.first().map_or(0, Vec::len))
}

pub fn transpose(m: &Matrix) -> Matrix {
    let (r, c) = dims(m);
    (0..c).map(|j| (0..r).map(|i| m[i][j]).collect()).collect()
}

fn flip_h(m: &Matrix) -> Matrix {
    m.iter().map(|row| row.iter().rev().copied().collect()).collect()
}

fn flip_v(m: &Matrix) -> Matrix {
    m.iter().rev().cloned().collect()
}

pub fn apply_op(m: &Matrix, op: MatrixOp) -> Result<Matrix> {
    let (r, c) = dims(m);
    Ok(match op {
        MatrixOp::Transpose => transpose(m),
        MatrixOp::Rotate90Cw => flip_h(&transpose(m)),
        MatrixOp::Rotate90Ccw => flip_v(&transpose(m)),
        MatrixOp::Rotate180 => flip_v(&flip_h(m)),
        MatrixOp::FlipHorizontal => flip_h(m),
        MatrixOp::FlipVertical => flip_v(m),
        MatrixOp::RowSlice(a, b) => {
            if a >= b || b > r {
                return Err(CbrlError::ShapeMismatch(format!(
                    "row slice {a}..{b} on a {r}x{c} grid"
                )));
            }
            m[a..b].to_vec()
        }
        MatrixOp::ColSlice(a, b) => {
            if a >= b || b > c {
                return Err(CbrlError::ShapeMismatch(format!(
                    "column slice {a}..{b} on a {r}x{c} grid"
                )));
            }
            m.iter().map(|row| row[a..b].to_vec()).collect()
        }
        MatrixOp::ScalarAdd(k) => m.iter().map(|row| row.iter().map(|v| v + k).collect()).collect(),
        MatrixOp::ScalarMul(k) => m.iter().map(|row| row.iter().map(|v| v * k).collect()).collect(),
    })
}

/// Applies `ops` left to right.
pub fn apply_matrix_ops(grid: &Matrix, ops: &[MatrixOp]) -> Result<Matrix> {
    ops.iter().try_fold(grid.clone(), |m, &op| apply_op(&m, op))
}

pub fn render_matrix(m: &Matrix) -> String {
    m.iter()
        .map(|row| row.iter().map(i64::to_string).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixData {
    pub grid: Matrix,
    pub ops: Vec<MatrixOp>,
}

pub fn generate(rng: &mut RngStream, cfg: &MatrixConfig) -> Result<MatrixData> {
    let rows = rng.range_inclusive(cfg.min_rows as i64, cfg.max_rows as i64) as usize;
    let cols = rng.range_inclusive(cfg.min_cols as i64, cfg.max_cols as i64) as usize;
    let grid: Matrix = (0..rows)
        .map(|_| (0..cols).map(|_| rng.range_inclusive(0, 9)).collect())
        .collect();
    let n_ops = rng.range_inclusive(cfg.min_transforms as i64, cfg.max_transforms as i64) as usize;
    let mut ops = Vec::with_capacity(n_ops);
    let (mut r, mut c) = (rows, cols);
    for _ in 0..n_ops {
        let op = match rng.below(10) {
            0 => MatrixOp::Transpose,
            1 => MatrixOp::Rotate90Cw,
            2 => MatrixOp::Rotate90Ccw,
            3 => MatrixOp::Rotate180,
            4 => MatrixOp::FlipHorizontal,
            5 => MatrixOp::FlipVertical,
            6 => {
                let a = rng.below(r);
                let b = rng.range_inclusive(a as i64 + 1, r as i64) as usize;
                MatrixOp::RowSlice(a, b)
            }
            7 => {
                let a = rng.below(c);
                let b = rng.range_inclusive(a as i64 + 1, c as i64) as usize;
                MatrixOp::ColSlice(a, b)
            }
            8 => MatrixOp::ScalarAdd(rng.range_inclusive(1, 9)),
            _ => MatrixOp::ScalarMul(rng.range_inclusive(2, 3)),
        };
        (r, c) = match op {
            MatrixOp::Transpose | MatrixOp::Rotate90Cw | MatrixOp::Rotate90Ccw => (c, r),
            MatrixOp::RowSlice(a, b) => (b - a, c),
            MatrixOp::ColSlice(a, b) => (r, b - a),
            _ => (r, c),
        };
        ops.push(op);
    }
    Ok(MatrixData { grid, ops })
}

pub fn render(data: &MatrixData) -> String {
    let mut s = String::from("Apply the operations in order to the matrix.\nMatrix:\n");
    s.push_str(&render_matrix(&data.grid));
    s.push_str("\nOperations:");
    for (i, op) in data.ops.iter().enumerate() {
        s.push_str(&format!("\n{}. {}", i + 1, op.describe()));
    }
    s
}

pub fn answer(data: &MatrixData) -> Result<String> {
    apply_matrix_ops(&data.grid, &data.ops).map(|m| render_matrix(&m))
}

pub fn trace(data: &MatrixData) -> String {
    let mut m = data.grid.clone();
    let mut parts = vec![format!("start {}x{}", m.len(), m[0].len())];
    for op in &data.ops {
        m = match apply_op(&m, *op) {
            Ok(next) => next,
            Err(_) => break,
        };
        parts.push(format!("{} -> {}x{}", op.describe(), m.len(), m[0].len()));
    }
    parts.join("; ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let g = vec![vec![1, 2], vec![3, 4]];
        assert_eq!(apply_matrix_ops(&g, &[MatrixOp::Transpose]).unwrap(), vec![vec![1, 3], vec![2, 4]]);
        assert_eq!(apply_matrix_ops(&g, &[MatrixOp::Rotate90Cw; 4]).unwrap(), g);
        let g = vec![vec![1, 2, 3], vec![4, 5, 6]];
        assert_eq!(
            apply_matrix_ops(&g, &[MatrixOp::FlipHorizontal, MatrixOp::Transpose]).unwrap(),
            vec![vec![3, 6], vec![2, 5], vec![1, 4]]
        );
    }

    #[test]
    fn rotations_agree() {
        let g = vec![vec![1, 2, 3], vec![4, 5, 6]];
        assert_eq!(apply_op(&g, MatrixOp::Rotate90Cw).unwrap(), vec![vec![4, 1], vec![5, 2], vec![6, 3]]);
        assert_eq!(
            apply_matrix_ops(&g, &[MatrixOp::Rotate90Cw, MatrixOp::Rotate90Ccw]).unwrap(),
            g
        );
        assert_eq!(
            apply_op(&g, MatrixOp::Rotate180).unwrap(),
            apply_matrix_ops(&g, &[MatrixOp::Rotate90Cw; 2]).unwrap()
        );
    }

    #[test]
    fn slices_and_scalars() {
        let g = vec![vec![1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]];
        assert_eq!(apply_op(&g, MatrixOp::RowSlice(1, 3)).unwrap(), vec![vec![4, 5, 6], vec![7, 8, 9]]);
        assert_eq!(apply_op(&g, MatrixOp::ColSlice(0, 1)).unwrap(), vec![vec![1], vec![4], vec![7]]);
        assert_eq!(apply_op(&vec![vec![1]], MatrixOp::ScalarMul(3)).unwrap(), vec![vec![3]]);
        assert_eq!(apply_op(&vec![vec![1]], MatrixOp::ScalarAdd(3)).unwrap(), vec![vec![4]]);
    }

    #[test]
    fn out_of_bounds_slice_is_shape_mismatch() {
        let g = vec![vec![1, 2], vec![3, 4]];
        let err = apply_matrix_ops(&g, &[MatrixOp::RowSlice(0, 1), MatrixOp::RowSlice(0, 2)]);
        assert!(matches!(err, Err(CbrlError::ShapeMismatch(_))));
    }

    #[test]
    fn generated_op_lists_are_always_applicable() {
        let cfg = MatrixConfig::default();
        for seed in 0..300 {
            let mut rng = RngStream::new(seed);
            let d = generate(&mut rng, &cfg).unwrap();
            assert!((1..=10).contains(&d.ops.len()));
            assert!(apply_matrix_ops(&d.grid, &d.ops).is_ok());
        }
    }
}
