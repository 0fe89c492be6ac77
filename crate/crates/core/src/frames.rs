//! Frame-major matrices shared by the feature, mask, and model code.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum FramesError {
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("{what}: element {index} = {value} violates {constraint}")]
    Range {
        what: &'static str,
        index: usize,
        value: f64,
        constraint: &'static str,
    },
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `frames x dims` row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMatrix {
    frames: usize,
    dims: usize,
    data: Vec<f64>,
}

impl FrameMatrix {
    pub fn new(frames: usize, dims: usize, data: Vec<f64>) -> Result<Self, FramesError> {
        if data.len() != frames * dims {
            return Err(FramesError::Shape {
                what: "frame matrix",
                expected: (frames, dims),
                got: (data.len(), 1),
            });
        }
        Ok(Self { frames, dims, data })
    }

    pub fn zeros(frames: usize, dims: usize) -> Self {
        Self {
            frames,
            dims,
            data: vec![0.0; frames * dims],
        }
    }

    pub fn from_fn(frames: usize, dims: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(frames * dims);
        for t in 0..frames {
            for d in 0..dims {
                data.push(f(t, d));
            }
        }
        Self { frames, dims, data }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.dims)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, t: usize, d: usize) -> f64 {
        self.data[t * self.dims + d]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            frames: self.frames,
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Self,
        what: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, FramesError> {
        self.require_same_shape(other, what)?;
        Ok(Self {
            frames: self.frames,
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn require_same_shape(&self, other: &Self, what: &'static str) -> Result<(), FramesError> {
        if self.shape() != other.shape() {
            return Err(FramesError::Shape {
                what,
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.frames, self.dims, self.data.clone()).expect("consistent shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, FramesError> {
        Self::new(t.rows(), t.cols(), t.data().to_vec())
    }

    /// Writes a header row `d0,d1,...` then one line per frame.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), FramesError> {
        let header: Vec<String> = (0..self.dims).map(|d| format!("d{d}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for t in 0..self.frames {
            let line: Vec<String> = self.row(t).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, FramesError> {
        let mut dims = None;
        let mut data = Vec::new();
        let mut frames = 0;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 {
                dims = Some(line.split(',').count());
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let row: Result<Vec<f64>, _> = line.split(',').map(str::parse).collect();
            let row = row.map_err(|e| FramesError::Csv {
                line: i + 1,
                msg: format!("{e}"),
            })?;
            if Some(row.len()) != dims {
                return Err(FramesError::Csv {
                    line: i + 1,
                    msg: format!("expected {} fields, got {}", dims.unwrap_or(0), row.len()),
                });
            }
            data.extend(row);
            frames += 1;
        }
        let dims = dims.ok_or(FramesError::Csv {
            line: 1,
            msg: "missing header".into(),
        })?;
        Self::new(frames, dims, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(
            frames in 1usize..6,
            dims in 1usize..5,
            seed in prop::collection::vec(-1e9f64..1e9, 30),
        ) {
            let m = FrameMatrix::from_fn(frames, dims, |t, d| seed[(t * dims + d) % 30] / 3.0);
            let mut buf = Vec::new();
            m.write_csv(&mut buf).unwrap();
            let back = FrameMatrix::read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let text = "d0,d1\n1,2\n3\n";
        assert!(matches!(
            FrameMatrix::read_csv(text.as_bytes()),
            Err(FramesError::Csv { line: 3, .. })
        ));
    }
}
