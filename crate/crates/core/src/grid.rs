//! Plain 2D and 3D grids for images and label maps (row-major, `x` fastest).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid2<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid2<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A stack of equally sized 2D slices.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn new(depth: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != depth * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {depth}x{height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            depth,
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[z * n..(z + 1) * n]
    }

    pub fn slice_grid(&self, z: usize) -> Grid2<T> {
        Grid2 {
            height: self.height,
            width: self.width,
            data: self.slice(z).to_vec(),
        }
    }

    /// Stack 2D grids of identical size.
    pub fn stack(slices: &[Grid2<T>]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero slices".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            if s.height != h || s.width != w {
                return Err(Error::Shape(format!(
                    "slice {}x{} does not match {h}x{w}",
                    s.height, s.width
                )));
            }
            data.extend_from_slice(&s.data);
        }
        Ok(Self {
            depth: slices.len(),
            height: h,
            width: w,
            data,
        })
    }

    pub fn map_slices<U: Copy>(&self, mut f: impl FnMut(Grid2<T>) -> Grid2<U>) -> Result<Grid3<U>> {
        let slices: Vec<Grid2<U>> = (0..self.depth).map(|z| f(self.slice_grid(z))).collect();
        Grid3::stack(&slices)
    }
}
