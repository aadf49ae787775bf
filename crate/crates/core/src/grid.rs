use crate::error::{Error, Result};

/// Row-major H×W raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

pub type BinaryGrid = Grid<bool>;

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("empty grid {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} cells for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::from_vec(height, width, rows.concat())
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    /// Signed lookup; `None` outside the raster.
    #[inline]
    pub fn get_signed(&self, y: isize, x: isize) -> Option<T> {
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            None
        } else {
            Some(self.get(y as usize, x as usize))
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map<U: Copy, V: Copy>(
        &self,
        other: &Grid<U>,
        f: impl Fn(T, U) -> V,
    ) -> Result<Grid<V>> {
        if self.shape() != other.shape() {
            return Err(Error::dims("zip", self.shape(), other.shape()));
        }
        Ok(Grid {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn iter_coords(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, &v)| (i / w, i % w, v))
    }

    pub fn ensure_same_shape<U>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        if self.shape() != (other.height, other.width) {
            return Err(Error::dims(what, self.shape(), (other.height, other.width)));
        }
        Ok(())
    }
}

impl BinaryGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    pub fn popcount(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v)
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a && !b)
    }

    /// Grid of 0/1 bytes.
    pub fn to_u8(&self) -> Grid<u8> {
        self.map(u8::from)
    }

    pub fn from_u8(grid: &Grid<u8>) -> Result<Self> {
        if let Some(v) = grid.as_slice().iter().find(|&&v| v > 1) {
            return Err(Error::Parameter(format!("non-binary value {v}")));
        }
        Ok(grid.map(|v| v == 1))
    }
}
