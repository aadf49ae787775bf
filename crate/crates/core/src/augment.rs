//! Dihedral (D4) transforms of square rasters.

use crate::grid::Grid;
use crate::image::RgbImage;

/// One of the 8 symmetries of the square: `rotations` quarter turns
/// counter-clockwise, optionally preceded by a horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct D4 {
    pub flip: bool,
    pub rotations: u8,
}

impl D4 {
    pub const IDENTITY: D4 = D4 {
        flip: false,
        rotations: 0,
    };

    pub fn all() -> [D4; 8] {
        let mut out = [Self::IDENTITY; 8];
        for (i, t) in out.iter_mut().enumerate() {
            *t = D4 {
                flip: i >= 4,
                rotations: (i % 4) as u8,
            };
        }
        out
    }

    pub fn from_index(i: usize) -> D4 {
        Self::all()[i % 8]
    }

    /// Source coordinate for output `(y, x)` in an `n`×`n` raster.
    fn source(self, n: usize, y: usize, x: usize) -> (usize, usize) {
        let (mut sy, mut sx) = (y, x);
        for _ in 0..self.rotations % 4 {
            // undo one counter-clockwise quarter turn
            (sy, sx) = (sx, n - 1 - sy);
        }
        if self.flip {
            sx = n - 1 - sx;
        }
        (sy, sx)
    }

    /// Applies the transform; non-square rasters only accept the identity.
    pub fn apply_grid<T: Copy>(self, grid: &Grid<T>) -> Grid<T> {
        let (h, w) = grid.shape();
        if self == Self::IDENTITY {
            return grid.clone();
        }
        assert_eq!(h, w, "D4 transforms need square rasters");
        Grid::from_fn(h, w, |y, x| {
            let (sy, sx) = self.source(h, y, x);
            grid.get(sy, sx)
        })
    }

    pub fn apply_image(self, img: &RgbImage) -> RgbImage {
        let (h, w) = img.shape();
        if self == Self::IDENTITY {
            return img.clone();
        }
        assert_eq!(h, w, "D4 transforms need square rasters");
        let mut out = img.clone();
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(h, y, x);
                out.set_pixel(y, x, img.pixel(sy, sx));
            }
        }
        out
    }
}
