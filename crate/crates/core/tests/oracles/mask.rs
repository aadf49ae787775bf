//! Brute-force references for the raster algebra, compared exactly against
//! the library on seeded random instances.

use changen_core::rng::rng;
use changen_core::{
    change_mask_of, connected_components, dilate, extract_contours, BinaryGrid, Connectivity, Grid, InstanceMap,
    SemanticMask,
};
use rand::Rng;

fn random_shape(r: &mut impl Rng) -> (usize, usize) {
    (r.random_range(1..=32), r.random_range(1..=32))
}

fn random_binary(r: &mut impl Rng, h: usize, w: usize) -> BinaryGrid {
    let density = r.random_range(0.05..0.7);
    Grid::from_fn(h, w, |_, _| r.random_bool(density))
}

fn change_oracle(a: &SemanticMask, b: &SemanticMask) -> BinaryGrid {
    let (h, w) = a.shape();
    let mut out = BinaryGrid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            if a.get(y, x) != b.get(y, x) {
                out.set(y, x, true);
            }
        }
    }
    out
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Union-find labelling, renumbered by first row-major occurrence.
fn components_oracle(mask: &BinaryGrid, eight: bool) -> Grid<u32> {
    let (h, w) = mask.shape();
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let mut neighbours = vec![(0isize, -1isize), (-1, 0)];
            if eight {
                neighbours.extend([(-1, -1), (-1, 1)]);
            }
            for (dy, dx) in neighbours {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || nx >= w as isize || !mask.get(ny as usize, nx as usize) {
                    continue;
                }
                let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, ny as usize * w + nx as usize));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut names = std::collections::HashMap::new();
    let mut labels = Grid::filled(h, w, 0u32);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                let root = find(&mut parent, y * w + x);
                let next = names.len() as u32 + 1;
                labels.set(y, x, *names.entry(root).or_insert(next));
            }
        }
    }
    labels
}

fn dilate_oracle(mask: &BinaryGrid, r: usize) -> BinaryGrid {
    let (h, w) = mask.shape();
    Grid::from_fn(h, w, |y, x| {
        (0..h).any(|yy| (0..w).any(|xx| mask.get(yy, xx) && yy.abs_diff(y) <= r && xx.abs_diff(x) <= r))
    })
}

fn contour_oracle(ids: &Grid<u32>) -> BinaryGrid {
    let (h, w) = ids.shape();
    Grid::from_fn(h, w, |y, x| {
        let id = ids.get(y, x);
        if id == 0 {
            return false;
        }
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    return true;
                }
                if ids.get(ny as usize, nx as usize) != id {
                    return true;
                }
            }
        }
        false
    })
}

/// Runs every raster oracle on `instances` seeded cases; returns the number of comparisons.
pub fn check_mask_algebra(instances: u64) -> Result<usize, String> {
    let mut compared = 0;
    for seed in 0..instances {
        let mut r = rng(seed);
        let (h, w) = random_shape(&mut r);
        let k = r.random_range(2..=6u16);
        let a = SemanticMask::with_default_background(Grid::from_fn(h, w, |_, _| r.random_range(0..k) as u8), k)
            .map_err(|e| e.to_string())?;
        let b = SemanticMask::with_default_background(
            Grid::from_fn(h, w, |y, x| if r.random_bool(0.3) { r.random_range(0..k) as u8 } else { a.get(y, x) }),
            k,
        )
        .map_err(|e| e.to_string())?;
        let change = change_mask_of(&a, &b).map_err(|e| e.to_string())?;
        if change.grid() != &change_oracle(&a, &b) {
            return Err(format!("change_mask_of differs on seed {seed}"));
        }
        let bin = random_binary(&mut r, h, w);
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            let cc = connected_components(&bin, conn);
            if cc.grid() != &components_oracle(&bin, eight) {
                return Err(format!("connected_components ({conn:?}) differs on seed {seed}"));
            }
        }
        for radius in 0..=3 {
            if dilate(&bin, radius) != dilate_oracle(&bin, radius) {
                return Err(format!("dilate r={radius} differs on seed {seed}"));
            }
        }
        let inst = InstanceMap::from_semantic(&a, Connectivity::Four);
        if extract_contours(&inst).grid() != &contour_oracle(inst.grid()) {
            return Err(format!("extract_contours differs on seed {seed}"));
        }
        compared += 1;
    }
    Ok(compared)
}
