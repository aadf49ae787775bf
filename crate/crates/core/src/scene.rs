//! Label rasters and the mask algebra every simulator is built on.

use std::collections::BTreeMap;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, Grid};

/// Pixel adjacency used for components and contours.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }

    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::Parameter(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }
}

/// Per-pixel class ids in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMask {
    data: Grid<u8>,
    num_classes: u16,
    background: u8,
}

impl SemanticMask {
    pub fn new(data: Grid<u8>, num_classes: u16, background: u8) -> Result<Self> {
        if !(2..=256).contains(&num_classes) {
            return Err(Error::Parameter(format!(
                "num_classes must be in [2, 256], got {num_classes}"
            )));
        }
        if u16::from(background) >= num_classes {
            return Err(Error::Parameter(format!(
                "background class {background} outside [0, {num_classes})"
            )));
        }
        if let Some(&v) = data.as_slice().iter().find(|&&v| u16::from(v) >= num_classes) {
            return Err(Error::Parameter(format!(
                "class id {v} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            data,
            num_classes,
            background,
        })
    }

    /// Mask with background id 0.
    pub fn with_default_background(data: Grid<u8>, num_classes: u16) -> Result<Self> {
        Self::new(data, num_classes, 0)
    }

    pub fn background_filled(height: usize, width: usize, num_classes: u16) -> Result<Self> {
        Self::new(Grid::filled(height, width, 0), num_classes, 0)
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.data
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn background(&self) -> u8 {
        self.background
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.shape()
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data.get(y, x)
    }

    pub(crate) fn set(&mut self, y: usize, x: usize, class: u8) {
        debug_assert!(u16::from(class) < self.num_classes);
        self.data.set(y, x, class);
    }

    pub fn foreground(&self) -> BinaryGrid {
        let bg = self.background;
        self.data.map(|v| v != bg)
    }

    pub fn foreground_count(&self) -> usize {
        self.data
            .as_slice()
            .iter()
            .filter(|&&v| v != self.background)
            .count()
    }
}

/// Instance ids per pixel (0 = none) plus the class of each instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMap {
    data: Grid<u32>,
    classes: BTreeMap<u32, u8>,
}

impl InstanceMap {
    pub fn new(data: Grid<u32>, classes: BTreeMap<u32, u8>) -> Result<Self> {
        if classes.contains_key(&0) {
            return Err(Error::Parameter("instance id 0 is reserved".into()));
        }
        let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
        for &id in data.as_slice() {
            if id != 0 {
                *seen.entry(id).or_default() += 1;
            }
        }
        for id in seen.keys() {
            if !classes.contains_key(id) {
                return Err(Error::Parameter(format!("instance {id} has no class")));
            }
        }
        for id in classes.keys() {
            if !seen.contains_key(id) {
                return Err(Error::Parameter(format!("instance {id} has empty support")));
            }
        }
        Ok(Self { data, classes })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            data: Grid::filled(height, width, 0),
            classes: BTreeMap::new(),
        }
    }

    /// Instances as connected regions of each non-background class.
    pub fn from_semantic(mask: &SemanticMask, connectivity: Connectivity) -> Self {
        let (h, w) = mask.shape();
        let mut data = Grid::filled(h, w, 0u32);
        let mut classes = BTreeMap::new();
        let mut next = 1u32;
        for y in 0..h {
            for x in 0..w {
                let class = mask.get(y, x);
                if class == mask.background() || data.get(y, x) != 0 {
                    continue;
                }
                flood(&mut data, (y, x), next, connectivity, |yy, xx| {
                    mask.get(yy, xx) == class
                });
                classes.insert(next, class);
                next += 1;
            }
        }
        Self { data, classes }
    }

    pub fn grid(&self) -> &Grid<u32> {
        &self.data
    }

    pub fn classes(&self) -> &BTreeMap<u32, u8> {
        &self.classes
    }

    pub fn class_of(&self, id: u32) -> Option<u8> {
        self.classes.get(&id).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.shape()
    }

    pub fn next_id(&self) -> u32 {
        self.classes.keys().next_back().map_or(1, |&m| m + 1)
    }

    /// Pixel coordinates of every instance, keyed by id.
    pub fn supports(&self) -> BTreeMap<u32, Vec<(usize, usize)>> {
        let mut out: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
        for (y, x, id) in self.data.iter_coords() {
            if id != 0 {
                out.entry(id).or_default().push((y, x));
            }
        }
        out
    }

    pub(crate) fn remove(&mut self, id: u32) {
        if self.classes.remove(&id).is_some() {
            for v in self.data.as_mut_slice() {
                if *v == id {
                    *v = 0;
                }
            }
        }
    }

    pub(crate) fn set_class(&mut self, id: u32, class: u8) {
        if let Some(c) = self.classes.get_mut(&id) {
            *c = class;
        }
    }

    pub(crate) fn insert(&mut self, id: u32, class: u8, pixels: &[(usize, usize)]) {
        debug_assert!(!pixels.is_empty());
        for &(y, x) in pixels {
            self.data.set(y, x, id);
        }
        self.classes.insert(id, class);
    }

    /// Semantic mask painted from the instance classes.
    pub fn to_semantic(&self, num_classes: u16, background: u8) -> Result<SemanticMask> {
        let data = self
            .data
            .map(|id| if id == 0 { background } else { self.classes[&id] });
        SemanticMask::new(data, num_classes, background)
    }
}

/// Binary indicator of pixels whose class differs between two masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeMask(BinaryGrid);

impl ChangeMask {
    pub fn new(grid: BinaryGrid) -> Self {
        Self(grid)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(BinaryGrid::zeros(height, width))
    }

    pub fn grid(&self) -> &BinaryGrid {
        &self.0
    }

    pub fn into_grid(self) -> BinaryGrid {
        self.0
    }

    pub fn dilate(&self, radius: usize) -> ChangeMask {
        ChangeMask(dilate(&self.0, radius))
    }

    pub fn union(&self, other: &ChangeMask) -> Result<ChangeMask> {
        Ok(ChangeMask(self.0.or(&other.0)?))
    }
}

impl Deref for ChangeMask {
    type Target = BinaryGrid;

    fn deref(&self) -> &BinaryGrid {
        &self.0
    }
}

/// Object boundary pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContourMap(BinaryGrid);

impl ContourMap {
    pub fn new(grid: BinaryGrid) -> Self {
        Self(grid)
    }

    pub fn grid(&self) -> &BinaryGrid {
        &self.0
    }

    pub fn into_grid(self) -> BinaryGrid {
        self.0
    }
}

impl Deref for ContourMap {
    type Target = BinaryGrid;

    fn deref(&self) -> &BinaryGrid {
        &self.0
    }
}

pub fn change_mask_of(before: &SemanticMask, after: &SemanticMask) -> Result<ChangeMask> {
    before.grid().ensure_same_shape(after.grid(), "change mask")?;
    Ok(ChangeMask(before.grid().zip_map(after.grid(), |a, b| a != b)?))
}

fn flood(
    labels: &mut Grid<u32>,
    start: (usize, usize),
    label: u32,
    connectivity: Connectivity,
    member: impl Fn(usize, usize) -> bool,
) {
    let mut stack = vec![start];
    labels.set(start.0, start.1, label);
    while let Some((y, x)) = stack.pop() {
        for &(dy, dx) in connectivity.offsets() {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if labels.get_signed(ny, nx) != Some(0) {
                continue;
            }
            let (ny, nx) = (ny as usize, nx as usize);
            if member(ny, nx) {
                labels.set(ny, nx, label);
                stack.push((ny, nx));
            }
        }
    }
}

/// Labels maximal connected regions of `mask` as 1..n, numbered by the
/// row-major position of each region's first pixel. Every instance gets class 1.
pub fn connected_components(mask: &BinaryGrid, connectivity: Connectivity) -> InstanceMap {
    let (h, w) = mask.shape();
    let mut labels = Grid::filled(h, w, 0u32);
    let mut classes = BTreeMap::new();
    let mut next = 1u32;
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) && labels.get(y, x) == 0 {
                flood(&mut labels, (y, x), next, connectivity, |yy, xx| {
                    mask.get(yy, xx)
                });
                classes.insert(next, 1);
                next += 1;
            }
        }
    }
    InstanceMap {
        data: labels,
        classes,
    }
}

/// Binary dilation by a (2r+1)×(2r+1) square, done as two separable max passes.
pub fn dilate(mask: &BinaryGrid, radius: usize) -> BinaryGrid {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.shape();
    let horizontal = Grid::from_fn(h, w, |y, x| {
        let lo = x.saturating_sub(radius);
        let hi = (x + radius).min(w - 1);
        (lo..=hi).any(|xx| mask.get(y, xx))
    });
    Grid::from_fn(h, w, |y, x| {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        (lo..=hi).any(|yy| horizontal.get(yy, x))
    })
}

/// Boundary pixels under the default 8-neighborhood.
pub fn extract_contours(instances: &InstanceMap) -> ContourMap {
    extract_contours_with(instances, Connectivity::Eight)
}

/// A pixel is on a contour when it belongs to an instance and some neighbor
/// (or the image border) lies outside that same instance.
pub fn extract_contours_with(instances: &InstanceMap, connectivity: Connectivity) -> ContourMap {
    let ids = instances.grid();
    let (h, w) = ids.shape();
    ContourMap(Grid::from_fn(h, w, |y, x| {
        let id = ids.get(y, x);
        id != 0
            && connectivity
                .offsets()
                .iter()
                .any(|&(dy, dx)| ids.get_signed(y as isize + dy, x as isize + dx) != Some(id))
    }))
}

pub fn instance_support(instances: &InstanceMap, id: u32) -> Result<BinaryGrid> {
    if id == 0 || !instances.classes.contains_key(&id) {
        return Err(Error::Lookup(id));
    }
    Ok(instances.data.map(|v| v == id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(rows: &[Vec<u8>], k: u16) -> SemanticMask {
        SemanticMask::with_default_background(Grid::from_rows(rows).unwrap(), k).unwrap()
    }

    fn bin(rows: &[Vec<u8>]) -> BinaryGrid {
        BinaryGrid::from_u8(&Grid::from_rows(rows).unwrap()).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, k: u8) -> SemanticMask {
        let data = Grid::from_fn(h, w, |_, _| rng.random_range(0..k));
        SemanticMask::with_default_background(data, k.into()).unwrap()
    }

    fn random_binary(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryGrid {
        Grid::from_fn(h, w, |_, _| rng.random_bool(p))
    }

    /// Union-find component count, independent of the flood-fill labeling.
    fn union_find_count(mask: &BinaryGrid, conn: Connectivity) -> usize {
        let (h, w) = mask.shape();
        let mut parent: Vec<usize> = (0..h * w).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for y in 0..h {
            for x in 0..w {
                if !mask.get(y, x) {
                    continue;
                }
                for &(dy, dx) in conn.offsets() {
                    if let Some(true) = mask.get_signed(y as isize + dy, x as isize + dx) {
                        let a = find(&mut parent, y * w + x);
                        let b = find(
                            &mut parent,
                            (y as isize + dy) as usize * w + (x as isize + dx) as usize,
                        );
                        parent[a] = b;
                    }
                }
            }
        }
        (0..h * w)
            .filter(|&i| mask.as_slice()[i] && find(&mut parent, i) == i)
            .count()
    }

    fn naive_dilate(mask: &BinaryGrid, r: usize) -> BinaryGrid {
        let (h, w) = mask.shape();
        let r = r as isize;
        Grid::from_fn(h, w, |y, x| {
            let mut hit = false;
            for dy in -r..=r {
                for dx in -r..=r {
                    if mask.get_signed(y as isize + dy, x as isize + dx) == Some(true) {
                        hit = true;
                    }
                }
            }
            hit
        })
    }

    #[test]
    fn change_mask_examples() {
        let a = mask(&[vec![0, 1], vec![1, 1]], 3);
        let b = mask(&[vec![0, 2], vec![1, 1]], 3);
        assert_eq!(
            change_mask_of(&a, &b).unwrap().grid(),
            &bin(&[vec![0, 1], vec![0, 0]])
        );
        let same = mask(&[vec![1; 4], vec![2; 4], vec![0; 4], vec![1, 2, 0, 1]], 3);
        assert!(!change_mask_of(&same, &same).unwrap().any());
    }

    #[test]
    fn change_mask_popcount_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_mask(&mut rng, 8, 8, 3);
        let b = random_mask(&mut rng, 8, 8, 3);
        let mut expected = 0;
        for y in 0..8 {
            for x in 0..8 {
                if a.get(y, x) != b.get(y, x) {
                    expected += 1;
                }
            }
        }
        assert_eq!(change_mask_of(&a, &b).unwrap().popcount(), expected);
    }

    #[test]
    fn change_mask_rejects_shape_mismatch() {
        let a = SemanticMask::background_filled(2, 2, 2).unwrap();
        let b = SemanticMask::background_filled(2, 3, 2).unwrap();
        assert!(matches!(change_mask_of(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn semantic_mask_validates_classes() {
        assert!(SemanticMask::new(Grid::filled(2, 2, 3), 3, 0).is_err());
        assert!(SemanticMask::new(Grid::filled(2, 2, 0), 1, 0).is_err());
        assert!(SemanticMask::new(Grid::filled(2, 2, 0), 3, 5).is_err());
    }

    #[test]
    fn diagonal_connectivity() {
        let m = bin(&[vec![1, 0], vec![0, 1]]);
        assert_eq!(connected_components(&m, Connectivity::Four).len(), 2);
        assert_eq!(connected_components(&m, Connectivity::Eight).len(), 1);
    }

    #[test]
    fn component_count_matches_union_find() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_binary(&mut rng, 16, 16, 0.45);
        for conn in [Connectivity::Four, Connectivity::Eight] {
            assert_eq!(
                connected_components(&m, conn).len(),
                union_find_count(&m, conn)
            );
        }
    }

    #[test]
    fn component_labels_follow_first_pixel_order() {
        let m = bin(&[vec![0, 0, 1], vec![1, 0, 1], vec![1, 0, 0]]);
        let cc = connected_components(&m, Connectivity::Four);
        assert_eq!(cc.grid().get(0, 2), 1);
        assert_eq!(cc.grid().get(1, 0), 2);
    }

    #[test]
    fn dilate_examples() {
        let mut m = BinaryGrid::zeros(5, 5);
        m.set(2, 2, true);
        let d = dilate(&m, 1);
        assert_eq!(d.popcount(), 9);
        for y in 1..=3 {
            for x in 1..=3 {
                assert!(d.get(y, x));
            }
        }
        assert_eq!(dilate(&m, 0), m);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_binary(&mut rng, 12, 12, 0.08);
        assert_eq!(dilate(&m, 2), naive_dilate(&m, 2));
    }

    #[test]
    fn contour_of_square() {
        let mut ids = Grid::filled(5, 5, 0u32);
        for y in 1..4 {
            for x in 1..4 {
                ids.set(y, x, 1);
            }
        }
        let inst = InstanceMap::new(ids, [(1, 1)].into()).unwrap();
        let c = extract_contours(&inst);
        assert_eq!(c.popcount(), 8);
        assert!(!c.get(2, 2));
        assert!(!extract_contours(&InstanceMap::empty(4, 4)).any());
    }

    #[test]
    fn adjacent_squares_share_marked_edge() {
        let mut ids = Grid::filled(5, 8, 0u32);
        for y in 1..4 {
            for x in 1..4 {
                ids.set(y, x, 1);
                ids.set(y, x + 3, 2);
            }
        }
        let inst = InstanceMap::new(ids.clone(), [(1, 1), (2, 1)].into()).unwrap();
        let c = extract_contours(&inst);
        // per-pixel neighborhood oracle
        for y in 0..5 {
            for x in 0..8 {
                let id = ids.get(y, x);
                let mut boundary = false;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        if ids.get_signed(y as isize + dy, x as isize + dx) != Some(id) {
                            boundary = true;
                        }
                    }
                }
                assert_eq!(c.get(y, x), id != 0 && boundary, "({y},{x})");
            }
        }
        for y in 1..4 {
            assert!(c.get(y, 3) && c.get(y, 4));
        }
    }

    #[test]
    fn support_lookup() {
        let ids = Grid::from_rows(&[vec![0u32, 1, 1], vec![0, 0, 0]]).unwrap();
        let inst = InstanceMap::new(ids, [(1, 2)].into()).unwrap();
        assert_eq!(instance_support(&inst, 1).unwrap().popcount(), 2);
        assert!(matches!(instance_support(&inst, 9), Err(Error::Lookup(9))));
        let full = InstanceMap::new(Grid::filled(3, 3, 4), [(4, 1)].into()).unwrap();
        assert_eq!(instance_support(&full, 4).unwrap().popcount(), 9);
    }

    #[test]
    fn supports_sum_to_nonzero_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = random_binary(&mut rng, 16, 16, 0.4);
        let inst = connected_components(&m, Connectivity::Eight);
        let total: usize = inst
            .ids()
            .map(|id| instance_support(&inst, id).unwrap().popcount())
            .sum();
        assert_eq!(total, inst.grid().as_slice().iter().filter(|&&v| v != 0).count());
    }

    #[test]
    fn instance_map_validation() {
        let ids = Grid::from_rows(&[vec![0u32, 1]]).unwrap();
        assert!(InstanceMap::new(ids.clone(), BTreeMap::new()).is_err());
        assert!(InstanceMap::new(ids, [(1, 1), (2, 1)].into()).is_err());
    }

    fn arb_binary() -> impl Strategy<Value = BinaryGrid> {
        (1usize..14, 1usize..14).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), h * w)
                .prop_map(move |v| Grid::from_vec(h, w, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn dilation_is_monotone_and_additive(m in arb_binary(), r1 in 0usize..3, r2 in 0usize..3) {
            let d = dilate(&m, r1);
            prop_assert!(m.and_not(&d).unwrap().popcount() == 0);
            prop_assert_eq!(dilate(&d, r2), dilate(&m, r1 + r2));
        }

        #[test]
        fn components_partition_foreground(m in arb_binary()) {
            let a = connected_components(&m, Connectivity::Eight);
            let b = connected_components(&m, Connectivity::Eight);
            prop_assert_eq!(&a, &b);
            for (y, x, v) in m.iter_coords() {
                prop_assert_eq!(v, a.grid().get(y, x) != 0);
            }
        }

        #[test]
        fn contours_lie_inside_supports(m in arb_binary()) {
            let inst = connected_components(&m, Connectivity::Four);
            let c = extract_contours(&inst);
            prop_assert_eq!(c.and_not(&m).unwrap().popcount(), 0);
        }

        #[test]
        fn change_mask_symmetric_and_reflexive(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mask(&mut rng, 6, 7, 4);
            let b = random_mask(&mut rng, 6, 7, 4);
            prop_assert_eq!(change_mask_of(&a, &b).unwrap(), change_mask_of(&b, &a).unwrap());
            prop_assert!(!change_mask_of(&a, &a).unwrap().any());
        }
    }
}
