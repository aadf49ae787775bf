//! The adjacent-squares case for contour updates after a removal.

use changen_core::{
    dilate, extract_contours, instance_support, simulate_contour_remove, ContourMap, EventSpec, Grid, InstanceMap,
};

/// Two 3×3 squares side by side, touching along one column.
pub fn adjacent_squares() -> (ContourMap, InstanceMap) {
    let mut ids = Grid::filled(10, 10, 0u32);
    for y in 3..6 {
        for x in 2..5 {
            ids.set(y, x, 1);
            ids.set(y, x + 3, 2);
        }
    }
    let inst = InstanceMap::new(ids, [(1, 1), (2, 1)].into()).expect("valid instances");
    (extract_contours(&inst), inst)
}

/// Removing the left square: the recomputed contour keeps the right square's
/// shared column, the dilated erase drops exactly that column, and nothing
/// of the erased contour lies inside the dilated change.
pub fn check_contour_correspondence() -> Result<(), String> {
    let (contour, inst) = adjacent_squares();
    let left = instance_support(&inst, 1).map_err(|e| e.to_string())?;
    let right_only = InstanceMap::new(inst.grid().map(|v| if v == 1 { 0 } else { v }), [(2, 1)].into())
        .map_err(|e| e.to_string())?;
    let single = simulate_single_removal(&contour, &inst, 1)?;
    let naive = extract_contours(&right_only);
    let dilated = dilate(&left, 1);
    let differ = naive.zip_map(single.grid(), |a, b| a != b).map_err(|e| e.to_string())?;
    let right = instance_support(&inst, 2).map_err(|e| e.to_string())?;
    // shared edge: pixels of the surviving square that touch the removed one
    let shared = right.zip_map(&dilated, |a, b| a && b).map_err(|e| e.to_string())?;
    if differ != shared {
        return Err(format!("contours differ on {} pixels, shared edge has {}", differ.popcount(), shared.popcount()));
    }
    if shared.popcount() != 3 {
        return Err(format!("expected a 3-pixel shared edge, found {}", shared.popcount()));
    }
    let inside = single.zip_map(&dilated, |a, b| a && b).map_err(|e| e.to_string())?;
    if inside.popcount() != 0 {
        return Err(format!("{} contour pixels remain inside the dilated change", inside.popcount()));
    }
    Ok(())
}

/// Runs the contour-removal event with a seed that selects only instance `id`.
fn simulate_single_removal(contour: &ContourMap, inst: &InstanceMap, id: u32) -> Result<ContourMap, String> {
    for seed in 0..10_000u64 {
        let out = simulate_contour_remove(contour, inst, &EventSpec::contour_remove(0.5, seed, 1)).map_err(|e| e.to_string())?;
        let removed: Vec<u32> = out.log.iter().map(|l| l.instance).collect();
        if removed == [id] {
            return Ok(out.next_contour().cloned().ok_or("no contour output")?);
        }
    }
    Err("no seed removes exactly one instance".into())
}
