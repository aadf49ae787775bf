//! Contract checks for the event simulator over many seeded events.

use changen_core::procedural::{gen_procedural_scene, SceneSpec};
use changen_core::rng::derive_seed;
use changen_core::{
    change_mask_of, dilate, extract_contours, simulate_event, Condition, EventAction, EventKind, EventSpec,
    TransitionMatrix,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn scene_spec() -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 32,
        num_classes: 4,
        object_count_range: (2, 7),
        object_size_range: (3, 9),
        ..Default::default()
    }
}

/// A deliberately lopsided matrix with a forbidden transition.
pub fn test_matrix() -> TransitionMatrix {
    TransitionMatrix::new(
        vec![
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.0, 0.2, 0.5, 0.3],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.1, 0.6, 0.3, 0.0],
        ],
        None,
    )
    .expect("valid matrix")
}

/// `events` events of every kind: the recorded change must equal the label
/// difference, edits must keep instance geometry, and contour removal must
/// erase the dilated change. Returns the edit transition counts.
pub fn check_event_contracts(events: u64) -> Result<[[u64; 4]; 4], String> {
    let spec = scene_spec();
    let matrix = test_matrix();
    let mut counts = [[0u64; 4]; 4];
    for kind in [EventKind::Create, EventKind::Remove, EventKind::Edit, EventKind::ContourRemove] {
        for i in 0..events {
            let seed = derive_seed(kind as u64 + 100, i);
            let scene = gen_procedural_scene(&spec, seed).map_err(|e| e.to_string())?;
            let event = match kind {
                EventKind::Create => EventSpec::create(0.5, seed),
                EventKind::Remove => EventSpec::remove(0.5, seed),
                EventKind::Edit => EventSpec::edit(1.0, seed, matrix.clone()),
                EventKind::ContourRemove => EventSpec::contour_remove(0.5, seed, 1),
            };
            let before = match kind {
                EventKind::ContourRemove => Condition::Contour(extract_contours(&scene.instances)),
                _ => Condition::Semantic(scene.mask.clone()),
            };
            let out = simulate_event(&before, &scene.instances, &event).map_err(|e| e.to_string())?;
            let after_labels = out.next_instances.to_semantic(4, 0).map_err(|e| e.to_string())?;
            let expected = change_mask_of(&scene.mask, &after_labels).map_err(|e| e.to_string())?;
            if out.change != expected {
                return Err(format!("{} event {i}: change mask disagrees with labels", kind.as_str()));
            }
            match (&out.next, kind) {
                (Condition::Semantic(next), _) => {
                    if *next != after_labels {
                        return Err(format!("{} event {i}: mask and instances drift", kind.as_str()));
                    }
                }
                (Condition::Contour(next), _) => {
                    let erase = dilate(out.change.grid(), 1);
                    let expect = before.as_contour().expect("contour").grid().and_not(&erase).map_err(|e| e.to_string())?;
                    if next.grid() != &expect {
                        return Err(format!("contour event {i}: not the dilated erase"));
                    }
                }
            }
            if kind == EventKind::Edit {
                if out.next_instances.grid() != scene.instances.grid() {
                    return Err(format!("edit event {i} moved instance pixels"));
                }
                for entry in &out.log {
                    if entry.action == EventAction::Edit {
                        counts[usize::from(entry.old_class)][usize::from(entry.new_class)] += 1;
                    }
                }
            }
        }
    }
    Ok(counts)
}

/// Smallest per-row chi-square p-value of the observed transitions; any
/// draw of a zero-probability transition is an error.
pub fn transition_chi_square(counts: &[[u64; 4]; 4], matrix: &TransitionMatrix) -> Result<f64, String> {
    let mut min_p = 1.0f64;
    for (from, row) in counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        if total == 0 {
            continue;
        }
        let mut stat = 0.0;
        let mut cells = 0;
        for (to, &observed) in row.iter().enumerate() {
            let p = matrix.prob(from, to);
            if p == 0.0 {
                if observed > 0 {
                    return Err(format!("forbidden transition {from}->{to} drawn {observed} times"));
                }
                continue;
            }
            let expected = p * total as f64;
            stat += (observed as f64 - expected).powi(2) / expected;
            cells += 1;
        }
        if cells > 1 {
            let dist = ChiSquared::new((cells - 1) as f64).map_err(|e| e.to_string())?;
            min_p = min_p.min(1.0 - dist.cdf(stat));
        }
    }
    Ok(min_p)
}
