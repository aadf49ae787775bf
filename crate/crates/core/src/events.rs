//! Rule-based sampling of the next semantic condition: object creation,
//! removal, attribute editing through a transition matrix, and contour removal
//! for contour-conditioned (self-supervised) data.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BinaryGrid;
use crate::rng::{rng, StageRng};
use crate::scene::{
    change_mask_of, dilate, ChangeMask, ContourMap, InstanceMap, SemanticMask,
};

const ROW_TOLERANCE: f64 = 1e-9;

/// Row-stochastic K×K class transition probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransition", into = "RawTransition")]
pub struct TransitionMatrix {
    probs: Vec<Vec<f64>>,
    class_names: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct RawTransition {
    probs: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
}

impl TryFrom<RawTransition> for TransitionMatrix {
    type Error = Error;

    fn try_from(raw: RawTransition) -> Result<Self> {
        TransitionMatrix::new(raw.probs, raw.class_names)
    }
}

impl From<TransitionMatrix> for RawTransition {
    fn from(m: TransitionMatrix) -> Self {
        RawTransition {
            probs: m.probs,
            class_names: m.class_names,
        }
    }
}

impl TransitionMatrix {
    pub fn new(probs: Vec<Vec<f64>>, class_names: Option<Vec<String>>) -> Result<Self> {
        let k = probs.len();
        if k < 2 {
            return Err(Error::Parameter(format!("transition matrix needs K >= 2, got {k}")));
        }
        for (i, row) in probs.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Parameter(format!(
                    "row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Parameter(format!("row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::Parameter(format!("row {i} sums to {sum}")));
            }
        }
        if let Some(names) = &class_names {
            if names.len() != k {
                return Err(Error::Parameter(format!(
                    "{} class names for a {k}-class matrix",
                    names.len()
                )));
            }
        }
        Ok(Self { probs, class_names })
    }

    /// Every class (self included) equally likely.
    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![vec![1.0 / k as f64; k]; k], None)
    }

    pub fn identity(k: usize) -> Result<Self> {
        Self::new(
            (0..k)
                .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            None,
        )
    }

    /// Parses a headerless CSV grid of K rows by K columns.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut probs = Vec::new();
        for record in reader.records() {
            let record = record?;
            let row = record
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad probability {f:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            probs.push(row);
        }
        Self::new(probs, None)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }

    /// `{"probs": [[..], ..], "class_names": [..]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// JSON for `.json` files, headerless CSV otherwise.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if is_json(path) {
            Self::from_json(&text)
        } else {
            Self::from_csv_str(&text)
        }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.probs[from][to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.probs[from]
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Inverse-CDF draw from row `from` given `u ∈ [0, 1)`. Classes with zero
    /// probability are never returned.
    pub fn sample_with(&self, from: u8, u: f64) -> u8 {
        let row = &self.probs[usize::from(from)];
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (j, &p) in row.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            last_positive = j;
            acc += p;
            if u < acc {
                return j as u8;
            }
        }
        last_positive as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Create,
    Remove,
    Edit,
    ContourRemove,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Create => "create",
            EventKind::Remove => "remove",
            EventKind::Edit => "edit",
            EventKind::ContourRemove => "contour_remove",
        }
    }
}

fn default_selection_prob() -> f64 {
    1.0
}

fn default_attempts() -> u32 {
    32
}

/// Parameters of one change event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub kind: EventKind,
    #[serde(default = "default_selection_prob")]
    pub selection_prob: f64,
    #[serde(default)]
    pub rng_seed: u64,
    /// Placement tries per selected instance (create only).
    #[serde(default = "default_attempts")]
    pub max_placement_attempts: u32,
    /// Edit only; `None` means uniform over all classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<TransitionMatrix>,
    /// Contour removal only; `None` means radius 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation_radius: Option<usize>,
}

impl EventSpec {
    pub fn new(kind: EventKind, selection_prob: f64, rng_seed: u64) -> Self {
        Self {
            kind,
            selection_prob,
            rng_seed,
            max_placement_attempts: default_attempts(),
            transition: None,
            dilation_radius: (kind == EventKind::ContourRemove).then_some(1),
        }
    }

    pub fn create(selection_prob: f64, rng_seed: u64) -> Self {
        Self::new(EventKind::Create, selection_prob, rng_seed)
    }

    pub fn remove(selection_prob: f64, rng_seed: u64) -> Self {
        Self::new(EventKind::Remove, selection_prob, rng_seed)
    }

    pub fn edit(selection_prob: f64, rng_seed: u64, transition: TransitionMatrix) -> Self {
        Self {
            transition: Some(transition),
            ..Self::new(EventKind::Edit, selection_prob, rng_seed)
        }
    }

    pub fn contour_remove(selection_prob: f64, rng_seed: u64, dilation_radius: usize) -> Self {
        Self {
            dilation_radius: Some(dilation_radius),
            ..Self::new(EventKind::ContourRemove, selection_prob, rng_seed)
        }
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        Self {
            rng_seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.selection_prob) {
            return Err(Error::Parameter(format!(
                "selection_prob {} outside [0, 1]",
                self.selection_prob
            )));
        }
        if self.kind == EventKind::Create && self.max_placement_attempts == 0 {
            return Err(Error::Parameter("max_placement_attempts must be positive".into()));
        }
        if self.kind != EventKind::Edit && self.transition.is_some() {
            return Err(Error::Parameter("transition given for a non-edit event".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// One event or an array of events.
    pub fn list_from_json(text: &str) -> Result<Vec<Self>> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let specs: Vec<Self> = match value {
            serde_json::Value::Array(_) => serde_json::from_value(value)?,
            other => vec![serde_json::from_value(other)?],
        };
        specs.iter().try_for_each(Self::validate)?;
        Ok(specs)
    }

    /// Headed CSV with columns `kind, selection_prob, rng_seed,
    /// max_placement_attempts, dilation_radius, transition`; all but `kind`
    /// may be blank. `transition` holds rows separated by `;` with entries
    /// separated by spaces.
    pub fn list_from_csv(text: &str) -> Result<Vec<Self>> {
        #[derive(Deserialize)]
        struct Row {
            kind: EventKind,
            selection_prob: Option<f64>,
            rng_seed: Option<u64>,
            max_placement_attempts: Option<u32>,
            dilation_radius: Option<usize>,
            transition: Option<String>,
        }
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(text.as_bytes());
        let mut specs = Vec::new();
        for row in reader.deserialize::<Row>() {
            let row = row?;
            let mut spec = Self::new(row.kind, row.selection_prob.unwrap_or(1.0), row.rng_seed.unwrap_or(0));
            if let Some(a) = row.max_placement_attempts {
                spec.max_placement_attempts = a;
            }
            if row.dilation_radius.is_some() {
                spec.dilation_radius = row.dilation_radius;
            }
            if let Some(t) = row.transition.filter(|t| !t.is_empty()) {
                let grid = t.split(';').map(|r| r.split_whitespace().collect::<Vec<_>>().join(",")).collect::<Vec<_>>();
                spec.transition = Some(TransitionMatrix::from_csv_str(&grid.join("\n"))?);
            }
            spec.validate()?;
            specs.push(spec);
        }
        Ok(specs)
    }

    /// JSON for `.json` files, CSV otherwise.
    pub fn list_from_path(path: &Path) -> Result<Vec<Self>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if is_json(path) {
            Self::list_from_json(&text)
        } else {
            Self::list_from_csv(&text)
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// The evolving condition of a scene: a semantic mask, or a contour map for
/// contour-conditioned data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Condition {
    Semantic(SemanticMask),
    Contour(ContourMap),
}

impl Condition {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Condition::Semantic(m) => m.shape(),
            Condition::Contour(c) => c.shape(),
        }
    }

    pub fn as_semantic(&self) -> Option<&SemanticMask> {
        match self {
            Condition::Semantic(m) => Some(m),
            Condition::Contour(_) => None,
        }
    }

    pub fn as_contour(&self) -> Option<&ContourMap> {
        match self {
            Condition::Contour(c) => Some(c),
            Condition::Semantic(_) => None,
        }
    }

    /// Foreground pixels: non-background classes, or contour pixels.
    pub fn foreground_count(&self) -> usize {
        match self {
            Condition::Semantic(m) => m.foreground_count(),
            Condition::Contour(c) => c.popcount(),
        }
    }
}

impl From<SemanticMask> for Condition {
    fn from(m: SemanticMask) -> Self {
        Condition::Semantic(m)
    }
}

impl From<ContourMap> for Condition {
    fn from(c: ContourMap) -> Self {
        Condition::Contour(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventAction {
    Create,
    Remove,
    Edit,
    /// Selected for creation but no legal placement was found.
    Skip,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    /// Affected instance; for creations the id of the new copy.
    pub instance: u32,
    pub action: EventAction,
    pub old_class: u8,
    pub new_class: u8,
    /// Source instance of a creation or skip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventOutcome {
    pub next: Condition,
    pub change: ChangeMask,
    pub next_instances: InstanceMap,
    pub log: Vec<LogEntry>,
}

impl EventOutcome {
    pub fn next_mask(&self) -> Option<&SemanticMask> {
        self.next.as_semantic()
    }

    pub fn next_contour(&self) -> Option<&ContourMap> {
        self.next.as_contour()
    }
}

fn check_kind(spec: &EventSpec, kind: EventKind) -> Result<()> {
    spec.validate()?;
    if spec.kind != kind {
        return Err(Error::Parameter(format!(
            "expected a {} event, got {}",
            kind.as_str(),
            spec.kind.as_str()
        )));
    }
    Ok(())
}

fn check_shapes(shape: (usize, usize), instances: &InstanceMap) -> Result<()> {
    if shape != instances.shape() {
        return Err(Error::dims("instances", shape, instances.shape()));
    }
    Ok(())
}

/// One Bernoulli draw per instance in ascending id order.
fn selected(rng: &mut StageRng, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Pastes copies of selected instances onto all-background destinations.
pub fn simulate_create(
    mask: &SemanticMask,
    instances: &InstanceMap,
    spec: &EventSpec,
) -> Result<EventOutcome> {
    check_kind(spec, EventKind::Create)?;
    check_shapes(mask.shape(), instances)?;
    let (h, w) = mask.shape();
    let mut rng = rng(spec.rng_seed);
    let mut next = mask.clone();
    let mut next_instances = instances.clone();
    let mut log = Vec::new();
    let supports = instances.supports();
    for (&id, pixels) in &supports {
        if !selected(&mut rng, spec.selection_prob) {
            continue;
        }
        let class = instances.class_of(id).expect("validated instance map");
        let y0 = pixels.iter().map(|p| p.0).min().unwrap_or(0);
        let x0 = pixels.iter().map(|p| p.1).min().unwrap_or(0);
        let bh = pixels.iter().map(|p| p.0).max().unwrap_or(0) - y0 + 1;
        let bw = pixels.iter().map(|p| p.1).max().unwrap_or(0) - x0 + 1;
        let offsets: Vec<(usize, usize)> = pixels.iter().map(|&(y, x)| (y - y0, x - x0)).collect();
        let mut placed = None;
        for _ in 0..spec.max_placement_attempts {
            let ay = rng.random_range(0..=h - bh);
            let ax = rng.random_range(0..=w - bw);
            if offsets
                .iter()
                .all(|&(dy, dx)| next.get(ay + dy, ax + dx) == mask.background())
            {
                placed = Some((ay, ax));
                break;
            }
        }
        match placed {
            Some((ay, ax)) => {
                let new_id = next_instances.next_id();
                let dest: Vec<(usize, usize)> =
                    offsets.iter().map(|&(dy, dx)| (ay + dy, ax + dx)).collect();
                for &(y, x) in &dest {
                    next.set(y, x, class);
                }
                next_instances.insert(new_id, class, &dest);
                log.push(LogEntry {
                    instance: new_id,
                    action: EventAction::Create,
                    old_class: mask.background(),
                    new_class: class,
                    source: Some(id),
                });
            }
            None => log.push(LogEntry {
                instance: id,
                action: EventAction::Skip,
                old_class: class,
                new_class: class,
                source: Some(id),
            }),
        }
    }
    let change = change_mask_of(mask, &next)?;
    Ok(EventOutcome {
        next: Condition::Semantic(next),
        change,
        next_instances,
        log,
    })
}

/// Paints selected instances with the background class.
pub fn simulate_remove(
    mask: &SemanticMask,
    instances: &InstanceMap,
    spec: &EventSpec,
) -> Result<EventOutcome> {
    check_kind(spec, EventKind::Remove)?;
    check_shapes(mask.shape(), instances)?;
    let mut rng = rng(spec.rng_seed);
    let mut next = mask.clone();
    let mut next_instances = instances.clone();
    let mut log = Vec::new();
    for (id, pixels) in instances.supports() {
        if !selected(&mut rng, spec.selection_prob) {
            continue;
        }
        let class = instances.class_of(id).expect("validated instance map");
        for (y, x) in pixels {
            next.set(y, x, mask.background());
        }
        next_instances.remove(id);
        log.push(LogEntry {
            instance: id,
            action: EventAction::Remove,
            old_class: class,
            new_class: mask.background(),
            source: None,
        });
    }
    let change = change_mask_of(mask, &next)?;
    Ok(EventOutcome {
        next: Condition::Semantic(next),
        change,
        next_instances,
        log,
    })
}

/// Redraws the class of each selected instance from its transition row; the
/// spatial layout is untouched.
pub fn simulate_edit(
    mask: &SemanticMask,
    instances: &InstanceMap,
    spec: &EventSpec,
) -> Result<EventOutcome> {
    check_kind(spec, EventKind::Edit)?;
    check_shapes(mask.shape(), instances)?;
    let k = usize::from(mask.num_classes());
    let uniform;
    let transition = match &spec.transition {
        Some(t) => t,
        None => {
            uniform = TransitionMatrix::uniform(k)?;
            &uniform
        }
    };
    if transition.num_classes() != k {
        return Err(Error::Parameter(format!(
            "transition matrix is {0}x{0} but the mask has {k} classes",
            transition.num_classes()
        )));
    }
    let mut rng = rng(spec.rng_seed);
    let mut next = mask.clone();
    let mut next_instances = instances.clone();
    let mut log = Vec::new();
    for (id, pixels) in instances.supports() {
        if !selected(&mut rng, spec.selection_prob) {
            continue;
        }
        let old = instances.class_of(id).expect("validated instance map");
        let new = transition.sample_with(old, rng.random::<f64>());
        if new != old {
            for (y, x) in pixels {
                next.set(y, x, new);
            }
            next_instances.set_class(id, new);
        }
        log.push(LogEntry {
            instance: id,
            action: EventAction::Edit,
            old_class: old,
            new_class: new,
            source: None,
        });
    }
    let change = change_mask_of(mask, &next)?;
    Ok(EventOutcome {
        next: Condition::Semantic(next),
        change,
        next_instances,
        log,
    })
}

/// Removes selected instances from a contour map by erasing the dilated
/// change mask, `(1 − dilate(C)) ⊙ contour`, instead of recomputing contours
/// from the surviving instances (which would keep boundaries that neighbours
/// share with the removed objects).
pub fn simulate_contour_remove(
    contour: &ContourMap,
    instances: &InstanceMap,
    spec: &EventSpec,
) -> Result<EventOutcome> {
    check_kind(spec, EventKind::ContourRemove)?;
    check_shapes(contour.shape(), instances)?;
    let (h, w) = contour.shape();
    let radius = spec.dilation_radius.unwrap_or(1);
    let mut rng = rng(spec.rng_seed);
    let mut removed = BinaryGrid::zeros(h, w);
    let mut next_instances = instances.clone();
    let mut log = Vec::new();
    for (id, pixels) in instances.supports() {
        if !selected(&mut rng, spec.selection_prob) {
            continue;
        }
        let class = instances.class_of(id).expect("validated instance map");
        for (y, x) in pixels {
            removed.set(y, x, true);
        }
        next_instances.remove(id);
        log.push(LogEntry {
            instance: id,
            action: EventAction::Remove,
            old_class: class,
            new_class: 0,
            source: None,
        });
    }
    let erase = dilate(&removed, radius);
    let next = ContourMap::new(contour.grid().and_not(&erase)?);
    Ok(EventOutcome {
        next: Condition::Contour(next),
        change: ChangeMask::new(removed),
        next_instances,
        log,
    })
}

/// Dispatches on the event kind; the condition variant must fit the kind.
pub fn simulate_event(
    condition: &Condition,
    instances: &InstanceMap,
    spec: &EventSpec,
) -> Result<EventOutcome> {
    match (condition, spec.kind) {
        (Condition::Semantic(m), EventKind::Create) => simulate_create(m, instances, spec),
        (Condition::Semantic(m), EventKind::Remove) => simulate_remove(m, instances, spec),
        (Condition::Semantic(m), EventKind::Edit) => simulate_edit(m, instances, spec),
        (Condition::Contour(c), EventKind::ContourRemove) => {
            simulate_contour_remove(c, instances, spec)
        }
        (Condition::Semantic(_), EventKind::ContourRemove) => Err(Error::Parameter(
            "contour_remove needs a contour condition".into(),
        )),
        (Condition::Contour(_), kind) => Err(Error::Parameter(format!(
            "{} is not defined on contour conditions",
            kind.as_str()
        ))),
    }
}

/// Chains events: outcome k's next condition and instances feed event k+1.
pub fn simulate_sequence(
    initial: &Condition,
    instances: &InstanceMap,
    specs: &[EventSpec],
) -> Result<Vec<EventOutcome>> {
    if specs.is_empty() {
        return Err(Error::Parameter("event sequence is empty".into()));
    }
    let mut outcomes: Vec<EventOutcome> = Vec::with_capacity(specs.len());
    for spec in specs {
        let outcome = match outcomes.last() {
            Some(prev) => simulate_event(&prev.next, &prev.next_instances, spec)?,
            None => simulate_event(initial, instances, spec)?,
        };
        outcomes.push(outcome);
    }
    Ok(outcomes)
}
