//! Training-time handling of confident predictions that match no ground
//! truth. Depending on the presence matrix they become pseudo-labels, or
//! their image crops replace a negative vocabulary entry.

use ndarray::{s, Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curation::SliceSample;
use crate::encoder::{EncoderError, FoundationEncoder};
use crate::geometry::{iou, BBox, Detection, GroundTruthBox};
use crate::presence::{Presence, PresenceError, PresenceMatrix};
use crate::vocabulary::{NegativeChoice, Vocabulary, VocabularyError, SUBSTITUTED_LABEL};

#[derive(Debug, Error)]
pub enum PseudoLabelError {
    #[error(transparent)]
    Presence(#[from] PresenceError),
    #[error(transparent)]
    Vocabulary(#[from] VocabularyError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("annotated class {0:?} has no vocabulary entry")]
    MissingClass(String),
    #[error("detection class index {0} outside the vocabulary")]
    ClassIndex(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoxFilter {
    /// Minimum box area as a fraction of the image area.
    pub min_area_fraction: f64,
    /// Maximum box area as a fraction of the image area.
    pub max_area_fraction: f64,
    /// Maximum fraction of near-zero pixels inside the box.
    pub max_background_fraction: f64,
    /// A pixel whose channels are all at or below this level is background.
    pub near_zero_level: u8,
}

impl Default for BoxFilter {
    fn default() -> Self {
        Self { min_area_fraction: 0.001, max_area_fraction: 0.95, max_background_fraction: 0.8, near_zero_level: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelConfig {
    /// A prediction is unmatched when its best IoU with any ground truth is below this.
    pub iou_threshold: f64,
    /// Confidence a prediction must exceed to become a pseudo-label.
    pub confidence_threshold: f64,
    /// Crop expansion factor before image encoding.
    pub expand_factor: f64,
    pub max_substitutions: usize,
    /// `None` leaves injections uncapped.
    pub max_injections: Option<usize>,
    pub negative_choice: NegativeChoice,
    pub filter: BoxFilter,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.3,
            confidence_threshold: 0.9,
            expand_factor: 1.3,
            max_substitutions: 5,
            max_injections: None,
            negative_choice: NegativeChoice::LowestIndex,
            filter: BoxFilter::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    InjectPseudoLabel,
    FeatureSubstitute,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    TooSmall,
    FullImage,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    LowConfidence,
    /// Matrix value 0: the dataset never annotates the class.
    NotAnnotated,
    /// Matrix value 1.
    ClassAnnotated,
    /// Matrix value -1.
    ClassImpossible,
    BoxFiltered(FilterReason),
    CapReached,
    NoFreeNegative,
    /// The prediction's vocabulary entry holds an image feature, not a class.
    NotAClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelDecision {
    pub detection: Detection,
    pub class_name: Option<String>,
    pub action: Action,
    pub reason: Reason,
}

/// Predictions whose best IoU with every ground-truth box, of any class,
/// is below `t`.
pub fn find_unmatched(preds: &[Detection], gts: &[GroundTruthBox], t: f64) -> Vec<Detection> {
    preds.iter().filter(|p| gts.iter().all(|g| iou(&p.bbox, &g.bbox) < t)).cloned().collect()
}

/// Route one unmatched prediction by its class's presence value.
pub fn decide(
    pred: &Detection,
    dataset_id: &str,
    matrix: &PresenceMatrix,
    vocab: &Vocabulary,
    confidence_threshold: f64,
) -> Result<PseudoLabelDecision, PseudoLabelError> {
    let entry = vocab.entry(pred.class_index).ok_or(PseudoLabelError::ClassIndex(pred.class_index))?;
    let Some(class) = entry.label.class() else {
        return Ok(PseudoLabelDecision { detection: pred.clone(), class_name: None, action: Action::Discard, reason: Reason::NotAClass });
    };
    let (action, reason) = match matrix.lookup(dataset_id, class)? {
        Presence::Unannotated if pred.confidence > confidence_threshold => (Action::InjectPseudoLabel, Reason::NotAnnotated),
        Presence::Unannotated => (Action::Discard, Reason::LowConfidence),
        Presence::Annotated => (Action::FeatureSubstitute, Reason::ClassAnnotated),
        Presence::Impossible => (Action::FeatureSubstitute, Reason::ClassImpossible),
    };
    Ok(PseudoLabelDecision { detection: pred.clone(), class_name: Some(class.to_string()), action, reason })
}

/// Integer pixel ranges covered by a box, clamped to the image.
fn pixel_span(bbox: &BBox, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let x0 = (bbox.x_min.floor().max(0.0) as usize).min(width);
    let y0 = (bbox.y_min.floor().max(0.0) as usize).min(height);
    let x1 = (bbox.x_max.ceil().max(0.0) as usize).min(width);
    let y1 = (bbox.y_max.ceil().max(0.0) as usize).min(height);
    (x0, y0, x1, y1)
}

pub fn filter_box(bbox: &BBox, image: ArrayView3<'_, u8>, filter: &BoxFilter) -> Result<(), FilterReason> {
    let (h, w, _) = image.dim();
    let image_area = (h * w) as f64;
    let frac = bbox.clamp_to(w as f64, h as f64).area() / image_area;
    if frac < filter.min_area_fraction {
        return Err(FilterReason::TooSmall);
    }
    if frac > filter.max_area_fraction {
        return Err(FilterReason::FullImage);
    }
    let (x0, y0, x1, y1) = pixel_span(bbox, w, h);
    let region = image.slice(s![y0..y1, x0..x1, ..]);
    let total = (y1 - y0) * (x1 - x0);
    if total == 0 {
        return Err(FilterReason::TooSmall);
    }
    let dark = region.outer_iter().flat_map(|row| row.outer_iter().map(|px| px.iter().all(|&v| v <= filter.near_zero_level)).collect::<Vec<_>>()).filter(|&d| d).count();
    if dark as f64 / total as f64 > filter.max_background_fraction {
        return Err(FilterReason::Background);
    }
    Ok(())
}

/// Scale width and height by `factor` about the centre, then clamp.
pub fn expand_box(bbox: &BBox, factor: f64, width: f64, height: f64) -> BBox {
    let (cx, cy) = bbox.center();
    BBox::from_center(cx, cy, bbox.width() * factor, bbox.height() * factor).clamp_to(width, height)
}

/// Pixels under `bbox`, at least one pixel in each direction.
pub fn crop(image: ArrayView3<'_, u8>, bbox: &BBox) -> Array3<u8> {
    let (h, w, _) = image.dim();
    let (mut x0, mut y0, mut x1, mut y1) = pixel_span(bbox, w, h);
    if x1 <= x0 {
        x0 = x0.min(w - 1);
        x1 = x0 + 1;
    }
    if y1 <= y0 {
        y0 = y0.min(h - 1);
        y1 = y0 + 1;
    }
    image.slice(s![y0..y1, x0..x1, ..]).to_owned()
}

/// A training box and the vocabulary entry it is a positive for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBox {
    pub gt: GroundTruthBox,
    pub entry: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTargets {
    pub boxes: Vec<TargetBox>,
    pub vocabulary: Vocabulary,
}

impl TrainingTargets {
    /// Bind every annotation to its class entry.
    pub fn from_annotations(annotations: &[GroundTruthBox], vocabulary: Vocabulary) -> Result<Self, PseudoLabelError> {
        let boxes = annotations
            .iter()
            .map(|g| {
                let entry = vocabulary.position(&g.class_name).ok_or_else(|| PseudoLabelError::MissingClass(g.class_name.clone()))?;
                Ok(TargetBox { gt: g.clone(), entry })
            })
            .collect::<Result<_, PseudoLabelError>>()?;
        Ok(Self { boxes, vocabulary })
    }

    pub fn originals(&self) -> impl Iterator<Item = &TargetBox> {
        self.boxes.iter().filter(|b| !b.gt.is_pseudo)
    }

    pub fn ground_truth(&self) -> Vec<GroundTruthBox> {
        self.boxes.iter().map(|b| b.gt.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditCounts {
    pub predictions: usize,
    pub unmatched: usize,
    pub injected: usize,
    pub substituted: usize,
    pub low_confidence: usize,
    pub box_filtered: usize,
    pub cap_reached: usize,
    pub no_free_negative: usize,
    pub not_a_class: usize,
}

impl AuditCounts {
    pub fn add(&mut self, other: &AuditCounts) {
        self.predictions += other.predictions;
        self.unmatched += other.unmatched;
        self.injected += other.injected;
        self.substituted += other.substituted;
        self.low_confidence += other.low_confidence;
        self.box_filtered += other.box_filtered;
        self.cap_reached += other.cap_reached;
        self.no_free_negative += other.no_free_negative;
        self.not_a_class += other.not_a_class;
    }

    fn record(&mut self, d: &PseudoLabelDecision) {
        match (d.action, d.reason) {
            (Action::InjectPseudoLabel, _) => self.injected += 1,
            (Action::FeatureSubstitute, _) => self.substituted += 1,
            (Action::Discard, Reason::LowConfidence) => self.low_confidence += 1,
            (Action::Discard, Reason::BoxFiltered(_)) => self.box_filtered += 1,
            (Action::Discard, Reason::CapReached) => self.cap_reached += 1,
            (Action::Discard, Reason::NoFreeNegative) => self.no_free_negative += 1,
            (Action::Discard, _) => self.not_a_class += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApplyOutcome {
    pub targets: TrainingTargets,
    /// Final decision for every unmatched prediction, in input order.
    pub decisions: Vec<PseudoLabelDecision>,
    pub counts: AuditCounts,
}

/// Update one sample's targets from its post-NMS predictions.
///
/// Injections are handled first and turn their vocabulary entry into a
/// positive. Substitution candidates then go in descending confidence; each
/// one that passes the box filter takes a free negative entry.
pub fn apply<R: Rng + ?Sized>(
    preds: &[Detection],
    sample: &SliceSample,
    matrix: &PresenceMatrix,
    vocabulary: Vocabulary,
    encoder: &dyn FoundationEncoder,
    config: &PseudoLabelConfig,
    rng: &mut R,
) -> Result<ApplyOutcome, PseudoLabelError> {
    let mut targets = TrainingTargets::from_annotations(&sample.annotations, vocabulary)?;
    let unmatched = find_unmatched(preds, &sample.annotations, config.iou_threshold);
    let mut decisions = unmatched
        .iter()
        .map(|p| decide(p, &sample.dataset_id, matrix, &targets.vocabulary, config.confidence_threshold))
        .collect::<Result<Vec<_>, _>>()?;

    let by_confidence = |action: Action, decisions: &[PseudoLabelDecision]| {
        let mut idx: Vec<usize> = (0..decisions.len()).filter(|&i| decisions[i].action == action).collect();
        idx.sort_by(|&a, &b| decisions[b].detection.confidence.total_cmp(&decisions[a].detection.confidence));
        idx
    };

    let mut injected = 0usize;
    for i in by_confidence(Action::InjectPseudoLabel, &decisions) {
        if config.max_injections.is_some_and(|cap| injected >= cap) {
            decisions[i].action = Action::Discard;
            decisions[i].reason = Reason::CapReached;
            continue;
        }
        let d = &decisions[i];
        let entry = d.detection.class_index;
        targets.vocabulary.mark_positive(entry)?;
        let class = d.class_name.clone().expect("injections carry a class");
        targets.boxes.push(TargetBox { gt: GroundTruthBox::pseudo(d.detection.bbox, class), entry });
        injected += 1;
    }

    let (h, w) = (sample.height() as f64, sample.width() as f64);
    let mut substituted = 0usize;
    for i in by_confidence(Action::FeatureSubstitute, &decisions) {
        let d = &mut decisions[i];
        if substituted >= config.max_substitutions {
            (d.action, d.reason) = (Action::Discard, Reason::CapReached);
            continue;
        }
        if let Err(why) = filter_box(&d.detection.bbox, sample.image.view(), &config.filter) {
            (d.action, d.reason) = (Action::Discard, Reason::BoxFiltered(why));
            continue;
        }
        let Some(entry) = targets.vocabulary.next_free_negative(config.negative_choice, rng) else {
            (d.action, d.reason) = (Action::Discard, Reason::NoFreeNegative);
            continue;
        };
        let region = expand_box(&d.detection.bbox, config.expand_factor, w, h);
        let embedding = encoder.encode_image(crop(sample.image.view(), &region).view())?;
        targets.vocabulary.substitute_entry(entry, embedding)?;
        targets.boxes.push(TargetBox { gt: GroundTruthBox::pseudo(d.detection.bbox, SUBSTITUTED_LABEL), entry });
        substituted += 1;
    }

    let mut counts = AuditCounts { predictions: preds.len(), unmatched: unmatched.len(), ..Default::default() };
    for d in &decisions {
        counts.record(d);
    }
    Ok(ApplyOutcome { targets, decisions, counts })
}
