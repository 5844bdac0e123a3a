//! Semantic (mIoU) and panoptic (PQ family) evaluation with mergeable
//! accumulators. All arithmetic is f64.

use std::collections::HashMap;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kitti_io::{ClassConfig, PanopticResult};

/// Confusion-matrix accumulator over train ids; rows are ground truth,
/// columns predictions, the ignore id is excluded at accumulation time.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionAccumulator {
    matrix: Array2<u64>,
    num_classes: usize,
    ignore_id: u16,
}

impl ConfusionAccumulator {
    pub fn new(cfg: &ClassConfig) -> Self {
        let n = cfg.num_classes() + 1;
        ConfusionAccumulator {
            matrix: Array2::zeros((n, n)),
            num_classes: cfg.num_classes(),
            ignore_id: cfg.ignore_id(),
        }
    }

    pub fn accumulate(&mut self, pred: &[u16], gt: &[u16]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "{} predictions vs {} ground-truth labels",
                pred.len(),
                gt.len()
            )));
        }
        let n = self.matrix.dim().0;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == self.ignore_id {
                continue;
            }
            if (g as usize) < n && (p as usize) < n {
                self.matrix[(g as usize, p as usize)] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        self.matrix += &other.matrix;
    }

    pub fn count(&self, gt: u16, pred: u16) -> u64 {
        self.matrix[(gt as usize, pred as usize)]
    }

    /// Per-class IoU (`None` for classes absent from both sides) and the
    /// mean over defined classes (`None` when no class is defined).
    pub fn miou(&self) -> (Vec<Option<f64>>, Option<f64>) {
        let n = self.matrix.dim().0;
        let mut per_class = vec![None; n];
        let mut sum = 0.0;
        let mut count = 0usize;
        for c in 0..n {
            if c == self.ignore_id as usize {
                continue;
            }
            let tp = self.matrix[(c, c)];
            let row: u64 = (0..n).map(|j| self.matrix[(c, j)]).sum();
            let col: u64 = (0..n).map(|i| self.matrix[(i, c)]).sum();
            let denom = row + col - tp;
            if denom == 0 {
                continue;
            }
            let iou = tp as f64 / denom as f64;
            per_class[c] = Some(iou);
            sum += iou;
            count += 1;
        }
        let mean = (count > 0).then(|| sum / count as f64);
        (per_class, mean)
    }
}

/// Semantic accumulation entry point matching the evaluation pipeline.
pub fn accumulate_semantic(acc: &mut ConfusionAccumulator, pred: &[u16], gt: &[u16]) -> Result<()> {
    acc.accumulate(pred, gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct PqCounts {
    tp: u64,
    fp: u64,
    fn_: u64,
    iou_sum: f64,
    /// Point-level semantic tallies for the stuff-IoU variant.
    sem_intersection: u64,
    sem_union: u64,
}

/// Per-class matching counts for the panoptic metrics, mergeable across
/// shards.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticAccumulator {
    per_class: Vec<PqCounts>,
    num_classes: usize,
    ignore_id: u16,
}

type SegmentKey = (u16, u32);

fn segment_key(cfg: &ClassConfig, sem: u16, inst: u32) -> SegmentKey {
    // Stuff segments carry class-level ids.
    if cfg.is_thing(sem) {
        (sem, inst)
    } else {
        (sem, 0)
    }
}

impl PanopticAccumulator {
    pub fn new(cfg: &ClassConfig) -> Self {
        PanopticAccumulator {
            per_class: vec![PqCounts::default(); cfg.num_classes() + 1],
            num_classes: cfg.num_classes(),
            ignore_id: cfg.ignore_id(),
        }
    }

    pub fn merge(&mut self, other: &PanopticAccumulator) {
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.iou_sum += b.iou_sum;
            a.sem_intersection += b.sem_intersection;
            a.sem_union += b.sem_union;
        }
    }

    /// Match segments of one frame pair by IoU > 0.5 (such matches are
    /// unique), updating tp/fp/fn and the IoU sums. Ground-truth ignore
    /// points form the void region: they are excluded from IoU
    /// denominators, and predicted segments mostly covered by void are not
    /// penalized as false positives.
    pub fn accumulate(
        &mut self,
        pred: &PanopticResult,
        gt: &PanopticResult,
        cfg: &ClassConfig,
    ) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "{} predicted points vs {} ground-truth points",
                pred.len(),
                gt.len()
            )));
        }

        let mut gt_area: HashMap<SegmentKey, u64> = HashMap::new();
        let mut pred_area: HashMap<SegmentKey, u64> = HashMap::new();
        let mut pred_void: HashMap<SegmentKey, u64> = HashMap::new();
        let mut intersections: HashMap<(SegmentKey, SegmentKey), u64> = HashMap::new();

        for i in 0..pred.len() {
            let (gs, gi) = (gt.semantic[i], gt.instance[i]);
            let (ps, pi) = (pred.semantic[i], pred.instance[i]);
            let g_void = gs == self.ignore_id;
            let p_void = ps == self.ignore_id;

            if !p_void {
                let pk = segment_key(cfg, ps, pi);
                *pred_area.entry(pk).or_insert(0) += 1;
                if g_void {
                    *pred_void.entry(pk).or_insert(0) += 1;
                }
            }
            if !g_void {
                let gk = segment_key(cfg, gs, gi);
                *gt_area.entry(gk).or_insert(0) += 1;
                if !p_void {
                    let pk = segment_key(cfg, ps, pi);
                    *intersections.entry((gk, pk)).or_insert(0) += 1;
                }
                // Point-level semantic tallies (void excluded).
                let i_gs = gs as usize;
                let i_ps = ps as usize;
                if gs == ps {
                    self.per_class[i_gs].sem_intersection += 1;
                    self.per_class[i_gs].sem_union += 1;
                } else {
                    if i_gs < self.per_class.len() {
                        self.per_class[i_gs].sem_union += 1;
                    }
                    if !p_void && i_ps < self.per_class.len() {
                        self.per_class[i_ps].sem_union += 1;
                    }
                }
            }
        }

        let mut gt_matched: HashMap<SegmentKey, SegmentKey> = HashMap::new();
        let mut pred_matched: HashMap<SegmentKey, SegmentKey> = HashMap::new();
        for (&(gk, pk), &inter) in &intersections {
            if gk.0 != pk.0 {
                continue; // only same-class segments can match
            }
            let union = gt_area[&gk] + pred_area[&pk]
                - inter
                - pred_void.get(&pk).copied().unwrap_or(0);
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                // IoU > 0.5 matches are unique per segment.
                assert!(
                    gt_matched.insert(gk, pk).is_none(),
                    "ground-truth segment matched twice"
                );
                assert!(
                    pred_matched.insert(pk, gk).is_none(),
                    "predicted segment matched twice"
                );
                let c = gk.0 as usize;
                self.per_class[c].tp += 1;
                self.per_class[c].iou_sum += iou;
            }
        }

        for gk in gt_area.keys() {
            if !gt_matched.contains_key(gk) {
                self.per_class[gk.0 as usize].fn_ += 1;
            }
        }
        for (pk, &area) in &pred_area {
            if pred_matched.contains_key(pk) {
                continue;
            }
            let void = pred_void.get(pk).copied().unwrap_or(0);
            // Predictions mostly inside the void region are not counted.
            if void as f64 / area as f64 > 0.5 {
                continue;
            }
            self.per_class[pk.0 as usize].fp += 1;
        }
        Ok(())
    }
}

/// Panoptic accumulation entry point matching the evaluation pipeline.
pub fn accumulate_panoptic(
    acc: &mut PanopticAccumulator,
    pred: &PanopticResult,
    gt: &PanopticResult,
    cfg: &ClassConfig,
) -> Result<()> {
    acc.accumulate(pred, gt, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassPanoptic {
    pub id: u16,
    pub name: String,
    pub is_thing: bool,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub pq: f64,
    pub rq: f64,
    pub sq: f64,
    /// Point-level semantic IoU, used for stuff classes in the dagger
    /// variant; `None` when the class appears nowhere.
    pub sem_iou: Option<f64>,
    /// Present means the class appears in prediction or ground truth.
    pub present: bool,
}

/// Aggregated panoptic report; `None` aggregates mean "no class of that
/// kind was present".
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanopticReport {
    pub per_class: Vec<ClassPanoptic>,
    pub pq: Option<f64>,
    pub rq: Option<f64>,
    pub sq: Option<f64>,
    pub pq_dagger: Option<f64>,
    pub pq_things: Option<f64>,
    pub rq_things: Option<f64>,
    pub sq_things: Option<f64>,
    pub pq_stuff: Option<f64>,
    pub rq_stuff: Option<f64>,
    pub sq_stuff: Option<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-class PQ / RQ / SQ and their aggregates. Classes absent from both
/// prediction and ground truth are excluded from the means.
pub fn panoptic_report(acc: &PanopticAccumulator, cfg: &ClassConfig) -> PanopticReport {
    let mut per_class = Vec::new();
    let mut pq_all = Vec::new();
    let mut rq_all = Vec::new();
    let mut sq_all = Vec::new();
    let mut dagger_all = Vec::new();
    let mut pq_things = Vec::new();
    let mut rq_things = Vec::new();
    let mut sq_things = Vec::new();
    let mut pq_stuff = Vec::new();
    let mut rq_stuff = Vec::new();
    let mut sq_stuff = Vec::new();

    for id in cfg.class_ids() {
        let c = &acc.per_class[id as usize];
        let denom = c.tp as f64 + 0.5 * c.fp as f64 + 0.5 * c.fn_ as f64;
        let present = denom > 0.0 || c.sem_union > 0;
        let (pq, rq, sq) = if denom > 0.0 {
            (
                c.iou_sum / denom,
                c.tp as f64 / denom,
                if c.tp > 0 {
                    c.iou_sum / c.tp as f64
                } else {
                    0.0
                },
            )
        } else {
            (0.0, 0.0, 0.0)
        };
        let sem_iou = (c.sem_union > 0).then(|| c.sem_intersection as f64 / c.sem_union as f64);
        let is_thing = cfg.is_thing(id);
        if present {
            pq_all.push(pq);
            rq_all.push(rq);
            sq_all.push(sq);
            // The dagger variant scores stuff classes by semantic IoU.
            dagger_all.push(if is_thing {
                pq
            } else {
                sem_iou.unwrap_or(0.0)
            });
            if is_thing {
                pq_things.push(pq);
                rq_things.push(rq);
                sq_things.push(sq);
            } else {
                pq_stuff.push(pq);
                rq_stuff.push(rq);
                sq_stuff.push(sq);
            }
        }
        per_class.push(ClassPanoptic {
            id,
            name: cfg.name(id).to_string(),
            is_thing,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            pq,
            rq,
            sq,
            sem_iou,
            present,
        });
    }

    PanopticReport {
        per_class,
        pq: mean(&pq_all),
        rq: mean(&rq_all),
        sq: mean(&sq_all),
        pq_dagger: mean(&dagger_all),
        pq_things: mean(&pq_things),
        rq_things: mean(&rq_things),
        sq_things: mean(&sq_things),
        pq_stuff: mean(&pq_stuff),
        rq_stuff: mean(&rq_stuff),
        sq_stuff: mean(&sq_stuff),
    }
}
