//! Merging query predictions into per-pixel semantic or panoptic maps.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Class value of pixels not covered by any surviving segment.
pub const VOID_CLASS: usize = usize::MAX;

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_shapes(class_logits: ArrayView2<f64>, mask_logits: ArrayView3<f64>) -> Result<(usize, usize, usize, usize)> {
    let (q, columns) = class_logits.dim();
    let (qm, h, w) = mask_logits.dim();
    if qm != q {
        return Err(Error::Shape(format!(
            "{qm} mask rows for {q} class rows"
        )));
    }
    if columns < 2 {
        return Err(Error::Shape(
            "class logits need at least one real class plus no-object".into(),
        ));
    }
    Ok((q, columns - 1, h, w))
}

/// Per-pixel class scores, marginalized over queries:
/// `score[c] = sum_q softmax(class_logits[q])[c] * sigmoid(mask_logits[q])`.
/// The no-object column is excluded.
pub fn semantic_scores(
    class_logits: ArrayView2<f64>,
    mask_logits: ArrayView3<f64>,
) -> Result<Array3<f64>> {
    let (q, k, h, w) = check_shapes(class_logits, mask_logits)?;
    let mut scores = Array3::<f64>::zeros((k, h, w));
    for qi in 0..q {
        let row: Vec<f64> = class_logits.row(qi).iter().copied().collect();
        let probs = softmax_row(&row);
        for y in 0..h {
            for x in 0..w {
                let m = sigmoid(mask_logits[(qi, y, x)]);
                for (c, score) in probs[..k].iter().enumerate() {
                    scores[(c, y, x)] += score * m;
                }
            }
        }
    }
    Ok(scores)
}

/// Per-pixel argmax over [`semantic_scores`]; ties break to the lowest
/// class index.
pub fn semantic_inference(
    class_logits: ArrayView2<f64>,
    mask_logits: ArrayView3<f64>,
) -> Result<Array2<usize>> {
    let scores = semantic_scores(class_logits, mask_logits)?;
    let (k, h, w) = scores.dim();
    let mut out = Array2::<usize>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            for c in 1..k {
                if scores[(c, y, x)] > scores[(best, y, x)] {
                    best = c;
                }
            }
            out[(y, x)] = best;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanopticThresholds {
    /// Minimum class confidence for a query to produce a segment.
    pub object_score: f64,
    /// Minimum retained fraction of a segment's soft mask area.
    pub overlap: f64,
}

impl Default for PanopticThresholds {
    fn default() -> Self {
        PanopticThresholds {
            object_score: 0.8,
            overlap: 0.8,
        }
    }
}

/// Per-pixel (class, segment id) map. Void pixels carry
/// `classes == VOID_CLASS` and `instance_ids == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticMap {
    pub classes: Array2<usize>,
    pub instance_ids: Array2<u32>,
}

/// Query-merging panoptic inference:
///
/// 1. keep queries whose argmax class (over all columns) is real and whose
///    confidence reaches `object_score`;
/// 2. assign every pixel to the kept query maximizing
///    `p_q(c_q) * sigmoid(mask_q)` (ties to the lowest query index);
/// 3. drop every segment whose assigned pixel count is below `overlap`
///    times its soft mask area, then re-assign among survivors until
///    stable;
/// 4. thing segments get distinct ids, stuff segments of one class merge.
pub fn panoptic_inference(
    class_logits: ArrayView2<f64>,
    mask_logits: ArrayView3<f64>,
    is_thing: &[bool],
    thresholds: &PanopticThresholds,
) -> Result<PanopticMap> {
    let (q, k, h, w) = check_shapes(class_logits, mask_logits)?;
    if is_thing.len() != k {
        return Err(Error::Shape(format!(
            "{} thing flags for {k} classes",
            is_thing.len()
        )));
    }

    // Step 1: keep confident real-class queries.
    let mut kept: Vec<(usize, usize, f64)> = Vec::new(); // (query, class, prob)
    for qi in 0..q {
        let row: Vec<f64> = class_logits.row(qi).iter().copied().collect();
        let probs = softmax_row(&row);
        let mut best = 0usize;
        for c in 1..=k {
            if probs[c] > probs[best] {
                best = c;
            }
        }
        if best < k && probs[best] >= thresholds.object_score {
            kept.push((qi, best, probs[best]));
        }
    }

    let mut classes = Array2::<usize>::from_elem((h, w), VOID_CLASS);
    let mut ids = Array2::<u32>::zeros((h, w));
    if kept.is_empty() {
        return Ok(PanopticMap {
            classes,
            instance_ids: ids,
        });
    }

    // Score maps and soft areas of the kept queries.
    let score_maps: Vec<Array2<f64>> = kept
        .iter()
        .map(|&(qi, _, prob)| {
            Array2::from_shape_fn((h, w), |(y, x)| prob * sigmoid(mask_logits[(qi, y, x)]))
        })
        .collect();
    let soft_areas: Vec<f64> = kept
        .iter()
        .map(|&(qi, _, _)| {
            let mut area = 0.0;
            for y in 0..h {
                for x in 0..w {
                    area += sigmoid(mask_logits[(qi, y, x)]);
                }
            }
            area
        })
        .collect();

    // Steps 2-3: assign and prune until stable.
    let mut active: Vec<bool> = vec![true; kept.len()];
    let mut assignment = Array2::<usize>::zeros((h, w));
    loop {
        if !active.iter().any(|&a| a) {
            return Ok(PanopticMap {
                classes,
                instance_ids: ids,
            });
        }
        for y in 0..h {
            for x in 0..w {
                let mut best: Option<usize> = None;
                for (s, map) in score_maps.iter().enumerate() {
                    if !active[s] {
                        continue;
                    }
                    if best.is_none_or(|b| map[(y, x)] > score_maps[b][(y, x)]) {
                        best = Some(s);
                    }
                }
                assignment[(y, x)] = best.expect("at least one active segment");
            }
        }
        let mut assigned = vec![0usize; kept.len()];
        for &s in assignment.iter() {
            assigned[s] += 1;
        }
        let mut pruned = false;
        for (s, act) in active.iter_mut().enumerate() {
            if !*act {
                continue;
            }
            let retained = assigned[s] as f64;
            if soft_areas[s] <= 0.0 || retained / soft_areas[s] < thresholds.overlap {
                *act = false;
                pruned = true;
            }
        }
        if !pruned {
            break;
        }
    }

    // Step 4: deterministic id assignment in query order.
    let mut next_id = 1u32;
    let mut stuff_ids: std::collections::HashMap<usize, u32> = std::collections::HashMap::new();
    let mut segment_id = vec![0u32; kept.len()];
    for (s, &(_, class, _)) in kept.iter().enumerate() {
        if !active[s] {
            continue;
        }
        segment_id[s] = if is_thing[class] {
            let id = next_id;
            next_id += 1;
            id
        } else {
            *stuff_ids.entry(class).or_insert_with(|| {
                let id = next_id;
                next_id += 1;
                id
            })
        };
    }
    for y in 0..h {
        for x in 0..w {
            let s = assignment[(y, x)];
            classes[(y, x)] = kept[s].1;
            ids[(y, x)] = segment_id[s];
        }
    }
    Ok(PanopticMap {
        classes,
        instance_ids: ids,
    })
}
