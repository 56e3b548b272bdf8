//! Evaluation metrics, all reported as fractions in [0, 1].

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::codec::{BoxAnn, LabelMap};
use crate::decode::ScoredBox;
use crate::geometry::{BBox, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// A prediction to rank: category, confidence and its index in the image.
#[derive(Debug, Clone, Copy)]
pub struct Ranked {
    pub image: usize,
    pub index: usize,
    pub category: usize,
    pub score: f64,
}

/// 101-point interpolated AP of one class at one threshold. `preds` must be
/// sorted by descending score; `iou(p, g)` scores a prediction against
/// ground truth `g` of the same image.
fn class_ap(preds: &[Ranked], gt_count: &HashMap<usize, Vec<usize>>, thr: f64, iou: &dyn Fn(&Ranked, usize) -> f64) -> f64 {
    let total: usize = gt_count.values().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let mut used: HashMap<usize, Vec<bool>> = gt_count.iter().map(|(&i, g)| (i, vec![false; g.len()])).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(preds.len());
    let mut recall = Vec::with_capacity(preds.len());
    for (k, p) in preds.iter().enumerate() {
        if let (Some(gts), Some(flags)) = (gt_count.get(&p.image), used.get_mut(&p.image)) {
            let mut best = None;
            let mut best_iou = thr;
            for (j, &g) in gts.iter().enumerate() {
                if flags[j] {
                    continue;
                }
                let v = iou(p, g);
                if v >= best_iou {
                    best_iou = v;
                    best = Some(j);
                }
            }
            if let Some(j) = best {
                flags[j] = true;
                tp += 1;
            }
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / total as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let k = recall.partition_point(|&x| x < r);
        if k < precision.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

/// COCO-style AP with a caller-supplied overlap.
/// `gts[i]` lists `(category, id)` of image `i`; `iou(pred, gt_id)`.
pub fn eval_ap_generic(preds: &[Ranked], gts: &[Vec<(usize, usize)>], iou: &dyn Fn(&Ranked, usize) -> f64) -> ApReport {
    let cats: BTreeSet<usize> = gts.iter().flatten().map(|g| g.0).collect();
    if cats.is_empty() {
        return ApReport::default();
    }
    let thr = iou_thresholds();
    let mut per_thr = vec![0.0; thr.len()];
    for &c in &cats {
        let mut ps: Vec<Ranked> = preds.iter().copied().filter(|p| p.category == c).collect();
        ps.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image.cmp(&b.image)).then(a.index.cmp(&b.index)));
        let mut by_image: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, g) in gts.iter().enumerate() {
            for &(gc, id) in g {
                if gc == c {
                    by_image.entry(i).or_default().push(id);
                }
            }
        }
        for (t, &th) in thr.iter().enumerate() {
            per_thr[t] += class_ap(&ps, &by_image, th, iou);
        }
    }
    let n = cats.len() as f64;
    let per: Vec<f64> = per_thr.iter().map(|v| v / n).collect();
    ApReport { ap: per.iter().sum::<f64>() / per.len() as f64, ap50: per[0], ap75: per[5] }
}

/// Box AP over images; `preds[i]` and `gts[i]` belong to image `i`.
pub fn eval_ap(preds: &[Vec<ScoredBox>], gts: &[Vec<BoxAnn>]) -> ApReport {
    let ranked: Vec<Ranked> = preds
        .iter()
        .enumerate()
        .flat_map(|(i, ps)| ps.iter().enumerate().map(move |(j, p)| Ranked { image: i, index: j, category: p.category, score: p.score }))
        .collect();
    let ids: Vec<Vec<(usize, usize)>> = gts.iter().map(|g| g.iter().enumerate().map(|(j, b)| (b.category, j)).collect()).collect();
    eval_ap_generic(&ranked, &ids, &|p, g| preds[p.image][p.index].bbox.iou(&gts[p.image][g].bbox))
}

/// Mask AP; predictions are `(category, score, mask)`.
pub fn eval_mask_ap(preds: &[Vec<(usize, f64, Mask)>], gts: &[Vec<(usize, Mask)>]) -> ApReport {
    let ranked: Vec<Ranked> = preds
        .iter()
        .enumerate()
        .flat_map(|(i, ps)| ps.iter().enumerate().map(move |(j, p)| Ranked { image: i, index: j, category: p.0, score: p.1 }))
        .collect();
    let ids: Vec<Vec<(usize, usize)>> = gts.iter().map(|g| g.iter().enumerate().map(|(j, m)| (m.0, j)).collect()).collect();
    eval_ap_generic(&ranked, &ids, &|p, g| preds[p.image][p.index].2.iou(&gts[p.image][g].1))
}

/// Mean over ground-truth instances of the best same-class mask IoU.
pub fn mean_best_mask_iou(preds: &[Vec<(usize, f64, Mask)>], gts: &[Vec<(usize, Mask)>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (ps, gs) in preds.iter().zip(gts) {
        for (c, m) in gs {
            sum += ps.iter().filter(|p| p.0 == *c).map(|p| p.2.iou(m)).fold(0.0, f64::max);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Dataset-level per-class IoU (intersections and unions accumulated over
/// all images), averaged over classes present in either map.
pub fn eval_miou(preds: &[LabelMap], gts: &[LabelMap]) -> f64 {
    let mut inter: HashMap<u32, u64> = HashMap::new();
    let mut union: HashMap<u32, u64> = HashMap::new();
    for (p, g) in preds.iter().zip(gts) {
        assert_eq!((p.width, p.height), (g.width, g.height), "label maps differ in shape");
        for (&a, &b) in p.labels.iter().zip(&g.labels) {
            if a == b {
                *inter.entry(a).or_default() += 1;
                *union.entry(a).or_default() += 1;
            } else {
                *union.entry(a).or_default() += 1;
                *union.entry(b).or_default() += 1;
            }
        }
    }
    if union.is_empty() {
        return 0.0;
    }
    let total: f64 = union.iter().map(|(c, &u)| *inter.get(c).unwrap_or(&0) as f64 / u as f64).sum();
    total / union.len() as f64
}

fn ngrams(words: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *m.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4, one reference per candidate, uniform weights, standard
/// brevity penalty. Orders with no n-grams on either side are left out of
/// the geometric mean (short identical sentences still score 1).
pub fn eval_bleu4(candidates: &[String], references: &[String]) -> f64 {
    let mut matched = [0usize; 4];
    let mut cand_total = [0usize; 4];
    let mut ref_total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let cw: Vec<&str> = c.split_whitespace().collect();
        let rw: Vec<&str> = r.split_whitespace().collect();
        c_len += cw.len();
        r_len += rw.len();
        for n in 1..=4 {
            let cg = ngrams(&cw, n);
            let rg = ngrams(&rw, n);
            cand_total[n - 1] += cg.values().sum::<usize>();
            ref_total[n - 1] += rg.values().sum::<usize>();
            matched[n - 1] += cg.iter().map(|(g, &k)| k.min(*rg.get(g).unwrap_or(&0))).sum::<usize>();
        }
    }
    if c_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..4 {
        if cand_total[n] == 0 && ref_total[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return 0.0;
        }
        log_sum += (matched[n] as f64 / cand_total[n] as f64).ln();
        orders += 1;
    }
    let bp = if c_len >= r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    bp * (log_sum / orders as f64).exp()
}

pub fn exact_match(candidates: &[String], references: &[String]) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    candidates.iter().zip(references).filter(|(a, b)| a == b).count() as f64 / candidates.len() as f64
}

/// Fraction of predictions with IoU ≥ 0.5 against their target.
pub fn eval_grounding_acc(preds: &[BBox], gts: &[BBox]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(gts).filter(|(p, g)| p.iou(g) >= 0.5).count() as f64 / preds.len() as f64
}
