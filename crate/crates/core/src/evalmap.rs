//! Detection evaluation: greedy matching at a fixed IoU threshold,
//! all-point interpolated average precision per class, and mAP.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{BoxAnnotation, Detection};
use crate::geometry::BBox;
use crate::toydomains::DatasetManifest;
use crate::{Error, Result};

pub use crate::geometry::iou;

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// AP of every class that has ground truth.
    pub per_class_ap: BTreeMap<usize, f64>,
    #[serde(rename = "map")]
    pub map_score: f64,
    pub iou_threshold: f64,
}

impl Metrics {
    /// `class_id,ap` rows followed by `mAP,<value>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class_id,ap\n");
        for (c, ap) in &self.per_class_ap {
            let _ = writeln!(s, "{c},{ap}");
        }
        let _ = writeln!(s, "mAP,{}", self.map_score);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// Parses the CSV form back.
    pub fn from_csv(text: &str, iou_threshold: f64) -> Result<Self> {
        let mut per_class_ap = BTreeMap::new();
        let mut map_score = None;
        for (n, line) in text.lines().enumerate().skip(1) {
            let bad = || Error::InvalidInput(format!("metrics csv line {}: `{line}`", n + 1));
            let (k, v) = line.split_once(',').ok_or_else(bad)?;
            let v: f64 = v.trim().parse().map_err(|_| bad())?;
            if k == "mAP" {
                map_score = Some(v);
            } else {
                per_class_ap.insert(k.trim().parse().map_err(|_| bad())?, v);
            }
        }
        Ok(Self {
            per_class_ap,
            map_score: map_score.ok_or_else(|| Error::InvalidInput("metrics csv has no mAP row".into()))?,
            iou_threshold,
        })
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json() + "\n").map_err(|e| Error::io(&json, e))
    }
}

/// A scored box of one class, tagged with its image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Whether each detection, taken in descending score order (ties in input
/// order), is a true positive. A detection claims the unmatched ground truth
/// of its image with the highest IoU, provided that IoU reaches the
/// threshold.
pub fn match_detections(dets: &[Scored], gts: &[(usize, BBox)], iou_threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    order
        .iter()
        .map(|&i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, (img, b)) in gts.iter().enumerate() {
                if *img != d.image || taken[g] {
                    continue;
                }
                let o = iou(&d.bbox, b);
                if o >= iou_threshold && best.map_or(true, |(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP from ranked true/false-positive flags.
pub fn ap_from_flags(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// AP of one class; `None` when it has no ground truth.
pub fn average_precision(dets: &[Scored], gts: &[(usize, BBox)], iou_threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    Some(ap_from_flags(&match_detections(dets, gts, iou_threshold), gts.len()))
}

/// Pools detections per class over images and averages AP over the classes
/// present in the ground truth.
pub fn evaluate(preds: &[Vec<Detection>], gts: &[Vec<BoxAnnotation>], iou_threshold: f64) -> Result<Metrics> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "{} prediction lists for {} images",
            preds.len(),
            gts.len()
        )));
    }
    let mut by_class: BTreeMap<usize, (Vec<Scored>, Vec<(usize, BBox)>)> = BTreeMap::new();
    for (img, boxes) in gts.iter().enumerate() {
        for b in boxes {
            by_class.entry(b.class_id).or_default().1.push((img, b.bbox));
        }
    }
    for (img, dets) in preds.iter().enumerate() {
        for d in dets {
            if let Some(entry) = by_class.get_mut(&d.class_id) {
                entry.0.push(Scored {
                    image: img,
                    score: d.score,
                    bbox: d.bbox,
                });
            }
        }
    }
    let per_class_ap: BTreeMap<usize, f64> = by_class
        .iter()
        .filter_map(|(&c, (d, g))| average_precision(d, g, iou_threshold).map(|ap| (c, ap)))
        .collect();
    let map_score = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    Ok(Metrics {
        per_class_ap,
        map_score,
        iou_threshold,
    })
}

/// Evaluates against the annotations of `manifest`, one prediction list per
/// image in manifest order.
pub fn evaluate_manifest(preds: &[Vec<Detection>], manifest: &DatasetManifest, iou_threshold: f64) -> Result<Metrics> {
    let gts: Vec<Vec<BoxAnnotation>> = (0..manifest.len()).map(|i| manifest.boxes(i).to_vec()).collect();
    evaluate(preds, &gts, iou_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(class_id: usize, score: f64, b: [f64; 4]) -> Detection {
        Detection {
            class_id,
            score,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
        }
    }

    fn gt(class_id: usize, b: [f64; 4]) -> BoxAnnotation {
        BoxAnnotation {
            class_id,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
        }
    }

    /// Independent reference: naive matching per detection and
    /// interpolated precision sampled at each achievable recall k / G.
    fn oracle_map(preds: &[Vec<Detection>], gts: &[Vec<BoxAnnotation>], thr: f64) -> f64 {
        let classes: std::collections::BTreeSet<usize> = gts.iter().flatten().map(|g| g.class_id).collect();
        if classes.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for &c in &classes {
            let mut dets: Vec<(usize, usize, &Detection)> = Vec::new();
            for (img, ds) in preds.iter().enumerate() {
                for d in ds.iter().filter(|d| d.class_id == c) {
                    dets.push((dets.len(), img, d));
                }
            }
            // stable: equal scores keep pooled order
            dets.sort_by(|a, b| b.2.score.partial_cmp(&a.2.score).unwrap().then(a.0.cmp(&b.0)));
            let gt_list: Vec<(usize, &BoxAnnotation)> = gts
                .iter()
                .enumerate()
                .flat_map(|(i, g)| g.iter().filter(|g| g.class_id == c).map(move |g| (i, g)))
                .collect();
            let n_gt = gt_list.len();
            let mut used = vec![false; n_gt];
            let mut points = Vec::new();
            let mut tp = 0;
            for (k, (_, img, d)) in dets.iter().enumerate() {
                let mut cand: Option<usize> = None;
                for j in 0..n_gt {
                    let (gi, g) = gt_list[j];
                    if gi != *img || used[j] {
                        continue;
                    }
                    let o = iou(&d.bbox, &g.bbox);
                    if o >= thr && cand.map_or(true, |cj| o > iou(&d.bbox, &gt_list[cj].1.bbox)) {
                        cand = Some(j);
                    }
                }
                if let Some(j) = cand {
                    used[j] = true;
                    tp += 1;
                }
                points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
            }
            let mut ap = 0.0;
            for level in 1..=n_gt {
                let r = level as f64 / n_gt as f64;
                let p = points
                    .iter()
                    .filter(|(rr, _)| *rr >= r - 1e-12)
                    .map(|&(_, p)| p)
                    .fold(0.0, f64::max);
                ap += p / n_gt as f64;
            }
            total += ap;
        }
        total / classes.len() as f64
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn hand_enumerated_pr_curve() {
        assert!((ap_from_flags(&[true, false, true], 2) - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(ap_from_flags(&[true], 1), 1.0);
        assert_eq!(ap_from_flags(&[], 1), 0.0);
    }

    #[test]
    fn basic_ap_cases() {
        let g = vec![(0, BBox::new(0.0, 0.0, 10.0, 10.0))];
        let hit = Scored {
            image: 0,
            score: 0.9,
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
        };
        assert_eq!(average_precision(&[hit], &g, 0.5), Some(1.0));
        assert_eq!(average_precision(&[], &g, 0.5), Some(0.0));
        assert_eq!(average_precision(&[hit], &[], 0.5), None);
        // a match in another image does not count
        let elsewhere = Scored { image: 1, ..hit };
        assert_eq!(average_precision(&[elsewhere], &g, 0.5), Some(0.0));
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let preds = vec![vec![det(0, 0.9, b), det(0, 0.8, b)]];
        let m = evaluate(&preds, &[vec![gt(0, b)]], 0.5).unwrap();
        assert_eq!(m.map_score, 1.0);
        let preds = vec![vec![det(0, 0.7, b), det(0, 0.8, [20.0, 20.0, 30.0, 30.0])]];
        let m = evaluate(&preds, &[vec![gt(0, b)]], 0.5).unwrap();
        assert!((m.map_score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gts = vec![
            vec![gt(0, [0.0, 0.0, 5.0, 5.0]), gt(2, [6.0, 6.0, 12.0, 14.0])],
            vec![gt(2, [1.0, 1.0, 4.0, 4.0])],
        ];
        let perfect: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| g.iter().map(|a| Detection { class_id: a.class_id, score: 1.0, bbox: a.bbox }).collect())
            .collect();
        let m = evaluate(&perfect, &gts, 0.5).unwrap();
        assert_eq!(m.map_score, 1.0);
        assert_eq!(m.per_class_ap.keys().copied().collect::<Vec<_>>(), vec![0, 2]);
        let m = evaluate(&[vec![], vec![]], &gts, 0.5).unwrap();
        assert_eq!(m.map_score, 0.0);
        assert!(evaluate(&[vec![]], &gts, 0.5).is_err());
    }

    #[test]
    fn csv_and_json_layout() {
        let m = Metrics {
            per_class_ap: [(0, 0.5), (3, 1.0)].into_iter().collect(),
            map_score: 0.75,
            iou_threshold: 0.5,
        };
        assert_eq!(m.to_csv(), "class_id,ap\n0,0.5\n3,1\nmAP,0.75\n");
        assert_eq!(Metrics::from_csv(&m.to_csv(), 0.5).unwrap(), m);
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v["map"], 0.75);
        assert_eq!(v["per_class_ap"]["3"], 1.0);
    }

    fn small_instance() -> impl Strategy<Value = (Vec<Vec<Detection>>, Vec<Vec<BoxAnnotation>>)> {
        let bx = (0u8..6, 0u8..6, 2u8..6, 2u8..6).prop_map(|(x, y, w, h)| {
            [f64::from(x), f64::from(y), f64::from(x + w), f64::from(y + h)]
        });
        let g = (0usize..2, bx.clone()).prop_map(|(c, b)| gt(c, b));
        // coarse scores so ties occur
        let d = (0usize..2, 0u8..5, bx).prop_map(|(c, s, b)| det(c, f64::from(s) / 4.0, b));
        (1usize..=3).prop_flat_map(move |n_img| {
            (
                proptest::collection::vec(proptest::collection::vec(d.clone(), 0..=4), n_img),
                proptest::collection::vec(proptest::collection::vec(g.clone(), 0..=2), n_img),
            )
                .prop_filter("size bounds", |(p, g)| {
                    p.iter().map(Vec::len).sum::<usize>() <= 10 && g.iter().map(Vec::len).sum::<usize>() <= 5
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn map_equals_brute_force_oracle((preds, gts) in small_instance()) {
            let m = evaluate(&preds, &gts, 0.5).unwrap();
            prop_assert!((m.map_score - oracle_map(&preds, &gts, 0.5)).abs() < 1e-9);
            prop_assert!(m.per_class_ap.values().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn ap_invariant_under_score_rescaling((preds, gts) in small_instance(), k in 0.01f64..100.0) {
            let scaled: Vec<Vec<Detection>> = preds
                .iter()
                .map(|ds| ds.iter().map(|d| Detection { score: d.score * k, ..*d }).collect())
                .collect();
            let a = evaluate(&preds, &gts, 0.5).unwrap();
            let b = evaluate(&scaled, &gts, 0.5).unwrap();
            prop_assert!((a.map_score - b.map_score).abs() < 1e-12);
        }

        #[test]
        fn relabeling_a_tp_never_raises_ap(flags in proptest::collection::vec(any::<bool>(), 1..12), pick in any::<usize>()) {
            let n_gt = flags.iter().filter(|&&f| f).count().max(1) + 1;
            let tps: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
            prop_assume!(!tps.is_empty());
            let mut worse = flags.clone();
            worse[tps[pick % tps.len()]] = false;
            prop_assert!(ap_from_flags(&worse, n_gt) <= ap_from_flags(&flags, n_gt) + 1e-12);
        }
    }
}
