//! Evaluation: detection H-mean, end-to-end H-mean (lexicon None/Full) and
//! 1-NED, under greedy confidence-ordered polygon matching.

use serde::{Deserialize, Serialize};

use crate::data::TextInstance;
use crate::error::{Error, Result};
use crate::geometry::{polygon_iou, Polygon};

/// One detected-and-recognized instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpottingResult {
    pub polygon: Polygon,
    pub text: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DetectionScore {
    pub precision: f64,
    pub recall: f64,
    pub hmean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub detection: DetectionScore,
    pub e2e_none: f64,
    pub e2e_full: f64,
    pub one_minus_ned: f64,
    pub num_images: usize,
}

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

fn hmean(p: f64, r: f64) -> f64 {
    if p + r <= 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Greedy one-to-one matching: predictions in descending confidence order
/// (index as tie-break) claim the highest-IoU unmatched gt at or above the
/// threshold. Returns (pred index, gt index, iou) triples.
fn greedy_match(
    preds: &[SpottingResult],
    gts: &[TextInstance],
    iou_thr: f64,
) -> Vec<(usize, usize, f64)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::new();
    for pi in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = polygon_iou(&preds[pi].polygon, &gt.polygon);
            if v >= iou_thr && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, v)) = best {
            taken[gi] = true;
            matches.push((pi, gi, v));
        }
    }
    matches
}

/// Per-image accumulation for corpus-level precision/recall.
#[derive(Debug, Default, Clone)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub num_preds: usize,
    pub num_gts: usize,
}

impl MatchCounts {
    pub fn merge(&mut self, other: &MatchCounts) {
        self.true_positives += other.true_positives;
        self.num_preds += other.num_preds;
        self.num_gts += other.num_gts;
    }

    pub fn score(&self) -> DetectionScore {
        let precision = if self.num_preds == 0 {
            0.0
        } else {
            self.true_positives as f64 / self.num_preds as f64
        };
        let recall = if self.num_gts == 0 {
            0.0
        } else {
            self.true_positives as f64 / self.num_gts as f64
        };
        DetectionScore {
            precision,
            recall,
            hmean: hmean(precision, recall),
        }
    }
}

/// Split matches into counted ones and those absorbed by do-not-care gts.
/// Returns (kept matches, counted preds, counted gts).
fn care_filtered<'a>(
    preds: &[SpottingResult],
    gts: &'a [TextInstance],
    iou_thr: f64,
) -> (Vec<(usize, usize, f64)>, usize, usize) {
    let matches = greedy_match(preds, gts, iou_thr);
    let mut counted_preds = preds.len();
    let kept: Vec<_> = matches
        .iter()
        .filter(|&&(_, gi, _)| {
            if gts[gi].care {
                true
            } else {
                counted_preds -= 1; // matched a do-not-care region: excluded
                false
            }
        })
        .cloned()
        .collect();
    let counted_gts = gts.iter().filter(|g| g.care).count();
    (kept, counted_preds, counted_gts)
}

/// Detection counts for one image at the given IoU threshold.
pub fn detection_counts(
    preds: &[SpottingResult],
    gts: &[TextInstance],
    iou_thr: f64,
) -> MatchCounts {
    let (kept, counted_preds, counted_gts) = care_filtered(preds, gts, iou_thr);
    MatchCounts {
        true_positives: kept.len(),
        num_preds: counted_preds,
        num_gts: counted_gts,
    }
}

/// Detection precision/recall/H-mean for one image.
pub fn detection_hmean(
    preds: &[SpottingResult],
    gts: &[TextInstance],
    iou_thr: f64,
) -> DetectionScore {
    detection_counts(preds, gts, iou_thr).score()
}

/// Levenshtein edit distance over unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Replace a predicted word by the closest lexicon entry (minimum edit
/// distance, ties broken lexicographically).
pub fn lexicon_correct<'a>(word: &'a str, lexicon: &'a [String]) -> &'a str {
    let mut best: Option<(&str, usize)> = None;
    for entry in lexicon {
        let d = edit_distance(&word.to_lowercase(), &entry.to_lowercase());
        match best {
            Some((bw, bd)) if d > bd || (d == bd && entry.as_str() >= bw) => {}
            _ => best = Some((entry.as_str(), d)),
        }
    }
    best.map(|(w, _)| w).unwrap_or(word)
}

/// End-to-end counts: a true positive needs IoU >= threshold and
/// case-insensitive transcription equality. With a lexicon, predictions are
/// corrected first (`Full` protocol).
pub fn e2e_counts(
    preds: &[SpottingResult],
    gts: &[TextInstance],
    iou_thr: f64,
    lexicon: Option<&[String]>,
) -> Result<MatchCounts> {
    if let Some(lex) = lexicon {
        if lex.is_empty() {
            return Err(Error::Data("empty lexicon in Full mode".into()));
        }
    }
    let (kept, counted_preds, counted_gts) = care_filtered(preds, gts, iou_thr);
    let tp = kept
        .iter()
        .filter(|&&(pi, gi, _)| {
            let predicted = match lexicon {
                Some(lex) => lexicon_correct(&preds[pi].text, lex).to_string(),
                None => preds[pi].text.clone(),
            };
            predicted.eq_ignore_ascii_case(&gts[gi].text)
        })
        .count();
    Ok(MatchCounts {
        true_positives: tp,
        num_preds: counted_preds,
        num_gts: counted_gts,
    })
}

pub fn e2e_hmean(
    preds: &[SpottingResult],
    gts: &[TextInstance],
    iou_thr: f64,
    lexicon: Option<&[String]>,
) -> Result<f64> {
    Ok(e2e_counts(preds, gts, iou_thr, lexicon)?.score().hmean)
}

/// Accumulator for 1-NED: matched pairs contribute their normalized edit
/// distance, unmatched gts and unmatched (counted) preds contribute 1.
#[derive(Debug, Default, Clone)]
pub struct NedCounts {
    pub total_ned: f64,
    pub num_terms: usize,
}

impl NedCounts {
    pub fn merge(&mut self, other: &NedCounts) {
        self.total_ned += other.total_ned;
        self.num_terms += other.num_terms;
    }

    pub fn score(&self) -> f64 {
        if self.num_terms == 0 {
            1.0
        } else {
            1.0 - self.total_ned / self.num_terms as f64
        }
    }
}

pub fn ned_counts(preds: &[SpottingResult], gts: &[TextInstance], iou_thr: f64) -> NedCounts {
    let (kept, counted_preds, counted_gts) = care_filtered(preds, gts, iou_thr);
    let mut total = 0.0;
    for &(pi, gi, _) in &kept {
        let p = preds[pi].text.to_lowercase();
        let g = gts[gi].text.to_lowercase();
        let denom = p.chars().count().max(g.chars().count());
        total += if denom == 0 {
            0.0
        } else {
            edit_distance(&p, &g) as f64 / denom as f64
        };
    }
    let unmatched_gts = counted_gts - kept.len();
    let unmatched_preds = counted_preds - kept.len();
    NedCounts {
        total_ned: total + (unmatched_gts + unmatched_preds) as f64,
        num_terms: kept.len() + unmatched_gts + unmatched_preds,
    }
}

/// 1 - mean normalized edit distance for one image.
pub fn one_minus_ned(preds: &[SpottingResult], gts: &[TextInstance], iou_thr: f64) -> f64 {
    ned_counts(preds, gts, iou_thr).score()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(x: f64, y: f64, s: f64) -> Polygon {
        Polygon::new(vec![[x, y], [x + s, y], [x + s, y + s], [x, y + s]])
    }

    fn gt(x: f64, text: &str, care: bool) -> TextInstance {
        TextInstance {
            polygon: square(x, 0.0, 10.0),
            text: text.to_string(),
            care,
        }
    }

    fn pred(x: f64, text: &str, conf: f64) -> SpottingResult {
        SpottingResult {
            polygon: square(x, 0.0, 10.0),
            text: text.to_string(),
            confidence: conf,
        }
    }

    #[test]
    fn perfect_predictions() {
        let gts = vec![gt(0.0, "hello", true), gt(20.0, "world", true)];
        let preds = vec![pred(0.0, "hello", 0.9), pred(20.0, "world", 0.8)];
        let d = detection_hmean(&preds, &gts, 0.5);
        assert_eq!((d.precision, d.recall, d.hmean), (1.0, 1.0, 1.0));
        assert_eq!(e2e_hmean(&preds, &gts, 0.5, None).unwrap(), 1.0);
        assert_eq!(one_minus_ned(&preds, &gts, 0.5), 1.0);
    }

    #[test]
    fn no_predictions() {
        let gts = vec![gt(0.0, "a", true)];
        let d = detection_hmean(&[], &gts, 0.5);
        assert_eq!((d.precision, d.recall, d.hmean), (0.0, 0.0, 0.0));
    }

    #[test]
    fn one_of_two_matched() {
        let gts = vec![gt(0.0, "aa", true), gt(20.0, "bb", true)];
        let preds = vec![pred(0.0, "aa", 0.9)];
        let d = detection_hmean(&preds, &gts, 0.5);
        assert_eq!(d.precision, 1.0);
        assert_eq!(d.recall, 0.5);
        assert!((d.hmean - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_text_fails_e2e_only() {
        let gts = vec![gt(0.0, "hello", true)];
        let preds = vec![pred(0.0, "jello", 0.9)];
        assert_eq!(detection_hmean(&preds, &gts, 0.5).hmean, 1.0);
        assert_eq!(e2e_hmean(&preds, &gts, 0.5, None).unwrap(), 0.0);
    }

    #[test]
    fn lexicon_correction() {
        let lex = vec!["hello".to_string(), "world".to_string()];
        assert_eq!(lexicon_correct("hel1o", &lex), "hello");
        // tie -> lexicographically smallest
        let lex2 = vec!["cat".to_string(), "bat".to_string()];
        assert_eq!(lexicon_correct("aat", &lex2), "bat");
    }

    #[test]
    fn empty_lexicon_is_error() {
        let gts = vec![gt(0.0, "x", true)];
        assert!(e2e_hmean(&[], &gts, 0.5, Some(&[])).is_err());
    }

    #[test]
    fn do_not_care_excluded() {
        let gts = vec![gt(0.0, "skip", false), gt(20.0, "keep", true)];
        // one pred on the don't-care region, one correct
        let preds = vec![pred(0.0, "whatever", 0.9), pred(20.0, "keep", 0.8)];
        let d = detection_hmean(&preds, &gts, 0.5);
        assert_eq!((d.precision, d.recall, d.hmean), (1.0, 1.0, 1.0));
        assert_eq!(e2e_hmean(&preds, &gts, 0.5, None).unwrap(), 1.0);
    }

    #[test]
    fn ned_hand_cases() {
        assert_eq!(edit_distance("abc", "abd"), 1);
        let gts = vec![gt(0.0, "abc", true)];
        let preds = vec![pred(0.0, "abd", 0.9)];
        assert!((one_minus_ned(&preds, &gts, 0.5) - 2.0 / 3.0).abs() < 1e-12);

        // one exact match + one unmatched gt -> 1 - (0 + 1)/2 = 0.5
        let gts = vec![gt(0.0, "abc", true), gt(20.0, "xyz", true)];
        let preds = vec![pred(0.0, "abc", 0.9)];
        assert!((one_minus_ned(&preds, &gts, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn e2e_never_beats_detection() {
        let gts = vec![gt(0.0, "aa", true), gt(20.0, "bb", true)];
        let preds = vec![pred(0.0, "ax", 0.9), pred(20.0, "bb", 0.8)];
        let d = detection_hmean(&preds, &gts, 0.5).hmean;
        let e = e2e_hmean(&preds, &gts, 0.5, None).unwrap();
        assert!(e <= d);
    }

    proptest! {
        #[test]
        fn edit_distance_triangle_inequality(
            a in "[a-c]{0,6}", b in "[a-c]{0,6}", c in "[a-c]{0,6}"
        ) {
            let ab = edit_distance(&a, &b);
            let bc = edit_distance(&b, &c);
            let ac = edit_distance(&a, &c);
            prop_assert!(ac <= ab + bc);
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        }
    }
}
