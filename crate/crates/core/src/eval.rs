//! Corpus-level evaluation: run inference over a dataset and aggregate all
//! metrics into one report.

use candle_core::Tensor;

use crate::data::TextInstance;
use crate::error::Result;
use crate::metrics::{
    detection_counts, e2e_counts, ned_counts, MatchCounts, MetricsReport, NedCounts,
    SpottingResult, DEFAULT_IOU_THRESHOLD,
};
use crate::model::Model;

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    /// Fraction of care ground truths matched with an exact (case-folded)
    /// transcription: end-to-end recall without lexicon.
    pub word_accuracy: f64,
}

/// Unique care transcriptions of a dataset, the "Full" lexicon.
pub fn dataset_lexicon(samples: &[(Tensor, Vec<TextInstance>)]) -> Vec<String> {
    let mut lex: Vec<String> = samples
        .iter()
        .flat_map(|(_, gts)| gts.iter().filter(|g| g.care).map(|g| g.text.clone()))
        .collect();
    lex.sort();
    lex.dedup();
    lex
}

/// Aggregate predictions against ground truths across a whole corpus. An
/// empty lexicon (corpus without care text) degrades Full scoring to zero.
pub fn aggregate(
    per_image: &[(Vec<SpottingResult>, &[TextInstance])],
    lexicon: &[String],
) -> Result<EvalOutcome> {
    let mut det = MatchCounts::default();
    let mut e2e_n = MatchCounts::default();
    let mut e2e_f = MatchCounts::default();
    let mut ned = NedCounts::default();
    for (preds, gts) in per_image {
        det.merge(&detection_counts(preds, gts, DEFAULT_IOU_THRESHOLD));
        e2e_n.merge(&e2e_counts(preds, gts, DEFAULT_IOU_THRESHOLD, None)?);
        if !lexicon.is_empty() {
            e2e_f.merge(&e2e_counts(preds, gts, DEFAULT_IOU_THRESHOLD, Some(lexicon))?);
        }
        ned.merge(&ned_counts(preds, gts, DEFAULT_IOU_THRESHOLD));
    }
    let detection = det.score();
    let e2e_none = e2e_n.score();
    let report = MetricsReport {
        detection,
        e2e_none: e2e_none.hmean,
        e2e_full: e2e_f.score().hmean,
        one_minus_ned: ned.score(),
        num_images: per_image.len(),
    };
    // a correctly-read word is in particular a correctly-detected one
    debug_assert!(report.e2e_none <= report.detection.hmean + 1e-12);
    let word_accuracy = if e2e_n.num_gts == 0 {
        0.0
    } else {
        e2e_n.true_positives as f64 / e2e_n.num_gts as f64
    };
    Ok(EvalOutcome { report, word_accuracy })
}

/// Run inference over in-memory samples and score against their annotations.
pub fn evaluate_samples(
    model: &Model,
    samples: &[(Tensor, Vec<TextInstance>)],
) -> Result<EvalOutcome> {
    let lexicon = dataset_lexicon(samples);
    let mut per_image = Vec::with_capacity(samples.len());
    for (img, gts) in samples {
        let preds: Vec<SpottingResult> =
            model.infer(img)?.into_iter().map(|d| d.result).collect();
        per_image.push((preds, gts.as_slice()));
    }
    aggregate(&per_image, &lexicon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polygon;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        Polygon::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    fn gt(p: Polygon, text: &str) -> TextInstance {
        TextInstance { polygon: p, text: text.into(), care: true }
    }

    fn pred(p: Polygon, text: &str) -> SpottingResult {
        SpottingResult { polygon: p, text: text.into(), confidence: 0.9 }
    }

    #[test]
    fn empty_corpus_reports_zeros() {
        let out = aggregate(&[], &[]).unwrap();
        assert_eq!(out.report.num_images, 0);
        assert_eq!(out.report.detection.hmean, 0.0);
        assert_eq!(out.word_accuracy, 0.0);
        assert_eq!(out.report.one_minus_ned, 1.0); // no terms penalized
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts = vec![gt(rect(0.0, 0.0, 10.0, 10.0), "ab"), gt(rect(20.0, 0.0, 30.0, 10.0), "ba")];
        let preds = vec![
            pred(rect(0.0, 0.0, 10.0, 10.0), "ab"),
            pred(rect(20.0, 0.0, 30.0, 10.0), "ba"),
        ];
        let lex = vec!["ab".to_string(), "ba".to_string()];
        let out = aggregate(&[(preds, gts.as_slice())], &lex).unwrap();
        assert_eq!(out.report.detection.hmean, 1.0);
        assert_eq!(out.report.e2e_none, 1.0);
        assert_eq!(out.report.e2e_full, 1.0);
        assert_eq!(out.word_accuracy, 1.0);
    }

    #[test]
    fn misread_word_hits_e2e_but_not_detection() {
        let gts = vec![gt(rect(0.0, 0.0, 10.0, 10.0), "ab")];
        let preds = vec![pred(rect(0.0, 0.0, 10.0, 10.0), "aa")];
        let out = aggregate(&[(preds, gts.as_slice())], &["ab".into()]).unwrap();
        assert_eq!(out.report.detection.hmean, 1.0);
        assert_eq!(out.report.e2e_none, 0.0);
        // lexicon correction maps "aa" to the only entry "ab"
        assert_eq!(out.report.e2e_full, 1.0);
        assert_eq!(out.word_accuracy, 0.0);
        assert!(out.report.e2e_none <= out.report.detection.hmean);
    }
}
