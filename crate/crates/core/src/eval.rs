//! Multi-label evaluation: precision and recall pooled over all
//! (point, note) decisions, precision-recall curves traced by sweeping the
//! threshold, average precision, and frame-level transcription metrics.

use std::fmt;
use std::io::Write;

use ndarray::ArrayView2;

use crate::dataset::LabelVector;
use crate::error::{Error, Result};
use crate::models::predict;

/// Pooled precision and recall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// Set when nothing was predicted; precision is then reported as 1.
    pub no_predictions: bool,
}

impl PrecisionRecall {
    pub fn f1(&self) -> f64 {
        if self.precision + self.recall == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / (self.precision + self.recall)
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, actual: b });
    }
    Ok(())
}

fn from_counts(correct: usize, predicted: usize, relevant: usize) -> Result<PrecisionRecall> {
    if relevant == 0 {
        return Err(Error::UndefinedMetric("recall needs at least one true label".into()));
    }
    Ok(PrecisionRecall {
        precision: if predicted == 0 { 1.0 } else { correct as f64 / predicted as f64 },
        recall: correct as f64 / relevant as f64,
        no_predictions: predicted == 0,
    })
}

pub fn precision_recall(predictions: &[LabelVector], truths: &[LabelVector]) -> Result<PrecisionRecall> {
    check_lengths(truths.len(), predictions.len())?;
    let (mut correct, mut predicted, mut relevant) = (0, 0, 0);
    for (p, t) in predictions.iter().zip(truths) {
        correct += p.intersection(t).count();
        predicted += p.count();
        relevant += t.count();
    }
    from_counts(correct, predicted, relevant)
}

/// One point of a precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub no_predictions: bool,
}

/// `n` evenly spaced thresholds from one step below the smallest score up
/// to the largest, so the curve runs from "everything predicted" to
/// "nothing predicted".
pub fn pr_threshold_grid(scores: ArrayView2<f64>, n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid("a threshold grid needs at least two points"));
    }
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid("scores must be finite and non-empty"));
    }
    let h = if hi > lo { (hi - lo) / (n - 1) as f64 } else { 1.0 };
    let start = lo - h;
    let step = (hi - start) / (n - 1) as f64;
    let mut grid: Vec<f64> = (0..n).map(|k| start + k as f64 * step).collect();
    grid[n - 1] = hi;
    Ok(grid)
}

/// Scores flattened and sorted, with prefix counts of true labels.
struct Ranked {
    scores: Vec<f64>,
    positives_below: Vec<usize>,
    positives: usize,
}

impl Ranked {
    fn new(scores: ArrayView2<f64>, truths: &[LabelVector]) -> Result<Ranked> {
        check_lengths(truths.len(), scores.nrows())?;
        let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(scores.len());
        for (row, t) in scores.outer_iter().zip(truths) {
            for (n, &v) in row.iter().enumerate() {
                pairs.push((v, t.contains(n as u8)));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut positives_below = Vec::with_capacity(pairs.len() + 1);
        positives_below.push(0);
        for p in &pairs {
            positives_below.push(positives_below.last().unwrap() + p.1 as usize);
        }
        let positives = *positives_below.last().unwrap();
        Ok(Ranked {
            scores: pairs.into_iter().map(|p| p.0).collect(),
            positives_below,
            positives,
        })
    }

    /// Precision and recall of predicting every score strictly above `c`.
    fn at(&self, c: f64) -> Result<PrecisionRecall> {
        let cut = self.scores.partition_point(|&v| v <= c);
        let predicted = self.scores.len() - cut;
        let correct = self.positives - self.positives_below[cut];
        from_counts(correct, predicted, self.positives)
    }
}

/// Step-integrated area under a precision-recall curve: points are taken in
/// order of increasing recall and each rise in recall is weighted by the
/// precision where it is reached. At equal recall the best precision counts.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in pts {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    ap
}

/// The precision-recall curve over `thresholds` and its average precision.
pub fn pr_curve_and_ap(scores: ArrayView2<f64>, truths: &[LabelVector], thresholds: &[f64]) -> Result<(Vec<PrPoint>, f64)> {
    if thresholds.len() < 2 {
        return Err(Error::invalid("a threshold grid needs at least two points"));
    }
    let ranked = Ranked::new(scores, truths)?;
    let curve = thresholds
        .iter()
        .map(|&c| {
            let pr = ranked.at(c)?;
            Ok(PrPoint {
                threshold: c,
                precision: pr.precision,
                recall: pr.recall,
                no_predictions: pr.no_predictions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ap = average_precision(&curve);
    Ok((curve, ap))
}

/// Indices of the points with exactly `k` true notes.
pub fn polyphony_subset(truths: &[LabelVector], k: usize) -> Vec<usize> {
    truths
        .iter()
        .enumerate()
        .filter(|(_, t)| t.count() == k)
        .map(|(i, _)| i)
        .collect()
}

/// Frame-level accuracy and error decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mirex {
    pub acc: f64,
    pub e_tot: f64,
    pub e_sub: f64,
    pub e_miss: f64,
    pub e_fa: f64,
}

pub fn mirex_metrics(predictions: &[LabelVector], truths: &[LabelVector]) -> Result<Mirex> {
    check_lengths(truths.len(), predictions.len())?;
    let (mut corr, mut reference, mut union) = (0usize, 0usize, 0usize);
    let (mut sub, mut miss, mut fa) = (0usize, 0usize, 0usize);
    for (p, t) in predictions.iter().zip(truths) {
        let (n_ref, n_sys) = (t.count(), p.count());
        let n_corr = p.intersection(t).count();
        corr += n_corr;
        reference += n_ref;
        union += n_ref + n_sys - n_corr;
        sub += n_ref.min(n_sys) - n_corr;
        miss += n_ref.saturating_sub(n_sys);
        fa += n_sys.saturating_sub(n_ref);
    }
    if reference == 0 {
        return Err(Error::UndefinedMetric("frame metrics need at least one reference note".into()));
    }
    let r = reference as f64;
    let (e_sub, e_miss, e_fa) = (sub as f64 / r, miss as f64 / r, fa as f64 / r);
    Ok(Mirex {
        acc: corr as f64 / union as f64,
        e_tot: e_sub + e_miss + e_fa,
        e_sub,
        e_miss,
        e_fa,
    })
}

/// Which points a report covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    All,
    /// Points with exactly this many true notes.
    Polyphony(usize),
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subset::All => f.write_str("all"),
            Subset::Polyphony(1) => f.write_str("mono"),
            Subset::Polyphony(k) => write!(f, "poly-{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub subset: Subset,
    pub points: usize,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub no_predictions: bool,
    pub average_precision: f64,
    pub pr_curve: Vec<PrPoint>,
    pub mirex: Mirex,
}

/// Full report for the chosen subset at decision threshold `threshold`.
pub fn evaluate(
    scores: ArrayView2<f64>,
    truths: &[LabelVector],
    threshold: f64,
    grid_size: usize,
    subset: Subset,
) -> Result<EvalReport> {
    check_lengths(truths.len(), scores.nrows())?;
    let rows: Vec<usize> = match subset {
        Subset::All => (0..truths.len()).collect(),
        Subset::Polyphony(k) => polyphony_subset(truths, k),
    };
    if rows.is_empty() {
        return Err(Error::UndefinedMetric(format!("subset {subset} has no points")));
    }
    let scores = scores.select(ndarray::Axis(0), &rows);
    let truths: Vec<LabelVector> = rows.iter().map(|&i| truths[i]).collect();
    let preds: Vec<LabelVector> = scores
        .outer_iter()
        .map(|r| predict(r.as_slice().expect("standard layout"), threshold))
        .collect();
    let pr = precision_recall(&preds, &truths)?;
    let grid = pr_threshold_grid(scores.view(), grid_size)?;
    let (pr_curve, average_precision) = pr_curve_and_ap(scores.view(), &truths, &grid)?;
    Ok(EvalReport {
        subset,
        points: rows.len(),
        threshold,
        precision: pr.precision,
        recall: pr.recall,
        f1: pr.f1(),
        no_predictions: pr.no_predictions,
        average_precision,
        pr_curve,
        mirex: mirex_metrics(&preds, &truths)?,
    })
}

impl EvalReport {
    /// One row per threshold of the curve.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "threshold,precision,recall,no_predictions")?;
        for p in &self.pr_curve {
            writeln!(w, "{},{},{},{}", p.threshold, p.precision, p.recall, p.no_predictions as u8)?;
        }
        Ok(())
    }

    /// Two columns, recall then precision, ready for plotting.
    pub fn write_pr_curve<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for p in &self.pr_curve {
            writeln!(w, "{} {}", p.recall, p.precision)?;
        }
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "subset: {}", self.subset)?;
        writeln!(w, "points: {}", self.points)?;
        writeln!(w, "threshold: {}", self.threshold)?;
        writeln!(w, "precision: {:.6}{}", self.precision, if self.no_predictions { " (no predictions)" } else { "" })?;
        writeln!(w, "recall: {:.6}", self.recall)?;
        writeln!(w, "f1: {:.6}", self.f1)?;
        writeln!(w, "average_precision: {:.6}", self.average_precision)?;
        writeln!(w, "mirex_acc: {:.6}", self.mirex.acc)?;
        writeln!(w, "mirex_e_tot: {:.6}", self.mirex.e_tot)?;
        writeln!(w, "mirex_e_sub: {:.6}", self.mirex.e_sub)?;
        writeln!(w, "mirex_e_miss: {:.6}", self.mirex.e_miss)?;
        writeln!(w, "mirex_e_fa: {:.6}", self.mirex.e_fa)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lv(notes: &[u8]) -> LabelVector {
        LabelVector::from_notes(notes.iter().copied())
    }

    fn random_sets(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<LabelVector> {
        (0..n)
            .map(|_| LabelVector::from_notes((40..80u8).filter(|_| rng.random_bool(p))))
            .collect()
    }

    #[test]
    fn precision_recall_examples() {
        let t = [lv(&[60]), lv(&[60, 64])];
        let pr = precision_recall(&t, &t).unwrap();
        assert_eq!((pr.precision, pr.recall), (1.0, 1.0));

        let pr = precision_recall(&[lv(&[60]), lv(&[60])], &t).unwrap();
        assert_eq!(pr.precision, 1.0);
        assert_eq!(pr.recall, 2.0 / 3.0);

        let pr = precision_recall(&[lv(&[]), lv(&[])], &t).unwrap();
        assert_eq!(pr.recall, 0.0);
        assert!(pr.no_predictions);
        assert_eq!(pr.precision, 1.0);

        assert!(precision_recall(&[lv(&[1])], &[lv(&[])]).is_err());
        assert!(precision_recall(&[lv(&[1])], &t).is_err());
    }

    #[test]
    fn perfect_and_constant_scorers() {
        let truths: Vec<LabelVector> = (0..10).map(|i| lv(&[i as u8 * 3])).collect();
        let perfect = Array2::from_shape_fn((10, 128), |(i, n)| if truths[i].contains(n as u8) { 1.0 } else { 0.0 });
        let grid = pr_threshold_grid(perfect.view(), 512).unwrap();
        assert_eq!(pr_curve_and_ap(perfect.view(), &truths, &grid).unwrap().1, 1.0);

        let flat = Array2::from_elem((10, 128), 0.3);
        let grid = pr_threshold_grid(flat.view(), 512).unwrap();
        let (_, ap) = pr_curve_and_ap(flat.view(), &truths, &grid).unwrap();
        assert!((ap - 10.0 / 1280.0).abs() < 1e-15);
    }

    /// Average precision over every distinct threshold, evaluated by brute force.
    fn exhaustive_ap(scores: &Array2<f64>, truths: &[LabelVector]) -> f64 {
        let mut distinct: Vec<f64> = scores.iter().copied().collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut cuts = vec![distinct[0] - 1.0];
        cuts.extend(distinct.iter().copied());
        let curve: Vec<PrPoint> = cuts
            .iter()
            .map(|&c| {
                let preds: Vec<LabelVector> = scores.outer_iter().map(|r| predict(r.as_slice().unwrap(), c)).collect();
                let pr = precision_recall(&preds, truths).unwrap();
                PrPoint {
                    threshold: c,
                    precision: pr.precision,
                    recall: pr.recall,
                    no_predictions: pr.no_predictions,
                }
            })
            .collect();
        average_precision(&curve)
    }

    #[test]
    fn grid_ap_is_close_to_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let truths = random_sets(&mut rng, 20, 0.1);
            let scores = Array2::from_shape_fn((20, 128), |(i, n)| {
                let base = if truths[i].contains(n as u8) { 0.6 } else { 0.3 };
                base + rng.random_range(-0.3..0.3)
            });
            let grid = pr_threshold_grid(scores.view(), 512).unwrap();
            let (curve, ap) = pr_curve_and_ap(scores.view(), &truths, &grid).unwrap();
            assert!((ap - exhaustive_ap(&scores, &truths)).abs() < 0.02);
            for w in curve.windows(2) {
                assert!(w[1].recall <= w[0].recall);
            }
        }
    }

    #[test]
    fn polyphony_subsets() {
        let t = [lv(&[]), lv(&[1]), lv(&[1, 2, 3]), lv(&[5]), lv(&[1, 2])];
        assert_eq!(polyphony_subset(&t, 1), vec![1, 3]);
        assert_eq!(polyphony_subset(&t, 0), vec![0]);
        assert_eq!(polyphony_subset(&t, 3), vec![2]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sets = random_sets(&mut rng, 500, 0.03);
        for k in 0..5 {
            let brute = sets.iter().filter(|s| s.0.count_ones() as usize == k).count();
            assert_eq!(polyphony_subset(&sets, k).len(), brute);
        }
    }

    #[test]
    fn mirex_hand_cases() {
        let t = [lv(&[60]), lv(&[60, 64]), lv(&[64])];
        let same = mirex_metrics(&t, &t).unwrap();
        assert_eq!(same, Mirex { acc: 1.0, e_tot: 0.0, e_sub: 0.0, e_miss: 0.0, e_fa: 0.0 });

        let empty = mirex_metrics(&[lv(&[]), lv(&[]), lv(&[])], &t).unwrap();
        assert_eq!(empty, Mirex { acc: 0.0, e_tot: 1.0, e_sub: 0.0, e_miss: 1.0, e_fa: 0.0 });

        // N_ref = 1,2,1  N_sys = 1,2,0  N_corr = 1,1,0
        let m = mirex_metrics(&[lv(&[60]), lv(&[60, 67]), lv(&[])], &t).unwrap();
        assert_eq!(m.acc, 2.0 / 5.0);
        assert_eq!(m.e_sub, 0.25);
        assert_eq!(m.e_miss, 0.25);
        assert_eq!(m.e_fa, 0.0);
        assert_eq!(m.e_tot, 0.5);

        assert!(mirex_metrics(&[lv(&[1])], &[lv(&[])]).is_err());
    }

    #[test]
    fn evaluate_reports_subsets() {
        let truths = vec![lv(&[60]), lv(&[60, 64, 67]), lv(&[62]), lv(&[])];
        let scores = Array2::from_shape_fn((4, 128), |(i, n)| if truths[i].contains(n as u8) { 0.8 } else { 0.1 });
        let all = evaluate(scores.view(), &truths, 0.5, 64, Subset::All).unwrap();
        assert_eq!(all.average_precision, 1.0);
        assert_eq!(all.mirex.acc, 1.0);
        let mono = evaluate(scores.view(), &truths, 0.5, 64, Subset::Polyphony(1)).unwrap();
        assert_eq!(mono.points, 2);
        assert!(evaluate(scores.view(), &truths, 0.5, 64, Subset::Polyphony(5)).is_err());
        let mut summary = Vec::new();
        all.write_summary(&mut summary).unwrap();
        assert!(String::from_utf8(summary).unwrap().contains("mirex_e_tot"));
    }

    proptest! {
        #[test]
        fn mirex_identities(seed in any::<u64>(), p in 0.01f64..0.2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truths = random_sets(&mut rng, 30, p);
            let preds = random_sets(&mut rng, 30, p);
            prop_assume!(truths.iter().any(|t| !t.is_empty()));
            let m = mirex_metrics(&preds, &truths).unwrap();
            prop_assert_eq!(m.e_tot, m.e_sub + m.e_miss + m.e_fa);
            prop_assert!((0.0..=1.0).contains(&m.acc));
            prop_assert!(m.e_sub <= 1.0 && m.e_miss <= 1.0 && m.e_fa >= 0.0);
            // acc = TP / (TP + FP + FN) at the note level
            let (mut tp, mut fp, mut fne) = (0, 0, 0);
            for (p, t) in preds.iter().zip(&truths) {
                for n in 0..128u8 {
                    match (p.contains(n), t.contains(n)) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fne += 1,
                        _ => {}
                    }
                }
            }
            prop_assert!((m.acc - tp as f64 / (tp + fp + fne) as f64).abs() < 1e-15);
        }

        #[test]
        fn precision_recall_ignores_point_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truths = random_sets(&mut rng, 25, 0.1);
            let preds = random_sets(&mut rng, 25, 0.1);
            prop_assume!(truths.iter().any(|t| !t.is_empty()));
            let mut idx: Vec<usize> = (0..25).collect();
            idx.reverse();
            idx.rotate_left(seed as usize % 25);
            let pt: Vec<_> = idx.iter().map(|&i| truths[i]).collect();
            let pp: Vec<_> = idx.iter().map(|&i| preds[i]).collect();
            prop_assert_eq!(precision_recall(&preds, &truths).unwrap(), precision_recall(&pp, &pt).unwrap());
        }
    }
}
