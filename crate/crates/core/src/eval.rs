//! Moving-class IoU and the sequence benchmark runner.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Pose, Scan};
use crate::io::{DatasetSequence, SequenceData};
use crate::label::MovingLabel;

/// Confusion counts for the moving class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Iou {
    pub value: f64,
    /// No moving point in either prediction or truth; `value` is 1 by convention.
    pub undefined: bool,
}

impl ConfusionCounts {
    #[inline]
    pub fn add(&mut self, predicted_moving: bool, truth_moving: bool) {
        match (predicted_moving, truth_moving) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn scored(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `TP / (TP + FP + FN)`.
    pub fn iou(&self) -> Iou {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            Iou {
                value: 1.0,
                undefined: true,
            }
        } else {
            Iou {
                value: self.tp as f64 / denom as f64,
                undefined: false,
            }
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Adds one scan's predictions. Points whose truth is `Ignore` are skipped;
/// any prediction other than `Moving` counts as negative.
pub fn accumulate(
    counts: &mut ConfusionCounts,
    predicted: &[MovingLabel],
    truth: &[MovingLabel],
) -> Result<()> {
    if predicted.len() != truth.len() {
        return Err(Error::Precondition(format!(
            "{} predictions for {} ground-truth labels",
            predicted.len(),
            truth.len()
        )));
    }
    for (p, t) in predicted.iter().zip(truth) {
        if *t != MovingLabel::Ignore {
            counts.add(p.is_moving(), t.is_moving());
        }
    }
    Ok(())
}

/// A sequence the benchmark can stream.
pub trait SequenceSource: Sync {
    fn id(&self) -> &str;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn pose(&self, frame: usize) -> Pose;
    fn has_labels(&self) -> bool;
    /// The scan with ground truth attached when available.
    fn labeled_scan(&self, frame: usize) -> Result<Scan>;
}

impl SequenceSource for DatasetSequence {
    fn id(&self) -> &str {
        &self.id
    }
    fn len(&self) -> usize {
        self.scan_files.len()
    }
    fn pose(&self, frame: usize) -> Pose {
        self.poses[frame]
    }
    fn has_labels(&self) -> bool {
        self.label_files.is_some()
    }
    fn labeled_scan(&self, frame: usize) -> Result<Scan> {
        self.read_labeled_scan(frame)
    }
}

impl SequenceSource for SequenceData {
    fn id(&self) -> &str {
        &self.id
    }
    fn len(&self) -> usize {
        self.scans.len()
    }
    fn pose(&self, frame: usize) -> Pose {
        self.poses[frame]
    }
    fn has_labels(&self) -> bool {
        self.scans.iter().all(|s| s.labels.is_some())
    }
    fn labeled_scan(&self, frame: usize) -> Result<Scan> {
        Ok(self.scans[frame].clone())
    }
}

/// What a method sees of one frame: no labels, nothing from the future.
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a> {
    pub sequence: &'a str,
    pub index: usize,
    pub scan: &'a Scan,
    /// Absolute LiDAR-frame pose.
    pub pose: &'a Pose,
}

/// A per-point moving-object segmenter run frame by frame, in order.
pub trait MosMethod {
    fn begin_sequence(&mut self, _id: &str) {}
    fn predict(&mut self, frame: &Frame<'_>) -> Result<Vec<MovingLabel>>;
}

impl<F> MosMethod for F
where
    F: FnMut(&Frame<'_>) -> Result<Vec<MovingLabel>>,
{
    fn predict(&mut self, frame: &Frame<'_>) -> Result<Vec<MovingLabel>> {
        self(frame)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfigFingerprint {
    pub method: String,
    pub residual_frames: usize,
    pub noise_units: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub id: String,
    pub scans: usize,
    pub counts: ConfusionCounts,
}

impl SequenceResult {
    pub fn iou(&self) -> Iou {
        self.counts.iou()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub fingerprint: ConfigFingerprint,
    pub sequences: Vec<SequenceResult>,
    /// Sequences without ground truth.
    pub skipped: Vec<String>,
}

impl BenchmarkReport {
    pub fn from_sequences(
        fingerprint: ConfigFingerprint,
        sequences: Vec<SequenceResult>,
        skipped: Vec<String>,
    ) -> Self {
        Self {
            fingerprint,
            sequences,
            skipped,
        }
    }

    /// Counts pooled over every scored point of every sequence.
    pub fn pooled(&self) -> ConfusionCounts {
        self.sequences
            .iter()
            .fold(ConfusionCounts::default(), |acc, s| acc + s.counts)
    }

    pub fn aggregate_iou(&self) -> Iou {
        self.pooled().iou()
    }

    /// Unweighted mean of per-sequence IoUs, reported alongside the pooled value.
    pub fn mean_sequence_iou(&self) -> Option<f64> {
        if self.sequences.is_empty() {
            return None;
        }
        let sum: f64 = self.sequences.iter().map(|s| s.iou().value).sum();
        Some(sum / self.sequences.len() as f64)
    }

    pub fn to_text(&self) -> String {
        let f = &self.fingerprint;
        let mut s = String::new();
        writeln!(
            s,
            "method: {}  residual frames: {}  noise units: {}",
            f.method, f.residual_frames, f.noise_units
        )
        .unwrap();
        writeln!(
            s,
            "{:<10} {:>7} {:>12} {:>12} {:>12} {:>14} {:>8}",
            "sequence", "scans", "TP", "FP", "FN", "TN", "IoU"
        )
        .unwrap();
        let row = |s: &mut String, name: &str, scans: usize, c: &ConfusionCounts| {
            let iou = c.iou();
            writeln!(
                s,
                "{:<10} {:>7} {:>12} {:>12} {:>12} {:>14} {:>8.4}{}",
                name,
                scans,
                c.tp,
                c.fp,
                c.fn_,
                c.tn,
                iou.value,
                if iou.undefined { " (empty)" } else { "" }
            )
            .unwrap();
        };
        for seq in &self.sequences {
            row(&mut s, &seq.id, seq.scans, &seq.counts);
        }
        let scans = self.sequences.iter().map(|q| q.scans).sum();
        row(&mut s, "pooled", scans, &self.pooled());
        if let Some(m) = self.mean_sequence_iou() {
            writeln!(s, "mean of per-sequence IoU: {m:.4}").unwrap();
        }
        for id in &self.skipped {
            writeln!(s, "skipped: {id} (no ground truth)").unwrap();
        }
        s
    }

    pub fn to_key_values(&self) -> String {
        let f = &self.fingerprint;
        let mut s = String::new();
        writeln!(s, "method = {}", f.method).unwrap();
        writeln!(s, "residual_frames = {}", f.residual_frames).unwrap();
        writeln!(s, "noise_units = {}", f.noise_units).unwrap();
        let ids: Vec<&str> = self.sequences.iter().map(|q| q.id.as_str()).collect();
        writeln!(s, "sequences = {}", ids.join(",")).unwrap();
        let block = |s: &mut String, prefix: &str, scans: usize, c: &ConfusionCounts| {
            let iou = c.iou();
            writeln!(s, "{prefix}.scans = {scans}").unwrap();
            writeln!(s, "{prefix}.tp = {}", c.tp).unwrap();
            writeln!(s, "{prefix}.fp = {}", c.fp).unwrap();
            writeln!(s, "{prefix}.fn = {}", c.fn_).unwrap();
            writeln!(s, "{prefix}.tn = {}", c.tn).unwrap();
            writeln!(s, "{prefix}.iou = {:.17}", iou.value).unwrap();
            writeln!(s, "{prefix}.iou_undefined = {}", iou.undefined).unwrap();
        };
        for seq in &self.sequences {
            block(&mut s, &format!("seq.{}", seq.id), seq.scans, &seq.counts);
        }
        let scans = self.sequences.iter().map(|q| q.scans).sum();
        block(&mut s, "aggregate", scans, &self.pooled());
        if let Some(m) = self.mean_sequence_iou() {
            writeln!(s, "mean_sequence_iou = {m:.17}").unwrap();
        }
        writeln!(s, "skipped = {}", self.skipped.join(",")).unwrap();
        s
    }
}

/// Streams one sequence through `method` and scores every frame.
pub fn evaluate_sequence<S: SequenceSource + ?Sized, M: MosMethod>(
    method: &mut M,
    seq: &S,
) -> Result<SequenceResult> {
    method.begin_sequence(seq.id());
    let mut counts = ConfusionCounts::default();
    for i in 0..seq.len() {
        let mut scan = seq.labeled_scan(i)?;
        let truth = scan.labels.take().ok_or_else(|| {
            Error::Precondition(format!("sequence {} frame {i} has no ground truth", seq.id()))
        })?;
        let pose = seq.pose(i);
        let predicted = method.predict(&Frame {
            sequence: seq.id(),
            index: i,
            scan: &scan,
            pose: &pose,
        })?;
        accumulate(&mut counts, &predicted, &truth).map_err(|e| {
            Error::Precondition(format!("sequence {} frame {i}: {e}", seq.id()))
        })?;
    }
    Ok(SequenceResult {
        id: seq.id().to_string(),
        scans: seq.len(),
        counts,
    })
}

/// Runs a fresh method instance on each sequence, sequences in parallel.
/// Sequences without ground truth are skipped with a warning.
pub fn run_benchmark<S, M, F>(
    make_method: F,
    sequences: &[S],
    fingerprint: ConfigFingerprint,
) -> Result<BenchmarkReport>
where
    S: SequenceSource,
    M: MosMethod,
    F: Fn() -> Result<M> + Sync,
{
    let mut skipped = Vec::new();
    let mut scored = Vec::new();
    for s in sequences {
        if s.has_labels() {
            scored.push(s);
        } else {
            log::warn!("sequence {} has no ground truth; excluded from the benchmark", s.id());
            skipped.push(s.id().to_string());
        }
    }
    let results = scored
        .par_iter()
        .map(|seq| {
            let mut method = make_method()?;
            evaluate_sequence(&mut method, *seq)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkReport::from_sequences(fingerprint, results, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(moving: usize, stat: usize) -> Vec<MovingLabel> {
        let mut v = vec![MovingLabel::Moving; moving];
        v.extend(vec![MovingLabel::Static; stat]);
        v
    }

    #[test]
    fn perfect_prediction() {
        let truth = labels(10, 90);
        let mut c = ConfusionCounts::default();
        accumulate(&mut c, &truth, &truth).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 10, fp: 0, fn_: 0, tn: 90 });
        assert_eq!(c.iou().value, 1.0);
    }

    #[test]
    fn all_missed() {
        let mut c = ConfusionCounts::default();
        accumulate(&mut c, &labels(0, 5), &labels(5, 0)).unwrap();
        assert_eq!(c.fn_, 5);
        assert_eq!(c.iou().value, 0.0);
    }

    #[test]
    fn length_mismatch() {
        let mut c = ConfusionCounts::default();
        assert!(accumulate(&mut c, &labels(1, 1), &labels(1, 2)).is_err());
    }

    #[test]
    fn iou_examples() {
        let c = ConfusionCounts { tp: 8, fp: 1, fn_: 1, tn: 0 };
        assert_eq!(c.iou(), Iou { value: 0.8, undefined: false });
        let empty = ConfusionCounts::default().iou();
        assert!(empty.undefined);
        assert_eq!(empty.value, 1.0);
    }

    fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<MovingLabel> {
        (0..n)
            .map(|_| match rng.gen_range(0..10) {
                0..=2 => MovingLabel::Moving,
                3 => MovingLabel::Ignore,
                _ => MovingLabel::Static,
            })
            .collect()
    }

    #[test]
    fn counts_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred = random_labels(&mut rng, 10_000);
        let truth = random_labels(&mut rng, 10_000);
        let mut c = ConfusionCounts::default();
        accumulate(&mut c, &pred, &truth).unwrap();
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..pred.len() {
            if truth[i] == MovingLabel::Ignore {
                continue;
            }
            let p = pred[i] == MovingLabel::Moving;
            let t = truth[i] == MovingLabel::Moving;
            if p && t {
                tp += 1
            } else if p {
                fp += 1
            } else if t {
                fn_ += 1
            } else {
                tn += 1
            }
        }
        assert_eq!(c, ConfusionCounts { tp, fp, fn_, tn });
        assert_eq!(c.scored() as usize, truth.iter().filter(|t| **t != MovingLabel::Ignore).count());
        assert_eq!(c.iou().value, tp as f64 / (tp + fp + fn_) as f64);
    }

    proptest! {
        #[test]
        fn iou_ignores_order_and_ignore_points(seed in 0u64..10_000, extra in 0usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = random_labels(&mut rng, 300);
            let truth = random_labels(&mut rng, 300);
            let mut base = ConfusionCounts::default();
            accumulate(&mut base, &pred, &truth).unwrap();

            let mut idx: Vec<usize> = (0..300).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut rng);
            let mut p2: Vec<MovingLabel> = idx.iter().map(|&i| pred[i]).collect();
            let mut t2: Vec<MovingLabel> = idx.iter().map(|&i| truth[i]).collect();
            for _ in 0..extra {
                let at = rng.gen_range(0..=p2.len());
                p2.insert(at, if rng.gen_bool(0.5) { MovingLabel::Moving } else { MovingLabel::Static });
                t2.insert(at, MovingLabel::Ignore);
            }
            let mut other = ConfusionCounts::default();
            accumulate(&mut other, &p2, &t2).unwrap();
            prop_assert_eq!(base, other);
        }

        #[test]
        fn pooled_equals_summed_counts(seeds in prop::collection::vec(0u64..1000, 1..6)) {
            let seqs: Vec<SequenceResult> = seeds.iter().enumerate().map(|(i, &s)| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut c = ConfusionCounts::default();
                accumulate(&mut c, &random_labels(&mut rng, 200), &random_labels(&mut rng, 200)).unwrap();
                SequenceResult { id: format!("{i:02}"), scans: 1, counts: c }
            }).collect();
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for s in &seqs {
                tp += s.counts.tp;
                fp += s.counts.fp;
                fn_ += s.counts.fn_;
            }
            let report = BenchmarkReport::from_sequences(ConfigFingerprint::default(), seqs, vec![]);
            prop_assert_eq!(report.aggregate_iou().value, tp as f64 / (tp + fp + fn_) as f64);
        }
    }

    #[test]
    fn report_formats_mention_every_sequence() {
        let report = BenchmarkReport::from_sequences(
            ConfigFingerprint { method: "residual".into(), residual_frames: 1, noise_units: 0 },
            vec![
                SequenceResult { id: "00".into(), scans: 3, counts: ConfusionCounts { tp: 8, fp: 1, fn_: 1, tn: 5 } },
                SequenceResult { id: "01".into(), scans: 2, counts: ConfusionCounts::default() },
            ],
            vec!["02".into()],
        );
        let kv = report.to_key_values();
        assert!(kv.contains("seq.00.iou = 0.80000000000000004"));
        assert!(kv.contains("seq.01.iou_undefined = true"));
        assert!(kv.contains("aggregate.scans = 5"));
        assert!(kv.contains("skipped = 02"));
        let text = report.to_text();
        assert!(text.contains("pooled"));
        assert!(text.contains("(empty)"));
    }
}
