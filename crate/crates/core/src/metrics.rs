//! ISO/IEC 30107-3 presentation attack detection metrics.
//!
//! Scores are bona fide probabilities. A sample is accepted as bona fide when
//! its score is greater than or equal to the threshold.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Attack,
}

impl Label {
    /// Index of the class in the classifier output.
    pub fn class_index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Attack => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Bonafide => "bonafide",
            Label::Attack => "attack",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bonafide" | "bona_fide" | "real" => Ok(Label::Bonafide),
            "attack" | "spoof" | "fake" => Ok(Label::Attack),
            other => Err(Error::Data(format!("unknown label '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub label: Label,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    samples: Vec<ScoredSample>,
}

impl ScoreSet {
    pub fn new(samples: Vec<ScoredSample>) -> Result<Self> {
        for s in &samples {
            if !s.score.is_finite() || !(0.0..=1.0).contains(&s.score) {
                return Err(Error::Data(format!(
                    "score {} for '{}' is outside [0, 1]",
                    s.score, s.id
                )));
            }
        }
        Ok(Self { samples })
    }

    /// Convenience constructor with generated ids.
    pub fn from_scores(bonafide: &[f64], attack: &[f64]) -> Result<Self> {
        let samples = bonafide
            .iter()
            .map(|&s| (Label::Bonafide, s))
            .chain(attack.iter().map(|&s| (Label::Attack, s)))
            .enumerate()
            .map(|(i, (label, score))| ScoredSample {
                id: format!("s{i}"),
                label,
                score,
            })
            .collect();
        Self::new(samples)
    }

    pub fn samples(&self) -> &[ScoredSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn class_counts(&self) -> (usize, usize) {
        let bona = self.samples.iter().filter(|s| s.label == Label::Bonafide).count();
        (bona, self.samples.len() - bona)
    }

    fn require_both(&self) -> Result<()> {
        let (bona, attack) = self.class_counts();
        if bona == 0 {
            return Err(Error::MissingClass("bonafide"));
        }
        if attack == 0 {
            return Err(Error::MissingClass("attack"));
        }
        Ok(())
    }

    /// Reads a CSV with header `id,label,score`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.iter().map(str::trim).collect::<Vec<_>>() != ["id", "label", "score"] {
            return Err(Error::Data(format!(
                "{}: expected header id,label,score",
                path.display()
            )));
        }
        let mut samples = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let score: f64 = record[2]
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad score '{}'", &record[2])))?;
            samples.push(ScoredSample {
                id: record[0].to_string(),
                label: record[1].parse()?,
                score,
            });
        }
        Self::new(samples)
    }

    /// Scores are written with Rust's shortest round-trip float formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["id", "label", "score"])?;
        for s in &self.samples {
            wtr.write_record([s.id.clone(), s.label.to_string(), s.score.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub bonafide_accepted: usize,
    pub bonafide_rejected: usize,
    pub attack_accepted: usize,
    pub attack_rejected: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.bonafide_accepted + self.bonafide_rejected + self.attack_accepted + self.attack_rejected
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.bonafide_accepted + self.attack_rejected) as f64 / self.total() as f64
    }
}

/// Counts decisions at `threshold`, which is clamped to `[0, 1]`.
pub fn classify(scores: &ScoreSet, threshold: f64) -> Confusion {
    let t = threshold.clamp(0.0, 1.0);
    let mut c = Confusion::default();
    for s in &scores.samples {
        let accepted = s.score >= t;
        match (s.label, accepted) {
            (Label::Bonafide, true) => c.bonafide_accepted += 1,
            (Label::Bonafide, false) => c.bonafide_rejected += 1,
            (Label::Attack, true) => c.attack_accepted += 1,
            (Label::Attack, false) => c.attack_rejected += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

fn rates(c: &Confusion) -> ErrorRates {
    let attacks = (c.attack_accepted + c.attack_rejected) as f64;
    let bona = (c.bonafide_accepted + c.bonafide_rejected) as f64;
    let apcer = c.attack_accepted as f64 / attacks;
    let bpcer = c.bonafide_rejected as f64 / bona;
    ErrorRates {
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
    }
}

pub fn apcer_bpcer_acer(scores: &ScoreSet, threshold: f64) -> Result<ErrorRates> {
    scores.require_both()?;
    Ok(rates(&classify(scores, threshold)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqualErrorRate {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate from a sweep over every distinct score.
///
/// The operating points are the distinct scores in ascending order plus a
/// final point that rejects everything. The first point where APCER no
/// longer exceeds BPCER brackets the crossing: an exact meeting returns the
/// middle of the run of equal points, otherwise both rates and the threshold
/// are interpolated linearly between the two bracketing points.
pub fn eer(scores: &ScoreSet) -> Result<EqualErrorRate> {
    scores.require_both()?;
    let mut thresholds: Vec<f64> = scores.samples.iter().map(|s| s.score).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    thresholds.dedup();
    let top = *thresholds.last().expect("non-empty");
    let mut points: Vec<(f64, ErrorRates)> = thresholds
        .iter()
        .map(|&t| (t, rates(&classify(scores, t))))
        .collect();
    points.push((
        if top < 1.0 { (top + 1.0) / 2.0 } else { 1.0 },
        ErrorRates { apcer: 0.0, bpcer: 1.0, acer: 0.5 },
    ));

    let i = points
        .iter()
        .position(|(_, r)| r.apcer <= r.bpcer)
        .expect("final point has apcer 0 <= bpcer 1");
    let (t_i, r_i) = points[i];
    if r_i.apcer == r_i.bpcer {
        let mut j = i;
        while j + 1 < points.len() && points[j + 1].1.apcer == points[j + 1].1.bpcer && points[j + 1].1.apcer == r_i.apcer {
            j += 1;
        }
        return Ok(EqualErrorRate {
            eer: r_i.apcer,
            threshold: (t_i + points[j].0) / 2.0,
        });
    }
    // i > 0 because the first point accepts everything (apcer 1, bpcer 0).
    let (t_p, r_p) = points[i - 1];
    let d_prev = r_p.apcer - r_p.bpcer;
    let d_next = r_i.apcer - r_i.bpcer;
    let f = d_prev / (d_prev - d_next);
    Ok(EqualErrorRate {
        eer: r_p.apcer + f * (r_i.apcer - r_p.apcer),
        threshold: t_p + f * (t_i - t_p),
    })
}

/// Mean of per-frame scores for one video.
pub fn aggregate_video(frame_scores: &[f64]) -> Result<f64> {
    if frame_scores.is_empty() {
        return Err(Error::Empty("frame scores"));
    }
    Ok(frame_scores.iter().sum::<f64>() / frame_scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdProvenance {
    Fixed,
    EerDerived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub threshold: f64,
    pub threshold_provenance: ThresholdProvenance,
    pub samples: usize,
}

impl MetricsReport {
    /// Full report at a fixed threshold, or at the EER threshold when `threshold` is `None`.
    pub fn compute(scores: &ScoreSet, threshold: Option<f64>) -> Result<Self> {
        let e = eer(scores)?;
        let (t, provenance) = match threshold {
            Some(t) => (t.clamp(0.0, 1.0), ThresholdProvenance::Fixed),
            None => (e.threshold.clamp(0.0, 1.0), ThresholdProvenance::EerDerived),
        };
        let confusion = classify(scores, t);
        let r = rates(&confusion);
        Ok(Self {
            accuracy: confusion.accuracy(),
            apcer: r.apcer,
            bpcer: r.bpcer,
            acer: r.acer,
            eer: e.eer,
            eer_threshold: e.threshold,
            threshold: t,
            threshold_provenance: provenance,
            samples: scores.len(),
        })
    }

    pub fn acer_identity_holds(&self) -> bool {
        self.acer == (self.apcer + self.bpcer) / 2.0
    }
}
