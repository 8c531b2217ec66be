//! Robustness metrics over prediction logs: corruption error (CE/mCE), flip
//! probability (FP/mFP), and absolute/relative robustness scores.
//!
//! All errors and accuracies are percentages in [0, 100]. Aggregations use a
//! fixed order (severities ascending, kinds in sorted order) so results are
//! reproducible bit for bit and an independent brute-force pass can match
//! them exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::{Error, Result};

/// Evaluation condition one prediction was made under.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Condition {
    Clean,
    Corrupted { kind: String, severity: u8 },
    /// Position j (1-based; 1 = the clean element) of the perturbation
    /// sequence of this sample.
    Sequence { kind: String, position: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredRecord {
    pub sample_id: u64,
    pub condition: Condition,
    pub predicted: u32,
    pub truth: u32,
}

/// Append-only set of per-sample predictions across conditions.
#[derive(Debug, Clone, Default)]
pub struct PredictionLog {
    records: Vec<PredRecord>,
}

impl PredictionLog {
    pub fn new() -> Self {
        PredictionLog {
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, rec: PredRecord) {
        self.records.push(rec);
    }

    pub fn records(&self) -> &[PredRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks the structural invariants: (sample, condition) unique, and
    /// every non-clean record's sample also has a clean record.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut clean = BTreeSet::new();
        for r in &self.records {
            let key = (r.sample_id, r.condition.clone());
            if !seen.insert(key) {
                return Err(Error::data(format!(
                    "duplicate record for sample {} under {:?}",
                    r.sample_id, r.condition
                )));
            }
            if r.condition == Condition::Clean {
                clean.insert(r.sample_id);
            }
        }
        for r in &self.records {
            if r.condition != Condition::Clean && !clean.contains(&r.sample_id) {
                return Err(Error::data(format!(
                    "sample {} has non-clean records but no clean record",
                    r.sample_id
                )));
            }
        }
        Ok(())
    }

    /// Corruption kinds present, sorted.
    pub fn corruption_kinds(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for r in &self.records {
            if let Condition::Corrupted { kind, .. } = &r.condition {
                set.insert(kind.clone());
            }
        }
        set.into_iter().collect()
    }

    /// Sequence kinds present, sorted.
    pub fn sequence_kinds(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for r in &self.records {
            if let Condition::Sequence { kind, .. } = &r.condition {
                set.insert(kind.clone());
            }
        }
        set.into_iter().collect()
    }

    /// Top-1 accuracy (percent) over records matching `cond`.
    pub fn accuracy(&self, cond: impl Fn(&Condition) -> bool) -> Result<f64> {
        let mut total = 0u64;
        let mut correct = 0u64;
        for r in &self.records {
            if cond(&r.condition) {
                total += 1;
                if r.predicted == r.truth {
                    correct += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::data("no records match the condition"));
        }
        Ok(100.0 * correct as f64 / total as f64)
    }

    pub fn clean_accuracy(&self) -> Result<f64> {
        self.accuracy(|c| *c == Condition::Clean)
    }

    pub fn corrupted_accuracy(&self, kind: &str, severity: u8) -> Result<f64> {
        self.accuracy(|c| {
            matches!(c, Condition::Corrupted { kind: k, severity: s } if k == kind && *s == severity)
        })
    }

    /// Top-1 error (percent) for one corruption/severity cell.
    pub fn corrupted_error(&self, kind: &str, severity: u8) -> Result<f64> {
        Ok(100.0 - self.corrupted_accuracy(kind, severity)?)
    }

    /// Serializes as tab-separated lines:
    /// `sample-id  condition-kind  condition-detail  severity-or-position  predicted  true`.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for r in &self.records {
            let (ck, detail, sp) = match &r.condition {
                Condition::Clean => ("clean", "-".to_string(), 0u32),
                Condition::Corrupted { kind, severity } => {
                    ("corruption", kind.clone(), *severity as u32)
                }
                Condition::Sequence { kind, position } => ("sequence", kind.clone(), *position),
            };
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.sample_id, ck, detail, sp, r.predicted, r.truth
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let mut log = PredictionLog::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(Error::format(format!(
                    "prediction log line {}: expected 6 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse_u = |s: &str, what: &str| -> Result<u64> {
                s.parse()
                    .map_err(|_| Error::format(format!("line {}: bad {what} `{s}`", lineno + 1)))
            };
            let sample_id = parse_u(fields[0], "sample id")?;
            let sp = parse_u(fields[3], "severity/position")? as u32;
            let condition = match fields[1] {
                "clean" => Condition::Clean,
                "corruption" => Condition::Corrupted {
                    kind: fields[2].to_string(),
                    severity: sp as u8,
                },
                "sequence" => Condition::Sequence {
                    kind: fields[2].to_string(),
                    position: sp,
                },
                other => {
                    return Err(Error::format(format!(
                        "line {}: unknown condition kind `{other}`",
                        lineno + 1
                    )))
                }
            };
            log.push(PredRecord {
                sample_id,
                condition,
                predicted: parse_u(fields[4], "prediction")? as u32,
                truth: parse_u(fields[5], "label")? as u32,
            });
        }
        Ok(log)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

/// Reference per-(corruption, severity) top-1 errors the CE ratio divides by.
#[derive(Debug, Clone, Default)]
pub struct BaselineErrorTable {
    entries: BTreeMap<(String, u8), f64>,
}

impl BaselineErrorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, kind: &str, severity: u8, error: f64) -> Result<()> {
        if !(error > 0.0 && error <= 100.0) {
            return Err(Error::data(format!(
                "baseline error for {kind}/{severity} must be in (0, 100], got {error}"
            )));
        }
        self.entries.insert((kind.to_string(), severity), error);
        Ok(())
    }

    pub fn get(&self, kind: &str, severity: u8) -> Option<f64> {
        self.entries.get(&(kind.to_string(), severity)).copied()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for ((kind, severity), err) in &self.entries {
            writeln!(w, "{kind}\t{severity}\t{err}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let mut table = Self::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::format(format!(
                    "baseline table line {}: expected `kind<TAB>severity<TAB>error`",
                    lineno + 1
                )));
            }
            let severity: u8 = fields[1]
                .parse()
                .map_err(|_| Error::format(format!("line {}: bad severity", lineno + 1)))?;
            let err: f64 = fields[2]
                .parse()
                .map_err(|_| Error::format(format!("line {}: bad error", lineno + 1)))?;
            table.insert(fields[0], severity, err)?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

pub const SEVERITIES: [u8; 5] = [1, 2, 3, 4, 5];

/// Corruption error for one kind: the model's errors summed over severities
/// 1..=5 divided by the baseline's summed errors.
pub fn corruption_error(
    log: &PredictionLog,
    baseline: &BaselineErrorTable,
    kind: &str,
) -> Result<f64> {
    let mut model_sum = 0.0;
    let mut base_sum = 0.0;
    for s in SEVERITIES {
        let e = log.corrupted_error(kind, s).map_err(|_| {
            Error::data(format!("log missing severity {s} for corruption `{kind}`"))
        })?;
        let b = baseline.get(kind, s).ok_or_else(|| {
            Error::data(format!(
                "baseline table missing severity {s} for corruption `{kind}`"
            ))
        })?;
        model_sum += e;
        base_sum += b;
    }
    if base_sum == 0.0 {
        return Err(Error::data(format!(
            "baseline error sum for `{kind}` is zero"
        )));
    }
    Ok(model_sum / base_sum)
}

/// Mean CE over the sorted corruption kinds present in the log.
pub fn mean_corruption_error(log: &PredictionLog, baseline: &BaselineErrorTable) -> Result<f64> {
    let kinds = log.corruption_kinds();
    if kinds.is_empty() {
        return Err(Error::data("log contains no corrupted records"));
    }
    let mut acc = 0.0;
    for kind in &kinds {
        acc += corruption_error(log, baseline, kind)?;
    }
    Ok(acc / kinds.len() as f64)
}

/// Flip probability for one perturbation kind: the fraction of positions
/// j >= 2 whose prediction disagrees with position 1 of the same sample.
pub fn flip_probability(log: &PredictionLog, kind: &str) -> Result<f64> {
    // sample -> (position -> predicted)
    let mut seqs: BTreeMap<u64, BTreeMap<u32, u32>> = BTreeMap::new();
    for r in &log.records {
        if let Condition::Sequence { kind: k, position } = &r.condition {
            if k == kind {
                seqs.entry(r.sample_id)
                    .or_default()
                    .insert(*position, r.predicted);
            }
        }
    }
    if seqs.is_empty() {
        return Err(Error::data(format!("no sequence records for `{kind}`")));
    }
    let mut n = 0usize;
    for positions in seqs.values() {
        let max = *positions.keys().max().unwrap() as usize;
        if max < 2 {
            return Err(Error::data(format!(
                "sequence for `{kind}` shorter than 2 positions"
            )));
        }
        if n == 0 {
            n = max;
        } else if n != max {
            return Err(Error::data(format!(
                "inconsistent sequence lengths for `{kind}`: {n} vs {max}"
            )));
        }
        for j in 1..=max as u32 {
            if !positions.contains_key(&j) {
                return Err(Error::data(format!(
                    "incomplete sequence for `{kind}`: missing position {j}"
                )));
            }
        }
    }
    let m = seqs.len();
    let mut flips = 0usize;
    for positions in seqs.values() {
        let first = positions[&1];
        for j in 2..=n as u32 {
            if positions[&j] != first {
                flips += 1;
            }
        }
    }
    Ok(flips as f64 / (m * (n - 1)) as f64)
}

/// Mean FP over the sorted sequence kinds present in the log.
pub fn mean_flip_probability(log: &PredictionLog) -> Result<f64> {
    let kinds = log.sequence_kinds();
    if kinds.is_empty() {
        return Err(Error::data("log contains no sequence records"));
    }
    let mut acc = 0.0;
    for kind in &kinds {
        acc += flip_probability(log, kind)?;
    }
    Ok(acc / kinds.len() as f64)
}

/// Absolute and relative robustness for one (perturbation, severity) cell:
/// `gamma_a = 1 - (A_clean - A_ps)/100`, `gamma_r = 1 - (A_clean - A_ps)/A_clean`.
/// Accuracy gains leave gamma above 1 unless `clamp` is set.
pub fn robustness_scores(a_clean: f64, a_ps: f64, clamp: bool) -> Result<(f64, f64)> {
    for (label, v) in [("clean", a_clean), ("corrupted", a_ps)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::data(format!(
                "{label} accuracy {v} outside [0, 100]"
            )));
        }
    }
    if a_clean == 0.0 {
        return Err(Error::data(
            "relative robustness undefined at zero clean accuracy",
        ));
    }
    let mut ga = 1.0 - (a_clean - a_ps) / 100.0;
    let mut gr = 1.0 - (a_clean - a_ps) / a_clean;
    if clamp {
        ga = ga.min(1.0);
        gr = gr.min(1.0);
    }
    Ok((ga, gr))
}

/// Per-kind robustness averaged over severities, from the log's own
/// accuracies.
pub fn robustness_for_kind(log: &PredictionLog, kind: &str, clamp: bool) -> Result<(f64, f64)> {
    let a_clean = log.clean_accuracy()?;
    let mut ga = 0.0;
    let mut gr = 0.0;
    for s in SEVERITIES {
        let a = log.corrupted_accuracy(kind, s)?;
        let (a1, r1) = robustness_scores(a_clean, a, clamp)?;
        ga += a1;
        gr += r1;
    }
    Ok((ga / SEVERITIES.len() as f64, gr / SEVERITIES.len() as f64))
}

/// Category-level robustness: the per-kind scores averaged over every kind
/// in the category (kinds sorted; categories from `category_of`).
pub fn robustness_by_category(
    log: &PredictionLog,
    category_of: impl Fn(&str) -> String,
    clamp: bool,
) -> Result<BTreeMap<String, (f64, f64)>> {
    let mut grouped: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for kind in log.corruption_kinds() {
        grouped.entry(category_of(&kind)).or_default().push(kind);
    }
    let mut out = BTreeMap::new();
    for (cat, kinds) in grouped {
        let mut ga = 0.0;
        let mut gr = 0.0;
        for kind in &kinds {
            let (a, r) = robustness_for_kind(log, kind, clamp)?;
            ga += a;
            gr += r;
        }
        out.insert(cat, (ga / kinds.len() as f64, gr / kinds.len() as f64));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corrupted(kind: &str, severity: u8) -> Condition {
        Condition::Corrupted {
            kind: kind.into(),
            severity,
        }
    }

    /// Builds a log with the exact per-severity error percentages by using
    /// 10 samples per cell.
    fn log_with_errors(kind: &str, errors: [u32; 5]) -> PredictionLog {
        let mut log = PredictionLog::new();
        for id in 0..10u64 {
            log.push(PredRecord {
                sample_id: id,
                condition: Condition::Clean,
                predicted: 0,
                truth: 0,
            });
        }
        for (i, wrong_tenths) in errors.iter().enumerate() {
            let severity = (i + 1) as u8;
            for id in 0..10u64 {
                let wrong = (id as u32) < wrong_tenths / 10;
                log.push(PredRecord {
                    sample_id: id,
                    condition: corrupted(kind, severity),
                    predicted: if wrong { 1 } else { 0 },
                    truth: 0,
                });
            }
        }
        log
    }

    #[test]
    fn ce_hand_arithmetic() {
        // model [10,20,30,40,50], baseline [20,40,60,80,100] -> 150/300 = 0.5
        let log = log_with_errors("gaussian", [10, 20, 30, 40, 50]);
        let mut base = BaselineErrorTable::new();
        for (s, e) in [(1u8, 20.0), (2, 40.0), (3, 60.0), (4, 80.0), (5, 100.0)] {
            base.insert("gaussian", s, e).unwrap();
        }
        let ce = corruption_error(&log, &base, "gaussian").unwrap();
        assert_eq!(ce, 0.5);
        assert_eq!(mean_corruption_error(&log, &base).unwrap(), 0.5);
    }

    #[test]
    fn ce_self_ratio_is_one_and_zero_numerator() {
        let log = log_with_errors("shot", [10, 20, 30, 40, 50]);
        let mut base = BaselineErrorTable::new();
        for (s, e) in [(1u8, 10.0), (2, 20.0), (3, 30.0), (4, 40.0), (5, 50.0)] {
            base.insert("shot", s, e).unwrap();
        }
        assert_eq!(corruption_error(&log, &base, "shot").unwrap(), 1.0);
        let perfect = log_with_errors("shot", [0, 0, 0, 0, 0]);
        assert_eq!(corruption_error(&perfect, &base, "shot").unwrap(), 0.0);
    }

    #[test]
    fn ce_is_scale_homogeneous() {
        // scaling model and baseline errors together leaves CE unchanged
        let log1 = log_with_errors("quantize", [10, 10, 20, 20, 40]);
        let log2 = log_with_errors("quantize", [20, 20, 40, 40, 80]);
        let mut b1 = BaselineErrorTable::new();
        let mut b2 = BaselineErrorTable::new();
        for s in SEVERITIES {
            b1.insert("quantize", s, 50.0).unwrap();
            b2.insert("quantize", s, 100.0).unwrap();
        }
        let ce1 = corruption_error(&log1, &b1, "quantize").unwrap();
        let ce2 = corruption_error(&log2, &b2, "quantize").unwrap();
        assert!((ce1 - ce2).abs() < 1e-15);
    }

    #[test]
    fn ce_missing_severity_is_data_error() {
        let mut log = log_with_errors("rain", [10, 20, 30, 40, 50]);
        log.records.retain(|r| {
            !matches!(&r.condition, Condition::Corrupted { severity: 3, .. })
        });
        let mut base = BaselineErrorTable::new();
        for s in SEVERITIES {
            base.insert("rain", s, 50.0).unwrap();
        }
        assert!(matches!(
            corruption_error(&log, &base, "rain"),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn baseline_rejects_zero_error() {
        let mut base = BaselineErrorTable::new();
        assert!(base.insert("gaussian", 1, 0.0).is_err());
    }

    fn seq_log(kind: &str, preds: &[Vec<u32>]) -> PredictionLog {
        let mut log = PredictionLog::new();
        for (id, seq) in preds.iter().enumerate() {
            log.push(PredRecord {
                sample_id: id as u64,
                condition: Condition::Clean,
                predicted: seq[0],
                truth: 0,
            });
            for (j, &p) in seq.iter().enumerate() {
                log.push(PredRecord {
                    sample_id: id as u64,
                    condition: Condition::Sequence {
                        kind: kind.into(),
                        position: (j + 1) as u32,
                    },
                    predicted: p,
                    truth: 0,
                });
            }
        }
        log
    }

    #[test]
    fn fp_hand_counts() {
        // constant sequences -> 0 flips
        let log = seq_log("gaussian", &[vec![1, 1, 1], vec![0, 0, 0]]);
        assert_eq!(flip_probability(&log, "gaussian").unwrap(), 0.0);
        // all later positions disagree -> 1
        let log = seq_log("gaussian", &[vec![1, 0, 0], vec![2, 0, 0]]);
        assert_eq!(flip_probability(&log, "gaussian").unwrap(), 1.0);
        // m=1, n=3, flip only at j=3 -> 1/2
        let log = seq_log("gaussian", &[vec![1, 1, 2]]);
        assert_eq!(flip_probability(&log, "gaussian").unwrap(), 0.5);
    }

    #[test]
    fn fp_incomplete_sequence_is_data_error() {
        let mut log = seq_log("shot", &[vec![1, 1, 1]]);
        log.records.retain(|r| {
            !matches!(&r.condition, Condition::Sequence { position: 2, .. })
        });
        assert!(matches!(
            flip_probability(&log, "shot"),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn fp_is_invariant_to_consistent_relabeling() {
        let log = seq_log("shot", &[vec![0, 1, 0, 2], vec![1, 1, 2, 1]]);
        let fp1 = flip_probability(&log, "shot").unwrap();
        // permute classes 0->5, 1->7, 2->3 consistently
        let relabel = |c: u32| match c {
            0 => 5,
            1 => 7,
            2 => 3,
            x => x,
        };
        let mut log2 = log.clone();
        for r in &mut log2.records {
            r.predicted = relabel(r.predicted);
        }
        assert_eq!(fp1, flip_probability(&log2, "shot").unwrap());
    }

    #[test]
    fn gamma_hand_arithmetic() {
        let (ga, gr) = robustness_scores(80.0, 70.0, false).unwrap();
        assert!((ga - 0.9).abs() < 1e-15);
        assert!((gr - 0.875).abs() < 1e-15);
        // no degradation
        let (ga, gr) = robustness_scores(80.0, 80.0, false).unwrap();
        assert_eq!((ga, gr), (1.0, 1.0));
        // total collapse
        let (_, gr) = robustness_scores(80.0, 0.0, false).unwrap();
        assert_eq!(gr, 0.0);
    }

    #[test]
    fn gamma_a_dominates_gamma_r_and_clamping() {
        let (ga, gr) = robustness_scores(60.0, 40.0, false).unwrap();
        assert!(ga >= gr);
        // accuracy gain: unclamped exceeds 1, clamped capped
        let (ga, _) = robustness_scores(50.0, 60.0, false).unwrap();
        assert!(ga > 1.0);
        let (ga, gr) = robustness_scores(50.0, 60.0, true).unwrap();
        assert!(ga <= 1.0 && gr <= 1.0);
    }

    #[test]
    fn gamma_division_guard() {
        assert!(robustness_scores(0.0, 0.0, false).is_err());
        assert!(robustness_scores(101.0, 0.0, false).is_err());
    }

    #[test]
    fn log_roundtrip_and_validation() {
        let mut log = log_with_errors("gaussian", [10, 20, 30, 40, 50]);
        log.push(PredRecord {
            sample_id: 3,
            condition: Condition::Sequence {
                kind: "brightness".into(),
                position: 1,
            },
            predicted: 2,
            truth: 2,
        });
        log.validate().unwrap();
        let mut buf = Vec::new();
        log.write_to(&mut buf).unwrap();
        let back = PredictionLog::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.records(), log.records());
        // duplicates are rejected
        let mut bad = log.clone();
        bad.push(bad.records()[0].clone());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn baseline_table_roundtrip() {
        let mut base = BaselineErrorTable::new();
        base.insert("gaussian", 1, 25.0).unwrap();
        base.insert("shot", 5, 90.5).unwrap();
        let mut buf = Vec::new();
        base.write_to(&mut buf).unwrap();
        let back = BaselineErrorTable::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.get("gaussian", 1), Some(25.0));
        assert_eq!(back.get("shot", 5), Some(90.5));
        assert_eq!(back.get("shot", 4), None);
    }
}
