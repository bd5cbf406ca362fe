//! Per-class unit-norm prototypes used in place of classifier weights.
//!
//! ## Text format
//!
//! [`CenterBank::to_text`] writes a versioned, line-oriented dump:
//!
//! ```text
//! irsoftmax-centers 1
//! classes 3 dim 2
//! strategy aux_loss 0.5
//! degenerate 0 0 1
//! counts 12 9 0
//! skipped 0
//! 0.6 0.8
//! -1 0
//! 0 0
//! ```
//!
//! `strategy` is one of `exact`, `instance_replace`, `memory_bank <window>`
//! or `aux_loss <lr>`. Center rows follow, one per class, with degenerate
//! rows written as zeros. Floats use Rust's shortest round-trip formatting.
//! Memory-bank windows and the running sums of the `exact` strategy are not
//! stored; a loaded bank restarts them empty.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::check_batch;
use crate::numerics::{cosine_angle, norm, Matrix, RandomStream, NORM_EPS};

const FORMAT_TAG: &str = "irsoftmax-centers";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CenterStrategy {
    /// Running mean of every normalized sample seen so far.
    Exact,
    /// Row becomes the most recent normalized sample of its class.
    InstanceReplace,
    /// Row becomes the normalized mean of the last `window` samples.
    MemoryBank { window: usize },
    /// One gradient step on `‖c − x̂‖²` per batch, then renormalize.
    AuxLoss { lr: f64 },
}

impl CenterStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CenterStrategy::MemoryBank { window: 0 } => {
                Err(Error::invalid("window", "must be >= 1"))
            }
            CenterStrategy::AuxLoss { lr } if !(lr > 0.0 && lr.is_finite()) => {
                Err(Error::invalid("lr", format!("must be > 0, got {lr}")))
            }
            _ => Ok(()),
        }
    }
}

/// Outcome of one [`CenterBank::update_from_batch`] call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UpdateStats {
    /// Classes whose row was recomputed, ascending.
    pub touched: Vec<usize>,
    /// Samples dropped because their feature had no direction.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    centers: Matrix,
    counts: Vec<usize>,
    strategy: CenterStrategy,
    degenerate: Vec<bool>,
    skipped: usize,
    memory: Vec<VecDeque<Vec<f64>>>,
    sums: Vec<Vec<f64>>,
}

/// Unit-normalized mean of the normalized features of each class.
/// Classes with no samples, or whose mean direction cancels, come back
/// flagged degenerate.
pub fn exact_centers(x: &Matrix, labels: &[usize], classes: usize) -> Result<CenterBank> {
    check_batch(x, labels, classes)?;
    let d = x.cols();
    let mut bank = CenterBank::empty(classes, d, CenterStrategy::Exact);
    for (i, &y) in labels.iter().enumerate() {
        let xi = x.row(i);
        let n = norm(xi);
        if !(n > NORM_EPS) {
            bank.skipped += 1;
            continue;
        }
        for (s, &v) in bank.sums[y].iter_mut().zip(xi) {
            *s += v / n;
        }
        bank.counts[y] += 1;
    }
    for k in 0..classes {
        if bank.counts[k] > 0 {
            let inv = 1.0 / bank.counts[k] as f64;
            let mean: Vec<f64> = bank.sums[k].iter().map(|s| s * inv).collect();
            bank.set_row(k, &mean);
        }
    }
    Ok(bank)
}

/// Angle between each row of `rows` and the matching exact center.
/// Classes where either side has no direction are absent from the map.
pub fn weight_center_gap(rows: &Matrix, exact: &CenterBank) -> Result<BTreeMap<usize, f64>> {
    if rows.shape() != exact.centers.shape() {
        return Err(Error::ShapeMismatch {
            context: "weight_center_gap",
            expected: format!("{:?}", exact.centers.shape()),
            got: format!("{:?}", rows.shape()),
        });
    }
    let mut out = BTreeMap::new();
    for k in 0..rows.rows() {
        if exact.degenerate[k] || !(norm(rows.row(k)) > NORM_EPS) {
            continue;
        }
        out.insert(k, cosine_angle(rows.row(k), exact.centers.row(k))?);
    }
    Ok(out)
}

impl CenterBank {
    fn empty(classes: usize, dim: usize, strategy: CenterStrategy) -> Self {
        Self {
            centers: Matrix::zeros(classes, dim),
            counts: vec![0; classes],
            strategy,
            degenerate: vec![true; classes],
            skipped: 0,
            memory: vec![VecDeque::new(); classes],
            sums: vec![vec![0.0; dim]; classes],
        }
    }

    /// Bank whose rows are the normalized rows of `raw`; zero rows are
    /// flagged degenerate.
    pub fn from_rows(raw: &Matrix, strategy: CenterStrategy) -> Result<Self> {
        strategy.validate()?;
        let mut bank = Self::empty(raw.rows(), raw.cols(), strategy);
        for k in 0..raw.rows() {
            bank.set_row(k, raw.row(k));
        }
        Ok(bank)
    }

    /// Random unit rows, for starting without a pretrained embedding.
    pub fn random(classes: usize, dim: usize, strategy: CenterStrategy, stream: &mut RandomStream) -> Result<Self> {
        strategy.validate()?;
        let mut bank = Self::empty(classes, dim, strategy);
        for k in 0..classes {
            let u = stream.unit_vector(dim);
            bank.set_row(k, &u);
        }
        Ok(bank)
    }

    pub fn with_strategy(mut self, strategy: CenterStrategy) -> Result<Self> {
        strategy.validate()?;
        self.strategy = strategy;
        Ok(self)
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn classes(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn strategy(&self) -> CenterStrategy {
        self.strategy
    }

    pub fn is_degenerate(&self, class: usize) -> bool {
        self.degenerate[class]
    }

    pub fn degenerate_flags(&self) -> &[bool] {
        &self.degenerate
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Total samples skipped for lack of direction since construction.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Normalizes `v` into row `k`, or zeroes and flags it.
    fn set_row(&mut self, k: usize, v: &[f64]) {
        let n = norm(v);
        let row = self.centers.row_mut(k);
        if n > NORM_EPS {
            for (r, &x) in row.iter_mut().zip(v) {
                *r = x / n;
            }
            self.degenerate[k] = false;
        } else {
            row.iter_mut().for_each(|r| *r = 0.0);
            self.degenerate[k] = true;
        }
    }

    /// Applies the bank's strategy to one batch. Only classes that occur in
    /// `labels` (with at least one usable sample) are modified.
    pub fn update_from_batch(&mut self, x: &Matrix, labels: &[usize]) -> Result<UpdateStats> {
        check_batch(x, labels, self.classes())?;
        if x.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                context: "update_from_batch",
                expected: format!("feature width {}", self.dim()),
                got: format!("{}", x.cols()),
            });
        }
        let d = self.dim();
        let mut stats = UpdateStats::default();
        // per-class normalized members, in index order
        let mut members: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            let xi = x.row(i);
            let n = norm(xi);
            if !(n > NORM_EPS) {
                stats.skipped += 1;
                continue;
            }
            members.entry(y).or_default().push(xi.iter().map(|v| v / n).collect());
        }
        self.skipped += stats.skipped;

        let mut touched = BTreeSet::new();
        for (k, xs) in members {
            self.counts[k] += xs.len();
            match self.strategy {
                CenterStrategy::Exact => {
                    for xh in &xs {
                        for (s, v) in self.sums[k].iter_mut().zip(xh) {
                            *s += v;
                        }
                    }
                    let sum = self.sums[k].clone();
                    self.set_row(k, &sum);
                }
                CenterStrategy::InstanceReplace => {
                    let last = xs.last().expect("non-empty").clone();
                    self.set_row(k, &last);
                }
                CenterStrategy::MemoryBank { window } => {
                    let mem = &mut self.memory[k];
                    for xh in xs {
                        if mem.len() == window {
                            mem.pop_front();
                        }
                        mem.push_back(xh);
                    }
                    let mut mean = vec![0.0; d];
                    for xh in mem.iter() {
                        for (m, v) in mean.iter_mut().zip(xh) {
                            *m += v;
                        }
                    }
                    let inv = 1.0 / mem.len() as f64;
                    mean.iter_mut().for_each(|m| *m *= inv);
                    self.set_row(k, &mean);
                }
                CenterStrategy::AuxLoss { lr } => {
                    // mean over members of 2(c - x̂); a degenerate row is zero
                    let c = self.centers.row(k).to_vec();
                    let inv = 1.0 / xs.len() as f64;
                    let mut grad = vec![0.0; d];
                    for xh in &xs {
                        for t in 0..d {
                            grad[t] += 2.0 * (c[t] - xh[t]) * inv;
                        }
                    }
                    let stepped: Vec<f64> = c.iter().zip(&grad).map(|(c, g)| c - lr * g).collect();
                    self.set_row(k, &stepped);
                }
            }
            touched.insert(k);
        }
        stats.touched = touched.into_iter().collect();
        Ok(stats)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let flags = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(" ");
        writeln!(s, "{FORMAT_TAG} {FORMAT_VERSION}").unwrap();
        writeln!(s, "classes {} dim {}", self.classes(), self.dim()).unwrap();
        let strategy = match self.strategy {
            CenterStrategy::Exact => "exact".to_string(),
            CenterStrategy::InstanceReplace => "instance_replace".to_string(),
            CenterStrategy::MemoryBank { window } => format!("memory_bank {window}"),
            CenterStrategy::AuxLoss { lr } => format!("aux_loss {lr}"),
        };
        writeln!(s, "strategy {strategy}").unwrap();
        writeln!(
            s,
            "degenerate {}",
            flags(&mut self.degenerate.iter().map(|&f| u8::from(f).to_string()))
        )
        .unwrap();
        writeln!(s, "counts {}", flags(&mut self.counts.iter().map(|c| c.to_string()))).unwrap();
        writeln!(s, "skipped {}", self.skipped).unwrap();
        for row in self.centers.iter_rows() {
            writeln!(s, "{}", flags(&mut row.iter().map(|v| v.to_string()))).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Parse {
            what: "center bank".into(),
            reason,
        };
        let mut lines = text.lines().enumerate();
        let mut next = |expect: &str| -> Result<(usize, Vec<&str>)> {
            let (no, line) = lines
                .next()
                .ok_or_else(|| bad(format!("unexpected end of input, expected {expect}")))?;
            Ok((no + 1, line.split_whitespace().collect()))
        };
        fn num<T: std::str::FromStr>(tok: Option<&&str>, line: usize, what: &str) -> Result<T> {
            tok.and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse {
                what: "center bank".into(),
                reason: format!("line {line}: bad or missing {what}"),
            })
        }

        let (no, head) = next("header")?;
        if head.first() != Some(&FORMAT_TAG) {
            return Err(bad(format!("line {no}: missing `{FORMAT_TAG}` tag")));
        }
        let version: u32 = num(head.get(1), no, "version")?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let (no, dims) = next("dimensions")?;
        if dims.first() != Some(&"classes") || dims.get(2) != Some(&"dim") {
            return Err(bad(format!("line {no}: expected `classes K dim D`")));
        }
        let classes: usize = num(dims.get(1), no, "class count")?;
        let dim: usize = num(dims.get(3), no, "dimension")?;

        let (no, st) = next("strategy")?;
        let strategy = match (st.first(), st.get(1).copied()) {
            (Some(&"strategy"), Some("exact")) => CenterStrategy::Exact,
            (Some(&"strategy"), Some("instance_replace")) => CenterStrategy::InstanceReplace,
            (Some(&"strategy"), Some("memory_bank")) => CenterStrategy::MemoryBank {
                window: num(st.get(2), no, "window")?,
            },
            (Some(&"strategy"), Some("aux_loss")) => CenterStrategy::AuxLoss {
                lr: num(st.get(2), no, "lr")?,
            },
            _ => return Err(bad(format!("line {no}: unknown strategy"))),
        };
        strategy.validate()?;

        let mut list = |key: &str| -> Result<Vec<usize>> {
            let (no, toks) = next(key)?;
            if toks.first() != Some(&key) || toks.len() != classes + 1 {
                return Err(bad(format!("line {no}: expected `{key}` with {classes} values")));
            }
            toks[1..]
                .iter()
                .map(|t| t.parse().map_err(|_| bad(format!("line {no}: bad value `{t}`"))))
                .collect()
        };
        let degenerate: Vec<bool> = list("degenerate")?.into_iter().map(|v| v != 0).collect();
        let counts = list("counts")?;
        let (no, sk) = next("skipped")?;
        if sk.first() != Some(&"skipped") {
            return Err(bad(format!("line {no}: expected `skipped N`")));
        }
        let skipped: usize = num(sk.get(1), no, "skip count")?;

        let mut data = Vec::with_capacity(classes * dim);
        for _ in 0..classes {
            let (no, toks) = next("center row")?;
            if toks.len() != dim {
                return Err(bad(format!("line {no}: expected {dim} values, got {}", toks.len())));
            }
            for t in toks {
                data.push(t.parse().map_err(|_| bad(format!("line {no}: bad float `{t}`")))?);
            }
        }
        let centers = Matrix::new(classes, dim, data)?;
        for k in 0..classes {
            let n = norm(centers.row(k));
            if !degenerate[k] && (n - 1.0).abs() > 1e-8 {
                return Err(Error::NonUnitRow { row: k, norm: n });
            }
        }
        Ok(Self {
            centers,
            counts,
            strategy,
            degenerate,
            skipped,
            memory: vec![VecDeque::new(); classes],
            sums: vec![vec![0.0; dim]; classes],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, SQRT_2};

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn single_sample_center() {
        let bank = exact_centers(&m(&[&[3.0, 4.0]]), &[0], 2).unwrap();
        assert_eq!(bank.centers().row(0), &[0.6, 0.8]);
        assert!(bank.is_degenerate(1));
    }

    #[test]
    fn antipodal_pair_is_degenerate() {
        let bank = exact_centers(&m(&[&[1.0, 0.0], &[-2.0, 0.0]]), &[0, 0], 1).unwrap();
        assert!(bank.is_degenerate(0));
        assert_eq!(bank.centers().row(0), &[0.0, 0.0]);
    }

    #[test]
    fn aux_loss_hand_step() {
        let mut bank = CenterBank::from_rows(&m(&[&[1.0, 0.0]]), CenterStrategy::AuxLoss { lr: 0.25 }).unwrap();
        bank.update_from_batch(&m(&[&[0.0, 1.0]]), &[0]).unwrap();
        let r = bank.centers().row(0);
        assert!((r[0] - SQRT_2 / 2.0).abs() < 1e-15 && (r[1] - SQRT_2 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn memory_bank_window_mean() {
        let a = [0.6, 0.8];
        let b = [1.0, 0.0];
        let mut bank = CenterBank::from_rows(&m(&[&[0.0, 1.0], &[0.0, -1.0]]), CenterStrategy::MemoryBank { window: 2 }).unwrap();
        bank.update_from_batch(&m(&[&a]), &[1]).unwrap();
        bank.update_from_batch(&m(&[&[2.0, 0.0]]), &[1]).unwrap();
        let mean = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let want = crate::numerics::l2_normalize(&mean).unwrap();
        let got = bank.centers().row(1);
        assert!((got[0] - want[0]).abs() < 1e-15 && (got[1] - want[1]).abs() < 1e-15);
        // a third sample evicts the oldest
        bank.update_from_batch(&m(&[&[0.0, 5.0]]), &[1]).unwrap();
        let want = crate::numerics::l2_normalize(&[0.5, 0.5]).unwrap();
        let got = bank.centers().row(1);
        assert!((got[0] - want[0]).abs() < 1e-15 && (got[1] - want[1]).abs() < 1e-15);
        assert_eq!(bank.centers().row(0), &[0.0, 1.0]);
    }

    #[test]
    fn instance_replace_last_wins() {
        let mut bank = CenterBank::from_rows(&m(&[&[1.0, 0.0]]), CenterStrategy::InstanceReplace).unwrap();
        let stats = bank.update_from_batch(&m(&[&[0.0, 2.0], &[-3.0, 0.0]]), &[0, 0]).unwrap();
        assert_eq!(bank.centers().row(0), &[-1.0, 0.0]);
        assert_eq!(stats.touched, vec![0]);
    }

    #[test]
    fn degenerate_samples_are_skipped() {
        let mut bank = CenterBank::from_rows(&m(&[&[1.0, 0.0]]), CenterStrategy::InstanceReplace).unwrap();
        let stats = bank.update_from_batch(&m(&[&[0.0, 0.0]]), &[0]).unwrap();
        assert_eq!(stats.skipped, 1);
        assert!(stats.touched.is_empty());
        assert_eq!(bank.centers().row(0), &[1.0, 0.0]);
        assert_eq!(bank.skipped(), 1);
    }

    #[test]
    fn aux_step_initializes_degenerate_row() {
        let mut bank = exact_centers(&m(&[&[1.0, 0.0]]), &[0], 2)
            .unwrap()
            .with_strategy(CenterStrategy::AuxLoss { lr: 0.5 })
            .unwrap();
        assert!(bank.is_degenerate(1));
        bank.update_from_batch(&m(&[&[0.0, 3.0]]), &[1]).unwrap();
        assert!(!bank.is_degenerate(1));
        assert_eq!(bank.centers().row(1), &[0.0, 1.0]);
    }

    #[test]
    fn gaps() {
        let bank = exact_centers(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), &[0, 1], 3).unwrap();
        let same = weight_center_gap(bank.centers(), &bank).unwrap();
        assert_eq!(same.len(), 2);
        assert!(same.values().all(|&g| g == 0.0));
        let w = m(&[&[0.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]]);
        let g = weight_center_gap(&w, &bank).unwrap();
        assert!((g[&0] - FRAC_PI_2).abs() < 1e-15);
        assert!(!g.contains_key(&2));
    }

    #[test]
    fn text_round_trip() {
        let x = m(&[&[1.0, 0.3], &[0.2, -1.0], &[-0.7, 0.1]]);
        let bank = exact_centers(&x, &[0, 1, 1], 3)
            .unwrap()
            .with_strategy(CenterStrategy::AuxLoss { lr: 0.5 })
            .unwrap();
        let text = bank.to_text();
        let back = CenterBank::from_text(&text).unwrap();
        assert_eq!(back.centers(), bank.centers());
        assert_eq!(back.degenerate_flags(), bank.degenerate_flags());
        assert_eq!(back.counts(), bank.counts());
        assert_eq!(back.strategy(), bank.strategy());
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn text_rejects_garbage() {
        assert!(CenterBank::from_text("").is_err());
        assert!(CenterBank::from_text("irsoftmax-centers 2\n").is_err());
        let bank = CenterBank::from_rows(&m(&[&[1.0, 0.0]]), CenterStrategy::Exact).unwrap();
        let broken = bank.to_text().replace("strategy exact", "strategy momentum");
        assert!(CenterBank::from_text(&broken).is_err());
        let non_unit = bank.to_text().replace("\n1 0\n", "\n2 0\n");
        assert!(matches!(CenterBank::from_text(&non_unit), Err(Error::NonUnitRow { .. })));
    }

    #[test]
    fn invalid_strategies() {
        let raw = m(&[&[1.0, 0.0]]);
        assert!(CenterBank::from_rows(&raw, CenterStrategy::MemoryBank { window: 0 }).is_err());
        assert!(CenterBank::from_rows(&raw, CenterStrategy::AuxLoss { lr: 0.0 }).is_err());
    }
}
