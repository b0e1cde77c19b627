//! Friedman omnibus test and pairwise Wilcoxon signed-rank tests over
//! per-run metric tables.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample the exact distribution is tabulated for.
pub const EXACT_LIMIT: usize = 64;
/// Auto mode switches to the normal approximation above this size.
pub const AUTO_EXACT_MAX: usize = 12;

/// Methods × runs table of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResultTable {
    pub methods: Vec<String>,
    pub runs: Vec<String>,
    /// `values[method][run]`.
    pub values: Vec<Vec<f64>>,
}

impl FoldResultTable {
    /// Builds a table from `(method, run, value)` triples. Methods and runs
    /// keep their order of first appearance.
    pub fn from_triples<S: AsRef<str>>(triples: &[(S, S, f64)]) -> Result<Self> {
        let mut methods: Vec<String> = Vec::new();
        let mut runs: Vec<String> = Vec::new();
        let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
        for (m, r, v) in triples {
            let (m, r) = (m.as_ref(), r.as_ref());
            let mi = position_or_push(&mut methods, m);
            let ri = position_or_push(&mut runs, r);
            if cells.insert((mi, ri), *v).is_some() {
                return Err(Error::Data(format!("duplicate result for method {m:?}, run {r:?}")));
            }
        }
        let mut values = vec![vec![0.0; runs.len()]; methods.len()];
        for (mi, row) in values.iter_mut().enumerate() {
            for (ri, cell) in row.iter_mut().enumerate() {
                *cell = *cells.get(&(mi, ri)).ok_or_else(|| {
                    Error::Data(format!(
                        "ragged table: method {:?} has no result for run {:?}",
                        methods[mi], runs[ri]
                    ))
                })?;
            }
        }
        let table = Self { methods, runs, values };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.len() < 2 || self.runs.len() < 2 {
            return Err(Error::Contract(format!(
                "comparison needs at least 2 methods and 2 runs, got {} and {}",
                self.methods.len(),
                self.runs.len()
            )));
        }
        if self.values.len() != self.methods.len() || self.values.iter().any(|r| r.len() != self.runs.len()) {
            return Err(Error::Data("table shape does not match its labels".into()));
        }
        if let Some(v) = self.values.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("metric value {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Reads a CSV with `method` and `run` columns plus the `metric` column.
    pub fn read_csv(path: &Path, metric: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Data(format!("{}: missing column {name:?}", path.display())))
        };
        let (mc, rc, vc) = (col("method")?, col("run")?, col(metric)?);
        let mut triples = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
            let raw = field(vc);
            let value: f64 = raw.parse().map_err(|_| {
                Error::Data(format!("{}: row {}: {raw:?} is not a number", path.display(), line + 2))
            })?;
            triples.push((field(mc), field(rc), value));
        }
        Self::from_triples(&triples)
    }
}

fn position_or_push(list: &mut Vec<String>, item: &str) -> usize {
    match list.iter().position(|x| x == item) {
        Some(i) => i,
        None => {
            list.push(item.to_string());
            list.len() - 1
        }
    }
}

/// Average (1-based) ranks, ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Sizes of the groups of tied values.
fn tie_groups(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        groups.push(j);
        i += j;
    }
    groups
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub chi2: f64,
    pub df: usize,
    pub p: f64,
    /// Mean rank of each method, 1 = lowest value.
    pub mean_ranks: Vec<f64>,
}

pub fn friedman(table: &FoldResultTable) -> Result<FriedmanResult> {
    table.validate()?;
    let k = table.methods.len();
    let n = table.runs.len();
    let mut rank_sums = vec![0.0; k];
    let mut tie_sum = 0.0;
    for r in 0..n {
        let row: Vec<f64> = (0..k).map(|m| table.values[m][r]).collect();
        for (s, rank) in rank_sums.iter_mut().zip(average_ranks(&row)) {
            *s += rank;
        }
        tie_sum += tie_groups(&row).iter().map(|&t| (t * t * t - t) as f64).sum::<f64>();
    }
    let (nf, kf) = (n as f64, k as f64);
    let mean_ranks: Vec<f64> = rank_sums.iter().map(|s| s / nf).collect();
    let centre = (kf + 1.0) / 2.0;
    let raw = 12.0 * nf / (kf * (kf + 1.0)) * mean_ranks.iter().map(|r| (r - centre).powi(2)).sum::<f64>();
    let correction = 1.0 - tie_sum / (nf * kf * (kf * kf - 1.0));
    let df = k - 1;
    if correction <= 0.0 {
        return Ok(FriedmanResult {
            chi2: 0.0,
            df,
            p: 1.0,
            mean_ranks,
        });
    }
    let chi2 = raw / correction;
    let p = ChiSquared::new(df as f64)
        .map_err(|e| Error::Numeric(e.to_string()))?
        .sf(chi2)
        .clamp(0.0, 1.0);
    Ok(FriedmanResult { chi2, df, p, mean_ranks })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMode {
    Exact,
    Normal,
    /// Exact up to 12 non-zero differences, normal above.
    #[default]
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W−)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_two_sided: f64,
    pub n_effective: usize,
    pub exact: bool,
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], mode: WilcoxonMode) -> Result<WilcoxonResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Contract(format!(
            "paired samples need equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Err(Error::Data("all paired differences are zero; no test possible".into()));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let exact = match mode {
        WilcoxonMode::Exact => {
            if n > EXACT_LIMIT {
                return Err(Error::Config(format!(
                    "exact Wilcoxon supports up to {EXACT_LIMIT} differences, got {n}"
                )));
            }
            true
        }
        WilcoxonMode::Normal => false,
        WilcoxonMode::Auto => n <= AUTO_EXACT_MAX,
    };
    let p = if exact {
        exact_p(&ranks, w_plus)
    } else {
        normal_p(n, &abs, w_plus)?
    };
    Ok(WilcoxonResult {
        w: w_plus.min(w_minus),
        w_plus,
        w_minus,
        p_two_sided: p,
        n_effective: n,
        exact,
    })
}

/// Exact two-sided p under the permutation distribution of the given
/// (possibly tied) ranks. Ranks are multiples of ½, so doubled ranks index a
/// table counting sign assignments by their doubled `W+`.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u128; max + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w = (2.0 * w_plus).round() as usize;
    let lower: u128 = counts[..=w].iter().sum();
    let upper: u128 = counts[w..].iter().sum();
    let all = 2f64.powi(ranks.len() as i32);
    (2.0 * lower.min(upper) as f64 / all).min(1.0)
}

/// Normal approximation with tie and continuity corrections.
fn normal_p(n: usize, abs: &[f64], w_plus: f64) -> Result<f64> {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let ties: f64 = tie_groups(abs).iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok((2.0 * normal.sf(z)).min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub alpha: f64,
    pub mode: WilcoxonMode,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            mode: WilcoxonMode::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRow {
    pub a: String,
    pub b: String,
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub n_effective: usize,
    pub exact: bool,
    pub p: f64,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub alpha: f64,
    pub methods: Vec<String>,
    pub runs: usize,
    pub friedman: FriedmanResult,
    /// Present only when the omnibus test rejects at `alpha`.
    pub pairwise: Option<Vec<PairwiseRow>>,
}

/// Friedman test, followed by every pairwise Wilcoxon test when it is
/// significant. Pairs with identical results get `p = 1`.
pub fn compare_methods(table: &FoldResultTable, opts: &CompareOptions) -> Result<ComparisonReport> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", opts.alpha)));
    }
    let omnibus = friedman(table)?;
    let pairwise = if omnibus.p < opts.alpha {
        let k = table.methods.len();
        let mut rows = Vec::with_capacity(k * (k - 1) / 2);
        for i in 0..k {
            for j in i + 1..k {
                let row = match wilcoxon_signed_rank(&table.values[i], &table.values[j], opts.mode) {
                    Ok(r) => PairwiseRow {
                        a: table.methods[i].clone(),
                        b: table.methods[j].clone(),
                        w: r.w,
                        w_plus: r.w_plus,
                        w_minus: r.w_minus,
                        n_effective: r.n_effective,
                        exact: r.exact,
                        p: r.p_two_sided,
                        significant: r.p_two_sided < opts.alpha,
                    },
                    Err(Error::Data(_)) => PairwiseRow {
                        a: table.methods[i].clone(),
                        b: table.methods[j].clone(),
                        w: 0.0,
                        w_plus: 0.0,
                        w_minus: 0.0,
                        n_effective: 0,
                        exact: true,
                        p: 1.0,
                        significant: false,
                    },
                    Err(e) => return Err(e),
                };
                rows.push(row);
            }
        }
        Some(rows)
    } else {
        None
    };
    Ok(ComparisonReport {
        alpha: opts.alpha,
        methods: table.methods.clone(),
        runs: table.runs.len(),
        friedman: omnibus,
        pairwise,
    })
}

impl ComparisonReport {
    /// Omnibus line plus a `Model-Pairs | P_value` table; p-values above
    /// alpha are set in bold.
    pub fn to_markdown(&self) -> String {
        let f = &self.friedman;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Friedman test over {} methods and {} runs: chi2 = {:.4}, df = {}, p = {:.6}\n",
            self.methods.len(),
            self.runs,
            f.chi2,
            f.df,
            f.p
        );
        match &self.pairwise {
            None => {
                let _ = writeln!(out, "Omnibus p >= {}; no pairwise tests.", self.alpha);
            }
            Some(rows) => {
                out.push_str("| Model-Pairs | P_value |\n|---|---|\n");
                for r in rows {
                    let p = format!("{:.6}", r.p);
                    let p = if r.p > self.alpha { format!("**{p}**") } else { p };
                    let _ = writeln!(out, "| {} vs {} | {} |", r.a, r.b, p);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Two-sided p by listing every sign pattern.
    fn enumerate_p(diffs: &[f64]) -> f64 {
        let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
        let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
        let ranks = average_ranks(&abs);
        let observed: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
        let n = nz.len();
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u64..1 << n {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if w <= observed + 1e-9 {
                le += 1;
            }
            if w >= observed - 1e-9 {
                ge += 1;
            }
        }
        (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)
    }

    fn table(values: Vec<Vec<f64>>) -> FoldResultTable {
        FoldResultTable {
            methods: (0..values.len()).map(|i| format!("M{i}")).collect(),
            runs: (0..values[0].len()).map(|i| format!("r{i}")).collect(),
            values,
        }
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn friedman_consistent_ordering() {
        let t = table(vec![vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6], vec![0.7, 0.8, 0.9]]);
        let f = friedman(&t).unwrap();
        assert!((f.chi2 - 6.0).abs() < 1e-12);
        assert_eq!(f.df, 2);
        assert!((f.p - (-3f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn friedman_all_tied() {
        let t = table(vec![vec![0.5, 0.6], vec![0.5, 0.6], vec![0.5, 0.6]]);
        let f = friedman(&t).unwrap();
        assert_eq!((f.chi2, f.p), (0.0, 1.0));
    }

    #[test]
    fn friedman_rejects_degenerate_tables() {
        let t = table(vec![vec![0.5, 0.6]]);
        assert!(matches!(friedman(&t), Err(Error::Contract(_))));
    }

    #[test]
    fn five_positive_differences() {
        let a = [0.9, 0.8, 0.7, 0.95, 0.85];
        let b = [0.5, 0.5, 0.5, 0.5, 0.5];
        let r = wilcoxon_signed_rank(&a, &b, WilcoxonMode::Exact).unwrap();
        assert_eq!(r.w, 0.0);
        assert_eq!(r.w_plus, 15.0);
        assert_eq!(r.p_two_sided, 0.0625);
        assert_eq!(r.n_effective, 5);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let a = [0.3, 0.4, 0.5];
        assert!(matches!(
            wilcoxon_signed_rank(&a, &a, WilcoxonMode::Exact),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn zero_differences_are_dropped() {
        let r = wilcoxon_signed_rank(&[0.5, 0.7, 0.9], &[0.5, 0.6, 0.8], WilcoxonMode::Exact).unwrap();
        assert_eq!(r.n_effective, 2);
        assert_eq!(r.p_two_sided, 0.5);
    }

    #[test]
    fn normal_mode_is_close_to_exact_for_moderate_n() {
        let a: Vec<f64> = (0..20).map(|i| 0.5 + 0.01 * i as f64).collect();
        let b: Vec<f64> = (0..20).map(|i| 0.5 + 0.013 * ((i * 7) % 20) as f64 - 0.05).collect();
        let e = wilcoxon_signed_rank(&a, &b, WilcoxonMode::Exact).unwrap();
        let n = wilcoxon_signed_rank(&a, &b, WilcoxonMode::Normal).unwrap();
        assert!((e.p_two_sided - n.p_two_sided).abs() < 0.02, "{} vs {}", e.p_two_sided, n.p_two_sided);
        let auto = wilcoxon_signed_rank(&a, &b, WilcoxonMode::Auto).unwrap();
        assert!(!auto.exact);
    }

    #[test]
    fn dominating_method_over_ten_runs() {
        let base: Vec<f64> = (0..10).map(|i| 0.3 + 0.02 * i as f64).collect();
        let mid: Vec<f64> = base.iter().enumerate().map(|(i, v)| v + 0.05 + 0.001 * i as f64).collect();
        let top: Vec<f64> = mid.iter().enumerate().map(|(i, v)| v + 0.1 + 0.003 * i as f64).collect();
        let t = table(vec![base, mid, top]);
        let report = compare_methods(
            &t,
            &CompareOptions {
                alpha: 0.05,
                mode: WilcoxonMode::Exact,
            },
        )
        .unwrap();
        let rows = report.pairwise.as_ref().unwrap();
        assert_eq!(rows.len(), 3);
        for r in rows.iter().filter(|r| r.b == "M2") {
            assert_eq!(r.p, 2.0 / 1024.0);
            assert!(r.significant);
        }
        let md = report.to_markdown();
        assert!(md.contains("| Model-Pairs | P_value |"));
        assert!(md.contains("| M0 vs M2 | 0.001953 |"));
    }

    #[test]
    fn identical_methods_stop_at_omnibus() {
        let t = table(vec![vec![0.5, 0.6, 0.7], vec![0.5, 0.6, 0.7]]);
        let report = compare_methods(&t, &CompareOptions::default()).unwrap();
        assert_eq!(report.friedman.p, 1.0);
        assert!(report.pairwise.is_none());
        assert!(report.to_markdown().contains("no pairwise tests"));
    }

    #[test]
    fn markdown_bolds_non_significant_pairs() {
        let report = ComparisonReport {
            alpha: 0.05,
            methods: vec!["A".into(), "B".into()],
            runs: 5,
            friedman: FriedmanResult {
                chi2: 5.0,
                df: 1,
                p: 0.02,
                mean_ranks: vec![1.0, 2.0],
            },
            pairwise: Some(vec![PairwiseRow {
                a: "A".into(),
                b: "B".into(),
                w: 0.0,
                w_plus: 15.0,
                w_minus: 0.0,
                n_effective: 5,
                exact: true,
                p: 0.0625,
                significant: false,
            }]),
        };
        assert!(report.to_markdown().contains("| A vs B | **0.062500** |"));
    }

    #[test]
    fn ragged_triples_rejected() {
        let triples = vec![("A", "r1", 0.5), ("A", "r2", 0.6), ("B", "r1", 0.4)];
        assert!(matches!(FoldResultTable::from_triples(&triples), Err(Error::Data(_))));
        let dup = vec![("A", "r1", 0.5), ("A", "r1", 0.6)];
        assert!(matches!(FoldResultTable::from_triples(&dup), Err(Error::Data(_))));
    }

    #[test]
    fn csv_reading_uses_header_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        std::fs::write(&path, "run,bac,method\nr1,0.5,A\nr2,0.6,A\nr1,0.4,B\nr2,0.7,B\n").unwrap();
        let t = FoldResultTable::read_csv(&path, "bac").unwrap();
        assert_eq!(t.methods, vec!["A", "B"]);
        assert_eq!(t.values, vec![vec![0.5, 0.6], vec![0.4, 0.7]]);
    }

    fn quantized(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0u8..=20).prop_map(|v| v as f64 / 20.0), n)
    }

    proptest! {
        #[test]
        fn exact_matches_enumeration((a, b) in (2usize..=12).prop_flat_map(|n| (quantized(n), quantized(n)))) {
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            prop_assume!(diffs.iter().any(|d| *d != 0.0));
            let r = wilcoxon_signed_rank(&a, &b, WilcoxonMode::Exact).unwrap();
            prop_assert!((r.p_two_sided - enumerate_p(&diffs)).abs() < 1e-12);
            let swapped = wilcoxon_signed_rank(&b, &a, WilcoxonMode::Exact).unwrap();
            prop_assert_eq!(swapped.p_two_sided, r.p_two_sided);
            prop_assert_eq!(swapped.w_plus, r.w_minus);
            prop_assert!((0.0..=1.0).contains(&r.p_two_sided));
        }

        #[test]
        fn friedman_invariant_under_monotone_maps_and_column_permutations(
            values in prop::collection::vec(quantized(6), 3..5),
        ) {
            let t = table(values.clone());
            let base = friedman(&t).unwrap();
            let mapped = table(values.iter().map(|r| r.iter().map(|v| v.sqrt()).collect()).collect());
            prop_assert!((friedman(&mapped).unwrap().chi2 - base.chi2).abs() < 1e-9);
            let mut rev = values;
            rev.reverse();
            prop_assert!((friedman(&table(rev)).unwrap().chi2 - base.chi2).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&base.p));
        }
    }
}
