//! Bradley-Terry scoring of pairwise preferences and average ranking.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-strength floor for methods that never win.
pub const SCORE_FLOOR: f64 = -18.420680743952367; // ln(1e-8)

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseTable {
    pub methods: Vec<String>,
    /// `wins[i][j]`: how often `i` beat `j`.
    pub wins: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    method_a: String,
    method_b: String,
    wins_a: f64,
    wins_b: f64,
}

impl PairwiseTable {
    pub fn new(methods: Vec<String>, wins: Vec<Vec<f64>>) -> Result<Self> {
        let m = methods.len();
        if wins.len() != m || wins.iter().any(|r| r.len() != m) {
            return Err(Error::Validation(format!("win matrix must be {m}×{m}")));
        }
        for (i, row) in wins.iter().enumerate() {
            if row[i] != 0.0 {
                return Err(Error::Validation(format!("{} cannot beat itself", methods[i])));
            }
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Validation("win counts must be finite and non-negative".into()));
            }
        }
        Ok(Self { methods, wins })
    }

    /// Rows `method_a, method_b, wins_a, wins_b`; repeated pairs add up.
    /// Methods are listed in order of first appearance.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut methods = Vec::new();
        let mut records = Vec::new();
        for row in rdr.deserialize::<CsvRow>() {
            let row = row?;
            if row.method_a == row.method_b {
                return Err(Error::Validation(format!("{} compared with itself", row.method_a)));
            }
            for name in [&row.method_a, &row.method_b] {
                if !index.contains_key(name) {
                    index.insert(name.clone(), methods.len());
                    methods.push(name.clone());
                }
            }
            records.push(row);
        }
        let m = methods.len();
        let mut wins = vec![vec![0.0; m]; m];
        for r in records {
            let (a, b) = (index[&r.method_a], index[&r.method_b]);
            if !(r.wins_a >= 0.0 && r.wins_b >= 0.0) {
                return Err(Error::Validation("win counts must be non-negative".into()));
            }
            wins[a][b] += r.wins_a;
            wins[b][a] += r.wins_b;
        }
        Self::new(methods, wins)
    }

    pub fn comparisons(&self, i: usize, j: usize) -> f64 {
        self.wins[i][j] + self.wins[j][i]
    }

    fn connected(&self) -> bool {
        let m = self.methods.len();
        let mut seen = vec![false; m];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..m {
                if !seen[j] && self.comparisons(i, j) > 0.0 {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BtScores {
    pub methods: Vec<String>,
    /// Centered log-strengths.
    pub scores: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Methods whose log-strength hit [`SCORE_FLOOR`].
    pub clamped: Vec<bool>,
}

impl BtScores {
    /// One `"<method> <score>"` line per method, three decimals.
    pub fn format_rows(&self) -> String {
        self.methods
            .iter()
            .zip(&self.scores)
            .map(|(m, s)| format!("{m} {s:.3}\n"))
            .collect()
    }
}

/// Maximum-likelihood strengths by minorization-maximization:
/// `p_i ← W_i / Σ_j n_ij / (p_i + p_j)`, renormalized each sweep.
pub fn bt_fit(table: &PairwiseTable, tol: f64, max_iter: usize) -> Result<BtScores> {
    let m = table.methods.len();
    if m == 0 {
        return Err(Error::Validation("no methods".into()));
    }
    if !table.connected() {
        return Err(Error::RankDeficient("comparison graph is not connected".into()));
    }
    let total_wins: Vec<f64> = table.wins.iter().map(|r| r.iter().sum()).collect();
    let mut p = vec![1.0 / m as f64; m];
    let log_scores = |p: &[f64]| {
        let l: Vec<f64> = p.iter().map(|v| v.ln().max(SCORE_FLOOR)).collect();
        let mean = l.iter().sum::<f64>() / m as f64;
        (l.iter().map(|v| v - mean).collect::<Vec<_>>(), l)
    };
    let (mut scores, _) = log_scores(&p);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut next = vec![0.0; m];
        for i in 0..m {
            let denom: f64 = (0..m)
                .filter(|&j| j != i)
                .map(|j| {
                    let n = table.comparisons(i, j);
                    if n > 0.0 {
                        n / (p[i] + p[j])
                    } else {
                        0.0
                    }
                })
                .sum();
            next[i] = total_wins[i] / denom;
        }
        let z: f64 = next.iter().sum();
        p = next.iter().map(|v| v / z).collect();
        let (new_scores, _) = log_scores(&p);
        let delta = new_scores.iter().zip(&scores).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        scores = new_scores;
        if delta < tol {
            converged = true;
            break;
        }
    }
    let (_, raw) = log_scores(&p);
    let clamped = raw.iter().map(|&v| v <= SCORE_FLOOR).collect();
    Ok(BtScores { methods: table.methods.clone(), scores, iterations, converged, clamped })
}

/// Mean rank per method over raters; every ranking must be a permutation
/// of `1..=m`.
pub fn average_rank(rankings: &[Vec<usize>]) -> Result<Vec<f64>> {
    let first = rankings.first().ok_or_else(|| Error::Validation("no rankings".into()))?;
    let m = first.len();
    let mut sums = vec![0.0; m];
    for (k, r) in rankings.iter().enumerate() {
        let mut seen = vec![false; m];
        if r.len() != m {
            return Err(Error::Validation(format!("ranking {k} has {} entries, expected {m}", r.len())));
        }
        for &v in r {
            if v == 0 || v > m || seen[v - 1] {
                return Err(Error::Validation(format!("ranking {k} is not a permutation of 1..={m}")));
            }
            seen[v - 1] = true;
        }
        for (s, &v) in sums.iter_mut().zip(r) {
            *s += v as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / rankings.len() as f64).collect())
}

/// `"<method> <quality> <fidelity>"` rows with two decimals.
pub fn format_rank_rows(methods: &[String], quality: &[f64], fidelity: &[f64]) -> String {
    methods
        .iter()
        .zip(quality.iter().zip(fidelity))
        .map(|(m, (q, f))| format!("{m} {q:.2} {f:.2}\n"))
        .collect()
}
