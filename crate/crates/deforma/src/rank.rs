//! Schulze (widest-path Condorcet) ranking of fusion methods over
//! per-subset score ballots.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Methods x subsets score matrix. `mean_owa` must be complete;
/// `median_owa` may have gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub methods: Vec<String>,
    pub subsets: Vec<String>,
    pub mean_owa: Vec<Vec<f64>>,
    pub median_owa: Vec<Vec<Option<f64>>>,
}

impl ScoreTable {
    pub fn new(methods: Vec<String>, subsets: Vec<String>, mean_owa: Vec<Vec<f64>>) -> Result<Self> {
        if mean_owa.len() != methods.len() || mean_owa.iter().any(|r| r.len() != subsets.len()) {
            return Err(Error::Shape("score matrix does not match methods x subsets".to_string()));
        }
        let median_owa = vec![vec![None; subsets.len()]; methods.len()];
        Ok(ScoreTable {
            methods,
            subsets,
            mean_owa,
            median_owa,
        })
    }
}

/// 1 = best; tied methods share a rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchulzeResult {
    pub ranks: HashMap<String, usize>,
    /// Strongest-path wins per method, in table order.
    pub path_wins: Vec<usize>,
}

/// Ranks methods by the Schulze method with lower-is-better scores.
/// Each subset is one ballot ordering methods by ascending mean OWA;
/// equal cells give a tied ballot position that counts for neither
/// side. Final ranks sort by descending strongest-path win count,
/// ties sharing a rank.
pub fn schulze_rank(table: &ScoreTable) -> Result<SchulzeResult> {
    let n = table.methods.len();
    if n < 2 || table.subsets.is_empty() {
        return Err(Error::argument("schulze needs >= 2 methods and >= 1 subset"));
    }
    for row in &table.mean_owa {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("<score table>", "non-finite mean OWA cell"));
        }
    }
    // Pairwise preference counts.
    let mut d = vec![vec![0usize; n]; n];
    for subset in 0..table.subsets.len() {
        for a in 0..n {
            for b in 0..n {
                if a != b && table.mean_owa[a][subset] < table.mean_owa[b][subset] {
                    d[a][b] += 1;
                }
            }
        }
    }
    // Widest-path closure over the defeat graph (winning-votes strength).
    let mut p = vec![vec![0usize; n]; n];
    for a in 0..n {
        for b in 0..n {
            if a != b && d[a][b] > d[b][a] {
                p[a][b] = d[a][b];
            }
        }
    }
    for via in 0..n {
        for a in 0..n {
            if a == via {
                continue;
            }
            for b in 0..n {
                if b == a || b == via {
                    continue;
                }
                p[a][b] = p[a][b].max(p[a][via].min(p[via][b]));
            }
        }
    }
    let path_wins: Vec<usize> = (0..n)
        .map(|a| (0..n).filter(|&b| b != a && p[a][b] > p[b][a]).count())
        .collect();
    let mut ranks = HashMap::with_capacity(n);
    for (a, method) in table.methods.iter().enumerate() {
        let better = path_wins.iter().filter(|&&w| w > path_wins[a]).count();
        ranks.insert(method.clone(), better + 1);
    }
    Ok(SchulzeResult { ranks, path_wins })
}
