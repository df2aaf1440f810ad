//! Post-hoc analysis of merge-weight matrices.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::FederationManifest;
use crate::error::{Error, Result};

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity of rows within a cluster minus the mean across
/// clusters, over unordered pairs of distinct rows.
///
/// `None` when the rows and ids disagree in length, or when there is no
/// intra-cluster pair or no inter-cluster pair.
pub fn block_structure_score(rows: &[Vec<f64>], clusters: &[usize]) -> Option<f64> {
    if rows.len() != clusters.len() {
        return None;
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let c = cosine(&rows[i], &rows[j]);
            if clusters[i] == clusters[j] {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    (n_intra > 0 && n_inter > 0).then(|| intra / n_intra as f64 - inter / n_inter as f64)
}

fn choose2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
///
/// Two identical trivial partitions (all singletons or one block) score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "labelings have different lengths ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| choose2(n)).sum();
    let sum_a: f64 = rows.values().map(|&n| choose2(n)).sum();
    let sum_b: f64 = cols.values().map(|&n| choose2(n)).sum();
    let total = choose2(a.len());
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

pub fn weights_file_name(round: usize) -> String {
    format!("weights_round_{round}.csv")
}

/// Writes an `m × d` matrix as headerless CSV, one client per row.
pub fn write_weights_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_weights_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            row: 0,
            message: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let bad = |message: String| Error::Csv {
            path: path.to_path_buf(),
            row: r + 1,
            message,
        };
        let record = record.map_err(|e| bad(e.to_string()))?;
        let row = record
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Rounds with a weight snapshot in `dir`, ascending.
pub fn available_snapshots(dir: &Path) -> Result<Vec<usize>> {
    let mut rounds: Vec<usize> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("weights_round_")?.strip_suffix(".csv")?.parse().ok()
        })
        .collect();
    rounds.sort_unstable();
    Ok(rounds)
}

/// A loaded snapshot and its block-structure score.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsExport {
    pub round: usize,
    pub path: PathBuf,
    pub matrix: Vec<Vec<f64>>,
    /// Present when `federation.json` records a cluster id for every client.
    pub score: Option<f64>,
}

/// Loads the snapshot for `round` from a per-seed run directory.
pub fn weights_export(run_dir: &Path, round: usize) -> Result<WeightsExport> {
    let path = run_dir.join(weights_file_name(round));
    if !path.is_file() {
        return Err(Error::MissingSnapshot {
            round,
            available: available_snapshots(run_dir).unwrap_or_default(),
        });
    }
    let matrix = read_weights_csv(&path)?;
    let manifest_path = run_dir.join("federation.json");
    let score = if manifest_path.is_file() {
        let manifest = FederationManifest::read(&manifest_path)?;
        let ids: Option<Vec<usize>> = manifest.cluster_ids.iter().copied().collect();
        ids.and_then(|ids| block_structure_score(&matrix, &ids))
    } else {
        None
    };
    Ok(WeightsExport {
        round,
        path,
        matrix,
        score,
    })
}
