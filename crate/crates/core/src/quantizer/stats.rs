use std::collections::HashMap;
use std::fmt;

use super::ItemCodeTable;
use crate::error::{Error, Result};

/// Distribution diagnostics of a code table.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeStats {
    /// `histograms[k][j]`: items whose `k`-th index is `j`.
    pub histograms: Vec<Vec<usize>>,
    /// Shannon entropy of each sub-space's index distribution, in bits.
    pub entropy_bits: Vec<f64>,
    /// Unordered pairs of distinct items sharing a full code.
    pub collision_pairs: u64,
    /// Fraction of items whose full code is shared with at least one other item.
    pub collision_rate: f64,
    pub num_items: usize,
}

pub fn code_stats(table: &ItemCodeTable) -> Result<CodeStats> {
    let n = table.num_items();
    if n == 0 {
        return Err(Error::Data("code statistics need at least one item".into()));
    }
    let d = table.num_subspaces();
    let m = table.num_centroids();
    let mut histograms = vec![vec![0usize; m]; d];
    for row in table.rows() {
        for (k, &c) in row.iter().enumerate() {
            histograms[k][c] += 1;
        }
    }
    let entropy_bits = histograms
        .iter()
        .map(|h| {
            h.iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n as f64;
                    -p * p.log2()
                })
                .sum::<f64>()
                .max(0.0)
        })
        .collect();

    let mut groups: HashMap<&[usize], u64> = HashMap::new();
    for row in table.rows() {
        *groups.entry(row).or_default() += 1;
    }
    let collision_pairs = groups.values().map(|&c| c * (c - 1) / 2).sum();
    let shared: u64 = groups.values().filter(|&&c| c > 1).sum();

    Ok(CodeStats {
        histograms,
        entropy_bits,
        collision_pairs,
        collision_rate: shared as f64 / n as f64,
        num_items: n,
    })
}

impl fmt::Display for CodeStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.histograms.first().map_or(0, Vec::len);
        writeln!(f, "{:>4}  {:>12}  {:>8}  {:>8}", "dim", "entropy_bits", "min", "max")?;
        for (k, (h, e)) in self.histograms.iter().zip(&self.entropy_bits).enumerate() {
            let lo = h.iter().min().copied().unwrap_or(0);
            let hi = h.iter().max().copied().unwrap_or(0);
            writeln!(f, "{k:>4}  {e:>12.4}  {lo:>8}  {hi:>8}")?;
        }
        writeln!(f, "max entropy: {:.4} bits", (m as f64).log2())?;
        write!(
            f,
            "items: {}  collision pairs: {}  collision rate: {:.4}",
            self.num_items, self.collision_pairs, self.collision_rate
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use rand::Rng;

    #[test]
    fn all_identical_codes() {
        let table = ItemCodeTable::new(3, 4, [1, 2, 3].repeat(10)).unwrap();
        let s = code_stats(&table).unwrap();
        assert!(s.entropy_bits.iter().all(|&e| e == 0.0));
        assert_eq!(s.collision_pairs, 45);
        assert_eq!(s.collision_rate, 1.0);
        assert_eq!(s.histograms[1][2], 10);
    }

    #[test]
    fn uniform_codes_have_two_bits() {
        let codes: Vec<usize> = (0..400).flat_map(|i| [i % 4, (i / 4) % 4]).collect();
        let table = ItemCodeTable::new(2, 4, codes).unwrap();
        let s = code_stats(&table).unwrap();
        for e in &s.entropy_bits {
            assert!((e - 2.0).abs() < 1e-12);
        }
        for h in &s.histograms {
            assert_eq!(h.iter().sum::<usize>(), 400);
        }
    }

    #[test]
    fn collisions_match_sort_and_scan() {
        let mut rng = seeded_rng(4);
        // small alphabet so that collisions actually happen
        let codes: Vec<usize> = (0..1000 * 8).map(|i| if i % 8 < 3 { rng.gen_range(0..16) } else { 0 }).collect();
        let table = ItemCodeTable::new(8, 16, codes).unwrap();
        let s = code_stats(&table).unwrap();

        let mut rows: Vec<Vec<usize>> = table.rows().map(|r| r.to_vec()).collect();
        rows.sort();
        let mut pairs = 0u64;
        let mut shared = 0u64;
        let mut run = 1u64;
        for i in 1..=rows.len() {
            if i < rows.len() && rows[i] == rows[i - 1] {
                run += 1;
            } else {
                pairs += run * (run - 1) / 2;
                if run > 1 {
                    shared += run;
                }
                run = 1;
            }
        }
        assert!(pairs > 0);
        assert_eq!(s.collision_pairs, pairs);
        assert!((s.collision_rate - shared as f64 / 1000.0).abs() < 1e-15);
    }

    #[test]
    fn empty_table_errors() {
        let table = ItemCodeTable::new(2, 4, vec![]).unwrap();
        assert!(code_stats(&table).is_err());
    }
}
