//! Pearson correlations between SAE code units and physical quantities,
//! their rankings, and the synchronization strength between the
//! correlations of different quantities.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::QuantityKind;
use crate::error::{Error, Result};
use crate::io::Table;

const N_QUANTITIES: usize = 4;

/// Single-pass co-moment accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PearsonAccumulator {
    n: u64,
    mean_x: f64,
    mean_y: f64,
    m2_x: f64,
    m2_y: f64,
    c_xy: f64,
}

impl PearsonAccumulator {
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dx = x - self.mean_x;
        let dy = y - self.mean_y;
        self.mean_x += dx / n;
        self.mean_y += dy / n;
        self.m2_x += dx * (x - self.mean_x);
        self.m2_y += dy * (y - self.mean_y);
        self.c_xy += dx * (y - self.mean_y);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// `None` when either series has zero variance or fewer than two samples.
    pub fn finish(&self) -> Option<f64> {
        if self.n < 2 {
            return None;
        }
        finish(self.c_xy, self.m2_x, self.m2_y)
    }
}

fn finish(c_xy: f64, m2_x: f64, m2_y: f64) -> Option<f64> {
    if !(m2_x > 0.0 && m2_y > 0.0) {
        return None;
    }
    let rho = c_xy / (m2_x * m2_y).sqrt();
    rho.is_finite().then(|| rho.clamp(-1.0, 1.0))
}

/// Two-pass Pearson correlation with population moments.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least two samples"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    Ok(finish(sxy, sxx, syy))
}

/// Streaming correlations of every unit of one block with every quantity.
#[derive(Debug, Clone)]
pub struct BlockAccumulator {
    cells: Vec<[PearsonAccumulator; N_QUANTITIES]>,
}

impl BlockAccumulator {
    pub fn new(n_units: usize) -> Self {
        BlockAccumulator {
            cells: vec![[PearsonAccumulator::default(); N_QUANTITIES]; n_units],
        }
    }

    pub fn push(&mut self, code: &[f32], labels: &[f64; N_QUANTITIES]) -> Result<()> {
        if code.len() != self.cells.len() {
            return Err(Error::DimensionMismatch {
                expected: self.cells.len(),
                actual: code.len(),
            });
        }
        for (cell, &c) in self.cells.iter_mut().zip(code) {
            for (acc, &q) in cell.iter_mut().zip(labels) {
                acc.push(c as f64, q);
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Vec<[Option<f64>; N_QUANTITIES]> {
        self.cells.iter().map(|cell| cell.map(|a| a.finish())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCorrelations {
    pub block: u32,
    /// `units[i][q.index()]`; `None` marks an undefined correlation.
    pub units: Vec<[Option<f64>; N_QUANTITIES]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub context_length: u32,
    /// Sorted by block index.
    pub blocks: Vec<BlockCorrelations>,
}

/// Per-sample labels indexed by [`QuantityKind::index`].
pub type Labels = [f64; N_QUANTITIES];

pub fn labels_of(sample: &crate::activation::Sample) -> Labels {
    QuantityKind::ALL.map(|q| sample.quantity(q))
}

/// `codes[b]` holds one code vector per sample for block `blocks[b]`.
pub fn correlate_all(context_length: u32, blocks: &[(u32, Vec<Vec<f32>>)], labels: &[Labels]) -> Result<CorrelationMatrix> {
    let mut out: Vec<BlockCorrelations> = blocks
        .par_iter()
        .map(|(block, codes)| {
            if codes.len() != labels.len() {
                return Err(Error::DimensionMismatch {
                    expected: labels.len(),
                    actual: codes.len(),
                });
            }
            let width = codes.first().map_or(0, Vec::len);
            let mut acc = BlockAccumulator::new(width);
            for (code, label) in codes.iter().zip(labels) {
                acc.push(code, label)?;
            }
            Ok(BlockCorrelations {
                block: *block,
                units: acc.finish(),
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by_key(|b| b.block);
    if out.windows(2).any(|w| w[0].block == w[1].block) {
        return Err(Error::invalid("duplicate block in correlation input"));
    }
    Ok(CorrelationMatrix {
        context_length,
        blocks: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub block: u32,
    pub unit: usize,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub entries: Vec<RankedEntry>,
    /// Fewer defined entries than requested.
    pub truncated: bool,
}

/// Which ordering picks "highest" correlations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Signed,
    Absolute,
}

impl SelectionMode {
    fn key(self, rho: f64) -> f64 {
        match self {
            SelectionMode::Signed => rho,
            SelectionMode::Absolute => rho.abs(),
        }
    }
}

impl CorrelationMatrix {
    pub fn get(&self, block: u32, unit: usize, q: QuantityKind) -> Option<f64> {
        let b = self.blocks.iter().find(|b| b.block == block)?;
        b.units.get(unit)?[q.index()]
    }

    pub fn defined(&self, q: QuantityKind) -> impl Iterator<Item = RankedEntry> + '_ {
        self.blocks.iter().flat_map(move |b| {
            b.units.iter().enumerate().filter_map(move |(unit, cell)| {
                cell[q.index()].map(|rho| RankedEntry {
                    block: b.block,
                    unit,
                    rho,
                })
            })
        })
    }

    pub fn n_entries(&self) -> usize {
        self.blocks.iter().map(|b| b.units.len()).sum()
    }

    /// Undefined correlations per block for each quantity.
    pub fn undefined_counts(&self) -> Vec<(u32, [usize; N_QUANTITIES])> {
        self.blocks
            .iter()
            .map(|b| {
                let mut counts = [0; N_QUANTITIES];
                for cell in &b.units {
                    for (c, v) in counts.iter_mut().zip(cell) {
                        if v.is_none() {
                            *c += 1;
                        }
                    }
                }
                (b.block, counts)
            })
            .collect()
    }

    /// Units undefined for every quantity, i.e. constant over the dataset.
    pub fn dead_units(&self) -> Vec<(u32, usize)> {
        self.blocks
            .iter()
            .map(|b| (b.block, b.units.iter().filter(|c| c.iter().all(Option::is_none)).count()))
            .collect()
    }

    pub fn to_table(&self) -> Table {
        let mut table = Table::new(["context_length", "block", "unit", "quantity", "rho"]);
        for b in &self.blocks {
            for (unit, cell) in b.units.iter().enumerate() {
                for q in QuantityKind::ALL {
                    let rho = cell[q.index()].map_or_else(|| "NA".to_owned(), |r| format!("{r:e}"));
                    table.push([self.context_length.to_string(), b.block.to_string(), unit.to_string(), q.to_string(), rho]);
                }
            }
        }
        table
    }

    /// Inverse of [`CorrelationMatrix::to_table`]; the table must hold a
    /// single context length.
    pub fn from_table(table: &Table) -> Result<Self> {
        let col = |name: &str| table.column(name).ok_or_else(|| Error::invalid(format!("missing column {name}")));
        let (cl, bc, uc, qc, rc) = (col("context_length")?, col("block")?, col("unit")?, col("quantity")?, col("rho")?);
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::invalid(format!("bad number {s:?}")));
        let mut blocks: BTreeMap<u32, BTreeMap<usize, [Option<f64>; N_QUANTITIES]>> = BTreeMap::new();
        let mut context_length = None;
        for row in &table.rows {
            let length = num(&row[cl])? as u32;
            if *context_length.get_or_insert(length) != length {
                return Err(Error::invalid("correlation table mixes context lengths"));
            }
            let q: QuantityKind = row[qc].parse()?;
            let rho = if row[rc] == "NA" { None } else { Some(num(&row[rc])?) };
            let unit = num(&row[uc])? as usize;
            blocks.entry(num(&row[bc])? as u32).or_default().entry(unit).or_insert([None; N_QUANTITIES])[q.index()] = rho;
        }
        let blocks = blocks
            .into_iter()
            .map(|(block, units)| {
                if units.keys().enumerate().any(|(i, &u)| i != u) {
                    return Err(Error::invalid(format!("block {block} has non-contiguous units")));
                }
                Ok(BlockCorrelations {
                    block,
                    units: units.into_values().collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(CorrelationMatrix {
            context_length: context_length.unwrap_or(0),
            blocks,
        })
    }
}

fn rank(entries: &mut [RankedEntry], mode: SelectionMode) {
    entries.sort_by(|a, b| {
        mode.key(b.rho)
            .total_cmp(&mode.key(a.rho))
            .then(a.block.cmp(&b.block))
            .then(a.unit.cmp(&b.unit))
    });
}

/// Defined entries by descending `|rho|`, ties by (block, unit).
pub fn top_k(matrix: &CorrelationMatrix, q: QuantityKind, k: usize) -> Result<TopK> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut entries: Vec<RankedEntry> = matrix.defined(q).collect();
    rank(&mut entries, SelectionMode::Absolute);
    let truncated = entries.len() < k;
    entries.truncate(k);
    Ok(TopK { entries, truncated })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTop {
    pub block: u32,
    /// Up to k largest `|rho|`, descending.
    pub values: Vec<f64>,
}

/// The k largest `|rho|` in each block.
pub fn blockwise_top(matrix: &CorrelationMatrix, q: QuantityKind, k: usize) -> Vec<BlockTop> {
    matrix
        .blocks
        .iter()
        .map(|b| {
            let mut values: Vec<f64> = b.units.iter().filter_map(|c| c[q.index()]).map(f64::abs).collect();
            values.sort_by(|a, b| b.total_cmp(a));
            values.truncate(k);
            BlockTop {
                block: b.block,
                values,
            }
        })
        .collect()
}

/// Largest `|rho|` per block; `None` for a block without defined entries.
pub fn blockwise_max(matrix: &CorrelationMatrix, q: QuantityKind) -> Vec<(u32, Option<f64>)> {
    blockwise_top(matrix, q, 1)
        .into_iter()
        .map(|b| (b.block, b.values.first().copied()))
        .collect()
}

/// Mean signed rho over the defined units of each block.
pub fn block_means(matrix: &CorrelationMatrix, q: QuantityKind) -> Vec<(u32, Option<f64>)> {
    matrix
        .blocks
        .iter()
        .map(|b| {
            let values: Vec<f64> = b.units.iter().filter_map(|c| c[q.index()]).collect();
            let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
            (b.block, mean)
        })
        .collect()
}

/// `ceil(fraction * n)`, computed so that exact products are not pushed up
/// by rounding error.
pub fn selection_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let rounded = raw.round();
    let count = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (count as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub context_length: u32,
    pub select_quantity: QuantityKind,
    pub mode: SelectionMode,
    pub fraction: f64,
    pub defined_pairs: usize,
    pub selected: Vec<RankedEntry>,
    /// Strength per target quantity; `None` when undefined.
    pub strength: BTreeMap<QuantityKind, Option<f64>>,
}

/// Selects the top `fraction` of defined (block, unit) pairs by their
/// correlation with `select` and correlates, over that selection, the
/// `select` correlations with those of every quantity.
pub fn sync_strength(matrix: &CorrelationMatrix, select: QuantityKind, fraction: f64, mode: SelectionMode) -> Result<SyncReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("selection fraction {fraction} outside (0, 1]")));
    }
    let mut entries: Vec<RankedEntry> = matrix.defined(select).collect();
    let defined_pairs = entries.len();
    let count = selection_count(fraction, defined_pairs);
    if count < 2 {
        return Err(Error::invalid(format!(
            "selection of {count} pairs out of {defined_pairs} is too small for a correlation"
        )));
    }
    rank(&mut entries, mode);
    entries.truncate(count);
    let mut strength = BTreeMap::new();
    for target in QuantityKind::ALL {
        let (xs, ys): (Vec<f64>, Vec<f64>) = entries
            .iter()
            .filter_map(|e| matrix.get(e.block, e.unit, target).map(|t| (e.rho, t)))
            .unzip();
        let value = if xs.len() >= 2 { pearson(&xs, &ys)? } else { None };
        strength.insert(target, value);
    }
    Ok(SyncReport {
        context_length: matrix.context_length,
        select_quantity: select,
        mode,
        fraction,
        defined_pairs,
        selected: entries,
        strength,
    })
}

pub fn ranked_table(context_length: u32, q: QuantityKind, entries: &[RankedEntry]) -> Table {
    let mut table = Table::new(["context_length", "quantity", "rank", "block", "unit", "rho", "abs_rho"]);
    for (rank, e) in entries.iter().enumerate() {
        table.push([
            context_length.to_string(),
            q.to_string(),
            rank.to_string(),
            e.block.to_string(),
            e.unit.to_string(),
            format!("{:e}", e.rho),
            format!("{:e}", e.rho.abs()),
        ]);
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn streaming(x: &[f64], y: &[f64]) -> Option<f64> {
        let mut acc = PearsonAccumulator::default();
        x.iter().zip(y).for_each(|(&a, &b)| acc.push(a, b));
        acc.finish()
    }

    #[test]
    fn worked_value() {
        let rho = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 5.0]).unwrap().unwrap();
        // Centered sums by hand: sxy = 6.5, sxx = 5, syy = 8.75.
        let oracle = 6.5 / (5.0f64 * 8.75).sqrt();
        assert!((rho - oracle).abs() < 1e-15);
        assert!((rho - 0.9827).abs() < 1e-4);
    }

    #[test]
    fn self_and_negated_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x: Vec<f64> = (0..37).map(|_| rng.random_range(-100.0..100.0)).collect();
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            assert_eq!(pearson(&x, &x).unwrap(), Some(1.0));
            assert_eq!(pearson(&x, &neg).unwrap(), Some(-1.0));
            assert_eq!(streaming(&x, &x), Some(1.0));
            assert_eq!(streaming(&x, &neg), Some(-1.0));
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert_eq!(streaming(&[0.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]), None);
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    fn matrix(blocks: &[(u32, Vec<[Option<f64>; 4]>)]) -> CorrelationMatrix {
        CorrelationMatrix {
            context_length: 64,
            blocks: blocks
                .iter()
                .map(|(b, u)| BlockCorrelations {
                    block: *b,
                    units: u.clone(),
                })
                .collect(),
        }
    }

    fn e(v: f64) -> [Option<f64>; 4] {
        [Some(v), Some(v / 2.0), Some(-v), Some(0.0)]
    }

    #[test]
    fn top_k_order_and_ties() {
        let m = matrix(&[(4, vec![e(0.5), e(-0.9), [None; 4]]), (0, vec![e(0.5), e(0.9)])]);
        let mut m = m;
        m.blocks.sort_by_key(|b| b.block);
        let top = top_k(&m, QuantityKind::TotalEnergy, 10).unwrap();
        assert!(top.truncated);
        let order: Vec<(u32, usize)> = top.entries.iter().map(|e| (e.block, e.unit)).collect();
        assert_eq!(order, vec![(0, 1), (4, 1), (0, 0), (4, 0)]);
        assert!(!top_k(&m, QuantityKind::TotalEnergy, 4).unwrap().truncated);
        assert!(top_k(&m, QuantityKind::TotalEnergy, 0).is_err());
        assert_eq!(m.dead_units(), vec![(0, 0), (4, 1)]);
    }

    #[test]
    fn blockwise_reductions() {
        let m = matrix(&[(0, vec![e(0.1), e(-0.3)]), (2, vec![e(0.8), e(0.2)])]);
        assert_eq!(blockwise_max(&m, QuantityKind::TotalEnergy), vec![(0, Some(0.3)), (2, Some(0.8))]);
        let means = block_means(&m, QuantityKind::TotalEnergy);
        assert!((means[0].1.unwrap() + 0.1).abs() < 1e-15);
        let single = matrix(&[(0, vec![e(0.1), e(-0.3)])]);
        assert_eq!(blockwise_max(&single, QuantityKind::TotalEnergy)[0].1.unwrap(), top_k(&single, QuantityKind::TotalEnergy, 1).unwrap().entries[0].rho.abs());
    }

    #[test]
    fn selection_count_rule() {
        assert_eq!(selection_count(0.01, 200), 2);
        assert_eq!(selection_count(0.01, 201), 3);
        assert_eq!(selection_count(0.01, 10000), 100);
        assert_eq!(selection_count(1.0, 7), 7);
        assert_eq!(selection_count(0.07, 100), 7);
    }

    #[test]
    fn sync_self_is_one_and_full_fraction_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let units: Vec<[Option<f64>; 4]> = (0..50)
            .map(|_| [0; 4].map(|_| Some(rng.random_range(-1.0..1.0))))
            .collect();
        let m = matrix(&[(1, units.clone())]);
        let report = sync_strength(&m, QuantityKind::TotalEnergy, 1.0, SelectionMode::Signed).unwrap();
        assert_eq!(report.strength[&QuantityKind::TotalEnergy], Some(1.0));
        let xs: Vec<f64> = units.iter().map(|u| u[0].unwrap()).collect();
        let ys: Vec<f64> = units.iter().map(|u| u[1].unwrap()).collect();
        let direct = pearson(&xs, &ys).unwrap().unwrap();
        assert!((report.strength[&QuantityKind::KineticEnergy].unwrap() - direct).abs() < 1e-12);

        let small = sync_strength(&m, QuantityKind::TotalEnergy, 0.1, SelectionMode::Signed).unwrap();
        assert_eq!(small.selected.len(), 5);
        let min_selected = small.selected.iter().map(|e| e.rho).fold(f64::INFINITY, f64::min);
        assert!(xs.iter().filter(|&&x| x > min_selected).count() == 4);
        assert!(sync_strength(&m, QuantityKind::TotalEnergy, 0.01, SelectionMode::Signed).is_err());
    }

    #[test]
    fn table_round_trip() {
        let m = matrix(&[(0, vec![e(0.1), [None; 4]]), (3, vec![e(-0.7)])]);
        let back = CorrelationMatrix::from_table(&m.to_table()).unwrap();
        assert_eq!(back, m);
    }

    type Setup = (Vec<(u32, Vec<Vec<f32>>)>, Vec<Labels>);

    fn random_setup(seed: u64) -> Setup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let labels: Vec<Labels> = (0..n).map(|_| [0; 4].map(|_| rng.random_range(-5.0..5.0))).collect();
        let blocks = (0..3)
            .map(|b| {
                let codes = labels
                    .iter()
                    .map(|l| (0..6).map(|u| (l[u % 4] * (u as f64 - 2.5) + rng.random_range(-3.0..3.0)).max(0.0) as f32).collect())
                    .collect();
                (b as u32, codes)
            })
            .collect();
        (blocks, labels)
    }

    #[test]
    fn correlate_all_matches_direct_and_is_permutation_invariant() {
        let (blocks, labels) = random_setup(5);
        let m = correlate_all(64, &blocks, &labels).unwrap();
        for (b, codes) in &blocks {
            for u in 0..6 {
                let x: Vec<f64> = codes.iter().map(|c| c[u] as f64).collect();
                for q in QuantityKind::ALL {
                    let y: Vec<f64> = labels.iter().map(|l| l[q.index()]).collect();
                    let direct = pearson(&x, &y).unwrap();
                    let got = m.get(*b, u, q);
                    match (direct, got) {
                        (Some(a), Some(b)) => assert!((a - b).abs() < 1e-10),
                        (a, b) => assert_eq!(a, b),
                    }
                }
            }
        }
        let perm: Vec<usize> = (0..labels.len()).rev().collect();
        let shuffled: Vec<(u32, Vec<Vec<f32>>)> = blocks
            .iter()
            .rev()
            .map(|(b, c)| (*b, perm.iter().map(|&i| c[i].clone()).collect()))
            .collect();
        let shuffled_labels: Vec<Labels> = perm.iter().map(|&i| labels[i]).collect();
        let m2 = correlate_all(64, &shuffled, &shuffled_labels).unwrap();
        for (a, b) in m.blocks.iter().zip(&m2.blocks) {
            assert_eq!(a.block, b.block);
            for (x, y) in a.units.iter().zip(&b.units) {
                for (p, q) in x.iter().zip(y) {
                    match (p, q) {
                        (Some(p), Some(q)) => assert!((p - q).abs() < 1e-10),
                        (p, q) => assert_eq!(p, q),
                    }
                }
            }
        }
        assert!(correlate_all(64, &blocks, &labels[1..]).is_err());
    }

    proptest! {
        #[test]
        fn streaming_matches_two_pass(seed in 0u64..10_000, n in 2usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
            let y: Vec<f64> = x.iter().map(|v| 0.3 * v + rng.random_range(-500.0..500.0)).collect();
            let a = pearson(&x, &y).unwrap().unwrap();
            let b = streaming(&x, &y).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn affine_invariance(seed in 0u64..10_000, alpha in 0.01f64..100.0, gamma in -1e3f64..1e3) {
            let (blocks, labels) = random_setup(seed);
            let shifted: Vec<Labels> = labels.iter().map(|l| l.map(|v| alpha * v + gamma)).collect();
            let a = correlate_all(64, &blocks, &labels).unwrap();
            let b = correlate_all(64, &blocks, &shifted).unwrap();
            for q in QuantityKind::ALL {
                for (x, y) in a.defined(q).zip(b.defined(q)) {
                    prop_assert!((x.rho - y.rho).abs() < 1e-10);
                }
                let ta: Vec<_> = top_k(&a, q, 10).unwrap().entries.iter().map(|e| (e.block, e.unit)).collect();
                let tb: Vec<_> = top_k(&b, q, 10).unwrap().entries.iter().map(|e| (e.block, e.unit)).collect();
                prop_assert_eq!(ta, tb);
            }
            let sa = sync_strength(&a, QuantityKind::TotalEnergy, 0.5, SelectionMode::Signed).unwrap();
            let sb = sync_strength(&b, QuantityKind::TotalEnergy, 0.5, SelectionMode::Signed).unwrap();
            for q in QuantityKind::ALL {
                match (sa.strength[&q], sb.strength[&q]) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-10),
                    (x, y) => prop_assert_eq!(x, y),
                }
            }
        }

        #[test]
        fn sign_flip_of_unit(seed in 0u64..10_000, n in 3usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            let (a, b) = (pearson(&x, &y).unwrap().unwrap(), pearson(&neg, &y).unwrap().unwrap());
            prop_assert_eq!(a, -b);
        }
    }
}
