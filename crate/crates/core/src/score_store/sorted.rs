use rand::seq::SliceRandom;

use super::{ScoreKind, ScoreMatrix};
use crate::error::{Error, Result};
use crate::seeding::{self, stream};

/// Per-row descending scores with their class permutation and running sums.
///
/// `sorted[i][j] == scores[i][perm[i][j]]`; `cumsum[i][j]` is the total mass
/// of the `j + 1` most likely classes. Ranks exposed by this type are
/// 1-based: rank 1 is the most likely class.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedScores {
    classes: usize,
    sorted: Vec<f64>,
    perm: Vec<u32>,
    cumsum: Vec<f64>,
    labels: Vec<usize>,
    label_ranks: Vec<usize>,
}

/// Borrowed view of one sorted row.
#[derive(Debug, Clone, Copy)]
pub struct SortedRow<'a> {
    pub sorted: &'a [f64],
    pub perm: &'a [u32],
    pub cumsum: &'a [f64],
}

impl<'a> SortedRow<'a> {
    pub fn classes(&self) -> usize {
        self.sorted.len()
    }

    /// Mass of the classes ranked strictly before `rank`.
    pub fn mass_before(&self, rank: usize) -> f64 {
        if rank <= 1 {
            0.0
        } else {
            self.cumsum[rank - 2]
        }
    }

    /// Score at 1-based `rank`.
    pub fn score_at(&self, rank: usize) -> f64 {
        self.sorted[rank - 1]
    }

    /// 1-based rank of `class` in this row.
    pub fn rank_of(&self, class: usize) -> usize {
        self.perm
            .iter()
            .position(|&c| c as usize == class)
            .map(|p| p + 1)
            .expect("perm is a permutation")
    }

    /// The `size` most likely classes.
    pub fn top(&self, size: usize) -> Vec<usize> {
        self.perm[..size].iter().map(|&c| c as usize).collect()
    }
}

impl SortedScores {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// 1-based rank of the true label in each row.
    pub fn label_ranks(&self) -> &[usize] {
        &self.label_ranks
    }

    pub fn row(&self, i: usize) -> SortedRow<'_> {
        let span = i * self.classes..(i + 1) * self.classes;
        SortedRow {
            sorted: &self.sorted[span.clone()],
            perm: &self.perm[span.clone()],
            cumsum: &self.cumsum[span],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = SortedRow<'_>> + '_ {
        (0..self.n()).map(move |i| self.row(i))
    }

    /// Rows `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> SortedScores {
        let k = self.classes;
        let mut out = SortedScores {
            classes: k,
            sorted: Vec::with_capacity(indices.len() * k),
            perm: Vec::with_capacity(indices.len() * k),
            cumsum: Vec::with_capacity(indices.len() * k),
            labels: Vec::with_capacity(indices.len()),
            label_ranks: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            let span = i * k..(i + 1) * k;
            out.sorted.extend_from_slice(&self.sorted[span.clone()]);
            out.perm.extend_from_slice(&self.perm[span.clone()]);
            out.cumsum.extend_from_slice(&self.cumsum[span]);
            out.labels.push(self.labels[i]);
            out.label_ranks.push(self.label_ranks[i]);
        }
        out
    }
}

/// Sorts every row of a probability matrix in descending order.
///
/// Exactly tied scores are ordered by a shuffle seeded from `(seed, row)`,
/// so the result is reproducible and independent of how rows are batched.
pub fn sort_scores(m: &ScoreMatrix, seed: u64) -> Result<SortedScores> {
    if m.kind() != ScoreKind::Probabilities {
        return Err(Error::WrongKind {
            expected: "probability",
        });
    }
    let k = m.classes();
    let n = m.n();
    let mut out = SortedScores {
        classes: k,
        sorted: Vec::with_capacity(n * k),
        perm: Vec::with_capacity(n * k),
        cumsum: Vec::with_capacity(n * k),
        labels: m.labels().to_vec(),
        label_ranks: Vec::with_capacity(n),
    };
    let mut order: Vec<u32> = Vec::with_capacity(k);
    for (i, row) in m.rows().enumerate() {
        order.clear();
        order.extend(0..k as u32);
        order
            .sort_unstable_by(|&a, &b| row[b as usize].total_cmp(&row[a as usize]).then(a.cmp(&b)));
        shuffle_ties(row, &mut order, seed, i);

        let mut running = 0.0;
        for &c in &order {
            let v = row[c as usize];
            running += v;
            out.sorted.push(v);
            out.cumsum.push(running);
        }
        let label = m.labels()[i] as u32;
        let rank = order.iter().position(|&c| c == label).expect("permutation") + 1;
        out.label_ranks.push(rank);
        out.perm.extend_from_slice(&order);
    }
    Ok(out)
}

fn shuffle_ties(row: &[f64], order: &mut [u32], seed: u64, row_index: usize) {
    let mut rng = None;
    let mut start = 0;
    while start < order.len() {
        let value = row[order[start] as usize];
        let mut end = start + 1;
        while end < order.len() && row[order[end] as usize] == value {
            end += 1;
        }
        if end - start > 1 {
            let rng =
                rng.get_or_insert_with(|| seeding::rng(seed, &[stream::TIES, row_index as u64]));
            order[start..end].shuffle(rng);
        }
        start = end;
    }
}
