//! Training objectives: relation BCE, bipartite matching of queries to gold
//! boundaries, the matched entity loss and their weighted sum.

use crate::decoder::QuadrupleDistributions;
use crate::error::{Error, Result};
use crate::tape::{Mat, Tape, Var, PROB_EPS};

/// Null targets point every boundary at the leading marker.
pub const NULL_POSITION: usize = 0;

/// Gold quadruples of one (instance, relation) pair padded to `N` slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldBoundarySet {
    pub slots: Vec<Option<[usize; 4]>>,
}

impl GoldBoundarySet {
    /// Keeps the first `n` quadruples (with a warning beyond that) and pads
    /// the rest with null targets.
    pub fn new(quads: &[[usize; 4]], n: usize) -> Self {
        if quads.len() > n {
            log::warn!(
                "{} gold triplets for one relation exceed {n} queries; keeping the first {n}",
                quads.len()
            );
        }
        let mut slots: Vec<Option<[usize; 4]>> = quads.iter().take(n).copied().map(Some).collect();
        slots.resize(n, None);
        Self { slots }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn real_count(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    /// Target positions of slot `k`; null slots target the sentinel.
    pub fn target(&self, k: usize) -> [usize; 4] {
        self.slots[k].unwrap_or([NULL_POSITION; 4])
    }
}

/// `permutation[j]` is the gold slot matched to query `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub permutation: Vec<usize>,
    pub cost: f64,
}

/// Mean binary cross entropy with clamped probabilities.
pub fn relation_loss(probs: &[f64], gold: &[bool]) -> f64 {
    assert_eq!(probs.len(), gold.len(), "relation loss lengths");
    let total: f64 = probs
        .iter()
        .zip(gold)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

/// Relation loss on the tape for a `G × 1` probability column.
pub fn relation_loss_var(tape: &mut Tape, probs: Var, gold: &[bool]) -> Var {
    let targets = gold.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
    tape.bce(probs, targets)
}

/// Cost of matching query `j` to `gold`; null gold costs nothing.
pub fn match_cost(dists: &QuadrupleDistributions, j: usize, gold: Option<[usize; 4]>) -> Result<f64> {
    let Some(gold) = gold else {
        return Ok(0.0);
    };
    let l = dists.positions();
    let mut total = 0.0;
    for (head, &pos) in dists.heads().iter().zip(&gold) {
        if pos >= l {
            return Err(Error::Internal(format!("gold position {pos} outside row length {l}")));
        }
        total += head[[j, pos]];
    }
    Ok(-total)
}

pub fn cost_matrix(dists: &QuadrupleDistributions, gold: &GoldBoundarySet) -> Result<Mat> {
    let n = dists.queries();
    if gold.len() != n {
        return Err(Error::Internal(format!("{} gold slots for {n} queries", gold.len())));
    }
    let mut cost = Mat::zeros((n, n));
    for j in 0..n {
        for k in 0..n {
            cost[[j, k]] = match_cost(dists, j, gold.slots[k])?;
        }
    }
    Ok(cost)
}

/// Minimum-cost assignment via shortest augmenting paths with potentials.
/// Returns the optimal total and `row → column`.
fn solve(cost: &Mat, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let at = |i: usize, j: usize| cost[[rows[i - 1], cols[j - 1]]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| at(i + 1, assign[i] + 1)).sum();
    (total, assign)
}

/// Two totals are treated as equal when they differ by rounding only.
pub fn same_cost(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

/// Optimal bijection from queries (rows) to gold slots (columns). Among
/// optimal permutations the lexicographically smallest is returned.
pub fn hungarian(cost: &Mat) -> Result<Assignment> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::Internal(format!("cost matrix {n}×{m} is not square")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite matching cost".into()));
    }
    let (best, _) = solve(cost, &(0..n).collect::<Vec<_>>(), &(0..n).collect::<Vec<_>>());
    let mut permutation = Vec::with_capacity(n);
    let mut free: Vec<usize> = (0..n).collect();
    let mut prefix = 0.0;
    for row in 0..n {
        let rest: Vec<usize> = (row + 1..n).collect();
        let mut chosen = None;
        for (slot, &col) in free.iter().enumerate() {
            let others: Vec<usize> = free.iter().copied().filter(|&c| c != col).collect();
            let (tail, _) = solve(cost, &rest, &others);
            if same_cost(prefix + cost[[row, col]] + tail, best) {
                chosen = Some(slot);
                break;
            }
        }
        let slot = chosen.ok_or_else(|| Error::Internal("matching lost its optimum".into()))?;
        let col = free.remove(slot);
        prefix += cost[[row, col]];
        permutation.push(col);
    }
    let total = permutation.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok(Assignment {
        permutation,
        cost: total,
    })
}

/// Summed entity negative log-likelihood of one relation row on the tape,
/// and the number of real gold quadruples it covers. Null-matched queries
/// are pulled toward the sentinel.
pub fn entity_nll_var(
    tape: &mut Tape,
    logp: [Var; 4],
    gold: &GoldBoundarySet,
    assignment: &Assignment,
) -> (Var, usize) {
    let mut parts = Vec::with_capacity(4);
    for (h, &lp) in logp.iter().enumerate() {
        let entries = assignment
            .permutation
            .iter()
            .enumerate()
            .map(|(j, &k)| (j, gold.target(k)[h], -1.0))
            .collect();
        parts.push(tape.pick_sum(lp, entries));
    }
    (tape.sum_scalars(&parts), gold.real_count())
}

/// Plain-value counterpart of [`entity_nll_var`].
pub fn entity_nll(dists: &QuadrupleDistributions, gold: &GoldBoundarySet, assignment: &Assignment) -> f64 {
    let heads = dists.heads();
    assignment
        .permutation
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let t = gold.target(k);
            (0..4).map(|h| -heads[h][[j, t[h]]].ln()).sum::<f64>()
        })
        .sum()
}

/// Entity loss over all kept gold relations of a batch: summed negative
/// log-likelihood divided by the number of real gold quadruples.
pub fn entity_loss(
    boundary_set: &[QuadrupleDistributions],
    gold_sets: &[GoldBoundarySet],
    assignments: &[Assignment],
) -> f64 {
    assert_eq!(boundary_set.len(), gold_sets.len());
    assert_eq!(boundary_set.len(), assignments.len());
    let mut total = 0.0;
    let mut count = 0;
    for ((d, g), a) in boundary_set.iter().zip(gold_sets).zip(assignments) {
        total += entity_nll(d, g, a);
        count += g.real_count();
    }
    total / count.max(1) as f64
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Config(format!("loss weight α = {alpha} is outside [0, 1]")))
    }
}

/// `α · L_rel + (1 − α) · L_ent`.
pub fn total_loss(l_rel: f64, l_ent: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if alpha == 1.0 {
        return Ok(l_rel);
    }
    Ok(alpha * l_rel + (1.0 - alpha) * l_ent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn uniform(n: usize, l: usize) -> QuadrupleDistributions {
        QuadrupleDistributions::from_heads(std::array::from_fn(|_| Mat::from_elem((n, l), 1.0 / l as f64)))
    }

    fn one_hot(n: usize, l: usize, quads: &[[usize; 4]]) -> QuadrupleDistributions {
        QuadrupleDistributions::from_heads(std::array::from_fn(|h| {
            let mut m = Mat::zeros((n, l));
            for (j, q) in quads.iter().enumerate() {
                m[[j, q[h]]] = 1.0;
            }
            m
        }))
    }

    fn brute_force(cost: &Mat) -> (f64, Vec<usize>) {
        fn rec(cost: &Mat, row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut Option<(f64, Vec<usize>)>) {
            let n = cost.nrows();
            if row == n {
                let total: f64 = cur.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
                match best {
                    Some((b, _)) if !(total < *b && !same_cost(total, *b)) => {}
                    _ => *best = Some((total, cur.clone())),
                }
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    rec(cost, row + 1, used, cur, best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = None;
        rec(cost, 0, &mut vec![false; cost.nrows()], &mut Vec::new(), &mut best);
        best.unwrap()
    }

    #[test]
    fn relation_loss_examples() {
        assert!((relation_loss(&[0.5, 0.5], &[true, false]) - 2f64.ln()).abs() < 1e-12);
        assert!((relation_loss(&[0.9, 0.1], &[false, true]) - (-(0.1f64.ln()))).abs() < 1e-12);
        assert!(relation_loss(&[1.0, 0.0], &[true, false]) < 1e-6);
    }

    #[test]
    fn relation_loss_matches_tape() {
        let mut tape = Tape::new();
        let p = tape.constant(array![[0.2], [0.7], [0.999_999_99]]);
        let gold = [false, true, true];
        let v = relation_loss_var(&mut tape, p, &gold);
        assert!((tape.scalar(v) - relation_loss(&[0.2, 0.7, 0.999_999_99], &gold)).abs() < 1e-15);
    }

    #[test]
    fn match_cost_examples() {
        let q = [2, 3, 5, 7];
        assert_eq!(match_cost(&one_hot(1, 10, &[q]), 0, Some(q)).unwrap(), -4.0);
        assert!((match_cost(&uniform(1, 10), 0, Some(q)).unwrap() + 0.4).abs() < 1e-12);
        assert_eq!(match_cost(&uniform(1, 10), 0, None).unwrap(), 0.0);
        assert!(matches!(
            match_cost(&uniform(1, 10), 0, Some([0, 0, 0, 10])),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn hungarian_examples() {
        let a = hungarian(&array![[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert_eq!((a.permutation, a.cost), (vec![0, 1], 2.0));
        let b = hungarian(&array![[0.0, 9.0, 9.0], [9.0, 0.0, 9.0], [9.0, 9.0, 0.0]]).unwrap();
        assert_eq!((b.permutation, b.cost), (vec![0, 1, 2], 0.0));
        assert_eq!(hungarian(&Mat::zeros((3, 3))).unwrap().permutation, vec![0, 1, 2]);
        assert_eq!(hungarian(&array![[1.0, 0.0], [0.0, 1.0]]).unwrap().permutation, vec![1, 0]);
        assert!(matches!(hungarian(&array![[f64::NAN]]), Err(Error::Numeric(_))));
    }

    #[test]
    fn ties_resolve_to_smallest_permutation() {
        let cost = array![[1.0, 1.0, 2.0], [1.0, 1.0, 2.0], [2.0, 2.0, 1.0]];
        assert_eq!(hungarian(&cost).unwrap().permutation, vec![0, 1, 2]);
        let cost = array![[3.0, 1.0, 1.0], [1.0, 3.0, 1.0], [1.0, 1.0, 3.0]];
        assert_eq!(hungarian(&cost).unwrap().permutation, vec![1, 2, 0]);
    }

    #[test]
    fn entity_loss_examples() {
        let q = [1, 2, 3, 4];
        let gold = GoldBoundarySet::new(&[q], 1);
        let a = hungarian(&cost_matrix(&uniform(1, 10), &gold).unwrap()).unwrap();
        let l = entity_loss(&[uniform(1, 10)], std::slice::from_ref(&gold), std::slice::from_ref(&a));
        assert!((l - 4.0 * 10f64.ln()).abs() < 1e-12);
        assert!(entity_loss(&[one_hot(1, 10, &[q])], &[gold], &[a]) < 1e-12);
    }

    #[test]
    fn gold_sets_pad_and_truncate() {
        let g = GoldBoundarySet::new(&[[1, 1, 2, 2]], 3);
        assert_eq!(g.slots, vec![Some([1, 1, 2, 2]), None, None]);
        assert_eq!(g.target(2), [0; 4]);
        let g = GoldBoundarySet::new(&[[1, 1, 2, 2], [3, 3, 4, 4], [5, 5, 6, 6]], 2);
        assert_eq!(g.real_count(), 2);
        assert_eq!(g.slots[1], Some([3, 3, 4, 4]));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert_eq!(total_loss(2.0, 4.0, 1.0).unwrap(), 2.0);
        assert_eq!(total_loss(2.0, f64::NAN, 1.0).unwrap(), 2.0);
        assert_eq!(total_loss(2.0, 4.0, 0.0).unwrap(), 4.0);
        assert!(matches!(total_loss(1.0, 1.0, 1.5), Err(Error::Config(_))));
        assert!(matches!(total_loss(1.0, 1.0, -0.1), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn hungarian_matches_brute_force(n in 1usize..6, values in prop::collection::vec(-5.0f64..5.0, 36)) {
            let cost = Mat::from_shape_fn((n, n), |(i, j)| values[i * 6 + j]);
            let a = hungarian(&cost).unwrap();
            let (best, perm) = brute_force(&cost);
            prop_assert!(same_cost(a.cost, best));
            prop_assert_eq!(a.permutation, perm);
        }

        #[test]
        fn integer_ties_match_brute_force(n in 1usize..6, values in prop::collection::vec(0u8..3, 36)) {
            let cost = Mat::from_shape_fn((n, n), |(i, j)| values[i * 6 + j] as f64);
            let a = hungarian(&cost).unwrap();
            let (best, perm) = brute_force(&cost);
            prop_assert_eq!(a.cost, best);
            prop_assert_eq!(a.permutation, perm);
        }

        #[test]
        fn relation_loss_non_negative(probs in prop::collection::vec(0.0f64..=1.0, 1..8), bits in prop::collection::vec(any::<bool>(), 8)) {
            let gold = &bits[..probs.len()];
            prop_assert!(relation_loss(&probs, gold) >= 0.0);
        }
    }
}
