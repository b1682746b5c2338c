//! Balanced superclass hierarchies from class confusion, and the weighted
//! per-stack loss that trains against them.
//!
//! Classes, superclasses and levels are 0-based here. A [`Hierarchy`] over `N`
//! classes holds one balanced assignment per coarse level; the finest level is
//! the identity and is implicit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Rows are true classes, columns predicted classes.
///
/// Entries are usually counts; [`ConfusionMatrix::add_probabilities`]
/// accumulates fractional mass instead.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    n: usize,
    data: Vec<f64>,
}

impl ConfusionMatrix {
    pub fn zeros(n: usize) -> Self {
        ConfusionMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::Shape(format!("confusion row {i} has {} entries, expected {n}", r.len())));
            }
            if let Some(v) = r.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::Data(format!("confusion row {i} has invalid entry {v}")));
            }
            data.extend_from_slice(r);
        }
        Ok(ConfusionMatrix { n, data })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], n: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} true labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut m = Self::zeros(n);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.add(t, p)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.n || predicted >= self.n {
            return Err(Error::Index(format!(
                "label pair ({truth}, {predicted}) outside {} classes",
                self.n
            )));
        }
        self.data[truth * self.n + predicted] += 1.0;
        Ok(())
    }

    /// Add a probability vector to row `truth`.
    pub fn add_probabilities(&mut self, truth: usize, probs: &[f64]) -> Result<()> {
        if truth >= self.n || probs.len() != self.n {
            return Err(Error::Index(format!(
                "class {truth} with {} probabilities for {} classes",
                probs.len(),
                self.n
            )));
        }
        for (d, p) in self.data[truth * self.n..(truth + 1) * self.n].iter_mut().zip(probs) {
            *d += p;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, predicted: usize) -> f64 {
        self.data[truth * self.n + predicted]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Fraction of mass on the diagonal, 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0.0 {
            return 0.0;
        }
        (0..self.n).map(|i| self.get(i, i)).sum::<f64>() / total
    }
}

/// Symmetric pairwise weights `e_ij = c_ij + c_ji` with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeCosts {
    n: usize,
    data: Vec<f64>,
}

pub fn edge_costs(c: &ConfusionMatrix) -> EdgeCosts {
    let n = c.n;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                data[i * n + j] = c.get(i, j) + c.get(j, i);
            }
        }
    }
    EdgeCosts { n, data }
}

impl EdgeCosts {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = ConfusionMatrix::from_rows(rows)?;
        for i in 0..c.n {
            if c.get(i, i) != 0.0 {
                return Err(Error::Validation(format!("edge cost diagonal ({i}, {i}) must be zero")));
            }
            for j in 0..i {
                if c.get(i, j) != c.get(j, i) {
                    return Err(Error::Validation(format!("edge costs not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(EdgeCosts { n: c.n, data: c.data })
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sum over unordered pairs.
    pub fn total(&self) -> f64 {
        self.data.iter().sum::<f64>() / 2.0
    }

    pub fn scaled(&self, factor: f64) -> EdgeCosts {
        EdgeCosts {
            n: self.n,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Number of superclasses of a balanced assignment, or a validation error.
pub fn check_balanced(assignment: &[usize]) -> Result<usize> {
    let Some(&max) = assignment.iter().max() else {
        return Err(Error::Validation("empty assignment".into()));
    };
    let k = max + 1;
    let mut sizes = vec![0usize; k];
    for &s in assignment {
        sizes[s] += 1;
    }
    let want = assignment.len() / k;
    if !assignment.len().is_multiple_of(k) || sizes.iter().any(|&c| c != want) {
        return Err(Error::Validation(format!("unbalanced assignment, superclass sizes {sizes:?}")));
    }
    Ok(k)
}

fn split_cost(assignment: &[usize], e: &EdgeCosts) -> Result<(f64, f64)> {
    if assignment.len() != e.n {
        return Err(Error::Shape(format!(
            "assignment covers {} classes, edge costs {}",
            assignment.len(),
            e.n
        )));
    }
    check_balanced(assignment)?;
    let (mut cross, mut within) = (0.0, 0.0);
    for i in 0..e.n {
        for j in i + 1..e.n {
            if assignment[i] == assignment[j] {
                within += e.get(i, j);
            } else {
                cross += e.get(i, j);
            }
        }
    }
    Ok((cross, within))
}

/// Total weight of pairs placed in different superclasses.
pub fn partition_cost(assignment: &[usize], e: &EdgeCosts) -> Result<f64> {
    split_cost(assignment, e).map(|c| c.0)
}

/// Total weight of pairs sharing a superclass.
pub fn within_cost(assignment: &[usize], e: &EdgeCosts) -> Result<f64> {
    split_cost(assignment, e).map(|c| c.1)
}

/// Relabel superclasses in order of their smallest member.
pub fn canonical(assignment: &[usize]) -> Vec<usize> {
    let mut map = vec![usize::MAX; assignment.len()];
    let mut next = 0;
    assignment
        .iter()
        .map(|&s| {
            if map[s] == usize::MAX {
                map[s] = next;
                next += 1;
            }
            map[s]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub assignment: Vec<usize>,
    pub cost: f64,
    /// Restart that produced the result.
    pub restart: usize,
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || n == 0 || !n.is_multiple_of(k) {
        return Err(Error::Config(format!("{k} superclasses do not evenly divide {n} classes")));
    }
    Ok(())
}

/// Swap descent from one balanced start. `w[i * k + s]` is the weight from
/// class `i` into superclass `s`.
fn descend(e: &EdgeCosts, k: usize, assignment: &mut [usize], threshold: f64) {
    let n = e.n;
    let mut w = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..n {
            w[i * k + assignment[j]] += e.get(i, j);
        }
    }
    loop {
        let mut best = (threshold, usize::MAX, usize::MAX);
        for i in 0..n {
            let a = assignment[i];
            for j in i + 1..n {
                let b = assignment[j];
                if a == b {
                    continue;
                }
                let gain = w[i * k + b] + w[j * k + a] - w[i * k + a] - w[j * k + b] - 2.0 * e.get(i, j);
                if gain > best.0 {
                    best = (gain, i, j);
                }
            }
        }
        let (_, i, j) = best;
        if i == usize::MAX {
            return;
        }
        let (a, b) = (assignment[i], assignment[j]);
        for m in 0..n {
            let d = e.get(m, i) - e.get(m, j);
            w[m * k + a] -= d;
            w[m * k + b] += d;
        }
        assignment.swap(i, j);
    }
}

/// Best balanced `k`-way assignment found by steepest pairwise-swap descent
/// from `restarts` random balanced starts.
///
/// Restart `r` draws its start from stream `r` of a ChaCha8 generator seeded
/// with `seed`. Among equal swap gains the lowest `(i, j)` wins; among equal
/// final costs the lowest restart wins.
pub fn greedy_partition(e: &EdgeCosts, k: usize, restarts: usize, seed: u64) -> Result<Partition> {
    let n = e.n;
    check_k(n, k)?;
    if restarts == 0 {
        return Err(Error::Config("at least one restart is needed".into()));
    }
    let threshold = 1e-12 * (1.0 + e.total().abs());
    let mut best: Option<Partition> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut assignment: Vec<usize> = (0..n).map(|i| i / (n / k)).collect();
        assignment.shuffle(&mut rng);
        descend(e, k, &mut assignment, threshold);
        let cost = partition_cost(&assignment, e)?;
        if best.as_ref().is_none_or(|b| cost < b.cost - threshold) {
            best = Some(Partition {
                assignment: canonical(&assignment),
                cost,
                restart: r,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub num_superclasses: usize,
    pub assignment: Vec<usize>,
}

impl Level {
    /// Member classes of each superclass, in ascending order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.num_superclasses];
        for (c, &s) in self.assignment.iter().enumerate() {
            g[s].push(c);
        }
        g
    }
}

/// Coarse levels plus an implicit identity level over `num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy {
    num_classes: usize,
    levels: Vec<Level>,
}

impl Hierarchy {
    pub fn new(num_classes: usize, levels: Vec<Level>) -> Result<Self> {
        let mut prev = 1;
        for (l, level) in levels.iter().enumerate() {
            if level.assignment.len() != num_classes {
                return Err(Error::Validation(format!(
                    "level {l} assigns {} classes, expected {num_classes}",
                    level.assignment.len()
                )));
            }
            check_k(num_classes, level.num_superclasses)?;
            if level.num_superclasses < prev {
                return Err(Error::Config(format!(
                    "superclass counts must not decrease, level {l} has {} after {prev}",
                    level.num_superclasses
                )));
            }
            prev = level.num_superclasses;
            let k = check_balanced(&level.assignment).map_err(|e| Error::Validation(format!("level {l}: {e}")))?;
            if k != level.num_superclasses {
                return Err(Error::Validation(format!(
                    "level {l} declares {} superclasses but uses {k}",
                    level.num_superclasses
                )));
            }
        }
        Ok(Hierarchy { num_classes, levels })
    }

    /// Coarse levels all equal to the identity.
    pub fn flat(num_classes: usize, coarse_levels: usize) -> Self {
        let level = Level {
            num_superclasses: num_classes,
            assignment: (0..num_classes).collect(),
        };
        Hierarchy {
            num_classes,
            levels: vec![level; coarse_levels],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Coarse levels plus the identity level.
    pub fn num_levels(&self) -> usize {
        self.levels.len() + 1
    }

    pub fn coarse_levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn superclass_count(&self, level: usize) -> Result<usize> {
        match level.cmp(&self.levels.len()) {
            std::cmp::Ordering::Less => Ok(self.levels[level].num_superclasses),
            std::cmp::Ordering::Equal => Ok(self.num_classes),
            std::cmp::Ordering::Greater => Err(Error::Index(format!(
                "level {level} outside 0..{}",
                self.num_levels()
            ))),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.num_levels()).map(|l| self.superclass_count(l).expect("in range")).collect()
    }

    pub fn map_labels(&self, level: usize, labels: &[usize]) -> Result<Vec<usize>> {
        self.superclass_count(level)?;
        labels
            .iter()
            .map(|&y| {
                if y >= self.num_classes {
                    Err(Error::Index(format!("label {y} outside {} classes", self.num_classes)))
                } else if level == self.levels.len() {
                    Ok(y)
                } else {
                    Ok(self.levels[level].assignment[y])
                }
            })
            .collect()
    }
}

/// Run [`greedy_partition`] independently for every superclass count.
///
/// Level `l` uses seed `seed + l`.
pub fn build_hierarchy(e: &EdgeCosts, ks: &[usize], restarts: usize, seed: u64) -> Result<Hierarchy> {
    let n = e.n;
    let mut prev = 1;
    for &k in ks {
        check_k(n, k)?;
        if k < prev {
            return Err(Error::Config(format!("superclass counts {ks:?} must not decrease")));
        }
        prev = k;
    }
    let mut levels = Vec::with_capacity(ks.len());
    for (l, &k) in ks.iter().enumerate() {
        let assignment = if k == n {
            (0..n).collect()
        } else {
            greedy_partition(e, k, restarts, seed.wrapping_add(l as u64))?.assignment
        };
        levels.push(Level {
            num_superclasses: k,
            assignment,
        });
    }
    Hierarchy::new(n, levels)
}

#[derive(Clone, Debug)]
pub struct HierarchicalLoss {
    pub total: Var,
    /// Unweighted cross-entropy of each head against its level's labels.
    pub per_head: Vec<Var>,
}

/// `sum_l w_l * CE(logits_l, labels mapped to level l)`.
///
/// Terms are accumulated in head order starting from `w_0 * CE_0`, so weights
/// `(0, .., 0, 1)` reproduce the final-head loss exactly.
pub fn hierarchical_loss(
    g: &mut Graph,
    logits: &[Var],
    labels: &[usize],
    hierarchy: &Hierarchy,
    weights: &[f64],
) -> Result<HierarchicalLoss> {
    let levels = hierarchy.num_levels();
    if logits.len() != levels || weights.len() != levels {
        return Err(Error::Shape(format!(
            "{} heads and {} weights for a {levels}-level hierarchy",
            logits.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {w}")));
    }
    let mut per_head = Vec::with_capacity(levels);
    let mut total: Option<Var> = None;
    for (l, (&z, &w)) in logits.iter().zip(weights).enumerate() {
        let width = g.value(z).shape()[1];
        let k = hierarchy.superclass_count(l)?;
        if width != k {
            return Err(Error::Shape(format!("head {l} has {width} outputs but level {l} has {k} superclasses")));
        }
        let y = hierarchy.map_labels(l, labels)?;
        let ce = g.softmax_cross_entropy(z, &y)?;
        per_head.push(ce);
        let term = g.scale(ce, w);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(HierarchicalLoss {
        total: total.expect("at least one level"),
        per_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::Rng;

    fn four_class_example() -> EdgeCosts {
        let mut rows = vec![vec![1.0; 4]; 4];
        for (i, r) in rows.iter_mut().enumerate() {
            r[i] = 0.0;
        }
        rows[0][1] = 10.0;
        rows[1][0] = 10.0;
        rows[2][3] = 8.0;
        rows[3][2] = 8.0;
        EdgeCosts::from_rows(&rows).unwrap()
    }

    /// Minimum cost by enumerating every balanced assignment with canonical labels.
    fn exhaustive_min(e: &EdgeCosts, k: usize) -> f64 {
        fn rec(i: usize, a: &mut Vec<usize>, sizes: &mut Vec<usize>, cap: usize, used: usize, e: &EdgeCosts, best: &mut f64) {
            let n = e.num_classes();
            if i == n {
                let mut c = 0.0;
                for x in 0..n {
                    for y in x + 1..n {
                        if a[x] != a[y] {
                            c += e.get(x, y);
                        }
                    }
                }
                *best = best.min(c);
                return;
            }
            for s in 0..(used + 1).min(sizes.len()) {
                if sizes[s] < cap {
                    sizes[s] += 1;
                    a.push(s);
                    rec(i + 1, a, sizes, cap, used.max(s + 1), e, best);
                    a.pop();
                    sizes[s] -= 1;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(0, &mut Vec::new(), &mut vec![0; k], e.num_classes() / k, 0, e, &mut best);
        best
    }

    fn random_edges(n: usize, rng: &mut ChaCha8Rng) -> EdgeCosts {
        let mut c = ConfusionMatrix::zeros(n);
        for i in 0..n {
            let mut row = vec![0.0; n];
            for v in row.iter_mut() {
                *v = rng.random_range(0..20) as f64;
            }
            c.add_probabilities(i, &row).unwrap();
        }
        edge_costs(&c)
    }

    #[test]
    fn confusion_examples() {
        let c = ConfusionMatrix::from_predictions(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(c.row(0), &[1.0, 1.0]);
        assert_eq!(c.row(1), &[0.0, 1.0]);
        assert_eq!(ConfusionMatrix::from_predictions(&[], &[], 3).unwrap(), ConfusionMatrix::zeros(3));
        let d = ConfusionMatrix::from_predictions(&[0, 1, 1, 2], &[0, 1, 1, 2], 3).unwrap();
        assert_eq!(d.row_sums(), vec![1.0, 2.0, 1.0]);
        assert_eq!(d.accuracy(), 1.0);
        assert!(matches!(ConfusionMatrix::from_predictions(&[3], &[0], 3), Err(Error::Index(_))));
    }

    #[test]
    fn edge_cost_examples() {
        let c = ConfusionMatrix::from_rows(&[vec![5.0, 2.0], vec![1.0, 7.0]]).unwrap();
        let e = edge_costs(&c);
        assert_eq!((e.get(0, 1), e.get(1, 0), e.get(0, 0)), (3.0, 3.0, 0.0));
        let diag = ConfusionMatrix::from_predictions(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(edge_costs(&diag).total(), 0.0);
    }

    #[test]
    fn partition_cost_examples() {
        let e = four_class_example();
        assert_eq!(partition_cost(&[0, 0, 1, 1], &e).unwrap(), 4.0);
        assert_eq!(partition_cost(&[0, 1, 0, 1], &e).unwrap(), 20.0);
        assert_eq!(partition_cost(&[0, 1, 1, 0], &e).unwrap(), 20.0);
        assert_eq!(partition_cost(&[0, 0, 0, 0], &e).unwrap(), 0.0);
        assert!(matches!(partition_cost(&[0, 0, 0, 1], &e), Err(Error::Validation(_))));
        let p = greedy_partition(&e, 2, 10, 0).unwrap();
        assert_eq!((p.assignment, p.cost), (vec![0, 0, 1, 1], 4.0));
    }

    #[test]
    fn zero_costs_and_bad_k() {
        let e = EdgeCosts::from_rows(&vec![vec![0.0; 6]; 6]).unwrap();
        let p = greedy_partition(&e, 3, 5, 1).unwrap();
        assert_eq!(p.cost, 0.0);
        check_balanced(&p.assignment).unwrap();
        assert!(matches!(greedy_partition(&e, 4, 5, 1), Err(Error::Config(_))));
    }

    #[test]
    fn greedy_matches_exhaustive_on_small_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (n, k) in [(4, 2), (6, 2), (6, 3), (8, 4)] {
            for _ in 0..5 {
                let e = random_edges(n, &mut rng);
                let p = greedy_partition(&e, k, 200, 3).unwrap();
                assert!((p.cost - exhaustive_min(&e, k)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn hierarchy_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = random_edges(60, &mut rng);
        let h = build_hierarchy(&e, &[2, 6, 20], 3, 0).unwrap();
        let sizes: Vec<usize> = h.coarse_levels().iter().map(|l| l.groups()[0].len()).collect();
        assert_eq!(sizes, vec![30, 10, 3]);
        let id = build_hierarchy(&e, &[60, 60, 60], 3, 0).unwrap();
        for l in 0..3 {
            assert_eq!(id.map_labels(l, &[7, 59]).unwrap(), vec![7, 59]);
        }
        assert!(matches!(build_hierarchy(&e, &[6, 2], 3, 0), Err(Error::Config(_))));
        assert!(matches!(build_hierarchy(&e, &[7], 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn map_labels_lookup() {
        let h = Hierarchy::new(
            4,
            vec![Level {
                num_superclasses: 2,
                assignment: vec![0, 0, 1, 1],
            }],
        )
        .unwrap();
        assert_eq!(h.map_labels(0, &[2, 0]).unwrap(), vec![1, 0]);
        assert_eq!(h.map_labels(1, &[2, 0]).unwrap(), vec![2, 0]);
        assert!(h.map_labels(0, &[4]).is_err());
        assert!(h.map_labels(2, &[0]).is_err());
    }

    fn loss_setup(g: &mut Graph, seed: u64) -> (Vec<Var>, Hierarchy, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Hierarchy::new(
            8,
            vec![
                Level { num_superclasses: 2, assignment: vec![0, 0, 0, 0, 1, 1, 1, 1] },
                Level { num_superclasses: 4, assignment: vec![0, 0, 1, 1, 2, 2, 3, 3] },
                Level { num_superclasses: 4, assignment: vec![0, 1, 0, 1, 2, 3, 2, 3] },
            ],
        )
        .unwrap();
        let logits = h
            .widths()
            .iter()
            .map(|&k| g.param(&Tensor::from_fn(&[3, k], |_| rng.random_range(-2.0..2.0))))
            .collect();
        (logits, h, vec![1, 5, 6])
    }

    #[test]
    fn weighted_sum_of_heads() {
        let mut g = Graph::new();
        let (logits, h, y) = loss_setup(&mut g, 3);
        let w = [0.125, 0.25, 0.5, 1.0];
        let out = hierarchical_loss(&mut g, &logits, &y, &h, &w).unwrap();
        let manual: f64 = out.per_head.iter().zip(w).map(|(&v, w)| w * g.value(v).item()).sum();
        assert!((g.value(out.total).item() - manual).abs() < 1e-12);
        let only_last = hierarchical_loss(&mut g, &logits, &y, &h, &[0.0, 0.0, 0.0, 1.0]).unwrap();
        let plain = g.softmax_cross_entropy(logits[3], &y).unwrap();
        assert_eq!(g.value(only_last.total).item().to_bits(), g.value(plain).item().to_bits());
        let bad = hierarchical_loss(&mut g, &logits[..3], &y, &h, &w[..3]);
        assert!(matches!(bad, Err(Error::Shape(_))));
    }

    #[test]
    fn head_gradient_is_scaled_own_gradient() {
        let w = [0.125, 0.25, 0.5, 1.0];
        let mut g = Graph::new();
        let (logits, h, y) = loss_setup(&mut g, 4);
        let out = hierarchical_loss(&mut g, &logits, &y, &h, &w).unwrap();
        g.backward(out.total).unwrap();
        for l in 0..4 {
            let mut own = Graph::new();
            let z = own.param(g.value(logits[l]));
            let yl = h.map_labels(l, &y).unwrap();
            let ce = own.softmax_cross_entropy(z, &yl).unwrap();
            own.backward(ce).unwrap();
            for (a, b) in g.grad(logits[l]).unwrap().iter().zip(own.grad(z).unwrap()) {
                assert!((a - w[l] * b).abs() < 1e-14);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cross_plus_within_is_total(seed in any::<u64>(), shape in 0usize..4) {
            let (n, k) = [(4, 2), (6, 3), (8, 2), (9, 3)][shape];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_edges(n, &mut rng);
            let mut a: Vec<usize> = (0..n).map(|i| i / (n / k)).collect();
            a.shuffle(&mut rng);
            let total = partition_cost(&a, &e).unwrap() + within_cost(&a, &e).unwrap();
            prop_assert!((total - e.total()).abs() < 1e-9);
        }

        #[test]
        fn greedy_result_is_balanced_and_scale_equivariant(seed in any::<u64>(), lambda in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_edges(8, &mut rng);
            let p = greedy_partition(&e, 4, 30, seed).unwrap();
            prop_assert_eq!(check_balanced(&p.assignment).unwrap(), 4);
            prop_assert!(p.cost >= exhaustive_min(&e, 4) - 1e-9);
            let scaled = e.scaled(lambda);
            let c = partition_cost(&p.assignment, &scaled).unwrap();
            prop_assert!((c - lambda * p.cost).abs() <= 1e-9 * (1.0 + c.abs()));
        }

        #[test]
        fn swaps_never_increase_cost(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_edges(8, &mut rng);
            let mut a: Vec<usize> = (0..8).map(|i| i / 2).collect();
            a.shuffle(&mut rng);
            let before = partition_cost(&a, &e).unwrap();
            descend(&e, 4, &mut a, 1e-12);
            prop_assert!(partition_cost(&a, &e).unwrap() <= before + 1e-9);
        }
    }
}
