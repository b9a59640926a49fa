//! Full-ranking top-N evaluation and per-degree user groups.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::dataset::InteractionTable;
use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix};

/// Cutoff used by the group analysis and by early stopping.
pub const GROUP_CUTOFF: usize = 20;

/// Ranking order: higher score first, ties to the lower item index.
pub fn rank_order(a: (f64, usize), b: (f64, usize)) -> Ordering {
    if a.0 == b.0 {
        a.1.cmp(&b.1)
    } else if a.0 > b.0 {
        Ordering::Less
    } else {
        Ordering::Greater
    }
}

/// Top `n` items among those not in `exclude` (which must be sorted).
pub fn top_n(scores: &[f64], exclude: &[usize], n: usize) -> Vec<usize> {
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(scores.len());
    let mut skip = exclude.iter().peekable();
    for (i, &s) in scores.iter().enumerate() {
        if skip.peek() == Some(&&i) {
            skip.next();
            continue;
        }
        candidates.push((s, i));
    }
    let n = n.min(candidates.len());
    if n == 0 {
        return Vec::new();
    }
    if n < candidates.len() {
        candidates.select_nth_unstable_by(n - 1, |a, b| rank_order(*a, *b));
        candidates.truncate(n);
    }
    candidates.sort_unstable_by(|a, b| rank_order(*a, *b));
    candidates.into_iter().map(|(_, i)| i).collect()
}

/// Recall@N and NDCG@N of one ranked list against a sorted relevant set.
pub fn ranking_metrics(ranked: &[usize], relevant: &[usize], cutoff: usize) -> (f64, f64) {
    if relevant.is_empty() {
        return (0.0, 0.0);
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(cutoff).enumerate() {
        if relevant.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    (hits as f64 / relevant.len() as f64, dcg / ideal_dcg(cutoff, relevant.len()))
}

/// DCG of a perfect ranking with `relevant` hits available.
pub fn ideal_dcg(cutoff: usize, relevant: usize) -> f64 {
    (0..cutoff.min(relevant)).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserMetrics {
    pub user: usize,
    /// One entry per cutoff.
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRow {
    pub group: usize,
    pub users: usize,
    pub min_degree: usize,
    pub max_degree: usize,
    /// Users in the group with at least one test item.
    pub evaluated: usize,
    pub ndcg: f64,
    /// Mean of `‖σ_u‖ / √d`; absent when no deviations were supplied.
    pub mean_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cutoffs: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users: usize,
    pub groups: Option<Vec<GroupRow>>,
}

impl MetricsReport {
    pub fn recall_at(&self, cutoff: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == cutoff).map(|k| self.recall[k])
    }

    pub fn ndcg_at(&self, cutoff: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == cutoff).map(|k| self.ndcg[k])
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut out = format!("evaluated users: {}\n{:>8} {:>10} {:>10}\n", self.users, "cutoff", "recall", "ndcg");
        for (k, c) in self.cutoffs.iter().enumerate() {
            let _ = writeln!(out, "{c:>8} {:>10.6} {:>10.6}", self.recall[k], self.ndcg[k]);
        }
        if let Some(groups) = &self.groups {
            let _ = writeln!(
                out,
                "{:>6} {:>6} {:>12} {:>10} {:>10}",
                "group", "users", "degree", "ndcg@20", "sigma"
            );
            for g in groups {
                let sigma = g.mean_sigma.map_or("-".to_string(), |s| format!("{s:.6}"));
                let _ = writeln!(
                    out,
                    "{:>6} {:>6} {:>12} {:>10.6} {:>10}",
                    g.group,
                    g.users,
                    format!("{}-{}", g.min_degree, g.max_degree),
                    g.ndcg,
                    sigma
                );
            }
        }
        out
    }

    /// One `run variant cutoff metric value` record per line.
    pub fn records(&self, run: &str, variant: &str) -> String {
        let mut out = String::new();
        for (k, c) in self.cutoffs.iter().enumerate() {
            let _ = writeln!(out, "{run} {variant} {c} recall {}", self.recall[k]);
            let _ = writeln!(out, "{run} {variant} {c} ndcg {}", self.ndcg[k]);
        }
        if let Some(groups) = &self.groups {
            for g in groups {
                let _ = writeln!(out, "{run} {variant} group{} ndcg@{GROUP_CUTOFF} {}", g.group, g.ndcg);
                if let Some(s) = g.mean_sigma {
                    let _ = writeln!(out, "{run} {variant} group{} sigma {s}", g.group);
                }
            }
        }
        out
    }
}

fn check_embeddings(users: &DenseMatrix, items: &DenseMatrix, train: &InteractionTable) -> Result<()> {
    if users.cols() != items.cols() {
        return Err(Error::Shape("user and item embeddings differ in width".into()));
    }
    if users.rows() != train.n_users() || items.rows() != train.n_items() {
        return Err(Error::Shape(format!(
            "embeddings {}x{} do not match {} users / {} items",
            users.rows(),
            items.rows(),
            train.n_users(),
            train.n_items()
        )));
    }
    Ok(())
}

/// Per-user metrics for every user with at least one test item.
pub fn per_user_metrics(
    users: &DenseMatrix,
    items: &DenseMatrix,
    train: &InteractionTable,
    test: &InteractionTable,
    cutoffs: &[usize],
) -> Result<Vec<UserMetrics>> {
    check_embeddings(users, items, train)?;
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::Config("cutoffs must be a nonempty list of positive integers".into()));
    }
    let seen = train.user_items();
    let mut relevant = test.user_items();
    relevant.resize(users.rows(), Vec::new());
    let depth = *cutoffs.iter().max().expect("nonempty");
    let mut scores = vec![0.0; items.rows()];
    let mut out = Vec::new();
    for (u, rel) in relevant.iter().enumerate() {
        if rel.is_empty() {
            continue;
        }
        let eu = users.row(u);
        for (i, s) in scores.iter_mut().enumerate() {
            *s = dot(eu, items.row(i));
        }
        let ranked = top_n(&scores, &seen[u], depth);
        let (recall, ndcg) = cutoffs.iter().map(|&c| ranking_metrics(&ranked, rel, c)).unzip();
        out.push(UserMetrics { user: u, recall, ndcg });
    }
    if out.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(out)
}

/// Averages Recall@N and NDCG@N over users that have test items, ranking
/// every item the user has not interacted with in `train`.
pub fn evaluate(
    users: &DenseMatrix,
    items: &DenseMatrix,
    train: &InteractionTable,
    test: &InteractionTable,
    cutoffs: &[usize],
) -> Result<MetricsReport> {
    let per_user = per_user_metrics(users, items, train, test, cutoffs)?;
    let n = per_user.len() as f64;
    let mut recall = vec![0.0; cutoffs.len()];
    let mut ndcg = vec![0.0; cutoffs.len()];
    for m in &per_user {
        for k in 0..cutoffs.len() {
            recall[k] += m.recall[k];
            ndcg[k] += m.ndcg[k];
        }
    }
    Ok(MetricsReport {
        cutoffs: cutoffs.to_vec(),
        recall: recall.into_iter().map(|x| x / n).collect(),
        ndcg: ndcg.into_iter().map(|x| x / n).collect(),
        users: per_user.len(),
        groups: None,
    })
}

/// Splits users into `n_groups` equal-count groups by ascending degree.
/// Ties keep user order, and group sizes differ by at most one.
pub fn degree_groups(degrees: &[usize], n_groups: usize) -> Result<Vec<Vec<usize>>> {
    if n_groups < 2 {
        return Err(Error::Config("n_groups must be at least 2".into()));
    }
    if degrees.len() < n_groups {
        return Err(Error::Config(format!(
            "{} users cannot fill {n_groups} groups",
            degrees.len()
        )));
    }
    let mut order: Vec<usize> = (0..degrees.len()).collect();
    order.sort_by_key(|&u| degrees[u]);
    let n = order.len();
    Ok((0..n_groups)
        .map(|g| order[g * n / n_groups..(g + 1) * n / n_groups].to_vec())
        .collect())
}

/// Mean of `‖σ_u‖ / √d` over the listed rows.
pub fn mean_scaled_sigma(sigma: &DenseMatrix, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let scale = 1.0 / (sigma.cols() as f64).sqrt();
    rows.iter()
        .map(|&u| dot(sigma.row(u), sigma.row(u)).sqrt() * scale)
        .sum::<f64>()
        / rows.len() as f64
}

/// NDCG@20 and mean deviation per train-degree group of users.
pub fn group_analysis(
    users: &DenseMatrix,
    items: &DenseMatrix,
    sigma_users: Option<&DenseMatrix>,
    train: &InteractionTable,
    test: &InteractionTable,
    n_groups: usize,
) -> Result<Vec<GroupRow>> {
    let degrees = train.user_degrees();
    let groups = degree_groups(&degrees, n_groups)?;
    if let Some(s) = sigma_users {
        if s.rows() != users.rows() {
            return Err(Error::Shape("sigma rows do not match users".into()));
        }
    }
    let per_user = match per_user_metrics(users, items, train, test, &[GROUP_CUTOFF]) {
        Ok(m) => m,
        Err(Error::EmptyEvaluation) => Vec::new(),
        Err(e) => return Err(e),
    };
    let mut ndcg_of = vec![None; users.rows()];
    for m in &per_user {
        ndcg_of[m.user] = Some(m.ndcg[0]);
    }
    Ok(groups
        .iter()
        .enumerate()
        .map(|(g, members)| {
            let scored: Vec<f64> = members.iter().filter_map(|&u| ndcg_of[u]).collect();
            GroupRow {
                group: g,
                users: members.len(),
                min_degree: members.iter().map(|&u| degrees[u]).min().unwrap_or(0),
                max_degree: members.iter().map(|&u| degrees[u]).max().unwrap_or(0),
                evaluated: scored.len(),
                ndcg: if scored.is_empty() {
                    0.0
                } else {
                    scored.iter().sum::<f64>() / scored.len() as f64
                },
                mean_sigma: sigma_users.map(|s| mean_scaled_sigma(s, members)),
            }
        })
        .collect())
}

/// Average ranks, with ties sharing the mean of their positions (1-based).
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Sorts the full score list and filters afterwards.
    fn brute_force(
        users: &DenseMatrix,
        items: &DenseMatrix,
        train: &InteractionTable,
        test: &InteractionTable,
        cutoffs: &[usize],
    ) -> Option<(Vec<f64>, Vec<f64>, usize)> {
        let mut recall = vec![0.0; cutoffs.len()];
        let mut ndcg = vec![0.0; cutoffs.len()];
        let mut count = 0;
        for u in 0..users.rows() {
            let rel: Vec<usize> = test.pairs().iter().filter(|p| p.0 == u).map(|p| p.1).collect();
            if rel.is_empty() {
                continue;
            }
            count += 1;
            let seen: Vec<usize> = train.pairs().iter().filter(|p| p.0 == u).map(|p| p.1).collect();
            let mut all: Vec<(f64, usize)> = (0..items.rows())
                .map(|i| {
                    let s: f64 = (0..users.cols()).map(|k| users.get(u, k) * items.get(i, k)).sum();
                    (if seen.contains(&i) { f64::NEG_INFINITY } else { s }, i)
                })
                .collect();
            // stable sort keeps lower indices first among equal scores
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let ranked: Vec<usize> = all.iter().filter(|(_, i)| !seen.contains(i)).map(|x| x.1).collect();
            for (k, &c) in cutoffs.iter().enumerate() {
                let mut hits = 0.0;
                let mut dcg = 0.0;
                for (pos, i) in ranked.iter().take(c).enumerate() {
                    if rel.contains(i) {
                        hits += 1.0;
                        dcg += 1.0 / ((pos + 2) as f64).log2();
                    }
                }
                let mut idcg = 0.0;
                for pos in 0..c.min(rel.len()) {
                    idcg += 1.0 / ((pos + 2) as f64).log2();
                }
                recall[k] += hits / rel.len() as f64;
                ndcg[k] += dcg / idcg;
            }
        }
        (count > 0).then(|| {
            let n = count as f64;
            (
                recall.into_iter().map(|x| x / n).collect(),
                ndcg.into_iter().map(|x| x / n).collect(),
                count,
            )
        })
    }

    #[test]
    fn single_hit_at_top() {
        let users = DenseMatrix::from_rows(&[vec![1.0]]).unwrap();
        let items = DenseMatrix::from_rows(&[vec![3.0], vec![2.0], vec![1.0]]).unwrap();
        let train = InteractionTable::new(vec![], 1, 3).unwrap();
        let test = InteractionTable::new(vec![(0, 0)], 1, 3).unwrap();
        let r = evaluate(&users, &items, &train, &test, &[10]).unwrap();
        assert_eq!((r.recall[0], r.ndcg[0]), (1.0, 1.0));
    }

    #[test]
    fn hit_at_third_place() {
        let users = DenseMatrix::from_rows(&[vec![1.0]]).unwrap();
        let items = DenseMatrix::from_rows(&[vec![3.0], vec![2.0], vec![1.0], vec![0.0]]).unwrap();
        let train = InteractionTable::new(vec![], 1, 4).unwrap();
        let test = InteractionTable::new(vec![(0, 2)], 1, 4).unwrap();
        let r = evaluate(&users, &items, &train, &test, &[10]).unwrap();
        assert!((r.ndcg[0] - 0.5).abs() < 1e-15);
        assert_eq!(r.recall[0], 1.0);
    }

    #[test]
    fn ndcg_can_fall_as_the_cutoff_grows() {
        // two relevant items, one hit at the top: 1 at N=1, below 1 at N=2
        let (_, at1) = ranking_metrics(&[0, 5], &[0, 1], 1);
        let (_, at2) = ranking_metrics(&[0, 5], &[0, 1], 2);
        assert_eq!(at1, 1.0);
        assert!(at2 < at1);
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(top_n(&[1.0, 2.0, 2.0, 0.0], &[], 3), vec![1, 2, 0]);
        assert_eq!(top_n(&[1.0, 2.0, 2.0, 0.0], &[1], 2), vec![2, 0]);
        assert_eq!(top_n(&[0.0, -0.0], &[], 2), vec![0, 1]);
    }

    #[test]
    fn users_without_test_items_are_skipped() {
        let users = DenseMatrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let items = DenseMatrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let train = InteractionTable::new(vec![], 2, 2).unwrap();
        let test = InteractionTable::new(vec![(1, 1)], 2, 2).unwrap();
        let r = evaluate(&users, &items, &train, &test, &[1]).unwrap();
        assert_eq!(r.users, 1);
        assert_eq!(r.recall[0], 0.0);
        let empty = InteractionTable::new(vec![], 2, 2).unwrap();
        assert!(matches!(
            evaluate(&users, &items, &train, &empty, &[1]),
            Err(Error::EmptyEvaluation)
        ));
    }

    #[test]
    fn identical_degrees_split_evenly() {
        let groups = degree_groups(&[3; 10], 4).unwrap();
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 10);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        // stable order within ties
        let flat: Vec<usize> = groups.concat();
        assert_eq!(flat, (0..10).collect::<Vec<_>>());
        assert!(degree_groups(&[1, 2, 3], 4).is_err());
        assert!(degree_groups(&[1, 2, 3], 1).is_err());
    }

    #[test]
    fn constant_sigma_gives_identical_group_means() {
        let users = DenseMatrix::filled(8, 2, 0.5);
        let items = DenseMatrix::filled(5, 2, 0.1);
        let sigma = DenseMatrix::filled(8, 2, 0.7);
        let mut pairs = Vec::new();
        for u in 0..8 {
            for i in 0..=(u % 4) {
                pairs.push((u, i));
            }
        }
        let train = InteractionTable::new(pairs, 8, 5).unwrap();
        let test = InteractionTable::new(vec![(0, 4), (5, 4)], 8, 5).unwrap();
        let rows = group_analysis(&users, &items, Some(&sigma), &train, &test, 4).unwrap();
        for r in &rows {
            assert!((r.mean_sigma.unwrap() - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
    }

    fn instance() -> impl Strategy<Value = (DenseMatrix, DenseMatrix, InteractionTable, InteractionTable)> {
        (1usize..=8, 1usize..=12, 1usize..=3).prop_flat_map(|(m, n, d)| {
            (
                proptest::collection::vec(-2i32..=2, m * d),
                proptest::collection::vec(-2i32..=2, n * d),
                proptest::collection::vec(0u8..3, m * n),
            )
                .prop_map(move |(u, i, mask)| {
                    // small integer scores create plenty of ties
                    let users = DenseMatrix::new(m, d, u.into_iter().map(f64::from).collect()).unwrap();
                    let items = DenseMatrix::new(n, d, i.into_iter().map(f64::from).collect()).unwrap();
                    let mut train = Vec::new();
                    let mut test = Vec::new();
                    for (k, &flag) in mask.iter().enumerate() {
                        match flag {
                            1 => train.push((k / n, k % n)),
                            2 => test.push((k / n, k % n)),
                            _ => {}
                        }
                    }
                    (
                        users,
                        items,
                        InteractionTable::new(train, m, n).unwrap(),
                        InteractionTable::new(test, m, n).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((users, items, train, test) in instance()) {
            let cutoffs = [1, 3, 5, 10];
            let expected = brute_force(&users, &items, &train, &test, &cutoffs);
            match evaluate(&users, &items, &train, &test, &cutoffs) {
                Ok(r) => {
                    let (recall, ndcg, count) = expected.unwrap();
                    prop_assert_eq!(r.recall, recall);
                    prop_assert_eq!(r.ndcg, ndcg);
                    prop_assert_eq!(r.users, count);
                }
                Err(Error::EmptyEvaluation) => prop_assert!(expected.is_none()),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }

        #[test]
        fn metrics_monotone_and_masked((users, items, train, test) in instance()) {
            let cutoffs = [1, 2, 4, 8, 12];
            let relevant = test.user_items();
            if let Ok(per_user) = per_user_metrics(&users, &items, &train, &test, &cutoffs) {
                for m in &per_user {
                    let n_rel = relevant[m.user].len();
                    for k in 1..cutoffs.len() {
                        prop_assert!(m.recall[k] >= m.recall[k - 1]);
                        // the normalized form can drop as the ideal grows; the raw gain cannot
                        let dcg = |k: usize| m.ndcg[k] * ideal_dcg(cutoffs[k], n_rel);
                        prop_assert!(dcg(k) + 1e-12 >= dcg(k - 1));
                    }
                    for v in m.recall.iter().chain(&m.ndcg) {
                        prop_assert!((0.0..=1.0 + 1e-12).contains(v));
                    }
                }
            }
            let seen = train.user_items();
            for u in 0..users.rows() {
                let scores: Vec<f64> = (0..items.rows()).map(|i| dot(users.row(u), items.row(i))).collect();
                for i in top_n(&scores, &seen[u], items.rows()) {
                    prop_assert!(!seen[u].contains(&i));
                }
            }
        }

        #[test]
        fn shifting_one_users_scores_keeps_ranking(
            scores in proptest::collection::vec(-8i32..8, 1..12),
            shift in -5i32..5,
        ) {
            let s: Vec<f64> = scores.iter().map(|&x| f64::from(x)).collect();
            let shifted: Vec<f64> = s.iter().map(|x| x + f64::from(shift)).collect();
            prop_assert_eq!(top_n(&s, &[], s.len()), top_n(&shifted, &[], s.len()));
        }

        #[test]
        fn group_boundaries_match_sorted_quantiles(degrees in proptest::collection::vec(1usize..50, 4..60)) {
            let groups = degree_groups(&degrees, 4).unwrap();
            let mut sorted = degrees.clone();
            sorted.sort_unstable();
            let n = sorted.len();
            for (g, members) in groups.iter().enumerate() {
                let mut got: Vec<usize> = members.iter().map(|&u| degrees[u]).collect();
                got.sort_unstable();
                prop_assert_eq!(&got[..], &sorted[g * n / 4..(g + 1) * n / 4]);
            }
        }
    }
}
