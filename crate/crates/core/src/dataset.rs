//! Implicit-feedback interactions: ingestion, filtering, holdout splitting,
//! the normalized bipartite graph and pairwise triple sampling.
//!
//! Node layout in the graph is users first, then items: item `i` lives at
//! node `n_users + i`.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Observed user–item pairs over `n_users × n_items`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionTable {
    pairs: Vec<(usize, usize)>,
    n_users: usize,
    n_items: usize,
}

impl InteractionTable {
    /// Validates ranges and rejects duplicate pairs.
    pub fn new(pairs: Vec<(usize, usize)>, n_users: usize, n_items: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for (k, &(u, i)) in pairs.iter().enumerate() {
            if u >= n_users || i >= n_items {
                return Err(Error::Config(format!(
                    "pair #{k} ({u}, {i}) outside {n_users} users x {n_items} items"
                )));
            }
            if !seen.insert((u, i)) {
                return Err(Error::Config(format!("duplicate pair ({u}, {i})")));
            }
        }
        Ok(Self {
            pairs,
            n_users,
            n_items,
        })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Items of every user, sorted ascending.
    pub fn user_items(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users];
        for &(u, i) in &self.pairs {
            out[u].push(i);
        }
        for items in &mut out {
            items.sort_unstable();
        }
        out
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_users];
        for &(u, _) in &self.pairs {
            deg[u] += 1;
        }
        deg
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_items];
        for &(_, i) in &self.pairs {
            deg[i] += 1;
        }
        deg
    }

    /// Writes the table with a `# users=M items=N` header and one
    /// `user item` index pair per line.
    pub fn write_indexed(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "# users={} items={}", self.n_users, self.n_items)?;
        for &(u, i) in &self.pairs {
            writeln!(out, "{u} {i}")?;
        }
        Ok(())
    }

    pub fn save_indexed(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_indexed(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a file produced by [`InteractionTable::write_indexed`]. Indices
    /// are taken verbatim, so train and test files stay aligned.
    pub fn read_indexed(reader: impl BufRead) -> Result<Self> {
        let mut dims: Option<(usize, usize)> = None;
        let mut pairs = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let lineno = n + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(d) = parse_dims(comment) {
                    dims = Some(d);
                }
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<usize> {
                tok.ok_or_else(|| Error::Parse {
                    line: lineno,
                    message: "expected two indices".into(),
                })?
                .parse()
                .map_err(|_| Error::Parse {
                    line: lineno,
                    message: format!("not an index: {line:?}"),
                })
            };
            let u = parse(it.next())?;
            let i = parse(it.next())?;
            pairs.push((u, i));
        }
        let (n_users, n_items) = match dims {
            Some(d) => d,
            None => (
                pairs.iter().map(|p| p.0 + 1).max().unwrap_or(0),
                pairs.iter().map(|p| p.1 + 1).max().unwrap_or(0),
            ),
        };
        Self::new(pairs, n_users, n_items)
    }

    pub fn load_indexed(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_indexed(BufReader::new(file))
    }
}

fn parse_dims(comment: &str) -> Option<(usize, usize)> {
    let mut users = None;
    let mut items = None;
    for kv in comment.split_whitespace() {
        match kv.split_once('=') {
            Some(("users", v)) => users = v.parse().ok(),
            Some(("items", v)) => items = v.parse().ok(),
            _ => {}
        }
    }
    Some((users?, items?))
}

/// Ingestion options for raw interaction dumps.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Keep only rows whose third column is at least this rating.
    pub min_rating: Option<f64>,
}

/// Parses `user item [rating]` lines into a densely indexed table.
///
/// Tokens are indexed in order of first appearance; duplicate pairs collapse.
/// Lines starting with `#` and blank lines are skipped. With
/// [`LoadOptions::min_rating`] set, the third column is required.
pub fn load_interactions(reader: impl BufRead, opts: &LoadOptions) -> Result<InteractionTable> {
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 2 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected `user item`, got {line:?}"),
            });
        }
        if let Some(threshold) = opts.min_rating {
            let rating: f64 = toks
                .get(2)
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line: lineno,
                    message: "missing or invalid rating column".into(),
                })?;
            if rating < threshold {
                continue;
            }
        }
        let next_u = users.len();
        let u = *users.entry(toks[0].to_string()).or_insert(next_u);
        let next_i = items.len();
        let i = *items.entry(toks[1].to_string()).or_insert(next_i);
        if seen.insert((u, i)) {
            pairs.push((u, i));
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    InteractionTable::new(pairs, users.len(), items.len())
}

pub fn load_interactions_file(path: &Path, opts: &LoadOptions) -> Result<InteractionTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    load_interactions(BufReader::new(file), opts)
}

/// Drops users with fewer than `min_count` pairs, then items left without
/// pairs; surviving users and items are re-indexed in their original order.
pub fn filter_min_interactions(table: &InteractionTable, min_count: usize) -> Result<InteractionTable> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let deg = table.user_degrees();
    let mut user_map = vec![usize::MAX; table.n_users];
    let mut n_users = 0;
    for (u, &d) in deg.iter().enumerate() {
        if d >= min_count {
            user_map[u] = n_users;
            n_users += 1;
        }
    }
    let kept: Vec<(usize, usize)> = table
        .pairs
        .iter()
        .copied()
        .filter(|&(u, _)| user_map[u] != usize::MAX)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut item_map = vec![usize::MAX; table.n_items];
    for &(_, i) in &kept {
        item_map[i] = 0;
    }
    let mut n_items = 0;
    for slot in item_map.iter_mut() {
        if *slot == 0 {
            *slot = n_items;
            n_items += 1;
        }
    }
    let pairs = kept
        .into_iter()
        .map(|(u, i)| (user_map[u], item_map[i]))
        .collect();
    Ok(InteractionTable {
        pairs,
        n_users,
        n_items,
    })
}

/// Disjoint train/test partition of one interaction table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub train: InteractionTable,
    pub test: InteractionTable,
}

impl SplitDataset {
    pub fn n_users(&self) -> usize {
        self.train.n_users
    }

    pub fn n_items(&self) -> usize {
        self.train.n_items
    }
}

/// Uniform global holdout: `round(test_ratio · |pairs|)` pairs go to test.
///
/// Both halves are returned sorted by `(user, item)`. A user may end up with
/// every pair in test.
pub fn split_holdout(table: &InteractionTable, test_ratio: f64, seed: u64) -> Result<SplitDataset> {
    if !(test_ratio > 0.0 && test_ratio < 1.0) {
        return Err(Error::Config(format!("test_ratio {test_ratio} not in (0, 1)")));
    }
    if table.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order = table.pairs.clone();
    order.sort_unstable();
    let mut rng = rng::substream(seed, Stream::Split);
    order.shuffle(&mut rng);
    let n_test = (test_ratio * order.len() as f64).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(SplitDataset {
        train: InteractionTable {
            pairs: train,
            n_users: table.n_users,
            n_items: table.n_items,
        },
        test: InteractionTable {
            pairs: test,
            n_users: table.n_users,
            n_items: table.n_items,
        },
    })
}

/// Reproducibility record written next to prepared splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub source: String,
    pub seed: u64,
    pub test_ratio: f64,
    pub min_count: usize,
    pub min_rating: Option<f64>,
    pub n_users: usize,
    pub n_items: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
}

impl SplitManifest {
    pub fn render(&self) -> String {
        let rating = self
            .min_rating
            .map_or_else(|| "none".to_string(), |r| r.to_string());
        format!(
            "source={}\nseed={}\ntest_ratio={}\nmin_count={}\nmin_rating={}\nusers={}\nitems={}\ntrain_pairs={}\ntest_pairs={}\n",
            self.source,
            self.seed,
            self.test_ratio,
            self.min_count,
            rating,
            self.n_users,
            self.n_items,
            self.train_pairs,
            self.test_pairs
        )
    }
}

/// Symmetrically normalized bipartite adjacency `D^{-1/2} A D^{-1/2}` in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n_users: usize,
    n_items: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    degree: Vec<usize>,
}

impl NormalizedAdjacency {
    pub fn node_count(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn degree(&self) -> &[usize] {
        &self.degree
    }

    /// Number of stored (directed) entries, i.e. twice the edge count.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of row `i`, in ascending column order.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[lo..hi]
            .binary_search(&j)
            .ok()
            .map(|k| self.values[lo + k])
    }

    /// Row-major dense materialization; only sensible for small graphs.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.node_count();
        let mut out = vec![vec![0.0; n]; n];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in self.neighbors(i) {
                row[j] = v;
            }
        }
        out
    }
}

/// Builds the normalized adjacency of the train interactions.
///
/// Isolated nodes keep empty rows.
pub fn build_graph(train: &InteractionTable) -> NormalizedAdjacency {
    let n_users = train.n_users;
    let n = n_users + train.n_items;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(u, i) in &train.pairs {
        adj[u].push(n_users + i);
        adj[n_users + i].push(u);
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::with_capacity(2 * train.len());
    let mut values = Vec::with_capacity(2 * train.len());
    row_ptr.push(0);
    for (i, cols) in adj.iter_mut().enumerate() {
        cols.sort_unstable();
        for &j in cols.iter() {
            col_idx.push(j);
            // degree product is commutative, so mirrored entries are bitwise equal
            values.push(1.0 / ((degree[i] as f64) * (degree[j] as f64)).sqrt());
        }
        row_ptr.push(col_idx.len());
    }
    NormalizedAdjacency {
        n_users,
        n_items: train.n_items,
        row_ptr,
        col_idx,
        values,
        degree,
    }
}

/// One `(user, positive item, negative item)` BPR training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingTriple {
    pub user: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Draws BPR triples: positives uniformly over train pairs, negatives
/// uniformly over the user's unobserved items by rejection.
#[derive(Debug, Clone)]
pub struct TripleSampler {
    pairs: Vec<(usize, usize)>,
    positives: Vec<HashSet<usize>>,
    n_items: usize,
}

impl TripleSampler {
    pub fn new(train: &InteractionTable) -> Self {
        let mut positives = vec![HashSet::new(); train.n_users];
        for &(u, i) in &train.pairs {
            positives[u].insert(i);
        }
        Self {
            pairs: train.pairs.clone(),
            positives,
            n_items: train.n_items,
        }
    }

    pub fn is_positive(&self, user: usize, item: usize) -> bool {
        self.positives[user].contains(&item)
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<TrainingTriple>> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut out = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let (user, positive) = self.pairs[rng.random_range(0..self.pairs.len())];
            let seen = &self.positives[user];
            if seen.len() >= self.n_items {
                return Err(Error::NoNegativeAvailable { user });
            }
            let negative = loop {
                let j = rng.random_range(0..self.n_items);
                if !seen.contains(&j) {
                    break j;
                }
            };
            out.push(TrainingTriple {
                user,
                positive,
                negative,
            });
        }
        Ok(out)
    }
}

/// One-shot convenience over [`TripleSampler`].
pub fn sample_triples<R: Rng + ?Sized>(
    train: &InteractionTable,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<TrainingTriple>> {
    TripleSampler::new(train).sample(batch_size, rng)
}
