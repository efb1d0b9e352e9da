//! Taxonomies: loading, transitive closure with hop counts, splits, triplet and
//! evaluation-pair sampling, δ-hyperbolicity and synthetic trees.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A DAG of `child → parent` subsumption edges over labelled entities.
#[derive(Clone, Debug)]
pub struct Taxonomy {
    ids: Vec<String>,
    labels: Vec<String>,
    index: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
    /// Every ancestor of each node with its shortest hop count.
    ancestors: Vec<HashMap<usize, u32>>,
    depth: Vec<u32>,
}

/// `(descendant, ancestor)` with the shortest directed hop count between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subsumption {
    pub child: usize,
    pub ancestor: usize,
    pub hops: u32,
}

impl Taxonomy {
    /// Build from `(id, label)` entities and `(child_id, parent_id)` edges.
    /// Duplicate edges are merged; cycles and unknown ids are rejected.
    pub fn new(entities: Vec<(String, String)>, edges: Vec<(String, String)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entities.len());
        let mut ids = Vec::with_capacity(entities.len());
        let mut labels = Vec::with_capacity(entities.len());
        for (id, label) in entities {
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::invalid(format!("duplicate entity id {id:?}")));
            }
            ids.push(id);
            labels.push(label);
        }
        let mut pairs = Vec::with_capacity(edges.len());
        for (c, p) in &edges {
            let ci = *index.get(c).ok_or_else(|| Error::UnknownEntity(c.clone()))?;
            let pi = *index.get(p).ok_or_else(|| Error::UnknownEntity(p.clone()))?;
            pairs.push((ci, pi));
        }
        Self::from_indices(ids, labels, index, pairs)
    }

    fn from_indices(
        ids: Vec<String>,
        labels: Vec<String>,
        index: HashMap<String, usize>,
        mut edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        edges.sort_unstable();
        edges.dedup();
        let n = ids.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for &(c, p) in &edges {
            if c == p {
                return Err(Error::Cycle {
                    child: ids[c].clone(),
                    parent: ids[p].clone(),
                });
            }
            parents[c].push(p);
            children[p].push(c);
        }
        if let Some((c, p)) = find_back_edge(&parents) {
            return Err(Error::Cycle {
                child: ids[c].clone(),
                parent: ids[p].clone(),
            });
        }
        let ancestors: Vec<HashMap<usize, u32>> = (0..n).map(|u| bfs_up(&parents, u)).collect();
        let depth = root_depths(&parents, &children);
        Ok(Self {
            ids,
            labels,
            index,
            parents,
            children,
            edges,
            ancestors,
            depth,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, node: usize) -> &str {
        &self.ids[node]
    }

    pub fn label(&self, node: usize) -> &str {
        &self.labels[node]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn node(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    /// Direct edges `(child, parent)`, sorted and deduplicated.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Ancestors of `node` with shortest hop counts.
    pub fn ancestors(&self, node: usize) -> &HashMap<usize, u32> {
        &self.ancestors[node]
    }

    /// Shortest hop count from any root (a node without parents).
    pub fn depth(&self, node: usize) -> u32 {
        self.depth[node]
    }

    /// Shortest directed path length `u → v` along child→parent edges.
    pub fn hop_distance(&self, u: usize, v: usize) -> Option<u32> {
        if u == v {
            return Some(0);
        }
        self.ancestors[u].get(&v).copied()
    }

    /// `u` subsumes `v` or `v` subsumes `u`.
    pub fn related(&self, u: usize, v: usize) -> bool {
        self.ancestors[u].contains_key(&v) || self.ancestors[v].contains_key(&u)
    }

    /// Indirect subsumptions only (hop count ≥ 2), sorted.
    pub fn transitive_closure(&self) -> Vec<Subsumption> {
        self.all_subsumptions().into_iter().filter(|s| s.hops >= 2).collect()
    }

    /// Direct edges as subsumptions with `hops = 1`.
    pub fn direct(&self) -> Vec<Subsumption> {
        self.edges
            .iter()
            .map(|&(child, ancestor)| Subsumption { child, ancestor, hops: 1 })
            .collect()
    }

    /// `E ∪ T`, sorted.
    pub fn all_subsumptions(&self) -> Vec<Subsumption> {
        let mut out: Vec<Subsumption> = self
            .ancestors
            .iter()
            .enumerate()
            .flat_map(|(child, anc)| {
                anc.iter().map(move |(&ancestor, &hops)| Subsumption { child, ancestor, hops })
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Nodes that share an ancestor within 2 hops with `node` and are not
    /// related to it in either direction (siblings, cousins, uncles, nephews).
    pub fn hard_negatives(&self, node: usize) -> Vec<usize> {
        let mut seen = HashSet::new();
        for (&a, &h) in &self.ancestors[node] {
            if h > 2 {
                continue;
            }
            for d in self.descendants_within(a, 2) {
                if d != node && !self.related(node, d) {
                    seen.insert(d);
                }
            }
        }
        let mut out: Vec<usize> = seen.into_iter().collect();
        out.sort_unstable();
        out
    }

    fn descendants_within(&self, node: usize, max_hops: u32) -> Vec<usize> {
        let mut out = Vec::new();
        let mut frontier = vec![node];
        for _ in 0..max_hops {
            let next: Vec<usize> = frontier.iter().flat_map(|&f| self.children[f].iter().copied()).collect();
            out.extend(&next);
            frontier = next;
        }
        out
    }

    /// Write `entities.tsv`-style and `edges.tsv`-style files.
    pub fn save(&self, entities_path: &Path, edges_path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(entities_path)?);
        writeln!(w, "# id\tlabel")?;
        for (id, label) in self.ids.iter().zip(&self.labels) {
            writeln!(w, "{id}\t{label}")?;
        }
        w.flush()?;
        let mut w = BufWriter::new(fs::File::create(edges_path)?);
        writeln!(w, "# child_id\tparent_id")?;
        for &(c, p) in &self.edges {
            writeln!(w, "{}\t{}", self.ids[c], self.ids[p])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn bfs_up(parents: &[Vec<usize>], start: usize) -> HashMap<usize, u32> {
    let mut dist = HashMap::new();
    let mut queue = VecDeque::from([(start, 0u32)]);
    let mut seen = HashSet::from([start]);
    while let Some((u, d)) = queue.pop_front() {
        for &p in &parents[u] {
            if seen.insert(p) {
                dist.insert(p, d + 1);
                queue.push_back((p, d + 1));
            }
        }
    }
    dist
}

fn root_depths(parents: &[Vec<usize>], children: &[Vec<usize>]) -> Vec<u32> {
    let n = parents.len();
    let mut depth = vec![u32::MAX; n];
    let mut queue: VecDeque<usize> = (0..n).filter(|&u| parents[u].is_empty()).collect();
    for &r in &queue {
        depth[r] = 0;
    }
    while let Some(u) = queue.pop_front() {
        for &c in &children[u] {
            if depth[c] == u32::MAX {
                depth[c] = depth[u] + 1;
                queue.push_back(c);
            }
        }
    }
    depth
}

/// First edge closing a directed cycle, found by iterative DFS.
fn find_back_edge(parents: &[Vec<usize>]) -> Option<(usize, usize)> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let n = parents.len();
    let mut mark = vec![Mark::New; n];
    for start in 0..n {
        if mark[start] != Mark::New {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        mark[start] = Mark::Active;
        while let Some(&mut (u, ref mut next)) = stack.last_mut() {
            if let Some(&p) = parents[u].get(*next) {
                *next += 1;
                match mark[p] {
                    Mark::Active => return Some((u, p)),
                    Mark::New => {
                        mark[p] = Mark::Active;
                        stack.push((p, 0));
                    }
                    Mark::Done => {}
                }
            } else {
                mark[u] = Mark::Done;
                stack.pop();
            }
        }
    }
    None
}

fn read_tsv(path: &Path, columns: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(str::to_string).collect();
        if fields.len() != columns {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {columns} tab-separated fields, found {}", fields.len()),
            });
        }
        rows.push((i + 1, fields));
    }
    Ok(rows)
}

/// Parse `id<TAB>label` and `child_id<TAB>parent_id` files.
pub fn load_taxonomy(entities_path: &Path, edges_path: &Path) -> Result<Taxonomy> {
    let entities = read_tsv(entities_path, 2)?
        .into_iter()
        .map(|(_, mut f)| {
            let label = f.pop().unwrap_or_default();
            (f.pop().unwrap_or_default(), label)
        })
        .collect();
    let edges = read_tsv(edges_path, 2)?
        .into_iter()
        .map(|(_, mut f)| {
            let parent = f.pop().unwrap_or_default();
            (f.pop().unwrap_or_default(), parent)
        })
        .collect();
    Taxonomy::new(entities, edges)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Positives are any subsumption in `E ∪ T`.
    Mixed,
    /// Train on direct edges, test on held-out indirect ones.
    Multi,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Mixed => "mixed",
            Task::Multi => "multi",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Task::Mixed),
            "multi" => Ok(Task::Multi),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

/// Subsumptions assigned to train, validation and test.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub task: Task,
    pub train: Vec<Subsumption>,
    pub val: Vec<Subsumption>,
    pub test: Vec<Subsumption>,
}

/// Edge-level split, deterministic under `seed`.
///
/// Mixed: `E ∪ T` is shuffled and cut by `fractions`. Multi: all of `E` is
/// training data and `T` is divided between validation and test in the ratio
/// `fractions[1] : fractions[2]`.
pub fn make_splits(tax: &Taxonomy, task: Task, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions must sum to 1, got {fractions:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match task {
        Task::Mixed => {
            let mut pool = tax.all_subsumptions();
            pool.shuffle(&mut rng);
            let n = pool.len();
            let n_train = (fractions[0] * n as f64).round() as usize;
            let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
            let test = pool.split_off(n_train + n_val);
            let val = pool.split_off(n_train);
            Ok(Splits { task, train: pool, val, test })
        }
        Task::Multi => {
            let mut pool = tax.transitive_closure();
            pool.shuffle(&mut rng);
            let held = fractions[1] + fractions[2];
            let share = if held > 0.0 { fractions[1] / held } else { 0.5 };
            let n_val = (share * pool.len() as f64).round() as usize;
            let test = pool.split_off(n_val);
            Ok(Splits {
                task,
                train: tax.direct(),
                val: pool,
                test,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Draws `(anchor, ancestor, unrelated)` triplets from a fixed pool of
/// positive subsumptions.
pub struct TripletSampler<'t> {
    tax: &'t Taxonomy,
    anchors: Vec<usize>,
    /// Per anchor: candidate ancestors and cumulative weights.
    positives: HashMap<usize, (Vec<usize>, Vec<f64>)>,
    hard: HashMap<usize, Vec<usize>>,
}

impl<'t> TripletSampler<'t> {
    pub fn new(tax: &'t Taxonomy, pool: &[Subsumption]) -> Result<Self> {
        let mut by_anchor: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();
        for s in pool {
            let w = if s.hops == 1 { 2.0 } else { 1.0 };
            by_anchor.entry(s.child).or_default().push((s.ancestor, w));
        }
        let mut anchors: Vec<usize> = by_anchor
            .keys()
            .copied()
            .filter(|&a| tax.ancestors(a).len() + 1 + descendant_count(tax, a) < tax.len())
            .collect();
        anchors.sort_unstable();
        if anchors.is_empty() {
            return Err(Error::invalid("no anchor has both a positive and a valid negative"));
        }
        let positives = by_anchor
            .into_iter()
            .map(|(a, mut v)| {
                v.sort_by(|x, y| x.0.cmp(&y.0));
                let mut acc = 0.0;
                let cum = v
                    .iter()
                    .map(|&(_, w)| {
                        acc += w;
                        acc
                    })
                    .collect();
                (a, (v.into_iter().map(|(p, _)| p).collect(), cum))
            })
            .collect();
        let hard = anchors.iter().map(|&a| (a, tax.hard_negatives(a))).collect();
        Ok(Self { tax, anchors, positives, hard })
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn sample<R: Rng + ?Sized>(&self, hard_fraction: f64, rng: &mut R) -> Triplet {
        let anchor = *self.anchors.choose(rng).unwrap_or_else(|| unreachable!());
        let (cands, cum) = &self.positives[&anchor];
        let x = rng.random::<f64>() * cum[cum.len() - 1];
        let positive = cands[cum.partition_point(|&c| c <= x).min(cands.len() - 1)];
        let hard = &self.hard[&anchor];
        let negative = if !hard.is_empty() && rng.random::<f64>() < hard_fraction {
            *hard.choose(rng).unwrap_or_else(|| unreachable!())
        } else {
            loop {
                let v = rng.random_range(0..self.tax.len());
                if v != anchor && !self.tax.related(anchor, v) {
                    break v;
                }
            }
        };
        Triplet { anchor, positive, negative }
    }

    pub fn sample_many<R: Rng + ?Sized>(&self, count: usize, hard_fraction: f64, rng: &mut R) -> Vec<Triplet> {
        (0..count).map(|_| self.sample(hard_fraction, rng)).collect()
    }
}

fn descendant_count(tax: &Taxonomy, node: usize) -> usize {
    let mut seen = HashSet::new();
    let mut stack = vec![node];
    while let Some(u) = stack.pop() {
        for &c in tax.children(u) {
            if seen.insert(c) {
                stack.push(c);
            }
        }
    }
    seen.len()
}

/// Triplets over all of `E ∪ T`.
pub fn sample_triplets<R: Rng + ?Sized>(
    tax: &Taxonomy,
    count: usize,
    hard_fraction: f64,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    if tax.edges().is_empty() {
        return Err(Error::invalid("taxonomy has no edges"));
    }
    let pool = tax.all_subsumptions();
    Ok(TripletSampler::new(tax, &pool)?.sample_many(count, hard_fraction, rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledPair {
    pub child: usize,
    pub candidate: usize,
    pub positive: bool,
    /// Hop count for positives, 0 for negatives.
    pub hops: u32,
}

/// Positives from `positives` plus `neg_ratio` negatives each, sharing the
/// positive's child. At least half of each child's negatives are hard when
/// enough hard candidates exist. Negatives are unrelated in both directions
/// and never repeat.
pub fn build_eval_pairs<R: Rng + ?Sized>(
    tax: &Taxonomy,
    positives: &[Subsumption],
    neg_ratio: usize,
    rng: &mut R,
) -> Vec<LabeledPair> {
    let mut out: Vec<LabeledPair> = positives
        .iter()
        .map(|s| LabeledPair {
            child: s.child,
            candidate: s.ancestor,
            positive: true,
            hops: s.hops,
        })
        .collect();
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut hard_cache: HashMap<usize, Vec<usize>> = HashMap::new();
    let want = positives.len() * neg_ratio;
    let mut made = 0;
    for s in positives {
        let child = s.child;
        let hard = hard_cache.entry(child).or_insert_with(|| tax.hard_negatives(child));
        let n_hard = neg_ratio.div_ceil(2);
        let mut got = 0;
        let mut shuffled = hard.clone();
        shuffled.shuffle(rng);
        for &h in &shuffled {
            if got == n_hard {
                break;
            }
            if used.insert((child, h)) {
                got += 1;
            }
        }
        let mut tries = 0;
        while got < neg_ratio && tries < 50 * neg_ratio {
            tries += 1;
            let v = rng.random_range(0..tax.len());
            if v != child && !tax.related(child, v) && used.insert((child, v)) {
                got += 1;
            }
        }
        made += got;
    }
    if made < want {
        log::warn!("only {made} of {want} negatives available; ratio lowered");
    }
    let mut negs: Vec<(usize, usize)> = used.into_iter().collect();
    negs.sort_unstable();
    out.extend(negs.into_iter().map(|(child, candidate)| LabeledPair {
        child,
        candidate,
        positive: false,
        hops: 0,
    }));
    out
}

/// Write pairs as `child<TAB>candidate<TAB>label<TAB>hops` using entity ids.
pub fn save_pairs(tax: &Taxonomy, pairs: &[LabeledPair], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# child\tcandidate\tlabel\thops")?;
    for p in pairs {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            tax.id(p.child),
            tax.id(p.candidate),
            u8::from(p.positive),
            p.hops
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_pairs(tax: &Taxonomy, path: &Path) -> Result<Vec<LabeledPair>> {
    let mut out = Vec::new();
    for (line, f) in read_tsv(path, 4)? {
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let child = tax.node(&f[0]).ok_or_else(|| Error::UnknownEntity(f[0].clone()))?;
        let candidate = tax.node(&f[1]).ok_or_else(|| Error::UnknownEntity(f[1].clone()))?;
        let positive = match f[2].as_str() {
            "1" | "positive" => true,
            "0" | "negative" => false,
            other => return Err(bad(format!("bad label {other:?}"))),
        };
        let hops = f[3].parse().map_err(|_| bad(format!("bad hop count {:?}", f[3])))?;
        out.push(LabeledPair { child, candidate, positive, hops });
    }
    Ok(out)
}

/// Write subsumptions in the pair format, all labelled positive.
pub fn save_subsumptions(tax: &Taxonomy, subs: &[Subsumption], path: &Path) -> Result<()> {
    let pairs: Vec<LabeledPair> = subs
        .iter()
        .map(|s| LabeledPair {
            child: s.child,
            candidate: s.ancestor,
            positive: true,
            hops: s.hops,
        })
        .collect();
    save_pairs(tax, &pairs, path)
}

/// Undirected graph used for δ-hyperbolicity.
#[derive(Clone, Debug)]
pub struct Graph {
    adj: Vec<Vec<usize>>,
}

impl Graph {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::invalid(format!("edge ({a}, {b}) outside {n} nodes")));
            }
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        Ok(Self { adj })
    }

    pub fn from_taxonomy(tax: &Taxonomy) -> Self {
        Self::from_edges(tax.len(), tax.edges()).unwrap_or_else(|_| unreachable!())
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn bfs(&self, src: usize) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.adj.len()];
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.adj[u] {
                if dist[v] == u32::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Nodes of the largest connected component, ascending.
    pub fn largest_component(&self) -> Vec<usize> {
        let n = self.adj.len();
        let mut comp = vec![usize::MAX; n];
        let mut best: Vec<usize> = Vec::new();
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            let mut members = vec![s];
            comp[s] = s;
            let mut i = 0;
            while i < members.len() {
                let u = members[i];
                i += 1;
                for &v in &self.adj[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = s;
                        members.push(v);
                    }
                }
            }
            if members.len() > best.len() {
                best = members;
            }
        }
        best.sort_unstable();
        best
    }
}

/// Mean four-point δ, raw and divided by each quadruple's largest pairwise distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub mean_delta: f64,
    pub mean_normalized_delta: f64,
    pub quadruples: u64,
    pub nodes: usize,
}

/// `(max − median)/2` of the three pairings, and the largest pairwise distance.
pub fn four_point_delta(d: [[u32; 4]; 4]) -> (f64, f64) {
    let mut s = [
        (d[0][1] + d[2][3]) as f64,
        (d[0][2] + d[1][3]) as f64,
        (d[0][3] + d[1][2]) as f64,
    ];
    s.sort_by(f64::total_cmp);
    let max_d = d.iter().flatten().copied().max().unwrap_or(0) as f64;
    ((s[2] - s[1]) / 2.0, max_d)
}

struct Accum {
    sum: f64,
    sum_norm: f64,
    count: u64,
}

impl Accum {
    fn new() -> Self {
        Self { sum: 0.0, sum_norm: 0.0, count: 0 }
    }

    fn add(&mut self, d: [[u32; 4]; 4]) {
        let (delta, diam) = four_point_delta(d);
        self.sum += delta;
        if diam > 0.0 {
            self.sum_norm += delta / diam;
        }
        self.count += 1;
    }

    fn report(&self, nodes: usize) -> DeltaReport {
        let c = self.count.max(1) as f64;
        DeltaReport {
            mean_delta: self.sum / c,
            mean_normalized_delta: self.sum_norm / c,
            quadruples: self.count,
            nodes,
        }
    }
}

/// Above this component size distances are computed per quadruple.
const ALL_PAIRS_LIMIT: usize = 4096;

/// δ averaged over `n_quadruples` uniformly drawn 4-subsets of the largest component.
pub fn delta_hyperbolicity<R: Rng + ?Sized>(graph: &Graph, n_quadruples: u64, rng: &mut R) -> Result<DeltaReport> {
    let comp = graph.largest_component();
    let n = comp.len();
    if n < 4 {
        return Err(Error::invalid(format!("δ needs at least 4 connected nodes, found {n}")));
    }
    let mut acc = Accum::new();
    if n <= ALL_PAIRS_LIMIT {
        let table: Vec<Vec<u32>> = comp
            .iter()
            .map(|&u| {
                let full = graph.bfs(u);
                comp.iter().map(|&v| full[v]).collect()
            })
            .collect();
        for _ in 0..n_quadruples {
            let q = rand::seq::index::sample(rng, n, 4).into_vec();
            acc.add(std::array::from_fn(|i| std::array::from_fn(|j| table[q[i]][q[j]])));
        }
    } else {
        for _ in 0..n_quadruples {
            let q: Vec<usize> = rand::seq::index::sample(rng, n, 4).into_iter().map(|i| comp[i]).collect();
            let rows: Vec<Vec<u32>> = q[..3].iter().map(|&u| graph.bfs(u)).collect();
            let mut d = [[0u32; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    d[i][j] = if i == j {
                        0
                    } else if i < 3 {
                        rows[i][q[j]]
                    } else {
                        rows[j][q[i]]
                    };
                }
            }
            acc.add(d);
        }
    }
    Ok(acc.report(n))
}

/// δ averaged over every 4-subset of the largest component.
pub fn delta_hyperbolicity_exact(graph: &Graph) -> Result<DeltaReport> {
    let comp = graph.largest_component();
    let n = comp.len();
    if n < 4 {
        return Err(Error::invalid(format!("δ needs at least 4 connected nodes, found {n}")));
    }
    let table: Vec<Vec<u32>> = comp
        .iter()
        .map(|&u| {
            let full = graph.bfs(u);
            comp.iter().map(|&v| full[v]).collect()
        })
        .collect();
    let mut acc = Accum::new();
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                for d in c + 1..n {
                    let q = [a, b, c, d];
                    acc.add(std::array::from_fn(|i| std::array::from_fn(|j| table[q[i]][q[j]])));
                }
            }
        }
    }
    Ok(acc.report(n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelScheme {
    /// Each node owns a pseudo-word; its label is the words on the root path.
    PathWords,
    /// A single unique pseudo-word per node.
    Word,
}

impl FromStr for LabelScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "path-words" => Ok(LabelScheme::PathWords),
            "word" => Ok(LabelScheme::Word),
            other => Err(Error::invalid(format!("unknown label scheme {other:?}"))),
        }
    }
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Distinct pronounceable word for every index.
pub fn pseudo_word(mut i: usize) -> String {
    let base = ONSETS.len() * VOWELS.len();
    let mut out = String::new();
    loop {
        let s = i % base;
        out.push_str(ONSETS[s / VOWELS.len()]);
        out.push_str(VOWELS[s % VOWELS.len()]);
        i /= base;
        if i == 0 {
            break;
        }
        i -= 1;
    }
    out
}

/// Parameters of [`generate_synthetic_tree`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Upper bound on children per internal node.
    pub branching: usize,
    /// Lower bound on children per internal node.
    pub min_branching: usize,
    /// Depth of every leaf (root at depth 0).
    pub depth: usize,
    pub label_scheme: LabelScheme,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(branching: usize, depth: usize, seed: u64) -> Self {
        Self {
            branching,
            min_branching: 1,
            depth,
            label_scheme: LabelScheme::PathWords,
            seed,
        }
    }
}

/// Random tree where each internal node has a uniform number of children in
/// `[min_branching, branching]`. Node ids are `n0, n1, …` in breadth-first order.
pub fn generate_synthetic_tree(cfg: &SynthConfig) -> Result<Taxonomy> {
    if cfg.branching < 2 || cfg.depth < 2 {
        return Err(Error::invalid("synthetic trees need branching ≥ 2 and depth ≥ 2"));
    }
    if cfg.min_branching == 0 || cfg.min_branching > cfg.branching {
        return Err(Error::invalid("min_branching must be in [1, branching]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut parent: Vec<Option<usize>> = vec![None];
    let mut level = vec![0usize];
    for _ in 0..cfg.depth {
        let mut next = Vec::new();
        for &u in &level {
            let k = rng.random_range(cfg.min_branching..=cfg.branching);
            for _ in 0..k {
                next.push(parent.len());
                parent.push(Some(u));
            }
        }
        level = next;
    }
    let n = parent.len();
    let mut words: Vec<usize> = (0..n).collect();
    words.shuffle(&mut rng);
    let mut labels: Vec<String> = Vec::with_capacity(n);
    for u in 0..n {
        let own = pseudo_word(words[u]);
        let label = match (cfg.label_scheme, parent[u]) {
            (LabelScheme::PathWords, Some(p)) => format!("{} {own}", labels[p]),
            _ => own,
        };
        labels.push(label);
    }
    let ids: Vec<String> = (0..n).map(|u| format!("n{u}")).collect();
    let index = ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
    let edges = (0..n).filter_map(|u| parent[u].map(|p| (u, p))).collect();
    Taxonomy::from_indices(ids, labels, index, edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tax(n: usize, edges: &[(usize, usize)]) -> Result<Taxonomy> {
        Taxonomy::new(
            (0..n).map(|i| (format!("e{i}"), format!("label {i}"))).collect(),
            edges.iter().map(|&(c, p)| (format!("e{c}"), format!("e{p}"))).collect(),
        )
    }

    /// Exhaustive path enumeration: shortest hops over every simple upward path.
    fn brute_closure(n: usize, edges: &[(usize, usize)]) -> HashMap<(usize, usize), u32> {
        fn walk(u: usize, len: u32, start: usize, edges: &[(usize, usize)], out: &mut HashMap<(usize, usize), u32>) {
            for &(c, p) in edges {
                if c == u {
                    let e = out.entry((start, p)).or_insert(u32::MAX);
                    *e = (*e).min(len + 1);
                    walk(p, len + 1, start, edges, out);
                }
            }
        }
        let mut out = HashMap::new();
        for s in 0..n {
            walk(s, 0, s, edges, &mut out);
        }
        out
    }

    #[test]
    fn chain_examples() {
        let t = tax(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(t.edges().len(), 2);
        assert_eq!(
            t.transitive_closure(),
            vec![Subsumption { child: 0, ancestor: 2, hops: 2 }]
        );
        assert_eq!(t.hop_distance(0, 1), Some(1));
        assert_eq!(t.hop_distance(0, 2), Some(2));
        assert_eq!(t.hop_distance(2, 0), None);
        assert_eq!(t.depth(0), 2);
        assert_eq!(t.depth(2), 0);
    }

    #[test]
    fn duplicates_cycles_and_unknown_ids() {
        assert_eq!(tax(3, &[(0, 1), (0, 1), (1, 2)]).unwrap().edges().len(), 2);
        match tax(3, &[(0, 1), (1, 2), (2, 0)]) {
            Err(Error::Cycle { .. }) => {}
            other => panic!("expected a cycle error, got {other:?}"),
        }
        assert!(matches!(tax(2, &[(1, 1)]), Err(Error::Cycle { .. })));
        let r = Taxonomy::new(vec![("a".into(), "a".into())], vec![("a".into(), "zz".into())]);
        assert!(matches!(r, Err(Error::UnknownEntity(id)) if id == "zz"));
    }

    #[test]
    fn binary_tree_closure_matches_enumeration() {
        // complete binary tree of depth 3: 15 nodes
        let edges: Vec<(usize, usize)> = (1..15).map(|c| (c, (c - 1) / 2)).collect();
        let t = tax(15, &edges).unwrap();
        let brute = brute_closure(15, &edges);
        let closure = t.transitive_closure();
        // 4 grandchildren·... : depth-2 nodes reach the root (4), depth-3 nodes reach two ancestors (16)
        assert_eq!(closure.len(), 4 + 16);
        for s in &closure {
            assert_eq!(brute[&(s.child, s.ancestor)], s.hops);
        }
        assert_eq!(brute.values().filter(|&&h| h >= 2).count(), closure.len());
    }

    fn random_dag(n: usize, p: f64, seed: u64) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for c in 1..n {
            for q in 0..c {
                if rng.random::<f64>() < p {
                    edges.push((c, q));
                }
            }
        }
        edges
    }

    #[test]
    fn closure_matches_dfs_on_random_dags() {
        for seed in 0..5 {
            let n = 60;
            let edges = random_dag(n, 0.04, seed);
            let t = tax(n, &edges).unwrap();
            let brute = brute_closure(n, &edges);
            let all = t.all_subsumptions();
            assert_eq!(all.len(), brute.len());
            for s in all {
                assert_eq!(brute[&(s.child, s.ancestor)], s.hops);
            }
        }
    }

    #[test]
    fn closure_on_200_nodes_matches_bfs_reachability() {
        let n = 200;
        let edges = random_dag(n, 0.015, 99);
        let t = tax(n, &edges).unwrap();
        let mut parents = vec![Vec::new(); n];
        for &(c, p) in &edges {
            parents[c].push(p);
        }
        for u in 0..n {
            // independent BFS over the raw edge list
            let mut dist = vec![u32::MAX; n];
            dist[u] = 0;
            let mut q = VecDeque::from([u]);
            while let Some(x) = q.pop_front() {
                for &(c, p) in &edges {
                    if c == x && dist[p] == u32::MAX {
                        dist[p] = dist[x] + 1;
                        q.push_back(p);
                    }
                }
            }
            for v in 0..n {
                let expect = (dist[v] != u32::MAX && v != u).then_some(dist[v]);
                assert_eq!(t.ancestors(u).get(&v).copied(), expect);
            }
        }
    }

    #[test]
    fn closure_and_direct_are_disjoint() {
        let edges = random_dag(40, 0.1, 3);
        let t = tax(40, &edges).unwrap();
        let e: HashSet<(usize, usize)> = t.edges().iter().copied().collect();
        for s in t.transitive_closure() {
            assert!(!e.contains(&(s.child, s.ancestor)));
        }
    }

    #[test]
    fn load_and_save_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (ep, gp) = (dir.path().join("entities.tsv"), dir.path().join("edges.tsv"));
        fs::write(&ep, "# comment\na\tAnimal\nb\tDog\nc\tPuppy\n").unwrap();
        fs::write(&gp, "b\ta\nc\tb\nc\tb\n").unwrap();
        let t = load_taxonomy(&ep, &gp).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.edges().len(), 2);
        assert_eq!(t.label(t.node("c").unwrap()), "Puppy");
        let (ep2, gp2) = (dir.path().join("e2.tsv"), dir.path().join("g2.tsv"));
        t.save(&ep2, &gp2).unwrap();
        let t2 = load_taxonomy(&ep2, &gp2).unwrap();
        assert_eq!(t2.edges(), t.edges());
        fs::write(&gp, "b\ta\textra\n").unwrap();
        assert!(matches!(load_taxonomy(&ep, &gp), Err(Error::Parse { line: 1, .. })));
    }

    fn star(k: usize) -> Taxonomy {
        let edges: Vec<(usize, usize)> = (1..=k).map(|c| (c, 0)).collect();
        tax(k + 1, &edges).unwrap()
    }

    #[test]
    fn star_negatives_are_siblings() {
        let t = star(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for tr in sample_triplets(&t, 500, 0.5, &mut rng).unwrap() {
            assert_eq!(tr.positive, 0);
            assert!(tr.negative != 0 && tr.negative != tr.anchor);
        }
    }

    fn assert_triplet_ok(t: &Taxonomy, tr: &Triplet) {
        assert!(t.hop_distance(tr.anchor, tr.positive).is_some_and(|h| h >= 1));
        assert_ne!(tr.anchor, tr.negative);
        assert!(t.hop_distance(tr.anchor, tr.negative).is_none());
    }

    #[test]
    fn triplets_satisfy_invariants() {
        let t = generate_synthetic_tree(&SynthConfig::new(3, 5, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for tr in sample_triplets(&t, 100_000, 0.5, &mut rng).unwrap() {
            assert_triplet_ok(&t, &tr);
        }
        let edges = random_dag(50, 0.08, 8);
        let d = tax(50, &edges).unwrap();
        for tr in sample_triplets(&d, 20_000, 0.7, &mut rng).unwrap() {
            assert_triplet_ok(&d, &tr);
        }
    }

    #[test]
    fn direct_parents_drawn_twice_as_often() {
        // chain a→b→c: anchor a has b (1 hop, weight 2) and c (2 hops, weight 1)
        let t = tax(4, &[(0, 1), (1, 2), (3, 2)]).unwrap();
        let pool = vec![
            Subsumption { child: 0, ancestor: 1, hops: 1 },
            Subsumption { child: 0, ancestor: 2, hops: 2 },
        ];
        let s = TripletSampler::new(&t, &pool).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 30_000;
        let direct = (0..n).filter(|_| s.sample(0.0, &mut rng).positive == 1).count();
        let frac = direct as f64 / n as f64;
        assert!((frac - 2.0 / 3.0).abs() < 0.02, "{frac}");
    }

    #[test]
    fn hard_negatives_come_from_the_cousin_subtree() {
        // root 0 with subtrees 1 and 2, each with two children and four grandchildren
        let mut edges = vec![(1, 0), (2, 0)];
        let mut next = 3;
        let mut level = vec![1, 2];
        for _ in 0..2 {
            let mut nl = Vec::new();
            for &p in &level {
                for _ in 0..2 {
                    edges.push((next, p));
                    nl.push(next);
                    next += 1;
                }
            }
            level = nl;
        }
        let t = tax(next, &edges).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for tr in sample_triplets(&t, 5000, 1.0, &mut rng).unwrap() {
            let brute: Vec<usize> = (0..t.len())
                .filter(|&v| {
                    v != tr.anchor
                        && !t.related(tr.anchor, v)
                        && t.ancestors(tr.anchor).iter().any(|(&a, &h)| h <= 2 && t.hop_distance(v, a).is_some_and(|k| k <= 2))
                })
                .collect();
            if !brute.is_empty() {
                assert!(brute.contains(&tr.negative), "{tr:?} not in {brute:?}");
                let da = t.depth(tr.anchor) as i64;
                let dn = t.depth(tr.negative) as i64;
                assert!((da - dn).abs() <= 1);
            }
        }
    }

    #[test]
    fn eval_pairs_examples() {
        let t = generate_synthetic_tree(&SynthConfig { min_branching: 2, ..SynthConfig::new(3, 5, 9) }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pos: Vec<Subsumption> = t.all_subsumptions().into_iter().take(10).collect();
        let pairs = build_eval_pairs(&t, &pos, 10, &mut rng);
        assert_eq!(pairs.iter().filter(|p| p.positive).count(), 10);
        assert_eq!(pairs.iter().filter(|p| !p.positive).count(), 100);
        let mut labels: HashMap<(usize, usize), bool> = HashMap::new();
        for p in &pairs {
            if let Some(&l) = labels.get(&(p.child, p.candidate)) {
                assert_eq!(l, p.positive, "pair with both labels");
            }
            labels.insert((p.child, p.candidate), p.positive);
            if !p.positive {
                assert!(!t.related(p.child, p.candidate));
            }
        }
        let hard = pairs
            .iter()
            .filter(|p| !p.positive && t.hard_negatives(p.child).contains(&p.candidate))
            .count();
        assert!(hard >= 50, "{hard}");

        let splits = make_splits(&t, Task::Multi, [0.0, 0.5, 0.5], 1).unwrap();
        let test = build_eval_pairs(&t, &splits.test, 10, &mut rng);
        let e: HashSet<(usize, usize)> = t.edges().iter().copied().collect();
        assert!(test.iter().filter(|p| p.positive).all(|p| !e.contains(&(p.child, p.candidate)) && p.hops >= 2));
    }

    #[test]
    fn pairs_roundtrip() {
        let t = star(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = build_eval_pairs(&t, &t.all_subsumptions(), 2, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.tsv");
        save_pairs(&t, &pairs, &p).unwrap();
        assert_eq!(load_pairs(&t, &p).unwrap(), pairs);
    }

    #[test]
    fn splits_examples() {
        let t = generate_synthetic_tree(&SynthConfig::new(3, 5, 2)).unwrap();
        let a = make_splits(&t, Task::Mixed, [0.7, 0.15, 0.15], 11).unwrap();
        let b = make_splits(&t, Task::Mixed, [0.7, 0.15, 0.15], 11).unwrap();
        assert_eq!(a, b);
        let n = t.all_subsumptions().len();
        assert_eq!(a.train.len() + a.val.len() + a.test.len(), n);
        let mut all: Vec<Subsumption> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
        assert!((a.train.len() as f64 - 0.7 * n as f64).abs() <= 1.0);
        assert!((a.val.len() as f64 - 0.15 * n as f64).abs() <= 1.0);

        let m = make_splits(&t, Task::Multi, [0.7, 0.15, 0.15], 11).unwrap();
        assert_eq!(m.train.len(), t.edges().len());
        assert_eq!(m.val.len() + m.test.len(), t.transitive_closure().len());
        assert!(make_splits(&t, Task::Mixed, [0.5, 0.2, 0.2], 1).is_err());
    }

    #[test]
    fn tree_delta_is_zero() {
        let t = generate_synthetic_tree(&SynthConfig::new(3, 4, 5)).unwrap();
        let g = Graph::from_taxonomy(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = delta_hyperbolicity(&g, 20_000, &mut rng).unwrap();
        assert_eq!(r.mean_delta, 0.0);
        assert_eq!(r.mean_normalized_delta, 0.0);
        let small = generate_synthetic_tree(&SynthConfig::new(2, 3, 1)).unwrap();
        assert_eq!(delta_hyperbolicity_exact(&Graph::from_taxonomy(&small)).unwrap().mean_delta, 0.0);
    }

    #[test]
    fn four_cycle_delta_is_one() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let r = delta_hyperbolicity_exact(&g).unwrap();
        assert_eq!(r.quadruples, 1);
        assert_eq!(r.mean_delta, 1.0);
        assert_eq!(r.mean_normalized_delta, 0.5);
        assert!(delta_hyperbolicity_exact(&Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap()).is_err());
    }

    #[test]
    fn sampled_delta_tracks_exhaustive() {
        for seed in 0..3 {
            let n = 50;
            let edges: Vec<(usize, usize)> = random_dag(n, 0.07, 100 + seed);
            let g = Graph::from_edges(n, &edges).unwrap();
            let exact = delta_hyperbolicity_exact(&g).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = delta_hyperbolicity(&g, 100_000, &mut rng).unwrap();
            assert!(exact.mean_delta > 0.0);
            assert!((s.mean_delta / exact.mean_delta - 1.0).abs() < 0.05);
            assert!((s.mean_normalized_delta / exact.mean_normalized_delta - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn largest_component_is_used() {
        // a 4-cycle plus a separate edge
        let g = Graph::from_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 0), (4, 5)]).unwrap();
        assert_eq!(g.largest_component(), vec![0, 1, 2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = delta_hyperbolicity(&g, 10, &mut rng).unwrap();
        assert_eq!(r.mean_delta, 1.0);
        assert_eq!(r.nodes, 4);
    }

    #[test]
    fn synthetic_tree_examples() {
        let cfg = SynthConfig::new(2, 3, 42);
        let a = generate_synthetic_tree(&cfg).unwrap();
        let b = generate_synthetic_tree(&cfg).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.edges(), b.edges());
        assert_eq!(a.edges().len(), a.len() - 1);
        for u in 0..a.len() {
            if a.children(u).is_empty() {
                assert_eq!(a.depth(u), 3);
            }
            assert!((1..=2).contains(&a.children(u).len()) || a.depth(u) == 3);
        }
        let words: HashSet<&str> = a.labels().iter().map(|l| l.rsplit(' ').next().unwrap()).collect();
        assert_eq!(words.len(), a.len());
        let leaf = (0..a.len()).find(|&u| a.depth(u) == 3).unwrap();
        assert_eq!(a.label(leaf).split(' ').count(), 4);
        assert!(generate_synthetic_tree(&SynthConfig::new(3, 1, 0)).is_err());
        assert!(generate_synthetic_tree(&SynthConfig::new(1, 3, 0)).is_err());

        let desk = generate_synthetic_tree(&SynthConfig { min_branching: 2, ..SynthConfig::new(3, 6, 0) }).unwrap();
        assert!((250..=1100).contains(&desk.len()), "{}", desk.len());
    }

    #[test]
    fn pseudo_words_are_distinct() {
        let words: HashSet<String> = (0..20_000).map(pseudo_word).collect();
        assert_eq!(words.len(), 20_000);
        assert!(words.iter().all(|w| w.chars().all(|c| c.is_ascii_lowercase())));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn closure_sound_on_random_dags(n in 5usize..40, p in 0.02f64..0.3, seed in 0u64..1000) {
            let edges = random_dag(n, p, seed);
            let t = tax(n, &edges).unwrap();
            let brute = brute_closure(n, &edges);
            let all = t.all_subsumptions();
            prop_assert_eq!(all.len(), brute.len());
            for s in all {
                prop_assert_eq!(brute[&(s.child, s.ancestor)], s.hops);
            }
        }

        #[test]
        fn quadruple_delta_bounded(d in prop::array::uniform6(0u32..10)) {
            let m = [
                [0, d[0], d[1], d[2]],
                [d[0], 0, d[3], d[4]],
                [d[1], d[3], 0, d[5]],
                [d[2], d[4], d[5], 0],
            ];
            let (delta, diam) = four_point_delta(m);
            prop_assert!(delta >= 0.0);
            prop_assert!(delta <= diam);
        }
    }
}
