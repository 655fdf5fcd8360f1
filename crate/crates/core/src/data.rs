//! Interaction ingestion, k-core filtering and the chronological
//! leave-one-out split.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A single timestamped (user, item) event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawInteraction {
    pub user_key: String,
    pub item_key: String,
    pub timestamp: u64,
}

/// A deduplicated interaction record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractionLog {
    interactions: Vec<RawInteraction>,
    user_count: usize,
    item_count: usize,
}

impl InteractionLog {
    /// Builds a log, collapsing repeated (user, item) pairs onto the earliest
    /// timestamp. Order of first appearance is kept.
    pub fn new(interactions: Vec<RawInteraction>) -> Self {
        Self::dedup(interactions).0
    }

    fn dedup(interactions: Vec<RawInteraction>) -> (Self, usize) {
        let mut seen: HashMap<(String, String), usize> = HashMap::with_capacity(interactions.len());
        let mut kept: Vec<RawInteraction> = Vec::with_capacity(interactions.len());
        let mut duplicates = 0;
        for rec in interactions {
            match seen.get(&(rec.user_key.clone(), rec.item_key.clone())) {
                Some(&idx) => {
                    duplicates += 1;
                    if rec.timestamp < kept[idx].timestamp {
                        kept[idx].timestamp = rec.timestamp;
                    }
                }
                None => {
                    seen.insert((rec.user_key.clone(), rec.item_key.clone()), kept.len());
                    kept.push(rec);
                }
            }
        }
        (Self::from_unique(kept), duplicates)
    }

    fn from_unique(interactions: Vec<RawInteraction>) -> Self {
        let users: BTreeSet<&str> = interactions.iter().map(|r| r.user_key.as_str()).collect();
        let items: BTreeSet<&str> = interactions.iter().map(|r| r.item_key.as_str()).collect();
        let (user_count, item_count) = (users.len(), items.len());
        InteractionLog {
            interactions,
            user_count,
            item_count,
        }
    }

    pub fn interactions(&self) -> &[RawInteraction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    /// Set of (user_key, item_key) pairs.
    pub fn pair_set(&self) -> BTreeSet<(String, String)> {
        self.interactions
            .iter()
            .map(|r| (r.user_key.clone(), r.item_key.clone()))
            .collect()
    }
}

/// Column layout of an interaction file. Columns are zero-based; `delimiter`
/// of `None` splits on any run of whitespace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldSpec {
    pub user_column: usize,
    pub item_column: usize,
    pub timestamp_column: usize,
    pub delimiter: Option<char>,
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec {
            user_column: 0,
            item_column: 1,
            timestamp_column: 2,
            delimiter: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParseStats {
    pub parsed: usize,
    pub duplicates: usize,
    pub malformed: usize,
}

fn parse_line(line: &str, spec: &FieldSpec) -> Option<RawInteraction> {
    let fields: Vec<&str> = match spec.delimiter {
        None => line.split_whitespace().collect(),
        Some(d) => line.split(d).map(str::trim).collect(),
    };
    let user = fields.get(spec.user_column)?;
    let item = fields.get(spec.item_column)?;
    let ts = fields.get(spec.timestamp_column)?;
    if user.is_empty() || item.is_empty() {
        return None;
    }
    let timestamp = ts.parse::<u64>().ok()?;
    Some(RawInteraction {
        user_key: (*user).to_string(),
        item_key: (*item).to_string(),
        timestamp,
    })
}

/// Parses a line-oriented interaction stream. Blank lines are ignored; lines
/// that do not yield a user, an item and a non-negative integer timestamp are
/// counted as malformed.
pub fn parse_interactions<R: BufRead>(
    source: R,
    spec: &FieldSpec,
) -> Result<(InteractionLog, ParseStats)> {
    let mut stats = ParseStats::default();
    let mut records = Vec::new();
    for line in source.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, spec) {
            Some(rec) => {
                stats.parsed += 1;
                records.push(rec);
            }
            None => stats.malformed += 1,
        }
    }
    if records.is_empty() {
        return Err(Error::NoValidLines {
            malformed: stats.malformed,
        });
    }
    let (log, duplicates) = InteractionLog::dedup(records);
    stats.duplicates = duplicates;
    Ok((log, stats))
}

pub fn read_interactions(path: &Path, spec: &FieldSpec) -> Result<(InteractionLog, ParseStats)> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {}", path.display(), e),
        ))
    })?;
    parse_interactions(BufReader::new(file), spec)
}

/// Which side of the bipartite graph the degree threshold is enforced on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CoreMode {
    /// Users and items both peeled until every survivor has degree >= k.
    #[default]
    Joint,
    /// Only users are thresholded; items keep whatever degree they have.
    UserOnly,
}

/// Peels low-degree nodes until the fixpoint. The surviving interactions keep
/// their original order.
pub fn k_core_filter(log: &InteractionLog, k: usize, mode: CoreMode) -> Result<InteractionLog> {
    if k == 0 {
        return Err(Error::InvalidConfig("k-core threshold must be >= 1".into()));
    }
    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let mut edges = Vec::with_capacity(log.len());
    for rec in log.interactions() {
        let n = user_ids.len();
        let u = *user_ids.entry(rec.user_key.as_str()).or_insert(n);
        let n = item_ids.len();
        let i = *item_ids.entry(rec.item_key.as_str()).or_insert(n);
        edges.push((u, i));
    }
    let mut user_edges = vec![Vec::new(); user_ids.len()];
    let mut item_edges = vec![Vec::new(); item_ids.len()];
    for (e, &(u, i)) in edges.iter().enumerate() {
        user_edges[u].push(e);
        item_edges[i].push(e);
    }
    let mut user_deg: Vec<usize> = user_edges.iter().map(Vec::len).collect();
    let mut item_deg: Vec<usize> = item_edges.iter().map(Vec::len).collect();
    let mut edge_alive = vec![true; edges.len()];
    let mut user_alive = vec![true; user_deg.len()];
    let mut item_alive = vec![true; item_deg.len()];

    // (is_user, id)
    let mut queue: VecDeque<(bool, usize)> = VecDeque::new();
    for (u, &d) in user_deg.iter().enumerate() {
        if d < k {
            queue.push_back((true, u));
        }
    }
    if mode == CoreMode::Joint {
        for (i, &d) in item_deg.iter().enumerate() {
            if d < k {
                queue.push_back((false, i));
            }
        }
    }

    while let Some((is_user, id)) = queue.pop_front() {
        if is_user {
            if !user_alive[id] {
                continue;
            }
            user_alive[id] = false;
            for &e in &user_edges[id] {
                if !edge_alive[e] {
                    continue;
                }
                edge_alive[e] = false;
                let i = edges[e].1;
                item_deg[i] -= 1;
                if mode == CoreMode::Joint && item_alive[i] && item_deg[i] + 1 == k {
                    queue.push_back((false, i));
                }
            }
        } else {
            if !item_alive[id] {
                continue;
            }
            item_alive[id] = false;
            for &e in &item_edges[id] {
                if !edge_alive[e] {
                    continue;
                }
                edge_alive[e] = false;
                let u = edges[e].0;
                user_deg[u] -= 1;
                if user_alive[u] && user_deg[u] + 1 == k {
                    queue.push_back((true, u));
                }
            }
        }
    }

    let kept: Vec<RawInteraction> = log
        .interactions()
        .iter()
        .zip(&edge_alive)
        .filter(|(_, &alive)| alive)
        .map(|(r, _)| r.clone())
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyCore { k });
    }
    Ok(InteractionLog::from_unique(kept))
}

/// Contiguously indexed train/validation/test partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    n_users: usize,
    n_items: usize,
    train: Vec<Vec<u32>>,
    validation: Vec<u32>,
    test: Vec<u32>,
    user_keys: Vec<String>,
    item_keys: Vec<String>,
    // sorted copy of `train` for membership queries
    train_sorted: Vec<Vec<u32>>,
}

impl SplitDataset {
    /// Assembles a dataset from dense ids, checking ranges and per-user
    /// disjointness. Keys default to the decimal id when not supplied.
    pub fn from_parts(
        n_items: usize,
        train: Vec<Vec<u32>>,
        validation: Vec<u32>,
        test: Vec<u32>,
        user_keys: Option<Vec<String>>,
        item_keys: Option<Vec<String>>,
    ) -> Result<Self> {
        let n_users = train.len();
        if validation.len() != n_users || test.len() != n_users {
            return Err(Error::DimensionMismatch(format!(
                "{} train users, {} validation, {} test",
                n_users,
                validation.len(),
                test.len()
            )));
        }
        let user_keys = user_keys.unwrap_or_else(|| (0..n_users).map(|u| u.to_string()).collect());
        let item_keys = item_keys.unwrap_or_else(|| (0..n_items).map(|i| i.to_string()).collect());
        if user_keys.len() != n_users || item_keys.len() != n_items {
            return Err(Error::DimensionMismatch("key map sizes".into()));
        }
        let mut train_sorted = Vec::with_capacity(n_users);
        for u in 0..n_users {
            let mut sorted = train[u].clone();
            sorted.sort_unstable();
            let before = sorted.len();
            sorted.dedup();
            if sorted.len() != before {
                return Err(Error::InvalidConfig(format!("user {u} has repeated train items")));
            }
            for &i in sorted.iter().chain([&validation[u], &test[u]]) {
                if i as usize >= n_items {
                    return Err(Error::OutOfRange(format!("item {i} for user {u}")));
                }
            }
            if validation[u] == test[u]
                || sorted.binary_search(&validation[u]).is_ok()
                || sorted.binary_search(&test[u]).is_ok()
            {
                return Err(Error::InvalidConfig(format!(
                    "user {u}: train, validation and test overlap"
                )));
            }
            train_sorted.push(sorted);
        }
        Ok(SplitDataset {
            n_users,
            n_items,
            train,
            validation,
            test,
            user_keys,
            item_keys,
            train_sorted,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Train items of `user` in chronological order.
    pub fn train(&self, user: usize) -> &[u32] {
        &self.train[user]
    }

    /// Train items of `user` in ascending id order.
    pub fn train_sorted(&self, user: usize) -> &[u32] {
        &self.train_sorted[user]
    }

    pub fn is_train_positive(&self, user: usize, item: u32) -> bool {
        self.train_sorted[user].binary_search(&item).is_ok()
    }

    pub fn validation(&self, user: usize) -> u32 {
        self.validation[user]
    }

    pub fn test(&self, user: usize) -> u32 {
        self.test[user]
    }

    pub fn train_len(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    /// All train (user, item) pairs, user-major, chronological within a user.
    pub fn train_pairs(&self) -> Vec<(u32, u32)> {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u as u32, i)))
            .collect()
    }

    pub fn user_key(&self, user: usize) -> &str {
        &self.user_keys[user]
    }

    pub fn item_key(&self, item: usize) -> &str {
        &self.item_keys[item]
    }

    pub fn user_keys(&self) -> &[String] {
        &self.user_keys
    }

    pub fn item_keys(&self) -> &[String] {
        &self.item_keys
    }

    /// Train degree of every item.
    pub fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_items];
        for items in &self.train {
            for &i in items {
                deg[i as usize] += 1;
            }
        }
        deg
    }

    /// Union of the three partitions as key pairs.
    pub fn merged_pairs(&self) -> BTreeSet<(String, String)> {
        let mut out = BTreeSet::new();
        for u in 0..self.n_users {
            let uk = &self.user_keys[u];
            for &i in self.train[u]
                .iter()
                .chain([&self.validation[u], &self.test[u]])
            {
                out.insert((uk.clone(), self.item_keys[i as usize].clone()));
            }
        }
        out
    }

    /// Writes `train.txt`, `val.txt`, `test.txt` (dense "user item" lines) and
    /// the `user_ids.txt` / `item_ids.txt` key maps ("key<TAB>id").
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut train = BufWriter::new(File::create(dir.join("train.txt"))?);
        for (u, items) in self.train.iter().enumerate() {
            for i in items {
                writeln!(train, "{u} {i}")?;
            }
        }
        train.flush()?;
        for (name, held) in [("val.txt", &self.validation), ("test.txt", &self.test)] {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            for (u, i) in held.iter().enumerate() {
                writeln!(w, "{u} {i}")?;
            }
            w.flush()?;
        }
        for (name, keys) in [("user_ids.txt", &self.user_keys), ("item_ids.txt", &self.item_keys)] {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            for (id, key) in keys.iter().enumerate() {
                writeln!(w, "{key}\t{id}")?;
            }
            w.flush()?;
        }
        Ok(())
    }

    /// Reads a directory produced by [`SplitDataset::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let user_keys = read_key_map(&dir.join("user_ids.txt"))?;
        let item_keys = read_key_map(&dir.join("item_ids.txt"))?;
        let n_users = user_keys.len();
        let mut train = vec![Vec::new(); n_users];
        for (u, i) in read_pairs(&dir.join("train.txt"), n_users)? {
            train[u].push(i);
        }
        let mut held = Vec::new();
        for name in ["val.txt", "test.txt"] {
            let path = dir.join(name);
            let mut slot: Vec<Option<u32>> = vec![None; n_users];
            for (u, i) in read_pairs(&path, n_users)? {
                if slot[u].replace(i).is_some() {
                    return Err(format_err(&path, format!("user {u} listed twice")));
                }
            }
            let ids = slot
                .into_iter()
                .enumerate()
                .map(|(u, i)| i.ok_or_else(|| format_err(&path, format!("user {u} missing"))))
                .collect::<Result<Vec<u32>>>()?;
            held.push(ids);
        }
        let test = held.pop().unwrap();
        let validation = held.pop().unwrap();
        Self::from_parts(
            item_keys.len(),
            train,
            validation,
            test,
            Some(user_keys),
            Some(item_keys),
        )
    }
}

fn format_err(path: &Path, reason: String) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason,
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {}", path.display(), e),
        ))
    })
}

fn read_key_map(path: &Path) -> Result<Vec<String>> {
    let mut keys: Vec<Option<String>> = Vec::new();
    for (lineno, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (key, id) = line
            .rsplit_once('\t')
            .ok_or_else(|| format_err(path, format!("line {}: expected key<TAB>id", lineno + 1)))?;
        let id: usize = id
            .parse()
            .map_err(|_| format_err(path, format!("line {}: bad id `{id}`", lineno + 1)))?;
        if id >= keys.len() {
            keys.resize(id + 1, None);
        }
        if keys[id].replace(key.to_string()).is_some() {
            return Err(format_err(path, format!("id {id} assigned twice")));
        }
    }
    keys.into_iter()
        .enumerate()
        .map(|(id, k)| k.ok_or_else(|| format_err(path, format!("id {id} missing"))))
        .collect()
}

fn read_pairs(path: &Path, n_users: usize) -> Result<Vec<(usize, u32)>> {
    let mut out = Vec::new();
    for (lineno, line) in open(path)?.lines().enumerate() {
        let line = line?;
        let mut it = line.split_whitespace();
        let (u, i) = match (it.next(), it.next()) {
            (None, _) => continue,
            (Some(u), Some(i)) => (u, i),
            _ => return Err(format_err(path, format!("line {}: expected `user item`", lineno + 1))),
        };
        let u: usize = u
            .parse()
            .map_err(|_| format_err(path, format!("line {}: bad user id", lineno + 1)))?;
        let i: u32 = i
            .parse()
            .map_err(|_| format_err(path, format!("line {}: bad item id", lineno + 1)))?;
        if u >= n_users {
            return Err(format_err(path, format!("line {}: user {u} out of range", lineno + 1)));
        }
        out.push((u, i));
    }
    Ok(out)
}

/// Chronological leave-one-out split: the last interaction of every user is
/// the test item, the second-last the validation item. Ties in timestamp are
/// broken by item key. Users and items are re-indexed in sorted key order.
pub fn leave_one_out_split(log: &InteractionLog) -> Result<SplitDataset> {
    let mut per_user: HashMap<&str, Vec<(u64, &str)>> = HashMap::new();
    for rec in log.interactions() {
        per_user
            .entry(rec.user_key.as_str())
            .or_default()
            .push((rec.timestamp, rec.item_key.as_str()));
    }
    let mut user_keys: Vec<&str> = per_user.keys().copied().collect();
    user_keys.sort_unstable();
    let item_keys: Vec<&str> = log
        .interactions()
        .iter()
        .map(|r| r.item_key.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let item_index: HashMap<&str, u32> = item_keys
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, i as u32))
        .collect();

    let mut train = Vec::with_capacity(user_keys.len());
    let mut validation = Vec::with_capacity(user_keys.len());
    let mut test = Vec::with_capacity(user_keys.len());
    for &uk in &user_keys {
        let events = per_user.get_mut(uk).unwrap();
        if events.len() < 3 {
            return Err(Error::TooFewInteractions {
                user: uk.to_string(),
                count: events.len(),
            });
        }
        events.sort_unstable();
        let mut ids: Vec<u32> = events.iter().map(|(_, k)| item_index[k]).collect();
        test.push(ids.pop().unwrap());
        validation.push(ids.pop().unwrap());
        train.push(ids);
    }
    SplitDataset::from_parts(
        item_keys.len(),
        train,
        validation,
        test,
        Some(user_keys.into_iter().map(String::from).collect()),
        Some(item_keys.into_iter().map(String::from).collect()),
    )
}
