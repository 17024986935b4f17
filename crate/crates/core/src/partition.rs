//! Splitting a dataset across clients: IID, Dirichlet label skew, and
//! class-subset shards.

use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::MomentumBuffer;
use crate::seed::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Iid,
    /// Per-class client proportions drawn from `Dirichlet(alpha · 1_M)`.
    Dirichlet {
        alpha: f64,
    },
    /// Every client holds `ceil(class_fraction · K)` whole classes.
    Shards {
        class_fraction: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub scheme: Scheme,
    pub clients: usize,
    pub seed: u64,
}

/// One client's slice of the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    /// Row indices into the parent dataset.
    pub indices: Vec<usize>,
    /// Root of this client's mini-batch streams.
    pub seed: u64,
    /// Persistent velocity for locally maintained momentum.
    pub momentum: Option<MomentumBuffer>,
}

impl ClientShard {
    pub fn new(client_id: usize, indices: Vec<usize>, master_seed: u64) -> Self {
        Self {
            client_id,
            indices,
            seed: seed::derive_seed(master_seed, Purpose::Batches, client_id as u64, 0),
            momentum: None,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `|D_m| / Σ_j |D_j|` for every shard.
pub fn shard_weights(shards: &[ClientShard]) -> Vec<f64> {
    let total: usize = shards.iter().map(ClientShard::len).sum();
    shards.iter().map(|s| s.len() as f64 / total as f64).collect()
}

pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    match spec.scheme {
        Scheme::Iid => partition_iid(dataset, spec.clients, spec.seed),
        Scheme::Dirichlet { alpha } => partition_dirichlet(dataset, spec.clients, alpha, spec.seed),
        Scheme::Shards { class_fraction } => partition_shards(dataset, spec.clients, class_fraction, spec.seed),
    }
}

/// Partitions and wraps the index lists into shards whose batch streams are
/// keyed by `master_seed`.
pub fn make_shards(dataset: &Dataset, spec: &PartitionSpec, master_seed: u64) -> Result<Vec<ClientShard>> {
    Ok(partition(dataset, spec)?
        .into_iter()
        .enumerate()
        .map(|(m, idx)| ClientShard::new(m, idx, master_seed))
        .collect())
}

fn check_clients(dataset: &Dataset, clients: usize) -> Result<()> {
    if clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if clients > dataset.len() {
        return Err(Error::Partition(format!(
            "{clients} clients but only {} examples",
            dataset.len()
        )));
    }
    Ok(())
}

/// Random permutation cut into `clients` pieces whose sizes differ by at most one.
pub fn partition_iid(dataset: &Dataset, clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_clients(dataset, clients)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seed::rng(seed));
    let (base, extra) = (dataset.len() / clients, dataset.len() % clients);
    let mut shards = Vec::with_capacity(clients);
    let mut start = 0;
    for m in 0..clients {
        let size = base + usize::from(m < extra);
        shards.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(shards)
}

fn class_members(dataset: &Dataset) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); dataset.class_count];
    for (i, &l) in dataset.labels.iter().enumerate() {
        members[l].push(i);
    }
    members
}

/// Normalized Gamma draws; a draw that underflows to all zeros falls back
/// to a random one-hot vector (the `alpha → 0` limit).
fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = p.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        p.iter_mut().for_each(|v| *v /= sum);
    } else {
        p.iter_mut().for_each(|v| *v = 0.0);
        p[rng.random_range(0..k)] = 1.0;
    }
    p
}

/// For each class, draws client proportions from `Dirichlet(alpha · 1_M)` and
/// assigns every example of that class to a client sampled from them. Empty
/// shards are repaired by moving one example from the largest shard.
pub fn partition_dirichlet(dataset: &Dataset, clients: usize, alpha: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Partition(format!(
            "Dirichlet alpha must be positive, got {alpha}"
        )));
    }
    check_clients(dataset, clients)?;
    let mut rng = seed::rng(seed);
    let mut shards = vec![Vec::new(); clients];
    for members in class_members(dataset) {
        if members.is_empty() {
            continue;
        }
        if clients == 1 {
            shards[0].extend(members);
            continue;
        }
        let p = sample_dirichlet(alpha, clients, &mut rng);
        let pick = WeightedIndex::new(&p).map_err(|e| Error::Partition(e.to_string()))?;
        for i in members {
            shards[pick.sample(&mut rng)].push(i);
        }
    }
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        // Largest shard, lowest id on ties.
        let largest = (0..clients)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = shards[largest].pop().expect("largest shard is non-empty");
        shards[empty].push(moved);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Gives each client `ceil(class_fraction · K)` classes and splits every
/// class's examples evenly among the clients holding it.
///
/// Classes are dealt round-robin over a seeded class permutation, so each
/// class is held by `floor` or `ceil` of `M·c/K` clients.
pub fn partition_shards(dataset: &Dataset, clients: usize, class_fraction: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if !(class_fraction > 0.0 && class_fraction <= 1.0) {
        return Err(Error::Partition(format!(
            "class fraction must lie in (0, 1], got {class_fraction}"
        )));
    }
    check_clients(dataset, clients)?;
    let k = dataset.class_count;
    let per_client = classes_per_client(class_fraction, k);
    if clients * per_client < k {
        return Err(Error::Partition(format!(
            "infeasible: {clients} clients x {per_client} classes cannot cover {k} classes"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut class_order: Vec<usize> = (0..k).collect();
    class_order.shuffle(&mut rng);

    let mut holders = vec![Vec::new(); k];
    for m in 0..clients {
        for j in 0..per_client {
            holders[class_order[(m * per_client + j) % k]].push(m);
        }
    }

    let mut shards = vec![Vec::new(); clients];
    for (class, mut members) in class_members(dataset).into_iter().enumerate() {
        let h = &holders[class];
        if members.len() < h.len() {
            return Err(Error::Partition(format!(
                "infeasible: class {class} has {} examples for {} clients",
                members.len(),
                h.len()
            )));
        }
        members.shuffle(&mut rng);
        let (base, extra) = (members.len() / h.len(), members.len() % h.len());
        let mut start = 0;
        for (slot, &m) in h.iter().enumerate() {
            let size = base + usize::from(slot < extra);
            shards[m].extend_from_slice(&members[start..start + size]);
            start += size;
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// `ceil(fraction · K)`, guarding against `0.2 · 10 = 2.0000000000000004`.
pub fn classes_per_client(class_fraction: f64, classes: usize) -> usize {
    let c = crate::fed::ceil_fraction(class_fraction, classes);
    c.clamp(1, classes.max(1))
}

/// Writes `client_id,example_index` rows.
pub fn write_manifest<W: Write>(shards: &[Vec<usize>], writer: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["client_id", "example_index"])?;
    for (m, idx) in shards.iter().enumerate() {
        for i in idx {
            w.write_record([m.to_string(), i.to_string()])?;
        }
    }
    w.flush()
}

pub fn save_manifest(shards: &[Vec<usize>], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest(shards, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Reads a manifest back into per-client index lists.
pub fn read_manifest<R: Read>(reader: R) -> Result<Vec<Vec<usize>>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let err = |line: u64, message: String| Error::Parse {
        path: "manifest".into(),
        line,
        column: 1,
        message,
    };
    let headers = rdr.headers().map_err(|e| err(1, e.to_string()))?;
    if headers != vec!["client_id", "example_index"] {
        return Err(err(1, "expected header client_id,example_index".into()));
    }
    let mut shards: Vec<Vec<usize>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| err(line, format!("bad integer `{s}`")))
        };
        let m = parse(&rec[0])?;
        let i = parse(&rec[1])?;
        if m > 1_000_000 {
            return Err(err(line, format!("client id {m} too large")));
        }
        if shards.len() <= m {
            shards.resize(m + 1, Vec::new());
        }
        shards[m].push(i);
    }
    Ok(shards)
}
