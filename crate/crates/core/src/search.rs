//! Embedding store and kNN retrieval: exact L1 flat scan and an inverted-file
//! index whose coarse quantizer is k-means on L2. Candidate re-ranking is
//! always exact L1.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::binfmt::{check_magic, get_f32s, get_str, get_u32, get_u64, put_f32s, put_str, put_u32, put_u64};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"TRJSEMBD";
pub const EMBEDDING_VERSION: u32 = 1;
pub const IVF_MAGIC: &[u8; 8] = b"TRJSIVFX";
pub const IVF_VERSION: u32 = 1;

/// Row-major `count x d` matrix of embeddings keyed by unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("embedding dimension must be positive"));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::Shape {
                op: "embedding store",
                lhs: vec![ids.len(), dim],
                rhs: vec![data.len()],
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::input(format!("duplicate embedding id '{id}'")));
            }
        }
        Ok(EmbeddingStore { ids, dim, data })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::input("embedding rows have unequal length"));
        }
        Self::new(ids, dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(EMBEDDING_MAGIC)?;
        put_u32(w, EMBEDDING_VERSION)?;
        put_u64(w, self.ids.len() as u64)?;
        put_u32(w, self.dim as u32)?;
        for id in &self.ids {
            put_str(w, id)?;
        }
        put_f32s(w, &self.data)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        check_magic(r, EMBEDDING_MAGIC, "embedding")?;
        let version = get_u32(r)?;
        if version != EMBEDDING_VERSION {
            return Err(Error::Version {
                found: version,
                expected: EMBEDDING_VERSION,
            });
        }
        let count = get_u64(r)? as usize;
        let dim = get_u32(r)? as usize;
        let mut ids = Vec::new();
        for _ in 0..count {
            ids.push(get_str(r)?);
        }
        let n = count
            .checked_mul(dim)
            .ok_or_else(|| Error::Format("embedding matrix is too large".into()))?;
        let data = get_f32s(r, n)?;
        Self::new(ids, dim, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path.as_ref())?))
    }
}

pub fn l1(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum()
}

fn l2_sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult {
    pub hits: Vec<Hit>,
    /// Set when `k` reached the number of searchable rows, so every
    /// candidate was returned and `k` no longer selects anything.
    pub clamped: bool,
}

fn check_query(store: &EmbeddingStore, query: &[f32], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::input("k must be at least 1"));
    }
    if store.is_empty() {
        return Err(Error::input("embedding store is empty"));
    }
    if query.len() != store.dim {
        return Err(Error::Shape {
            op: "knn query",
            lhs: vec![query.len()],
            rhs: vec![store.dim],
        });
    }
    Ok(())
}

/// Exact top-k by L1 among `rows`, ties broken by ascending id.
fn rank_rows(store: &EmbeddingStore, query: &[f32], rows: &[usize], k: usize) -> Vec<Hit> {
    let mut scored: Vec<(f64, usize)> = rows.iter().map(|&i| (l1(store.row(i), query), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then_with(|| store.ids[a.1].cmp(&store.ids[b.1]));
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    scored
        .into_iter()
        .map(|(distance, i)| Hit {
            id: store.ids[i].clone(),
            distance,
        })
        .collect()
}

pub fn knn_flat(store: &EmbeddingStore, query: &[f32], k: usize) -> Result<KnnResult> {
    check_query(store, query, k)?;
    let rows: Vec<usize> = (0..store.len()).collect();
    Ok(KnnResult {
        hits: rank_rows(store, query, &rows, k),
        clamped: k >= store.len(),
    })
}

/// Inverted-file index: coarse centroids and a posting list per centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    pub dim: usize,
    /// `k_c x dim`, row-major.
    pub centroids: Vec<f32>,
    pub lists: Vec<Vec<usize>>,
    pub nprobe: usize,
}

pub fn default_k_c(count: usize) -> usize {
    ((count as f64).sqrt().ceil() as usize).max(1)
}

pub fn default_nprobe(k_c: usize) -> usize {
    k_c.div_ceil(16).max(1)
}

fn nearest_centroid(centroids: &[f32], dim: usize, v: &[f32]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let d = l2_sq(cent, v);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

fn kmeans_pp_seed(store: &EmbeddingStore, k_c: usize, rng: &mut impl Rng) -> Vec<f32> {
    let n = store.len();
    let mut centroids = store.row(rng.random_range(0..n)).to_vec();
    let mut d2: Vec<f64> = (0..n).map(|i| l2_sq(store.row(i), &centroids)).collect();
    for _ in 1..k_c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            // all remaining rows coincide with a centroid
            rng.random_range(0..n)
        };
        let c = store.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(l2_sq(store.row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

fn assign(store: &EmbeddingStore, centroids: &[f32]) -> Vec<usize> {
    (0..store.len())
        .into_par_iter()
        .map(|i| nearest_centroid(centroids, store.dim, store.row(i)))
        .collect()
}

/// k-means++ seeding followed by Lloyd iterations on L2.
pub fn build_ivf(store: &EmbeddingStore, k_c: usize, kmeans_iters: usize, rng: &mut impl Rng) -> Result<IvfIndex> {
    if k_c < 1 {
        return Err(Error::config("k_c must be at least 1"));
    }
    if k_c > store.len() {
        return Err(Error::config(format!("k_c = {k_c} exceeds store size {}", store.len())));
    }
    let dim = store.dim;
    let mut centroids = kmeans_pp_seed(store, k_c, rng);
    let mut labels = assign(store, &centroids);
    for _ in 0..kmeans_iters {
        let mut sums = vec![0.0f64; k_c * dim];
        let mut counts = vec![0usize; k_c];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(store.row(i)) {
                *s += *v as f64;
            }
        }
        for c in 0..k_c {
            if counts[c] == 0 {
                // re-seed an empty cluster at the row farthest from its centroid
                let far = (0..store.len())
                    .max_by(|&a, &b| {
                        let da = l2_sq(store.row(a), &centroids[labels[a] * dim..(labels[a] + 1) * dim]);
                        let db = l2_sq(store.row(b), &centroids[labels[b] * dim..(labels[b] + 1) * dim]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                centroids[c * dim..(c + 1) * dim].copy_from_slice(store.row(far));
                labels[far] = c;
            } else {
                for j in 0..dim {
                    centroids[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
                }
            }
        }
        let next = assign(store, &centroids);
        if next == labels {
            break;
        }
        labels = next;
    }
    let labels = assign(store, &centroids);
    let mut lists = vec![Vec::new(); k_c];
    for (i, c) in labels.into_iter().enumerate() {
        lists[c].push(i);
    }
    Ok(IvfIndex {
        dim,
        centroids,
        lists,
        nprobe: default_nprobe(k_c),
    })
}

impl IvfIndex {
    pub fn k_c(&self) -> usize {
        self.lists.len()
    }

    /// Centroid indices ordered by L2 distance to `v`, ties by index.
    pub fn probe_order(&self, v: &[f32]) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(c, cent)| (l2_sq(cent, v), c))
            .collect();
        d.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().map(|(_, c)| c).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(IVF_MAGIC)?;
        put_u32(w, IVF_VERSION)?;
        put_u32(w, self.dim as u32)?;
        put_u32(w, self.k_c() as u32)?;
        put_u32(w, self.nprobe as u32)?;
        put_f32s(w, &self.centroids)?;
        for list in &self.lists {
            put_u64(w, list.len() as u64)?;
            for &i in list {
                put_u64(w, i as u64)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        check_magic(r, IVF_MAGIC, "ivf index")?;
        let version = get_u32(r)?;
        if version != IVF_VERSION {
            return Err(Error::Version {
                found: version,
                expected: IVF_VERSION,
            });
        }
        let dim = get_u32(r)? as usize;
        let k_c = get_u32(r)? as usize;
        let nprobe = get_u32(r)? as usize;
        if k_c == 0 || nprobe == 0 || nprobe > k_c {
            return Err(Error::Format(format!("invalid ivf header k_c={k_c} nprobe={nprobe}")));
        }
        let centroids = get_f32s(r, k_c * dim)?;
        let mut lists = Vec::with_capacity(k_c);
        for _ in 0..k_c {
            let n = get_u64(r)? as usize;
            let mut list = Vec::new();
            for _ in 0..n {
                list.push(get_u64(r)? as usize);
            }
            lists.push(list);
        }
        Ok(IvfIndex {
            dim,
            centroids,
            lists,
            nprobe,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path.as_ref())?))
    }
}

/// Probe the `nprobe` nearest lists and rank their rows exactly by L1.
pub fn knn_ivf(index: &IvfIndex, store: &EmbeddingStore, query: &[f32], k: usize, nprobe: usize) -> Result<KnnResult> {
    check_query(store, query, k)?;
    if index.dim != store.dim {
        return Err(Error::Shape {
            op: "knn_ivf",
            lhs: vec![index.dim],
            rhs: vec![store.dim],
        });
    }
    if nprobe < 1 || nprobe > index.k_c() {
        return Err(Error::config(format!("nprobe must be in [1, {}], got {nprobe}", index.k_c())));
    }
    let mut rows = Vec::new();
    for c in index.probe_order(query).into_iter().take(nprobe) {
        rows.extend_from_slice(&index.lists[c]);
    }
    if rows.iter().any(|&i| i >= store.len()) {
        return Err(Error::input("ivf index refers to rows outside the store"));
    }
    Ok(KnnResult {
        clamped: k >= rows.len(),
        hits: rank_rows(store, query, &rows, k),
    })
}

/// Fraction of `truth` ids found in `found`, the usual recall@k.
pub fn recall(found: &KnnResult, truth: &KnnResult) -> f64 {
    if truth.hits.is_empty() {
        return 1.0;
    }
    let got: HashSet<&str> = found.hits.iter().map(|h| h.id.as_str()).collect();
    truth.hits.iter().filter(|h| got.contains(h.id.as_str())).count() as f64 / truth.hits.len() as f64
}

/// Helper used by ranking code that needs the total order of the flat scan.
pub fn compare_hits(a: &Hit, b: &Hit) -> Ordering {
    a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id))
}
