//! Block-sharded retrieval database with exact Euclidean k-NN.
//!
//! Shard i stacks the flattened i-th blocks of every database latent; row j
//! of every shard comes from the same source latent, which is what makes a
//! neighbor set block-coherent.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::blocks::{flatten_block, partition, unflatten_block, BlockLayout};
use crate::error::{Error, Result};
use crate::io::{self, Manifest};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    FirstBlock,
    FullLatent,
}

impl QueryMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            QueryMode::FirstBlock => "first_block",
            QueryMode::FullLatent => "full_latent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "first_block" => Ok(QueryMode::FirstBlock),
            "full_latent" => Ok(QueryMode::FullLatent),
            other => Err(Error::Config(format!(
                "unknown query mode `{other}` (expected first_block or full_latent)"
            ))),
        }
    }
}

#[derive(Debug)]
pub struct RetrievalDB {
    n: usize,
    layout: BlockLayout,
    query_mode: QueryMode,
    /// shards[i] is an n x block_dim matrix, row-major.
    shards: Vec<Vec<f64>>,
    query_count: AtomicU64,
}

#[derive(Debug, Clone)]
pub struct NeighborSet {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    /// per_block[i][r] is the flattened block i of neighbor r.
    pub per_block: Vec<Vec<Vec<f64>>>,
}

impl NeighborSet {
    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

pub fn build_database(
    latents: &[Tensor],
    layout: BlockLayout,
    query_mode: QueryMode,
) -> Result<RetrievalDB> {
    if latents.is_empty() {
        return Err(Error::EmptyInput("retrieval database".into()));
    }
    let dim = layout.block_dim();
    let mut shards = vec![Vec::with_capacity(latents.len() * dim); layout.b];
    for z in latents {
        let blocks = partition(&layout, z)?;
        for (i, block) in blocks.iter().enumerate() {
            shards[i].extend(flatten_block(block));
        }
    }
    Ok(RetrievalDB {
        n: latents.len(),
        layout,
        query_mode,
        shards,
        query_count: AtomicU64::new(0),
    })
}

impl RetrievalDB {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn query_mode(&self) -> QueryMode {
        self.query_mode
    }

    /// Number of queries answered so far. Probe for mode-contract tests.
    pub fn query_count(&self) -> u64 {
        self.query_count.load(Ordering::Relaxed)
    }

    pub fn shard_row(&self, shard: usize, row: usize) -> &[f64] {
        let dim = self.layout.block_dim();
        &self.shards[shard][row * dim..(row + 1) * dim]
    }

    /// Query vector length implied by the query mode.
    pub fn query_dim(&self) -> usize {
        match self.query_mode {
            QueryMode::FirstBlock => self.layout.block_dim(),
            QueryMode::FullLatent => self.layout.b * self.layout.block_dim(),
        }
    }

    fn row_distance_sq(&self, query: &[f64], row: usize) -> f64 {
        match self.query_mode {
            QueryMode::FirstBlock => dist_sq(query, self.shard_row(0, row)),
            QueryMode::FullLatent => {
                let dim = self.layout.block_dim();
                let mut acc = 0.0;
                for i in 0..self.layout.b {
                    acc += dist_sq(&query[i * dim..(i + 1) * dim], self.shard_row(i, row));
                }
                acc
            }
        }
    }

    /// Exact k nearest neighbors of `query`, ties broken by lower row id.
    pub fn query_knn(
        &self,
        query: &[f64],
        k: usize,
        exclude: Option<usize>,
    ) -> Result<NeighborSet> {
        if query.len() != self.query_dim() {
            return Err(Error::ShapeMismatch(format!(
                "query length {} but {:?} mode expects {}",
                query.len(),
                self.query_mode,
                self.query_dim()
            )));
        }
        let available = self.n - usize::from(exclude.map_or(false, |e| e < self.n));
        if k < 1 || k > available {
            return Err(Error::InvalidArgument(format!(
                "k={k} out of range for database of {available} usable rows"
            )));
        }
        self.query_count.fetch_add(1, Ordering::Relaxed);
        let mut scored: Vec<(f64, usize)> = (0..self.n)
            .filter(|&row| exclude != Some(row))
            .map(|row| (self.row_distance_sq(query, row), row))
            .collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        scored.truncate(k);
        let indices: Vec<usize> = scored.iter().map(|&(_, row)| row).collect();
        let distances: Vec<f64> = scored.iter().map(|&(d, _)| d.sqrt()).collect();
        let per_block = (0..self.layout.b)
            .map(|i| {
                indices
                    .iter()
                    .map(|&row| self.shard_row(i, row).to_vec())
                    .collect()
            })
            .collect();
        Ok(NeighborSet {
            indices,
            distances,
            per_block,
        })
    }

    /// Uniformly sample a database row and return its query vector.
    pub fn pseudo_query(&self, rng: &mut Rng) -> Result<(Vec<f64>, usize)> {
        if self.n == 0 {
            return Err(Error::EmptyInput("pseudo_query on empty database".into()));
        }
        let row = rng.next_below(self.n);
        let query = match self.query_mode {
            QueryMode::FirstBlock => self.shard_row(0, row).to_vec(),
            QueryMode::FullLatent => {
                let mut q = Vec::with_capacity(self.query_dim());
                for i in 0..self.layout.b {
                    q.extend_from_slice(self.shard_row(i, row));
                }
                q
            }
        };
        Ok((query, row))
    }

    /// Reconstruct the full latent stored at `row`.
    pub fn latent_at(&self, row: usize) -> Result<Tensor> {
        let blocks: Vec<Tensor> = (0..self.layout.b)
            .map(|i| unflatten_block(&self.layout, self.shard_row(i, row)))
            .collect::<Result<_>>()?;
        crate::blocks::reassemble(&self.layout, &blocks)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let dim = self.layout.block_dim();
        for (i, shard) in self.shards.iter().enumerate() {
            let t = Tensor::from_vec(&[self.n, dim], shard.clone())?;
            io::write_tensor(&dir.join(format!("shard_{i}.rsslt")), &t)?;
        }
        let mut m = Manifest::new();
        m.insert("n".into(), self.n.to_string());
        m.insert("b".into(), self.layout.b.to_string());
        m.insert("c".into(), self.layout.c.to_string());
        m.insert("h".into(), self.layout.h.to_string());
        m.insert("w".into(), self.layout.w.to_string());
        m.insert("query_mode".into(), self.query_mode.as_str().into());
        io::write_manifest(&dir.join("manifest.txt"), &m)
    }

    pub fn load(dir: &Path) -> Result<RetrievalDB> {
        let manifest_path = dir.join("manifest.txt");
        let m = io::read_manifest(&manifest_path)?;
        let n: usize = io::manifest_parse(&m, "n", &manifest_path)?;
        let b: usize = io::manifest_parse(&m, "b", &manifest_path)?;
        let c: usize = io::manifest_parse(&m, "c", &manifest_path)?;
        let h: usize = io::manifest_parse(&m, "h", &manifest_path)?;
        let w: usize = io::manifest_parse(&m, "w", &manifest_path)?;
        let query_mode = QueryMode::parse(io::manifest_get(&m, "query_mode", &manifest_path)?)?;
        let layout = BlockLayout::new(b, c, h, w)?;
        let mut shards = Vec::with_capacity(b);
        for i in 0..b {
            let t = io::read_tensor(&dir.join(format!("shard_{i}.rsslt")))?;
            if t.shape() != [n, layout.block_dim()] {
                return Err(Error::BadFormat {
                    path: dir.display().to_string(),
                    reason: format!("shard {i} shape {:?}", t.shape()),
                });
            }
            shards.push(t.into_data());
        }
        Ok(RetrievalDB {
            n,
            layout,
            query_mode,
            shards,
            query_count: AtomicU64::new(0),
        })
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::reassemble;

    fn random_latents(n: usize, layout: &BlockLayout, seed: u64) -> Vec<Tensor> {
        let root = Rng::new(seed);
        (0..n)
            .map(|i| {
                Tensor::randn(&mut root.split(i as u64), &[layout.c, layout.h, layout.w]).unwrap()
            })
            .collect()
    }

    #[test]
    fn empty_database_rejected() {
        let layout = BlockLayout::new(4, 1, 4, 4).unwrap();
        assert!(build_database(&[], layout, QueryMode::FirstBlock).is_err());
    }

    #[test]
    fn single_entry_round_trip() {
        let layout = BlockLayout::new(4, 1, 4, 4).unwrap();
        let latents = random_latents(1, &layout, 1);
        let db = build_database(&latents, layout, QueryMode::FirstBlock).unwrap();
        assert_eq!(db.len(), 1);
        assert_eq!(db.latent_at(0).unwrap(), latents[0]);
    }

    #[test]
    fn constant_latents_fill_shards() {
        let layout = BlockLayout::new(4, 1, 4, 4).unwrap();
        let latents: Vec<Tensor> = (1..=3)
            .map(|v| Tensor::full(&[1, 4, 4], v as f64))
            .collect();
        let db = build_database(&latents, layout, QueryMode::FirstBlock).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert!(db.shard_row(i, j).iter().all(|&v| v == (j + 1) as f64));
            }
        }
    }

    #[test]
    fn db_round_trip_whole() {
        let layout = BlockLayout::new(9, 2, 6, 6).unwrap();
        let latents = random_latents(5, &layout, 2);
        let db = build_database(&latents, layout, QueryMode::FullLatent).unwrap();
        for (j, z) in latents.iter().enumerate() {
            assert_eq!(&db.latent_at(j).unwrap(), z);
        }
    }

    #[test]
    fn self_retrieval_distance_zero() {
        let layout = BlockLayout::new(4, 1, 4, 4).unwrap();
        let latents = random_latents(10, &layout, 3);
        let db = build_database(&latents, layout, QueryMode::FirstBlock).unwrap();
        let q = db.shard_row(0, 5).to_vec();
        let ns = db.query_knn(&q, 1, None).unwrap();
        assert_eq!(ns.indices[0], 5);
        assert!(ns.distances[0] < 1e-12);
    }

    #[test]
    fn number_line_neighbors() {
        // b=1, one-pixel latents at positions 0, 10, 20.
        let layout = BlockLayout::new(1, 1, 1, 1).unwrap();
        let latents: Vec<Tensor> = [0.0, 10.0, 20.0]
            .iter()
            .map(|&v| Tensor::from_vec(&[1, 1, 1], vec![v]).unwrap())
            .collect();
        let db = build_database(&latents, layout, QueryMode::FirstBlock).unwrap();
        let ns = db.query_knn(&[9.0], 2, None).unwrap();
        assert_eq!(ns.indices, vec![1, 0]);
        assert!((ns.distances[0] - 1.0).abs() < 1e-12);
        assert!((ns.distances[1] - 9.0).abs() < 1e-12);
    }

    // Independent brute-force oracle: full sort with explicit tie-break.
    fn brute_force_knn(
        rows: &[Vec<f64>],
        query: &[f64],
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = rows
            .iter()
            .enumerate()
            .filter(|(j, _)| exclude != Some(*j))
            .map(|(j, r)| (dist_sq(query, r), j))
            .collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, j)| j).collect()
    }

    #[test]
    fn matches_brute_force_oracle_both_modes() {
        for mode in [QueryMode::FirstBlock, QueryMode::FullLatent] {
            let layout = BlockLayout::new(4, 1, 4, 4).unwrap();
            let latents = random_latents(200, &layout, 42);
            let db = build_database(&latents, layout, mode).unwrap();
            let rows: Vec<Vec<f64>> = (0..200)
                .map(|j| match mode {
                    QueryMode::FirstBlock => db.shard_row(0, j).to_vec(),
                    QueryMode::FullLatent => (0..4)
                        .flat_map(|i| db.shard_row(i, j).to_vec())
                        .collect(),
                })
                .collect();
            let qrng = Rng::new(7);
            for q in 0..50 {
                let query: Vec<f64> = {
                    let mut r = qrng.split(q);
                    (0..db.query_dim()).map(|_| r.next_normal()).collect()
                };
                let exclude = if q % 3 == 0 { Some((q as usize) % 200) } else { None };
                let ns = db.query_knn(&query, 10, exclude).unwrap();
                assert_eq!(ns.indices, brute_force_knn(&rows, &query, 10, exclude));
            }
        }
    }

    #[test]
    fn tie_break_by_lower_row_id() {
        let layout = BlockLayout::new(1, 1, 1, 1).unwrap();
        let latents: Vec<Tensor> = [5.0, -1.0, 5.0, 5.0]
            .iter()
            .map(|&v| Tensor::from_vec(&[1, 1, 1], vec![v]).unwrap())
            .collect();
        let db = build_database(&latents, layout, QueryMode::FirstBlock).unwrap();
        let ns = db.query_knn(&[5.0], 3, None).unwrap();
        assert_eq!(ns.indices, vec![0, 2, 3]);
        let ns = db.query_knn(&[5.0], 3, Some(0)).unwrap();
        assert_eq!(ns.indices, vec![2, 3, 1]);
    }

    #[test]
    fn per_block_rows_align_with_shards() {
        let layout = BlockLayout::new(9, 1, 6, 6).unwrap();
        let latents = random_latents(30, &layout, 11);
        let db = build_database(&latents, layout, QueryMode::FirstBlock).unwrap();
        let mut r = Rng::new(1);
        let query: Vec<f64> = (0..db.query_dim()).map(|_| r.next_normal()).collect();
        let ns = db.query_knn(&query, 5, None).unwrap();
        for i in 0..9 {
            for (rank, &row) in ns.indices.iter().enumerate() {
                assert_eq!(ns.per_block[i][rank], db.shard_row(i, row));
            }
        }
        for pair in ns.distances.windows(2) {
            assert!(pair[0] <= pair[1]);
        }
    }

    #[test]
    fn prefix_property_and_full_latent_b1_equivalence() {
        let layout = BlockLayout::new(1, 1, 2, 2).unwrap();
        let latents = random_latents(50, &layout, 13);
        let db_first = build_database(&latents, layout, QueryMode::FirstBlock).unwrap();
        let db_full = build_database(&latents, layout, QueryMode::FullLatent).unwrap();
        let mut r = Rng::new(2);
        let query: Vec<f64> = (0..4).map(|_| r.next_normal()).collect();
        let big = db_first.query_knn(&query, 10, None).unwrap();
        let small = db_first.query_knn(&query, 4, None).unwrap();
        assert_eq!(small.indices, big.indices[..4]);
        let full = db_full.query_knn(&query, 10, None).unwrap();
        assert_eq!(full.indices, big.indices);
    }

    #[test]
    fn k_too_large_errors() {
        let layout = BlockLayout::new(1, 1, 1, 1).unwrap();
        let latents = random_latents(3, &layout, 1);
        let db = build_database(&latents, layout, QueryMode::FirstBlock).unwrap();
        assert!(db.query_knn(&[0.0], 4, None).is_err());
        assert!(db.query_knn(&[0.0], 3, Some(1)).is_err());
        assert!(db.query_knn(&[0.0], 3, None).is_ok());
    }

    #[test]
    fn pseudo_query_uniform_and_consistent() {
        let layout = BlockLayout::new(4, 1, 4, 4).unwrap();
        let latents = random_latents(100, &layout, 21);
        let db = build_database(&latents, layout, QueryMode::FirstBlock).unwrap();
        let mut counts = vec![0usize; 100];
        let mut rng = Rng::new(33);
        let draws = 100_000;
        for _ in 0..draws {
            let (q, row) = db.pseudo_query(&mut rng).unwrap();
            assert_eq!(q, db.shard_row(0, row));
            counts[row] += 1;
        }
        // Multinomial: each count ~ Binomial(1e5, 1/100), sd ~ sqrt(990) ~ 31.5.
        let expect = draws as f64 / 100.0;
        let sd = (draws as f64 * 0.01 * 0.99).sqrt();
        for &c in &counts {
            assert!((c as f64 - expect).abs() < 3.0 * sd * 1.5, "count {c}");
        }
        // Single-row db always returns row 0.
        let db1 = build_database(&latents[..1], layout, QueryMode::FirstBlock).unwrap();
        for _ in 0..10 {
            assert_eq!(db1.pseudo_query(&mut rng).unwrap().1, 0);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let layout = BlockLayout::new(4, 2, 4, 4).unwrap();
        let latents = random_latents(7, &layout, 5);
        let db = build_database(&latents, layout, QueryMode::FullLatent).unwrap();
        db.save(dir.path()).unwrap();
        let back = RetrievalDB::load(dir.path()).unwrap();
        assert_eq!(back.len(), 7);
        assert_eq!(back.query_mode(), QueryMode::FullLatent);
        for j in 0..7 {
            assert_eq!(back.latent_at(j).unwrap(), latents[j]);
        }
        // Canonical index -> cell map survives persistence.
        let blocks = partition(&layout, &latents[2]).unwrap();
        let z = reassemble(&layout, &blocks).unwrap();
        assert_eq!(z, back.latent_at(2).unwrap());
    }
}
