//! Similar-item serving: an immutable representation index answering
//! exact top-k cosine queries, the staged training pipeline that refreshes
//! it, and a small HTTP front end with atomic snapshot swaps.

mod http;
mod refresh;

pub use http::{serve_http, ServerHandle};
pub use refresh::{refresh, resolve_snapshot_dir, RefreshOptions, CURRENT_FILE};

use std::collections::HashMap;
use std::path::Path;

use crate::datamodel::AdCorpus;
use crate::error::{Error, Result};
use crate::hybrid::ItemRepresentation;
use crate::linalg::{write_mat0, Matrix};

/// Number of items shown by the recommendation widget.
pub const DEFAULT_K: usize = 6;

const NORM_TOLERANCE: f64 = 1e-6;

/// An immutable snapshot of unit-norm item representations plus active
/// flags. Queries never mutate it; refreshes build a new one.
#[derive(Debug, Clone)]
pub struct Snapshot {
    id: String,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    /// row-major n x dim
    reps: Vec<f32>,
    active: Vec<bool>,
}

impl Snapshot {
    pub fn id(&self) -> &str {
        &self.id
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

    pub fn contains(&self, item_id: &str) -> bool {
        self.index.contains_key(item_id)
    }

    pub fn is_active(&self, item_id: &str) -> Option<bool> {
        self.index.get(item_id).map(|&i| self.active[i])
    }

    pub fn vector(&self, item_id: &str) -> Option<&[f32]> {
        self.index
            .get(item_id)
            .map(|&i| &self.reps[i * self.dim..(i + 1) * self.dim])
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.reps[i * self.dim..(i + 1) * self.dim]
    }

    pub fn save(&self, dir: &Path, extras: &[(String, String)]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!(
            "kind=snapshot\nid={}\nitems={}\ndim={}\n",
            self.id,
            self.ids.len(),
            self.dim
        );
        let mut extras = extras.to_vec();
        extras.sort();
        for (k, v) in extras {
            manifest.push_str(&format!("{k}={v}\n"));
        }
        let manifest_path = dir.join("manifest");
        std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;

        let ids_path = dir.join("ids.txt");
        let mut ids_text = String::new();
        for id in &self.ids {
            ids_text.push_str(id);
            ids_text.push('\n');
        }
        std::fs::write(&ids_path, ids_text).map_err(|e| Error::io(&ids_path, e))?;

        let active_path = dir.join("active.txt");
        let mut active_text = String::new();
        for &a in &self.active {
            active_text.push(if a { '1' } else { '0' });
            active_text.push('\n');
        }
        std::fs::write(&active_path, active_text).map_err(|e| Error::io(&active_path, e))?;

        let m = Matrix::from_fn(self.ids.len(), self.dim, |r, c| {
            self.reps[r * self.dim + c] as f64
        });
        write_mat0(&dir.join("reps.mat"), &m)
    }

    pub fn load(dir: &Path) -> Result<Snapshot> {
        let manifest = crate::mf::parse_manifest(&dir.join("manifest"))?;
        let id = manifest
            .get("id")
            .ok_or_else(|| Error::Snapshot(format!("{}: manifest missing id", dir.display())))?
            .clone();
        let ids_path = dir.join("ids.txt");
        let ids: Vec<String> = std::fs::read_to_string(&ids_path)
            .map_err(|e| Error::io(&ids_path, e))?
            .lines()
            .map(str::to_owned)
            .collect();
        let active_path = dir.join("active.txt");
        let active: Vec<bool> = std::fs::read_to_string(&active_path)
            .map_err(|e| Error::io(&active_path, e))?
            .lines()
            .map(|l| l.trim() == "1")
            .collect();
        let m = crate::linalg::read_mat0(&dir.join("reps.mat"))?;
        if m.rows() != ids.len() || active.len() != ids.len() {
            return Err(Error::Snapshot("snapshot files disagree on item count".into()));
        }
        let dim = m.cols();
        let reps: Vec<f32> = m.data().iter().map(|&v| v as f32).collect();
        Snapshot::build(id, ids, dim, reps, active)
    }

    fn build(
        id: String,
        ids: Vec<String>,
        dim: usize,
        reps: Vec<f32>,
        active: Vec<bool>,
    ) -> Result<Snapshot> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, item) in ids.iter().enumerate() {
            if index.insert(item.clone(), i).is_some() {
                return Err(Error::Snapshot(format!("duplicate item id {item}")));
            }
        }
        for (i, item) in ids.iter().enumerate() {
            let row = &reps[i * dim..(i + 1) * dim];
            let norm: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Snapshot(format!(
                    "representation for {item} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Snapshot {
            id,
            ids,
            index,
            dim,
            reps,
            active,
        })
    }
}

/// Builds a snapshot from representations and the corpus. Active flags
/// come from the ads; unknown items and norm violations are errors.
pub fn build_index(
    id: &str,
    representations: &[ItemRepresentation],
    ads: &AdCorpus,
) -> Result<Snapshot> {
    if representations.is_empty() {
        return Err(Error::InvalidInput("no representations".into()));
    }
    let dim = representations[0].vector.len();
    let mut ids = Vec::with_capacity(representations.len());
    let mut reps = Vec::with_capacity(representations.len() * dim);
    let mut active = Vec::with_capacity(representations.len());
    for r in representations {
        if r.vector.len() != dim {
            return Err(Error::Dimension(format!(
                "representation for {} has dim {}, expected {dim}",
                r.item_id,
                r.vector.len()
            )));
        }
        let ad = ads
            .get(&r.item_id)
            .ok_or_else(|| Error::NotFound(format!("item {} not in corpus", r.item_id)))?;
        ids.push(r.item_id.clone());
        reps.extend(r.vector.iter().map(|&v| v as f32));
        active.push(ad.active);
    }
    Snapshot::build(id.to_owned(), ids, dim, reps, active)
}

/// Exact top-k by dot product against the query row, excluding the query
/// itself and inactive items. Scores descend; ties break by item id
/// ascending. Returns all eligible items when k exceeds them.
pub fn recommend(snapshot: &Snapshot, query: &str, k: usize) -> Result<Vec<(String, f64)>> {
    if k < 1 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let &qi = snapshot
        .index
        .get(query)
        .ok_or_else(|| Error::NotFound(format!("unknown query item {query}")))?;
    let q = snapshot.row(qi);
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(snapshot.len());
    for i in 0..snapshot.len() {
        if i == qi || !snapshot.active[i] {
            continue;
        }
        let s: f64 = snapshot
            .row(i)
            .iter()
            .zip(q)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        scored.push((i, s));
    }
    scored.sort_by(|x, y| {
        y.1.partial_cmp(&x.1)
            .unwrap()
            .then_with(|| snapshot.ids[x.0].cmp(&snapshot.ids[y.0]))
    });
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(i, s)| (snapshot.ids[i].clone(), s))
        .collect())
}
