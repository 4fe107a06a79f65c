//! Multi-resolution hash grid: parameter tables plus shared level geometry.

use std::sync::Arc;
use std::sync::atomic::AtomicU64;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Group, ParamId, ParamStore};
use super::tape::{GridMeta, LevelMeta, NodeId, Tape};
use super::tensor::{sc, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub levels: usize,
    pub res_min: usize,
    pub res_max: usize,
    pub feats: usize,
    pub table_size: usize,
}

pub struct HashGrid {
    pub meta: Arc<GridMeta>,
    pub tables: Vec<ParamId>,
}

impl HashGrid {
    /// Builds level metadata and per-level tables. Resolutions grow
    /// geometrically from `res_min` to `res_max`; a level indexes densely when
    /// its full lattice fits in the table and switches to a spatial hash
    /// otherwise. Entries start uniform in [-1e-4, 1e-4].
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        group: Group,
        cfg: GridConfig,
        rng: &mut R,
    ) -> Self {
        assert!(cfg.levels >= 2);
        let b = (cfg.res_max as f64 / cfg.res_min as f64).powf(1.0 / (cfg.levels - 1) as f64);
        let mut levels = Vec::with_capacity(cfg.levels);
        let mut tables = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let res = (cfg.res_min as f64 * b.powi(l as i32)).round() as usize;
            let lattice = (res + 1).pow(3);
            let (rows, hashed) = if lattice <= cfg.table_size {
                (lattice, false)
            } else {
                (cfg.table_size, true)
            };
            levels.push(LevelMeta {
                res,
                table_size: rows,
                hashed,
            });
            let init = Tensor::from_fn(rows, cfg.feats, |_, _| sc(rng.gen_range(-1e-4..1e-4)));
            tables.push(store.add(&format!("{prefix}.table{l}"), group, init));
        }
        HashGrid {
            meta: Arc::new(GridMeta {
                levels,
                feats: cfg.feats,
                clamped: AtomicU64::new(0),
            }),
            tables,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.meta.levels.len() * self.meta.feats
    }

    /// Encodes (3 x B) positions; gradients reach the tables (and positions
    /// when the position node requires them).
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pos: NodeId,
    ) -> NodeId {
        let nodes: Vec<NodeId> = self.tables.iter().map(|&p| tape.param(store, p)).collect();
        tape.hash_encode(pos, nodes, self.meta.clone())
    }

    /// Tape-free encoding of (3 x B) positions for inference.
    pub fn encode_values<T: Scalar>(&self, store: &ParamStore<T>, pos: &Tensor<T>) -> Tensor<T> {
        assert_eq!(pos.rows, 3);
        let f = self.meta.feats;
        let mut out = Tensor::zeros(self.meta.levels.len() * f, pos.cols);
        for (li, level) in self.meta.levels.iter().enumerate() {
            let table = store.value(self.tables[li]);
            for j in 0..pos.cols {
                let (corners, weights, _fr, _cl) = super::tape::corner_setup::<T>(
                    pos.at(0, j).to_f64().unwrap(),
                    pos.at(1, j).to_f64().unwrap(),
                    pos.at(2, j).to_f64().unwrap(),
                    level,
                );
                for (&idx, &wt) in corners.iter().zip(&weights) {
                    let trow = table.row(idx as usize);
                    for k in 0..f {
                        *out.at_mut(li * f + k, j) += wt * trow[k];
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn level_layout_follows_geometric_schedule() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let grid = HashGrid::new(
            &mut store,
            "g",
            Group::Field,
            GridConfig {
                levels: 6,
                res_min: 16,
                res_max: 256,
                feats: 4,
                table_size: 1 << 14,
            },
            &mut rng,
        );
        let res: Vec<usize> = grid.meta.levels.iter().map(|l| l.res).collect();
        assert_eq!(res.first(), Some(&16));
        assert_eq!(res.last(), Some(&256));
        for w in res.windows(2) {
            assert!(w[1] > w[0]);
        }
        // Only the coarsest lattice fits densely in a 2^14 table.
        assert!(!grid.meta.levels[0].hashed);
        assert_eq!(grid.meta.levels[0].table_size, 17 * 17 * 17);
        assert!(grid.meta.levels[1..].iter().all(|l| l.hashed));
        assert_eq!(grid.out_dim(), 24);
    }

    #[test]
    fn encode_interpolates_between_corners() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let grid = HashGrid::new(
            &mut store,
            "g",
            Group::Field,
            GridConfig {
                levels: 2,
                res_min: 2,
                res_max: 4,
                feats: 2,
                table_size: 1 << 10,
            },
            &mut rng,
        );
        let mut tape: Tape<f64> = Tape::new();
        // Mid-cell positions: value must be the mean of the 8 corner entries.
        let pos = tape.constant(Tensor::from_vec(3, 1, vec![0.25, 0.25, 0.25]));
        let enc = grid.encode(&mut tape, &store, pos);
        let v = tape.value(enc).clone();
        let table = store.value(grid.tables[0]);
        let side = 3usize;
        let mut want = [0.0f64; 2];
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let idx = dx + side * (dy + side * dz);
                    for k in 0..2 {
                        want[k] += table.at(idx, k) / 8.0;
                    }
                }
            }
        }
        assert!((v.at(0, 0) - want[0]).abs() < 1e-12);
        assert!((v.at(1, 0) - want[1]).abs() < 1e-12);
    }
}
