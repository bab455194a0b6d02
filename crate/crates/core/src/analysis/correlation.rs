//! Cosine-similarity grids between the spatial cells of a 2-D map.

use ndarray::{s, Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cell-by-cell similarity of a `side x side` map. Entry `(c, d)` compares
/// cell `c = y * side + x` with cell `d`; undefined entries (a zero-norm
/// cell) hold NaN and are written as `null`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationGrid {
    pub side: usize,
    pub values: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridFile {
    side: usize,
    values: Vec<Vec<Option<f64>>>,
}

impl Serialize for CorrelationGrid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GridFile {
            side: self.side,
            values: self
                .values
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v.is_finite().then_some(*v)).collect())
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CorrelationGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = GridFile::deserialize(d)?;
        let n = f.side * f.side;
        if f.values.len() != n || f.values.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom(format!("grid of side {} needs {n}x{n} values", f.side)));
        }
        let flat = f.values.into_iter().flatten().map(|v| v.unwrap_or(f64::NAN)).collect();
        Ok(CorrelationGrid {
            side: f.side,
            values: Array2::from_shape_vec((n, n), flat).expect("checked"),
        })
    }
}

impl CorrelationGrid {
    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    pub fn get(&self, c: usize, d: usize) -> Option<f64> {
        let v = self.values[[c, d]];
        v.is_finite().then_some(v)
    }

    /// Cells whose vector had zero norm.
    pub fn undefined_cells(&self) -> Vec<usize> {
        (0..self.cells()).filter(|&c| self.values[[c, c]].is_nan()).collect()
    }

    /// Image layout: tile `(ty, tx)` holds the similarity of cell
    /// `(ty, tx)` with every cell, laid out on the cell grid.
    pub fn tiled(&self) -> Array2<f64> {
        let k = self.side;
        let mut out = Array2::from_elem((k * k, k * k), f64::NAN);
        for c in 0..self.cells() {
            let (ty, tx) = (c / k, c % k);
            for d in 0..self.cells() {
                out[[ty * k + d / k, tx * k + d % k]] = self.values[[c, d]];
            }
        }
        out
    }

    /// Mean of the similarities between distinct cells.
    pub fn mean_off_cell(&self) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for ((c, d), &v) in self.values.indexed_iter() {
            if c != d && v.is_finite() {
                sum += v;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Entrywise arithmetic mean, skipping undefined entries.
    pub fn mean(grids: &[CorrelationGrid]) -> Result<CorrelationGrid> {
        let first = grids.first().ok_or_else(|| Error::contract("no grids to average"))?;
        if grids.iter().any(|g| g.side != first.side) {
            return Err(Error::contract("grids of different sides"));
        }
        let n = first.cells();
        let mut sum = Array2::<f64>::zeros((n, n));
        let mut count = Array2::<usize>::zeros((n, n));
        for g in grids {
            for ((i, j), &v) in g.values.indexed_iter() {
                if v.is_finite() {
                    sum[[i, j]] += v;
                    count[[i, j]] += 1;
                }
            }
        }
        let values = Array2::from_shape_fn((n, n), |ix| {
            if count[ix] == 0 {
                f64::NAN
            } else {
                sum[ix] / count[ix] as f64
            }
        });
        Ok(CorrelationGrid { side: first.side, values })
    }
}

/// Cosine similarity of every pair of rows; zero rows give NaN rows.
fn cosine_grid(side: usize, vectors: &Array2<f64>) -> CorrelationGrid {
    let n = vectors.nrows();
    let norms: Vec<f64> = vectors.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let gram = vectors.dot(&vectors.t());
    let mut values = Array2::from_elem((n, n), f64::NAN);
    for c in 0..n {
        for d in c..n {
            if norms[c] == 0.0 || norms[d] == 0.0 {
                continue;
            }
            let v = if c == d {
                1.0
            } else {
                (gram[[c, d]] / (norms[c] * norms[d])).clamp(-1.0, 1.0)
            };
            values[[c, d]] = v;
            values[[d, c]] = v;
        }
    }
    CorrelationGrid { side, values }
}

fn check_square(cells: usize) -> Result<usize> {
    let side = (cells as f64).sqrt().round() as usize;
    if side * side != cells || cells == 0 {
        return Err(Error::contract(format!("{cells} cells do not form a square grid")));
    }
    Ok(side)
}

/// Similarity between the `(D,)` vectors at each cell of a `(D, k, k)` map.
pub fn spatial_correlation(map: ArrayView3<'_, f64>) -> Result<CorrelationGrid> {
    let (d, h, w) = map.dim();
    if h != w || h == 0 || d == 0 {
        return Err(Error::contract(format!("expected a non-empty (D, k, k) map, got {:?}", map.dim())));
    }
    let vectors = map.to_shape((d, h * w)).expect("contiguous reshape").t().to_owned();
    Ok(cosine_grid(h, &vectors))
}

/// Similarity between the per-cell sub-matrices of a first fc layer weight
/// `(C * cells, D)`, where row `ch * cells + cell` multiplies channel `ch`
/// at `cell`.
pub fn weight_spatial_correlation(weight: ArrayView2<'_, f64>, cells: usize) -> Result<CorrelationGrid> {
    let side = check_square(cells)?;
    if weight.nrows() % cells != 0 || weight.nrows() == 0 {
        return Err(Error::contract(format!(
            "weight has {} rows, not a multiple of {cells} cells",
            weight.nrows()
        )));
    }
    let per_cell = (weight.nrows() / cells) * weight.ncols();
    let mut vectors = Array2::zeros((cells, per_cell));
    for c in 0..cells {
        let sub = weight.slice(s![c..;cells, ..]);
        vectors
            .index_axis_mut(Axis(0), c)
            .assign(&sub.to_shape(per_cell).expect("flatten"));
    }
    Ok(cosine_grid(side, &vectors))
}
