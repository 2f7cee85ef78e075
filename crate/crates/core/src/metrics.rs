//! Radial errors, mean radial error and PCK/SDR.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Euclidean localisation errors: one row per image, one column per landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTable {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ErrorTable {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim(format!(
                "{rows} x {cols} table needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Validation(
                "error table entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, image: usize, landmark: usize) -> f64 {
        self.data[image * self.cols + landmark]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Writes `image,landmark,distance` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = (0..self.rows).flat_map(|i| (0..self.cols).map(move |j| (i, j, self.get(i, j))));
        crate::rundir::write_csv(path, &["image", "landmark", "distance"], rows)
    }
}

/// `resolution * ||pred - gt||` for every image and landmark. `preds[i]` and
/// `gts[i]` hold the landmarks of image `i` as `(row, col)`.
pub fn radial_errors(preds: &[Vec<(f64, f64)>], gts: &[Vec<(f64, f64)>], resolution: f64) -> Result<ErrorTable> {
    if !(resolution > 0.0) {
        return Err(Error::config(format!("resolution must be positive, got {resolution}")));
    }
    if preds.len() != gts.len() {
        return Err(Error::dim(format!(
            "{} predicted images but {} ground-truth images",
            preds.len(),
            gts.len()
        )));
    }
    let cols = gts.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(preds.len() * cols);
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.len() != cols || g.len() != cols {
            return Err(Error::dim(format!(
                "image {i}: {} predictions for {} landmarks (expected {cols})",
                p.len(),
                g.len()
            )));
        }
        for (&(pr, pc), &(gr, gc)) in p.iter().zip(g) {
            let (dr, dc) = (pr - gr, pc - gc);
            data.push(resolution * (dr * dr + dc * dc).sqrt());
        }
    }
    ErrorTable::new(preds.len(), cols, data)
}

/// Per-landmark MRE plus the pooled mean and population SD over all entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MreSummary {
    pub per_landmark: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

pub fn mre(table: &ErrorTable) -> Result<MreSummary> {
    if table.rows == 0 || table.cols == 0 {
        return Err(Error::config("cannot summarise an empty error table"));
    }
    let n = table.rows as f64;
    let per_landmark = (0..table.cols)
        .map(|j| (0..table.rows).map(|i| table.get(i, j)).sum::<f64>() / n)
        .collect();
    let total = table.data.len() as f64;
    let mean = table.data.iter().sum::<f64>() / total;
    let var = table.data.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / total;
    Ok(MreSummary {
        per_landmark,
        mean,
        sd: var.sqrt(),
    })
}

/// Percentage of entries strictly below `radius`.
pub fn pck(table: &ErrorTable, radius: f64) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(Error::config(format!("PCK radius must be positive, got {radius}")));
    }
    if table.data.is_empty() {
        return Err(Error::config("cannot score an empty error table"));
    }
    let hits = table.data.iter().filter(|&&d| d < radius).count();
    Ok(hits as f64 / table.data.len() as f64 * 100.0)
}

/// PCK at one radius, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PckPoint {
    pub radius: f64,
    pub percent: f64,
}

/// Everything reported for one evaluated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub images: usize,
    pub per_landmark_mre: Vec<f64>,
    pub mean_mre: f64,
    pub sd_mre: f64,
    pub pck: Vec<PckPoint>,
}

pub fn summarize(table: &ErrorTable, radii: &[f64]) -> Result<Summary> {
    let m = mre(table)?;
    let pck = radii
        .iter()
        .map(|&r| pck(table, r).map(|percent| PckPoint { radius: r, percent }))
        .collect::<Result<_>>()?;
    Ok(Summary {
        images: table.rows,
        per_landmark_mre: m.per_landmark,
        mean_mre: m.mean,
        sd_mre: m.sd,
        pck,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn radial_error_examples() {
        let p = vec![vec![(1.0, 1.0), (3.0, 4.0)]];
        let g = vec![vec![(1.0, 1.0), (0.0, 0.0)]];
        let t = radial_errors(&p, &g, 1.0).unwrap();
        assert_eq!(t.values(), &[0.0, 5.0]);
        let t = radial_errors(&p, &g, 0.1).unwrap();
        assert!((t.get(0, 1) - 0.5).abs() < 1e-15);
        assert!(matches!(
            radial_errors(&p, &[], 1.0),
            Err(Error::Dimension(_))
        ));
        assert!(radial_errors(&p, &g, 0.0).is_err());
    }

    #[test]
    fn mre_examples() {
        let t = ErrorTable::new(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(mre(&t).unwrap().per_landmark, vec![3.5]);
        let z = ErrorTable::new(3, 2, vec![0.0; 6]).unwrap();
        let s = mre(&z).unwrap();
        assert_eq!((s.mean, s.sd), (0.0, 0.0));
        assert!(mre(&ErrorTable::new(0, 2, vec![]).unwrap()).is_err());
    }

    #[test]
    fn pck_examples() {
        let t = ErrorTable::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pck(&t, 2.5).unwrap(), 50.0);
        let t = ErrorTable::new(1, 1, vec![2.0]).unwrap();
        assert_eq!(pck(&t, 2.0).unwrap(), 0.0);
        assert!(pck(&t, 0.0).is_err());
    }

    #[test]
    fn summary_collects_every_threshold() {
        let t = ErrorTable::new(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let s = summarize(&t, &[2.0, 3.0, 5.0]).unwrap();
        assert_eq!(s.per_landmark_mre, vec![2.0, 4.0]);
        assert_eq!(s.mean_mre, 3.0);
        let pct: Vec<f64> = s.pck.iter().map(|p| p.percent).collect();
        assert_eq!(pct, vec![25.0, 50.0, 75.0]);
        assert!(summarize(&t, &[0.0]).is_err());
    }

    #[test]
    fn csv_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("errors.csv");
        ErrorTable::new(1, 2, vec![0.5, 1.25]).unwrap().write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "image,landmark,distance\n0,0,0.5\n0,1,1.25\n");
    }

    fn table() -> impl Strategy<Value = ErrorTable> {
        (1usize..6, 1usize..5).prop_flat_map(|(r, c)| {
            proptest::collection::vec(0.0f64..20.0, r * c)
                .prop_map(move |d| ErrorTable::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pck_is_monotone(t in table(), a in 0.01f64..25.0, b in 0.01f64..25.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(pck(&t, lo).unwrap() <= pck(&t, hi).unwrap());
            prop_assert_eq!(pck(&t, f64::INFINITY).unwrap(), 100.0);
            let min = t.values().iter().copied().fold(f64::INFINITY, f64::min);
            if min > 0.0 {
                prop_assert_eq!(pck(&t, min).unwrap(), 0.0);
            }
        }

        #[test]
        fn mre_ignores_row_order(t in table(), seed in any::<u64>()) {
            let mut order: Vec<usize> = (0..t.rows()).collect();
            let mut s = seed;
            for i in (1..order.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (s >> 33) as usize % (i + 1));
            }
            let data = order.iter().flat_map(|&i| (0..t.cols()).map(move |j| (i, j)))
                .map(|(i, j)| t.get(i, j)).collect();
            let p = ErrorTable::new(t.rows(), t.cols(), data).unwrap();
            let (a, b) = (mre(&t).unwrap(), mre(&p).unwrap());
            for (x, y) in a.per_landmark.iter().zip(&b.per_landmark) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert!((a.mean - b.mean).abs() <= 1e-12);
        }

        #[test]
        fn radial_errors_scale_with_resolution(
            pts in proptest::collection::vec((0.0f64..64.0, 0.0f64..64.0, 0.0f64..64.0, 0.0f64..64.0), 1..8),
            k in 0.01f64..10.0,
        ) {
            let preds = vec![pts.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>()];
            let gts = vec![pts.iter().map(|p| (p.2, p.3)).collect::<Vec<_>>()];
            let a = radial_errors(&preds, &gts, 1.0).unwrap();
            let b = radial_errors(&preds, &gts, k).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((k * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}
