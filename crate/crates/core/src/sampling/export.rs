use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Writes one row per sample with `# key=value` metadata lines on top.
///
/// Columns are `x0..x{d-1}` followed by `log_weight` when weights are given.
pub fn write_samples_csv(
    path: &Path,
    samples: &Tensor,
    log_weights: Option<&[f64]>,
    meta: &[(String, String)],
) -> Result<()> {
    if let Some(w) = log_weights {
        if w.len() != samples.rows() {
            return Err(Error::Shape(format!("{} weights for {} samples", w.len(), samples.rows())));
        }
    }
    let mut buf = Vec::new();
    for (k, v) in meta {
        writeln!(buf, "# {k}={v}").map_err(|e| Error::io(path, e))?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header: Vec<String> = (0..samples.cols()).map(|j| format!("x{j}")).collect();
        if log_weights.is_some() {
            header.push("log_weight".into());
        }
        w.write_record(&header)?;
        for (i, row) in samples.rows_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            if let Some(lw) = log_weights {
                rec.push(format!("{:e}", lw[i]));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_samples_csv`].
pub fn read_samples_csv(path: &Path) -> Result<(Tensor, Option<Vec<f64>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let has_w = r.headers()?.iter().any(|h| h == "log_weight");
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut vals = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Serde(format!("{s}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if has_w {
            weights.push(vals.pop().unwrap_or(f64::NAN));
        }
        rows.push(vals);
    }
    Ok((Tensor::from_rows(&rows)?, has_w.then_some(weights)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_every_bit() {
        let x = Tensor::matrix(2, 2, vec![0.1, -1.0 / 3.0, 1e-300, 7.0]);
        let w = vec![-0.5, 2.0 / 7.0];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_samples_csv(&p, &x, Some(&w), &[("seed".into(), "3".into())]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# seed=3\nx0,x1,log_weight\n"));
        let (y, v) = read_samples_csv(&p).unwrap();
        assert_eq!(y, x);
        assert_eq!(v.unwrap(), w);
    }
}
