//! Deterministic CSV/JSON writers.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;

/// 17 significant digits, `.` separator, exponent form.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// A run directory under the output root.
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, name: &str) -> io::Result<Self> {
        let path = root.join(name);
        fs::create_dir_all(&path)?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write_csv(
        &self,
        file: &str,
        header: &str,
        rows: impl IntoIterator<Item = String>,
    ) -> io::Result<()> {
        let mut out = io::BufWriter::new(fs::File::create(self.path.join(file))?);
        out.write_all(header.as_bytes())?;
        out.write_all(b"\n")?;
        for row in rows {
            out.write_all(row.as_bytes())?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn write_json(&self, file: &str, value: &Value) -> io::Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
        text.push('\n');
        fs::write(self.path.join(file), text)
    }
}

/// Long-format trajectory rows `t,index,value`.
pub fn trajectory_rows<'a>(
    times: &'a [f64],
    states: impl Iterator<Item = Vec<f64>> + 'a,
) -> impl Iterator<Item = String> + 'a {
    times.iter().zip(states).flat_map(|(t, values)| {
        values
            .into_iter()
            .enumerate()
            .map(move |(i, v)| format!("{},{},{}", fmt_f64(*t), i + 1, fmt_f64(v)))
    })
}
