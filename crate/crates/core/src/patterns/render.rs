use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{BlockSparseLayout, FactorizedPattern, HeadSelect};
use crate::error::Result;

/// Writes an ASCII graymap of an `n×n` mask: 255 where `on(i, j)`, else 0.
/// Row `i` is the query, column `j` the key.
pub fn write_pgm(path: &Path, n: usize, on: impl Fn(usize, usize) -> bool) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P2\n{n} {n}\n255\n")?;
    let mut line = String::with_capacity(4 * n);
    for i in 0..n {
        line.clear();
        for j in 0..n {
            if j > 0 {
                line.push(' ');
            }
            line.push_str(if on(i, j) { "255" } else { "0" });
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn render_pattern(pat: &FactorizedPattern, head: HeadSelect, path: &Path) -> Result<()> {
    let rule = pat.select(head);
    write_pgm(path, pat.n(), |i, j| rule.contains(i, j))
}

/// Renders the pairs a layout actually covers.
pub fn render_layout(layout: &BlockSparseLayout, path: &Path) -> Result<()> {
    let rows = layout.covered_rows();
    write_pgm(path, layout.n(), |i, j| rows[i].binary_search(&j).is_ok())
}
