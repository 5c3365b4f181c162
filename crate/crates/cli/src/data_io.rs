//! Dataset files: one JSON record per line (`{"x": [...], "y": 0, "d": 0}`)
//! plus a metadata document carrying the generating spec, the templates, and
//! the mixing matrix. Writes are deterministic — the same dataset always
//! produces the same bytes — and reads validate every record against the
//! metadata before anything trains on it.

use std::io::{BufRead, Write};
use std::path::Path;

use enrank_core::{Dataset, DatasetMeta, Sample};

use crate::Failure;

pub fn write_dataset(data: &Dataset, data_path: &Path, meta_path: &Path) -> Result<(), Failure> {
    let file = std::fs::File::create(data_path)
        .map_err(|e| Failure::io(format!("{}: {e}", data_path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    for sample in &data.samples {
        let line = serde_json::to_string(sample).map_err(|e| Failure::io(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Failure::io(e.to_string()))?;
    }
    w.flush().map_err(|e| Failure::io(e.to_string()))?;

    let meta = serde_json::to_string_pretty(&data.meta).map_err(|e| Failure::io(e.to_string()))?;
    std::fs::write(meta_path, meta + "\n")
        .map_err(|e| Failure::io(format!("{}: {e}", meta_path.display())))?;
    Ok(())
}

pub fn read_dataset(data_path: &Path, meta_path: &Path) -> Result<Dataset, Failure> {
    let meta_text = std::fs::read_to_string(meta_path)
        .map_err(|e| Failure::io(format!("{}: {e}", meta_path.display())))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Failure::malformed(format!("{}: {e}", meta_path.display())))?;

    let file = std::fs::File::open(data_path)
        .map_err(|e| Failure::io(format!("{}: {e}", data_path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut samples = Vec::new();
    for (number, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Failure::io(format!("{}: {e}", data_path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| {
            Failure::malformed(format!("{} line {}: {e}", data_path.display(), number + 1))
        })?;
        validate_sample(&sample, &meta, number + 1, data_path)?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Failure::malformed(format!("{}: no records", data_path.display())));
    }
    Ok(Dataset { samples, meta })
}

fn validate_sample(sample: &Sample, meta: &DatasetMeta, line: usize, path: &Path) -> Result<(), Failure> {
    let spec = &meta.spec;
    if sample.x.len() != spec.observed_dim {
        return Err(Failure::malformed(format!(
            "{} line {line}: record has {} features, metadata says {}",
            path.display(),
            sample.x.len(),
            spec.observed_dim
        )));
    }
    if sample.y >= spec.categories || sample.d >= spec.domains {
        return Err(Failure::malformed(format!(
            "{} line {line}: label ({}, {}) outside the {}x{} grid",
            path.display(),
            sample.y,
            sample.d,
            spec.categories,
            spec.domains
        )));
    }
    Ok(())
}
