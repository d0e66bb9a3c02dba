//! Study CSV ingestion: header `effect,se`, one study per row.

use std::io::Read;
use std::path::Path;

use elmeta::{MetaDataset, StudyRecord};

use crate::{CliError, CliResult};

pub fn read_studies_from<R: Read>(reader: R) -> CliResult<MetaDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CliError::Usage(format!("line 1: {e}")))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| CliError::Usage(format!("line 1: missing column `{name}` (expected header `effect,se`)")))
    };
    let (ie, is) = (col("effect")?, col("se")?);
    let mut studies = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| CliError::Usage(format!("line {line}: {e}")))?;
        let num = |i: usize, name: &str| -> CliResult<f64> {
            let raw = rec.get(i).unwrap_or("");
            raw.parse::<f64>().map_err(|_| CliError::Usage(format!("line {line}: cannot parse {name} `{raw}`")))
        };
        let study = StudyRecord::new(num(ie, "effect")?, num(is, "se")?)
            .map_err(|e| CliError::Usage(format!("line {line}: {e}")))?;
        studies.push(study);
    }
    Ok(MetaDataset::new(studies)?)
}

pub fn read_studies(path: &Path) -> CliResult<MetaDataset> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    read_studies_from(file)
}
