use std::collections::HashMap;
use std::path::Path;
use std::process::Command;

use super::{Document, IngestError, SourceRef};

/// Extension (lowercase, no dot) to converter command. The command gets the
/// file path as its final argument and must print markdown on stdout.
pub type ConverterMap = HashMap<String, String>;

/// Reads a local file into a [`Document`].
///
/// `.txt` and `.md` are taken verbatim, `.csv` becomes a markdown table and
/// anything else goes through the configured converter for its extension.
pub fn parse_local_file(path: &Path, converters: &ConverterMap) -> Result<Document, IngestError> {
    if !path.is_file() {
        return Err(IngestError::FileNotFound(path.to_path_buf()));
    }
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    let text = match ext.as_str() {
        "txt" | "md" | "markdown" => read_text(path)?,
        "csv" => csv_to_markdown(&read_text(path)?).map_err(|e| IngestError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?,
        _ => match converters.get(&ext) {
            Some(command) => run_converter(command, path)?,
            None => return Err(IngestError::UnsupportedFormat(ext)),
        },
    };
    Document::new(SourceRef::local_file(path), text)
}

fn read_text(path: &Path) -> Result<String, IngestError> {
    std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn escape_cell(cell: &str) -> String {
    cell.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .replace('|', "\\|")
}

/// Header row, separator, then body rows. Short rows are padded.
pub(crate) fn csv_to_markdown(raw: &str) -> Result<String, csv::Error> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(raw.as_bytes());
    let mut rows = Vec::new();
    for record in reader.records() {
        rows.push(record?.iter().map(escape_cell).collect::<Vec<_>>());
    }
    let Some(width) = rows.iter().map(Vec::len).max() else {
        return Ok(String::new());
    };
    let mut lines = Vec::with_capacity(rows.len() + 1);
    for (i, mut row) in rows.into_iter().enumerate() {
        row.resize(width, String::new());
        lines.push(format!("| {} |", row.join(" | ")));
        if i == 0 {
            lines.push(format!("| {} |", vec!["---"; width].join(" | ")));
        }
    }
    Ok(lines.join("\n"))
}

fn run_converter(command: &str, path: &Path) -> Result<String, IngestError> {
    let mut parts = command.split_whitespace();
    let program = parts
        .next()
        .ok_or_else(|| IngestError::InvalidArgument("empty converter command".into()))?;
    let output = Command::new(program)
        .args(parts)
        .arg(path)
        .output()
        .map_err(|e| IngestError::ConverterFailed {
            command: command.to_string(),
            status: "spawn failed".into(),
            stderr: e.to_string(),
        })?;
    if !output.status.success() {
        return Err(IngestError::ConverterFailed {
            command: command.to_string(),
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    Ok(String::from_utf8_lossy(&output.stdout).into_owned())
}
