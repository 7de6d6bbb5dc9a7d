//! Token dataset ingestion.
//!
//! Two interchangeable formats, selected by file extension:
//!
//! * text (any extension other than `.bin`): one prompt per line,
//!   whitespace-separated integer token ids; blank lines are skipped.
//! * binary (`.bin`): repeated records of a little-endian `u32` length
//!   prefix followed by that many little-endian `u32` token ids.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Read a token dataset, dispatching on the `.bin` extension.
pub fn read_token_file(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "bin") {
        read_binary(path)
    } else {
        read_text(path)
    }
}

pub fn read_text(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let path = path.as_ref();
    let contents = fs::read_to_string(path)?;
    let mut prompts = Vec::new();
    for (lineno, line) in contents.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ids: std::result::Result<Vec<u32>, _> = line
            .split_whitespace()
            .map(|tok| tok.parse::<u32>())
            .collect();
        match ids {
            Ok(ids) => prompts.push(ids),
            Err(e) => {
                return Err(Error::BadTokenFile {
                    path: path.to_path_buf(),
                    reason: format!("line {}: {}", lineno + 1, e),
                })
            }
        }
    }
    Ok(prompts)
}

pub fn read_binary(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut prompts = Vec::new();
    let mut pos = 0usize;
    while pos < bytes.len() {
        if pos + 4 > bytes.len() {
            return Err(Error::BadTokenFile {
                path: path.to_path_buf(),
                reason: "truncated length prefix".into(),
            });
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + len * 4 > bytes.len() {
            return Err(Error::BadTokenFile {
                path: path.to_path_buf(),
                reason: format!("record of {len} ids exceeds file size"),
            });
        }
        let ids = bytes[pos..pos + len * 4]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += len * 4;
        prompts.push(ids);
    }
    Ok(prompts)
}

pub fn write_text(path: impl AsRef<Path>, prompts: &[Vec<u32>]) -> Result<()> {
    let mut out = String::new();
    for p in prompts {
        let line: Vec<String> = p.iter().map(|t| t.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_binary(path: impl AsRef<Path>, prompts: &[Vec<u32>]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for p in prompts {
        f.write_all(&(p.len() as u32).to_le_bytes())?;
        for id in p {
            f.write_all(&id.to_le_bytes())?;
        }
    }
    Ok(())
}
