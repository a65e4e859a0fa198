//! Dataset directories and split files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nodule_cascade::train::Split;
use nodule_cascade::{Error, Result};

/// `(series uid, header path)` for every `.mhd` in `dir`, sorted by uid.
pub fn list_volumes(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        if p.extension().and_then(|e| e.to_str()) == Some("mhd") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), p.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub const PARTS: [&str; 3] = ["train", "val", "test"];

pub fn split_to_csv(split: &Split<String>) -> String {
    let mut s = String::from("seriesuid,part\n");
    for (part, ids) in PARTS.iter().zip([&split.train, &split.val, &split.test]) {
        for id in ids {
            let _ = writeln!(s, "{id},{part}");
        }
    }
    s
}

pub fn read_split(path: &Path) -> Result<Split<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut parts: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = |msg: String| Error::Table {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let (uid, part) = line.split_once(',').ok_or_else(|| bad("expected `seriesuid,part`".into()))?;
        let part = PARTS
            .iter()
            .find(|p| **p == part.trim())
            .ok_or_else(|| bad(format!("unknown part `{part}`")))?;
        parts.entry(part).or_default().push(uid.trim().to_string());
    }
    let mut take = |p: &str| parts.remove(p).unwrap_or_default();
    Ok(Split {
        train: take("train"),
        val: take("val"),
        test: take("test"),
    })
}

pub fn split_part<'a>(split: &'a Split<String>, part: &str) -> Option<&'a [String]> {
    match part {
        "train" => Some(&split.train),
        "val" => Some(&split.val),
        "test" => Some(&split.test),
        _ => None,
    }
}
