//! File formats: MovieLens-style CSVs, the text embedding store and the
//! attribute-direction JSON file.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Cav, CavSet, ItemId, Rating, RatingsDataset, UserId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CatalogRow {
    pub id: ItemId,
    pub title: String,
    pub year: i32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagRow {
    pub item: ItemId,
    pub tag: String,
}

fn open_csv(path: &Path, expected: &[&str]) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let found: Vec<&str> = headers.iter().collect();
    if found.len() < expected.len() || found[..expected.len()] != *expected {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!("expected header `{}`, found `{}`", expected.join(","), found.join(",")),
        });
    }
    Ok(reader)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: e.to_string(),
    }
}

fn field<T: FromStr>(path: &Path, record: &csv::StringRecord, idx: usize, name: &str) -> Result<T> {
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    let raw = record.get(idx).ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line,
        message: format!("missing field `{name}`"),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        message: format!("invalid `{name}` value `{raw}`"),
    })
}

/// Reads `userId,movieId,rating,timestamp` and applies the rating-count filters.
pub fn load_ratings(
    path: impl AsRef<Path>,
    min_item_ratings: usize,
    min_user_ratings: usize,
) -> Result<RatingsDataset> {
    let path = path.as_ref();
    let mut reader = open_csv(path, &["userId", "movieId", "rating"])?;
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let value: f64 = field(path, &row, 2, "rating")?;
        if !value.is_finite() || value == 0.0 {
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                message: format!("rating must be finite and nonzero, got {value}"),
            });
        }
        records.push(Rating {
            user: UserId(field(path, &row, 0, "userId")?),
            item: ItemId(field(path, &row, 1, "movieId")?),
            value,
        });
    }
    RatingsDataset::from_records(records)?.filter(min_item_ratings, min_user_ratings)
}

pub fn write_ratings_csv(path: impl AsRef<Path>, ratings: &[Rating]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("userId,movieId,rating,timestamp\n");
    for r in ratings {
        out.push_str(&format!("{},{},{},0\n", r.user, r.item, r.value));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads `movieId,title,year`.
pub fn read_catalog_csv(path: impl AsRef<Path>) -> Result<Vec<CatalogRow>> {
    let path = path.as_ref();
    let mut reader = open_csv(path, &["movieId", "title", "year"])?;
    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        rows.push(CatalogRow {
            id: ItemId(field(path, &row, 0, "movieId")?),
            title: field(path, &row, 1, "title")?,
            year: field(path, &row, 2, "year")?,
        });
    }
    Ok(rows)
}

pub fn write_catalog_csv(path: impl AsRef<Path>, rows: &[CatalogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let io_err = |e: csv::Error| csv_error(path, e);
    writer.write_record(["movieId", "title", "year"]).map_err(io_err)?;
    for r in rows {
        writer
            .write_record([r.id.to_string(), r.title.clone(), r.year.to_string()])
            .map_err(io_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Reads `movieId,tag`.
pub fn read_tags_csv(path: impl AsRef<Path>) -> Result<Vec<TagRow>> {
    let path = path.as_ref();
    let mut reader = open_csv(path, &["movieId", "tag"])?;
    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        rows.push(TagRow {
            item: ItemId(field(path, &row, 0, "movieId")?),
            tag: field(path, &row, 1, "tag")?,
        });
    }
    Ok(rows)
}

pub fn write_tags_csv(path: impl AsRef<Path>, rows: &[TagRow]) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let io_err = |e: csv::Error| csv_error(path, e);
    writer.write_record(["movieId", "tag"]).map_err(io_err)?;
    for r in rows {
        writer
            .write_record([r.item.to_string(), r.tag.clone()])
            .map_err(io_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Writes the embedding store: a `# d=<d>` header, then `id,v0,...,v{d-1}`.
pub fn write_embeddings(path: impl AsRef<Path>, dim: usize, rows: &[(u64, Vec<f64>)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = format!("# d={dim}\n");
    for (id, v) in rows {
        if v.len() != dim {
            return Err(Error::Data(format!("row {id} has dimension {}, expected {dim}", v.len())));
        }
        buf.push_str(&id.to_string());
        for x in v {
            buf.push(',');
            buf.push_str(&x.to_string());
        }
        buf.push('\n');
    }
    out.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<(usize, Vec<(u64, Vec<f64>)>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line: line as u64,
        message,
    };
    let mut lines = text.lines().enumerate();
    let dim = match lines.next() {
        Some((_, header)) => header
            .strip_prefix("# d=")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .filter(|d| *d > 0)
            .ok_or_else(|| parse_err(1, format!("expected `# d=<d>` header, found `{header}`")))?,
        None => return Err(parse_err(1, "empty embedding file".into())),
    };
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let id = parts
            .next()
            .and_then(|p| p.trim().parse::<u64>().ok())
            .ok_or_else(|| parse_err(i + 1, "invalid id".into()))?;
        let values = parts
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(i + 1, e.to_string()))?;
        if values.len() != dim {
            return Err(parse_err(
                i + 1,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        rows.push((id, values));
    }
    Ok((dim, rows))
}

#[derive(Serialize, Deserialize)]
struct CavFile {
    attributes: Vec<Cav>,
}

pub fn write_cavs(path: impl AsRef<Path>, cavs: &CavSet) -> Result<()> {
    let path = path.as_ref();
    let doc = CavFile {
        attributes: cavs.as_slice().to_vec(),
    };
    let text = serde_json::to_string_pretty(&doc).expect("attribute file serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_cavs(path: impl AsRef<Path>) -> Result<CavSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: CavFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line() as u64,
        message: e.to_string(),
    })?;
    let cavs = doc
        .attributes
        .into_iter()
        .map(|c| Cav::new(c.id, c.name, c.direction, c.sigma))
        .collect::<Result<Vec<_>>>()?;
    CavSet::new(cavs)
}
