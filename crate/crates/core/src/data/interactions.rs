use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use crate::data::{IdMapping, InteractionMatrix};
use crate::error::{Error, Result};

struct Row {
    user: String,
    item: String,
    rating: Option<f64>,
}

fn parse_rows(path: &Path, text: &str) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if !(2..=3).contains(&fields.len()) {
            return Err(err(format!("expected 2 or 3 tab-separated fields, found {}", fields.len())));
        }
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(err("empty user or item id".into()));
        }
        let rating = match fields.get(2) {
            Some(r) => Some(
                r.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("invalid rating `{r}`")))?,
            ),
            None => None,
        };
        rows.push(Row {
            user: user.to_string(),
            item: item.to_string(),
            rating,
        });
    }
    Ok(rows)
}

/// Ids sort numerically when every id is an unsigned integer, lexicographically otherwise.
fn sorted_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeSet<&str> = ids.collect();
    let mut out: Vec<String> = set.into_iter().map(str::to_string).collect();
    if out.iter().all(|s| s.parse::<u64>().is_ok()) {
        out.sort_by_key(|s| s.parse::<u64>().unwrap());
    }
    out
}

fn keep(row: &Row, min_rating: Option<f64>) -> bool {
    match (min_rating, row.rating) {
        (Some(min), Some(r)) => r >= min,
        _ => true,
    }
}

/// Reads `user<TAB>item[<TAB>rating]` rows into an unsplit matrix.
///
/// Ids are remapped to contiguous indices in sorted id order; duplicate pairs collapse.
/// With `min_rating`, rated rows below the threshold are dropped.
pub fn load_interactions(path: &Path, min_rating: Option<f64>) -> Result<InteractionMatrix> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<Row> = parse_rows(path, &text)?
        .into_iter()
        .filter(|r| keep(r, min_rating))
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mapping = IdMapping {
        users: sorted_ids(rows.iter().map(|r| r.user.as_str())),
        items: sorted_ids(rows.iter().map(|r| r.item.as_str())),
    };
    build(rows, mapping, path)
}

/// Like [`load_interactions`] but indexes through a fixed mapping, so that users and items
/// without surviving interactions keep their slots. Unknown ids are an error.
pub fn load_interactions_with_mapping(
    path: &Path,
    min_rating: Option<f64>,
    mapping: IdMapping,
) -> Result<InteractionMatrix> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<Row> = parse_rows(path, &text)?
        .into_iter()
        .filter(|r| keep(r, min_rating))
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    build(rows, mapping, path)
}

fn build(rows: Vec<Row>, mapping: IdMapping, path: &Path) -> Result<InteractionMatrix> {
    let user_index: HashMap<&str, usize> =
        mapping.users.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let item_index: HashMap<&str, usize> =
        mapping.items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut per_user = vec![Vec::new(); mapping.users.len()];
    for row in &rows {
        let unknown = |what: &str, id: &str| Error::Malformed {
            what: "interactions",
            message: format!("{}: {what} id `{id}` missing from mapping", path.display()),
        };
        let u = *user_index
            .get(row.user.as_str())
            .ok_or_else(|| unknown("user", &row.user))?;
        let i = *item_index
            .get(row.item.as_str())
            .ok_or_else(|| unknown("item", &row.item))?;
        per_user[u].push(i);
    }
    let item_count = mapping.items.len();
    InteractionMatrix::from_user_items(item_count, per_user, mapping)
}

/// Writes every interaction of the matrix as `user<TAB>item` using the external ids.
pub fn write_interactions(path: &Path, data: &InteractionMatrix) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for u in 0..data.user_count() {
        for i in data.all_items(u) {
            writeln!(out, "{}\t{}", data.mapping.users[u], data.mapping.items[i])?;
        }
    }
    out.flush()?;
    Ok(())
}
