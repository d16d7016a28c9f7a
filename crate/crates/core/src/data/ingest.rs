use std::collections::{HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::Deserialize;

use super::record::PatchRecord;
use super::votes::{aggregate_votes, VoteRecord, VoteValue};
use crate::error::{Error, Result};

/// Columns of an annotation table. A row carries either a `label` or one
/// vote (`annotator_id`, `round`, `value`, optional RFC 3339 `timestamp`);
/// several vote rows may share a `patch_id`.
pub const ANNOTATION_HEADER: &str = "patch_id,slide_id,x,y,label,annotator_id,round,value,timestamp";

#[derive(Debug, Deserialize)]
struct Row {
    patch_id: String,
    slide_id: String,
    #[serde(default)]
    x: Option<f64>,
    #[serde(default)]
    y: Option<f64>,
    #[serde(default)]
    label: Option<f64>,
    #[serde(default)]
    annotator_id: Option<String>,
    #[serde(default)]
    round: Option<u32>,
    #[serde(default)]
    value: Option<f64>,
    #[serde(default)]
    timestamp: Option<String>,
}

struct Pending {
    record: PatchRecord,
    has_label_row: bool,
    seen_votes: HashSet<(String, u32)>,
}

pub fn ingest_annotations(path: impl AsRef<Path>) -> Result<Vec<PatchRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file)
}

/// Parses an annotation table. Labels are recomputed from votes whenever a
/// patch has any. Errors name the offending row (1-based, header is row 1).
pub fn ingest_reader(reader: impl Read) -> Result<Vec<PatchRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, Pending> = HashMap::new();
    for result in rdr.records() {
        let raw = result?;
        let line = raw.position().map(|p| p.line()).unwrap_or(0);
        let bad = |msg: String| Error::validation(format!("row {line}: {msg}"));
        let row: Row = raw.deserialize(Some(&headers)).map_err(|e| bad(e.to_string()))?;
        if row.patch_id.is_empty() {
            return Err(bad("empty patch_id".into()));
        }
        let center = match (row.x, row.y) {
            (Some(x), Some(y)) if x.is_finite() && y.is_finite() => Some((x, y)),
            (None, None) => None,
            _ => return Err(bad("x and y must both be present and finite".into())),
        };
        let vote = match (&row.annotator_id, row.round, row.value) {
            (None, None, None) => None,
            (Some(a), Some(round), Some(v)) => {
                let value = VoteValue::try_from(v).map_err(|e| bad(e.to_string()))?;
                let timestamp = row
                    .timestamp
                    .as_deref()
                    .map(|t| {
                        DateTime::parse_from_rfc3339(t)
                            .map(|d| d.with_timezone(&Utc))
                            .map_err(|e| bad(format!("timestamp {t:?}: {e}")))
                    })
                    .transpose()?;
                let vote = VoteRecord {
                    annotator_id: a.clone(),
                    round,
                    value,
                    timestamp,
                };
                vote.validate().map_err(|e| bad(e.to_string()))?;
                Some(vote)
            }
            _ => return Err(bad("vote rows need annotator_id, round and value".into())),
        };
        if vote.is_some() == row.label.is_some() {
            return Err(bad("row must carry exactly one of a label or a vote".into()));
        }
        let entry = match pending.get_mut(&row.patch_id) {
            Some(p) => {
                if p.record.slide_id != row.slide_id || p.record.center != center {
                    return Err(bad(format!(
                        "patch {} appears with a different slide or position",
                        row.patch_id
                    )));
                }
                p
            }
            None => {
                order.push(row.patch_id.clone());
                pending.entry(row.patch_id.clone()).or_insert(Pending {
                    record: PatchRecord {
                        patch_id: row.patch_id.clone(),
                        slide_id: row.slide_id.clone(),
                        center,
                        image: None,
                        votes: Vec::new(),
                        label: 0.0,
                    },
                    has_label_row: false,
                    seen_votes: HashSet::new(),
                })
            }
        };
        match (vote, row.label) {
            (Some(v), _) => {
                if !entry.seen_votes.insert((v.annotator_id.clone(), v.round)) {
                    return Err(bad(format!(
                        "duplicate vote by {} in round {} for patch {}",
                        v.annotator_id, v.round, row.patch_id
                    )));
                }
                entry.record.votes.push(v);
            }
            (None, Some(label)) => {
                if entry.has_label_row {
                    return Err(bad(format!("duplicate patch_id {}", row.patch_id)));
                }
                if !(0.0..=1.0).contains(&label) {
                    return Err(bad(format!("label {label} outside [0, 1]")));
                }
                entry.has_label_row = true;
                entry.record.label = label;
            }
            (None, None) => unreachable!(),
        }
    }
    order
        .into_iter()
        .map(|id| {
            let mut r = pending.remove(&id).expect("pending record").record;
            if !r.votes.is_empty() {
                r.label = aggregate_votes(&r.votes)?;
            }
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(body: &str) -> Result<Vec<PatchRecord>> {
        ingest_reader(format!("{ANNOTATION_HEADER}\n{body}").as_bytes())
    }

    #[test]
    fn label_rows() {
        let recs = parse("a,s1,10,20,1,,,,\nb,s1,30,40,0,,,,\nc,s2,5,5,0.5,,,,\n").unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].center, Some((10.0, 20.0)));
        assert_eq!(recs[2].label, 0.5);
        assert!(recs.iter().all(|r| r.votes.is_empty()));
    }

    #[test]
    fn label_only_header_is_accepted() {
        let recs = ingest_reader("patch_id,slide_id,x,y,label\na,s,1,2,1\n".as_bytes()).unwrap();
        assert_eq!(recs[0].label, 1.0);
    }

    #[test]
    fn votes_are_aggregated_per_instance() {
        let mut body = String::new();
        let values = [[1.0, 1.0, 0.5], [0.0, 1.0, 0.5]];
        for (a, vs) in ["ann1", "ann2"].iter().zip(values) {
            for (round, v) in vs.iter().enumerate() {
                body += &format!("p,s,1,1,,{a},{},{v},2024-01-01T00:00:0{}Z\n", round + 1, round);
            }
        }
        let recs = parse(&body).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].votes.len(), 6);
        let oracle = values.iter().flatten().sum::<f64>() / 6.0;
        assert!((recs[0].label - oracle).abs() < 1e-12);
        assert!(recs[0].votes[0].timestamp.is_some());
    }

    #[test]
    fn votes_override_a_label_row() {
        let recs = parse("p,s,1,1,1,,,,\np,s,1,1,,a,1,0,\n").unwrap();
        assert_eq!(recs[0].label, 0.0);
    }

    fn err(body: &str) -> String {
        parse(body).unwrap_err().to_string()
    }

    #[test]
    fn rejects_bad_rows_with_row_numbers() {
        assert!(err("a,s,1,1,,x,1,0.3,\n").contains("row 2"));
        assert!(err("a,s,1,1,1,,,,\nb,s,1,1,1,,,,\na,s,1,1,0,,,,\n").contains("row 4"));
        assert!(err("a,s,1,1,1,,,,\na,s,1,1,0,,,,\n").contains("duplicate patch_id"));
        assert!(err("a,s,1,1,,x,4,1,\n").contains("round"));
        assert!(err("a,s,1,1,,x,1,1,\na,s,1,1,,x,1,0,\n").contains("duplicate vote"));
        assert!(err("a,s,1,,1,,,,\n").contains("x and y"));
        assert!(err("a,s,1,1,,,,,\n").contains("exactly one"));
        assert!(err("a,s,1,1,1,x,1,1,\n").contains("exactly one"));
        assert!(err("a,s,1,1,,x,,1,\n").contains("annotator_id, round and value"));
        assert!(err("a,s,1,1,2,,,,\n").contains("outside"));
        assert!(err("a,s,1,1,,x,1,1,yesterday\n").contains("timestamp"));
        assert!(err("a,s,1,1,1,,,,\na,t,1,1,,x,1,1,\n").contains("different slide"));
        assert!(err("a,s,one,1,1,,,,\n").contains("row 2"));
    }
}
