//! Flat tables and plot data for external tools.
//!
//! Layout under the output directory:
//!
//! ```text
//! summary.csv                one row per room
//! <room-slug>/report.json    the MetricsReport
//! <room-slug>/plot.json      both BoxplotSummary values
//! <room-slug>/refs.csv       room, repo, number, kind, category, referenced_at, is_first_mention
//! <room-slug>/resolution.csv repo, number, seconds (empty when open)
//! <room-slug>/ratios.csv     repo, number, before, after, ratio (empty when undefined)
//! ```

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{BoxplotSummary, MetricsReport, RoomAnalysis};
use crate::sources::origin_slug;
use crate::store::{jsonl, StoreError};

fn csv_bytes<F>(header: &[&str], rows: F) -> Result<Vec<u8>, StoreError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let encode = |e: csv::Error| StoreError::Encode(e.to_string());
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).map_err(encode)?;
    rows(&mut w).map_err(encode)?;
    w.into_inner().map_err(|e| StoreError::Encode(e.to_string()))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Pretty JSON with a trailing newline.
pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, StoreError> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| StoreError::Encode(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

#[derive(Serialize)]
struct PlotData<'a> {
    room: &'a str,
    resolution_seconds: &'a BoxplotSummary,
    comment_ratio: &'a BoxplotSummary,
}

/// Every file for one room, as `(relative path, bytes)`.
pub fn room_files(analysis: &RoomAnalysis) -> Result<Vec<(PathBuf, Vec<u8>)>, StoreError> {
    let report = &analysis.report;
    let dir = PathBuf::from(origin_slug(&report.room));

    let refs = csv_bytes(
        &["room", "repo", "number", "kind", "category", "referenced_at", "is_first_mention"],
        |w| {
            for e in &analysis.events {
                w.write_record([
                    e.room.clone(),
                    e.repo.slug(),
                    e.number.to_string(),
                    e.kind.as_str().to_string(),
                    e.category.as_str().to_string(),
                    e.referenced_at.to_string(),
                    e.is_first_mention.to_string(),
                ])?;
            }
            Ok(())
        },
    )?;
    let resolution = csv_bytes(&["repo", "number", "seconds"], |w| {
        for r in &analysis.resolutions {
            w.write_record([r.repo.slug(), r.number.to_string(), opt(r.seconds)])?;
        }
        Ok(())
    })?;
    let ratios = csv_bytes(&["repo", "number", "before", "after", "ratio"], |w| {
        for r in &analysis.ratios {
            w.write_record([
                r.repo.slug(),
                r.number.to_string(),
                r.before.to_string(),
                r.after.to_string(),
                opt(r.ratio),
            ])?;
        }
        Ok(())
    })?;
    let plot = json_bytes(&PlotData {
        room: &report.room,
        resolution_seconds: &report.resolution,
        comment_ratio: &report.comment_ratio,
    })?;

    Ok(vec![
        (dir.join("report.json"), json_bytes(report)?),
        (dir.join("plot.json"), plot),
        (dir.join("refs.csv"), refs),
        (dir.join("resolution.csv"), resolution),
        (dir.join("ratios.csv"), ratios),
    ])
}

pub fn summary_csv(reports: &[&MetricsReport]) -> Result<Vec<u8>, StoreError> {
    csv_bytes(
        &[
            "room",
            "cutoff",
            "total_messages",
            "messages_with_refs",
            "refs_project",
            "refs_parent",
            "refs_foreign",
            "resolution_count",
            "resolution_median",
            "resolution_excluded",
            "ratio_count",
            "ratio_median",
            "ratio_excluded",
        ],
        |w| {
            for r in reports {
                let count = |c| r.ref_counts.get(&c).copied().unwrap_or(0).to_string();
                use crate::refparse::Category::*;
                w.write_record([
                    r.room.clone(),
                    opt(r.cutoff),
                    r.total_messages.to_string(),
                    r.messages_with_refs.to_string(),
                    count(Project),
                    count(Parent),
                    count(Foreign),
                    r.resolution.count.to_string(),
                    opt(r.resolution.median),
                    r.resolution.excluded_undefined.to_string(),
                    r.comment_ratio.count.to_string(),
                    opt(r.comment_ratio.median),
                    r.comment_ratio.excluded_undefined.to_string(),
                ])?;
            }
            Ok(())
        },
    )
}

/// Writes all exports under `out`; files whose bytes are unchanged are left
/// alone. Returns the number of files rewritten.
pub fn write_exports(out: &Path, analyses: &[RoomAnalysis]) -> Result<usize, StoreError> {
    let mut written = 0;
    for analysis in analyses {
        for (rel, bytes) in room_files(analysis)? {
            written += usize::from(jsonl::replace_if_changed(&out.join(rel), &bytes)?);
        }
    }
    let reports: Vec<&MetricsReport> = analyses.iter().map(|a| &a.report).collect();
    written += usize::from(jsonl::replace_if_changed(&out.join("summary.csv"), &summary_csv(&reports)?)?);
    Ok(written)
}
