use std::io::Write;
use std::path::Path;

use serde::Serialize;

use thematic_core::{theme_mapping, RunStore, RunView, Stage};

use crate::error::CliError;
use crate::{ExportKind, Format};

pub(crate) fn json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::other(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).map_err(|e| CliError::other(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

fn csv_of<R, I>(header: &[&str], rows: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::other(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::other(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::other(e.to_string()))
}

fn unsupported(what: ExportKind, format: Format) -> CliError {
    CliError::usage(format!("{what:?} cannot be exported as {format:?}").to_lowercase())
}

/// Renders one artifact of a run.
pub(crate) fn render(
    store: &RunStore,
    what: ExportKind,
    format: Option<Format>,
    round: Option<u32>,
    k: Option<usize>,
) -> Result<String, CliError> {
    let view = RunView::new(store);
    let no_classification = || CliError::validation("the run has no completed classification");
    match what {
        ExportKind::Codes => {
            let round = match round {
                Some(r) => r,
                None => *store
                    .stage_rounds(Stage::Coding)?
                    .last()
                    .ok_or_else(|| CliError::validation("the run has no initial codes"))?,
            };
            let codes = view.codes(round)?;
            match format.unwrap_or(Format::Jsonl) {
                Format::Jsonl => jsonl(&codes),
                Format::Json => json(&codes),
                Format::Csv => csv_of(
                    &["data_point_id", "round", "code"],
                    codes
                        .iter()
                        .map(|c| [c.data_point_id.clone(), c.round.to_string(), c.code_text.clone()]),
                ),
                f => Err(unsupported(what, f)),
            }
        }
        ExportKind::Assignments => {
            let rows = view.assignments()?.ok_or_else(no_classification)?;
            match format.unwrap_or(Format::Jsonl) {
                Format::Jsonl => jsonl(&rows),
                Format::Json => json(&rows),
                Format::Csv => csv_of(
                    &["data_point_id", "rank", "theme"],
                    rows.iter().flat_map(|a| {
                        a.ranked_themes
                            .iter()
                            .enumerate()
                            .map(|(i, t)| [a.data_point_id.clone(), (i + 1).to_string(), t.clone()])
                    }),
                ),
                f => Err(unsupported(what, f)),
            }
        }
        ExportKind::Themes => match format.unwrap_or(Format::Json) {
            Format::Json => json(&serde_json::json!({
                "latest": store.theme_records()?.pop(),
                "approved": store.approved_themes()?,
            })),
            f => Err(unsupported(what, f)),
        },
        ExportKind::Mapping | ExportKind::Flows => {
            let rows = view.assignments()?.ok_or_else(no_classification)?;
            let gold = store.dataset()?.gold();
            if gold.is_empty() {
                return Err(CliError::validation("the dataset has no gold themes"));
            }
            let m = theme_mapping(&rows, &gold).map_err(|e| CliError::validation(e.to_string()))?;
            match (what, format) {
                (ExportKind::Mapping, None | Some(Format::Json)) => json(&m),
                (ExportKind::Mapping, Some(Format::Text)) => Ok(m.to_text()),
                (ExportKind::Mapping, Some(Format::Csv)) => {
                    let mut header = vec!["gold"];
                    header.extend(m.columns.iter().map(String::as_str));
                    csv_of(
                        &header,
                        m.rows.iter().zip(&m.cells).map(|(r, cells)| {
                            std::iter::once(r.clone()).chain(cells.iter().map(|c| c.to_string()))
                        }),
                    )
                }
                (ExportKind::Flows, None | Some(Format::Csv)) => Ok(m.flows_csv()),
                (ExportKind::Flows, Some(Format::Json)) => json(&m.flows()),
                (_, Some(f)) => Err(unsupported(what, f)),
                (_, None) => unreachable!("defaults handled above"),
            }
        }
        ExportKind::Report => {
            let k = k.unwrap_or(store.manifest().settings.k);
            let report = view.evaluate(k)?;
            match format.unwrap_or(Format::Json) {
                Format::Json => json(&report),
                Format::Text => Ok(report.to_text()),
                f => Err(unsupported(what, f)),
            }
        }
    }
}

/// Writes to `path` when given, else to `out`.
pub(crate) fn emit(text: &str, path: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::other(format!("cannot write {}: {e}", p.display()))),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| CliError::other(format!("cannot write output: {e}"))),
    }
}
