use std::io::{BufRead, BufReader, Read};

use csv::{ReaderBuilder, StringRecord};

use super::{BoxLabel, CaptionRecord, ClassEntry, ClassTable, CorpusError, ImageLabel, Presence, Result, Verification};

fn csv_records<R: Read>(stream: R) -> impl Iterator<Item = Result<(usize, StringRecord)>> {
    ReaderBuilder::new().has_headers(false).flexible(true).from_reader(stream).into_records().map(|r| {
        r.map(|rec| {
            let line = rec.position().map_or(0, |p| p.line() as usize);
            (line, rec)
        })
        .map_err(|e| CorpusError::Parse { line: e.position().map_or(0, |p| p.line() as usize), message: e.to_string() })
    })
}

fn parse_err(line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Parse { line, message: message.into() }
}

fn expect_columns(rec: &StringRecord, line: usize, n: usize) -> Result<()> {
    if rec.len() != n {
        return Err(parse_err(line, format!("expected {n} columns, found {}", rec.len())));
    }
    Ok(())
}

fn is_header(rec: &StringRecord) -> bool {
    rec.get(0).is_some_and(|f| f.trim() == "ImageID")
}

/// Parses `class_id,display_name` rows. Display names are trimmed and
/// lowercased; row order is kept.
pub fn parse_class_descriptions<R: Read>(stream: R) -> Result<ClassTable> {
    let mut table = ClassTable::new();
    for item in csv_records(stream) {
        let (line, rec) = item?;
        expect_columns(&rec, line, 2)?;
        let class_id = rec[0].trim().to_owned();
        let display_name = rec[1].trim().to_lowercase();
        if class_id.is_empty() || display_name.is_empty() {
            return Err(parse_err(line, "empty class id or display name"));
        }
        if !table.insert(ClassEntry { class_id: class_id.clone(), display_name }) {
            return Err(parse_err(line, format!("duplicate class id {class_id}")));
        }
    }
    Ok(table)
}

/// Parses `image_id,source,class_id,confidence` rows. A leading header row
/// starting with `ImageID` is skipped.
pub fn parse_image_labels<R: Read>(stream: R) -> Result<Vec<ImageLabel>> {
    let mut out = Vec::new();
    for (i, item) in csv_records(stream).enumerate() {
        let (line, rec) = item?;
        if i == 0 && is_header(&rec) {
            continue;
        }
        expect_columns(&rec, line, 4)?;
        let confidence: f64 =
            rec[3].trim().parse().map_err(|_| parse_err(line, format!("confidence {:?} is not a number", &rec[3])))?;
        let presence = if confidence == 1.0 {
            Presence::Positive
        } else if confidence == 0.0 {
            Presence::Negative
        } else {
            return Err(parse_err(line, format!("confidence {confidence} is not binary (0 or 1)")));
        };
        out.push(ImageLabel {
            image_id: rec[0].trim().to_owned(),
            class_id: rec[2].trim().to_owned(),
            presence,
            verification: Verification::from_source(rec[1].trim()),
        });
    }
    Ok(out)
}

/// Parses `image_id,class_id,x_min,x_max,y_min,y_max` rows with normalized
/// coordinates.
pub fn parse_box_labels<R: Read>(stream: R) -> Result<Vec<BoxLabel>> {
    let mut out = Vec::new();
    for (i, item) in csv_records(stream).enumerate() {
        let (line, rec) = item?;
        if i == 0 && is_header(&rec) {
            continue;
        }
        expect_columns(&rec, line, 6)?;
        let mut coords = [0.0f64; 4];
        for (c, field) in coords.iter_mut().zip(rec.iter().skip(2)) {
            *c = field.trim().parse().map_err(|_| parse_err(line, format!("coordinate {field:?} is not a number")))?;
        }
        let [x_min, x_max, y_min, y_max] = coords;
        if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(CorpusError::Validation { row: line, message: "box coordinates must lie in [0, 1]".into() });
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(CorpusError::Validation {
                row: line,
                message: format!("degenerate box ({x_min},{y_min})-({x_max},{y_max})"),
            });
        }
        out.push(BoxLabel {
            image_id: rec[0].trim().to_owned(),
            class_id: rec[1].trim().to_owned(),
            x_min,
            y_min,
            x_max,
            y_max,
        });
    }
    Ok(out)
}

/// Parses JSON-lines caption records; keys other than `image_id` and
/// `caption` are ignored. Blank lines are skipped.
pub fn parse_localized_narratives<R: Read>(stream: R) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(stream).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| parse_err(lineno, "expected a JSON object"))?;
        let field = |key: &str| {
            obj.get(key)
                .and_then(|v| v.as_str())
                .ok_or_else(|| parse_err(lineno, format!("missing string field `{key}`")))
        };
        let image_id = field("image_id")?.to_owned();
        let caption = field("caption")?.split_whitespace().collect::<Vec<_>>().join(" ");
        if caption.is_empty() {
            return Err(parse_err(lineno, "empty caption"));
        }
        out.push(CaptionRecord { image_id, caption });
    }
    Ok(out)
}
