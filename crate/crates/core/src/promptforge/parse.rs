use std::fmt;

use serde::Serialize;
use serde_json::{Map, Value};

use super::{BBox, LabTestEntry, TemporalClass};

/// The reply did not contain the expected answer shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParseMiss {
    pub reason: String,
}

impl ParseMiss {
    fn new(reason: impl Into<String>) -> Self {
        Self { reason: reason.into() }
    }
}

impl fmt::Display for ParseMiss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "parse miss: {}", self.reason)
    }
}

impl std::error::Error for ParseMiss {}

const FINAL_ANSWER: &str = "final answer";
const DIAGNOSIS: &str = "the most likely diagnosis is";

/// Byte offset just past the last case-insensitive occurrence of any marker.
fn after_last_marker(text: &str, markers: &[&str]) -> Option<usize> {
    // ASCII lowercasing keeps byte offsets intact.
    let lower = text.to_ascii_lowercase();
    markers
        .iter()
        .filter_map(|m| lower.rfind(m).map(|i| (i, i + m.len())))
        .max_by_key(|(start, _)| *start)
        .map(|(_, end)| end)
}

fn is_lead(c: char) -> bool {
    c.is_whitespace() || matches!(c, ':' | ',' | '*' | '-')
}

fn is_wrap(c: char) -> bool {
    matches!(c, '(' | ')' | '[' | ']' | '"' | '\'' | '*' | '`' | '“' | '”' | '‘' | '’')
}

fn is_trailing_punct(c: char) -> bool {
    matches!(c, '.' | ',' | ';' | ':' | '!' | '?')
}

fn clean_answer(s: &str) -> &str {
    let mut s = s.trim_start_matches(is_lead);
    loop {
        let next = s
            .trim()
            .trim_start_matches(is_wrap)
            .trim_end_matches(|c| is_wrap(c) || is_trailing_punct(c));
        if next.len() == s.len() {
            return next;
        }
        s = next;
    }
}

fn answer_after(text: &str, start: usize) -> Result<String, ParseMiss> {
    let mut lines = text[start..].lines();
    let first = lines.next().unwrap_or("");
    let mut answer = clean_answer(first);
    if answer.is_empty() {
        answer = lines.map(clean_answer).find(|l| !l.is_empty()).unwrap_or("");
    }
    if answer.is_empty() {
        return Err(ParseMiss::new("answer marker is not followed by an answer"));
    }
    Ok(answer.to_string())
}

/// Answer text after the last "Final Answer" marker, with separators,
/// wrapping brackets/quotes and trailing punctuation removed. When the
/// marker ends its line, the next non-empty line is used.
pub fn parse_final_answer(text: &str) -> Result<String, ParseMiss> {
    let start = after_last_marker(text, &[FINAL_ANSWER])
        .ok_or_else(|| ParseMiss::new("no \"Final Answer\" marker"))?;
    answer_after(text, start)
}

pub fn parse_yes_no(text: &str) -> Result<bool, ParseMiss> {
    let answer = parse_final_answer(text)?.to_ascii_lowercase();
    if answer.starts_with("yes") {
        Ok(true)
    } else if answer.starts_with("no") {
        Ok(false)
    } else {
        Err(ParseMiss::new(format!("{answer:?} is neither yes nor no")))
    }
}

/// A leading option letter in `'A'..=last`. Uppercase letters need a
/// non-alphanumeric character after them; lowercase ones must stand alone.
fn leading_letter(answer: &str, last: char) -> Option<char> {
    let mut s = answer;
    for prefix in ["choice_", "choice ", "option "] {
        if s.len() >= prefix.len() && s[..prefix.len()].eq_ignore_ascii_case(prefix) {
            s = &s[prefix.len()..];
            break;
        }
    }
    let s = s.trim_start_matches(is_wrap);
    let mut chars = s.chars();
    let c = chars.next()?;
    let rest = chars.as_str();
    let upper = c.to_ascii_uppercase();
    if !('A'..=last).contains(&upper) {
        return None;
    }
    let standalone = rest.trim_matches(|c| is_wrap(c) || is_trailing_punct(c)).is_empty();
    let delimited = rest.chars().next().is_some_and(|n| !n.is_alphanumeric());
    match (c.is_ascii_uppercase(), standalone, delimited) {
        (_, true, _) | (true, _, true) => Some(upper),
        _ => None,
    }
}

/// Choice letter A–E from the "Final Answer" statement.
pub fn parse_choice(text: &str) -> Result<char, ParseMiss> {
    let answer = parse_final_answer(text)?;
    leading_letter(&answer, 'E').ok_or_else(|| ParseMiss::new(format!("{answer:?} is not a choice letter")))
}

/// Choice letter A–E from "The most likely diagnosis is:". A "Final Answer"
/// statement is also accepted; if both appear, the later one wins.
pub fn parse_diagnosis_choice(text: &str) -> Result<char, ParseMiss> {
    let start = after_last_marker(text, &[DIAGNOSIS, FINAL_ANSWER])
        .ok_or_else(|| ParseMiss::new("no diagnosis or final answer marker"))?;
    let answer = answer_after(text, start)?;
    leading_letter(&answer, 'E').ok_or_else(|| ParseMiss::new(format!("{answer:?} is not a choice letter")))
}

pub fn parse_temporal(text: &str) -> Result<TemporalClass, ParseMiss> {
    let answer = parse_final_answer(text)?;
    if let Some(letter) = leading_letter(&answer, 'C') {
        return Ok(match letter {
            'A' => TemporalClass::Improved,
            'B' => TemporalClass::Stable,
            _ => TemporalClass::Worsened,
        });
    }
    let lower = answer.to_ascii_lowercase();
    if lower.starts_with("improv") {
        Ok(TemporalClass::Improved)
    } else if lower.starts_with("stable") || lower.starts_with("unchanged") {
        Ok(TemporalClass::Stable)
    } else if lower.starts_with("worse") {
        Ok(TemporalClass::Worsened)
    } else {
        Err(ParseMiss::new(format!("{answer:?} is not a temporal class")))
    }
}

/// Contents of fenced code blocks if there are any, else the whole text.
fn strip_code_fences(text: &str) -> String {
    let pieces: Vec<&str> = text.split("```").collect();
    if pieces.len() < 3 {
        return text.to_string();
    }
    pieces
        .iter()
        .skip(1)
        .step_by(2)
        .map(|block| {
            // Drop an info string such as `json` on the opening fence line.
            match block.split_once('\n') {
                Some((info, body)) if !info.trim().starts_with(['[', '{']) => body,
                _ => block,
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// First JSON array in `text` whose elements are all objects.
fn first_object_array(text: &str) -> Option<Vec<Map<String, Value>>> {
    let body = strip_code_fences(text);
    for (i, _) in body.match_indices('[') {
        let mut stream = serde_json::Deserializer::from_str(&body[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Array(items))) = stream.next() {
            if items.iter().all(Value::is_object) {
                return Some(
                    items
                        .into_iter()
                        .filter_map(|v| match v {
                            Value::Object(m) => Some(m),
                            _ => None,
                        })
                        .collect(),
                );
            }
        }
    }
    None
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.trim().to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        other => other.to_string(),
    }
}

/// Items kept from a JSON list plus one diagnostic per dropped element.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ListParse<T> {
    pub items: Vec<T>,
    pub diagnostics: Vec<String>,
}

pub type BBoxParse = ListParse<BBox>;

const COORD_KEYS: [&str; 4] = ["box_2d", "bbox", "box", "coordinates"];

fn coord(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok().filter(|f| !f.is_nan()),
        _ => None,
    }
}

fn bbox_from(obj: &Map<String, Value>) -> Result<BBox, String> {
    let label = match obj.get("label") {
        Some(Value::Null) | None => return Err("missing label".into()),
        Some(v) => scalar_text(v),
    };
    let (key, raw) = COORD_KEYS
        .iter()
        .find_map(|k| obj.get(*k).map(|v| (*k, v)))
        .ok_or("missing coordinate list")?;
    let list = raw.as_array().ok_or_else(|| format!("{key} is not a list"))?;
    if list.len() != 4 {
        return Err(format!("{key} has {} values, expected 4", list.len()));
    }
    let mut c = [0.0; 4];
    for (slot, v) in c.iter_mut().zip(list) {
        *slot = coord(v).ok_or_else(|| format!("{key} holds a non-numeric value {v}"))?;
    }
    Ok(BBox::normalized(label, c))
}

/// Boxes from the first JSON list of objects in a reply. Coordinates are
/// read as `[y0, x0, y1, x1]`, clamped to the unit square and axis-sorted.
pub fn parse_bboxes(text: &str) -> Result<BBoxParse, ParseMiss> {
    let objects = first_object_array(text).ok_or_else(|| ParseMiss::new("no JSON list of objects"))?;
    let mut out = ListParse { items: Vec::new(), diagnostics: Vec::new() };
    for (i, obj) in objects.iter().enumerate() {
        match bbox_from(obj) {
            Ok(b) => out.items.push(b),
            Err(e) => out.diagnostics.push(format!("element {i}: {e}")),
        }
    }
    Ok(out)
}

/// Lab tests from the first JSON list of objects in a reply. Absent keys
/// become empty strings; entries without a name are dropped.
pub fn parse_lab_entries(text: &str) -> Result<ListParse<LabTestEntry>, ParseMiss> {
    let objects = first_object_array(text).ok_or_else(|| ParseMiss::new("no JSON list of objects"))?;
    let mut out = ListParse { items: Vec::new(), diagnostics: Vec::new() };
    for (i, obj) in objects.iter().enumerate() {
        let mut entry = LabTestEntry::default();
        for key in LabTestEntry::FIELDS {
            if let (Some(v), Some(slot)) = (obj.get(key), entry.field_mut(key)) {
                *slot = scalar_text(v);
            }
        }
        if entry.name.is_empty() {
            out.diagnostics.push(format!("element {i}: missing name"));
            continue;
        }
        if !entry.time_is_well_formed() {
            out.diagnostics.push(format!(
                "element {i}: sample_collection_time {:?} is not DD-MM-YYYY HH:MM:SS",
                entry.sample_collection_time
            ));
        }
        out.items.push(entry);
    }
    Ok(out)
}
