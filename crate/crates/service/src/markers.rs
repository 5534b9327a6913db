//! `[ABB]` and `[ABB:<short form>]` markers in request text.

use std::ops::Range;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Marker {
    pub short_form: Option<String>,
    /// Byte range of the marker in the original text.
    pub span: Range<usize>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MarkerError {
    #[error("unterminated [ABB marker at byte {0}")]
    Unterminated(usize),
    #[error("empty short form in marker at byte {0}")]
    EmptyShortForm(usize),
    #[error("nested marker at byte {0}")]
    Nested(usize),
}

/// Finds every marker and returns the text with each replaced by `[ABB]`.
pub fn parse_markers(text: &str) -> Result<(String, Vec<Marker>), MarkerError> {
    let mut out = String::with_capacity(text.len());
    let mut markers = Vec::new();
    let mut cursor = 0;
    while let Some(rel) = text[cursor..].find("[ABB") {
        let start = cursor + rel;
        let after = &text[start + 4..];
        let (short_form, end) = if after.starts_with(']') {
            (None, start + 5)
        } else if let Some(body) = after.strip_prefix(':') {
            let close = body.find(']').ok_or(MarkerError::Unterminated(start))?;
            let sf = &body[..close];
            if sf.contains('[') {
                return Err(MarkerError::Nested(start));
            }
            if sf.trim().is_empty() {
                return Err(MarkerError::EmptyShortForm(start));
            }
            (Some(sf.trim().to_string()), start + 5 + close + 1)
        } else {
            out.push_str(&text[cursor..start + 4]);
            cursor = start + 4;
            continue;
        };
        out.push_str(&text[cursor..start]);
        out.push_str("[ABB]");
        markers.push(Marker { short_form, span: start..end });
        cursor = end;
    }
    out.push_str(&text[cursor..]);
    Ok((out, markers))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_table_one_sentence() {
        let (text, m) = parse_markers("The doctor saw an [ABB:AS] [ABB:cd] at [ABB:tl]").unwrap();
        assert_eq!(text, "The doctor saw an [ABB] [ABB] at [ABB]");
        let sf: Vec<_> = m.iter().map(|m| m.short_form.as_deref().unwrap()).collect();
        assert_eq!(sf, ["AS", "cd", "tl"]);
        assert_eq!(&"The doctor saw an [ABB:AS]"[m[0].span.clone()], "[ABB:AS]");
    }

    #[test]
    fn plain_markers_and_no_markers() {
        let (text, m) = parse_markers("[ABB] saw a [ABB]").unwrap();
        assert_eq!(text, "[ABB] saw a [ABB]");
        assert_eq!(m.len(), 2);
        assert!(m[0].short_form.is_none());
        let (text, m) = parse_markers("nothing here [ABBA]").unwrap();
        assert_eq!(text, "nothing here [ABBA]");
        assert!(m.is_empty());
    }

    #[test]
    fn errors() {
        assert_eq!(parse_markers("x [ABB:pt"), Err(MarkerError::Unterminated(2)));
        assert_eq!(parse_markers("[ABB: ]"), Err(MarkerError::EmptyShortForm(0)));
        assert_eq!(parse_markers("[ABB:a[b]"), Err(MarkerError::Nested(0)));
    }
}
