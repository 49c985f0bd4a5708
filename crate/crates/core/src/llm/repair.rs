//! Best-effort cleanup of JSON emitted by language models.

/// Cleans up common formatting noise around a JSON object.
///
/// Text that already parses as JSON is returned unchanged. Otherwise, in
/// order: markdown code fences are stripped, everything before the first `{`
/// and after the last `}` is dropped, typographic quotes become ASCII quotes,
/// and trailing commas before `}` / `]` are removed. No key or value is ever
/// invented; whether the result parses is for the caller to find out.
pub fn repair_json(text: &str) -> String {
    if serde_json::from_str::<serde_json::Value>(text).is_ok() {
        return text.to_owned();
    }
    let unfenced = strip_fences(text);
    let trimmed = trim_to_object(unfenced);
    let quoted = normalize_quotes(trimmed);
    remove_trailing_commas(&quoted)
}

fn strip_fences(text: &str) -> &str {
    let Some(open) = text.find("```") else {
        return text;
    };
    let mut rest = &text[open + 3..];
    // Optional language tag, then the rest of the fence line if blank.
    let tag_len = rest
        .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
        .unwrap_or(rest.len());
    let after_tag = &rest[tag_len..];
    let line_end = after_tag.find('\n').unwrap_or(after_tag.len());
    if after_tag[..line_end].trim().is_empty() {
        rest = &after_tag[(line_end + 1).min(after_tag.len())..];
    } else {
        rest = after_tag;
    }
    match rest.find("```") {
        Some(close) => &rest[..close],
        None => rest,
    }
}

fn trim_to_object(text: &str) -> &str {
    let Some(start) = text.find('{') else {
        return text;
    };
    match text.rfind('}') {
        Some(end) if end > start => &text[start..=end],
        _ => &text[start..],
    }
}

fn normalize_quotes(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' => '"',
            '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}' => '\'',
            other => other,
        })
        .collect()
}

/// Drops commas that (ignoring whitespace and further commas) are followed by
/// a closing bracket. String literals are left alone.
fn remove_trailing_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                out.push(c);
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|n| !n.is_whitespace() && **n != ',');
                if !matches!(next, Some('}') | Some(']')) {
                    out.push(c);
                }
            }
            _ => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_fences() {
        assert_eq!(repair_json("```json\n{\"score\": 6.5}\n```"), "{\"score\": 6.5}");
        assert_eq!(repair_json("```\n{\"a\": 1}\n```\nthanks"), "{\"a\": 1}");
        assert_eq!(repair_json("```json {\"a\": 1}```"), "{\"a\": 1}");
    }

    #[test]
    fn removes_trailing_commas() {
        assert_eq!(repair_json("{\"score\": 6.5,}"), "{\"score\": 6.5}");
        assert_eq!(repair_json("{\"a\": [1, 2,\n ],}"), "{\"a\": [1, 2\n ]}");
        assert_eq!(repair_json("{\"a\": \"x,}\",}"), "{\"a\": \"x,}\"}");
    }

    #[test]
    fn trims_surrounding_prose() {
        assert_eq!(
            repair_json("Here is my evaluation: {\"score\": 7} Hope it helps!"),
            "{\"score\": 7}"
        );
    }

    #[test]
    fn normalizes_smart_quotes() {
        assert_eq!(repair_json("{\u{201C}score\u{201D}: 6}"), "{\"score\": 6}");
    }

    #[test]
    fn valid_documents_are_untouched() {
        let doc = "{\"comment\": \"\u{201C}fine\u{201D}, ```\"}";
        assert_eq!(repair_json(doc), doc);
        assert_eq!(repair_json(" 6.5 "), " 6.5 ");
    }
}
