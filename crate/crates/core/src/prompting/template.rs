use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("placeholder ${{{0}}} has no binding")]
    Unbound(String),
    #[error("unterminated placeholder at byte {0}")]
    Unterminated(usize),
    #[error("{0} text is empty")]
    EmptyText(&'static str),
    #[error("essay has no overall band to condition on")]
    MissingOverall,
    #[error("exemplar {0} is the essay being scored")]
    SelfExemplar(String),
}

/// Substitutes `${name}` placeholders in one left-to-right pass.
///
/// Bound values are copied verbatim and never re-scanned, so text such as an
/// essay containing `${question}` comes through literally. A `$` not followed
/// by `{` is ordinary text.
pub fn substitute(body: &str, bindings: &[(&str, &str)]) -> Result<String, RenderError> {
    let mut out = String::with_capacity(body.len() + bindings.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = body;
    let mut offset = 0;
    while let Some(pos) = rest.find("${") {
        out.push_str(&rest[..pos]);
        let after = &rest[pos + 2..];
        let end = after.find('}').ok_or(RenderError::Unterminated(offset + pos))?;
        let name = &after[..end];
        let value = bindings
            .iter()
            .find(|(key, _)| *key == name)
            .map(|(_, value)| *value)
            .ok_or_else(|| RenderError::Unbound(name.to_owned()))?;
        out.push_str(value);
        let consumed = pos + 2 + end + 1;
        offset += consumed;
        rest = &rest[consumed..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Names of the placeholders in `body`, in order of appearance.
pub fn placeholders(body: &str) -> Vec<&str> {
    let mut names = Vec::new();
    let mut rest = body;
    while let Some(pos) = rest.find("${") {
        let after = &rest[pos + 2..];
        match after.find('}') {
            Some(end) => {
                names.push(&after[..end]);
                rest = &after[end + 1..];
            }
            None => break,
        }
    }
    names
}
