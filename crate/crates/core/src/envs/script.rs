//! Plain-text action scripts: one comma-separated action tuple per line,
//! listing actions of the active agents in ascending id order. Blank lines
//! and `#` comments are skipped.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

pub fn parse_action_script(text: &str) -> Result<Vec<Vec<usize>>, ScriptError> {
    let mut steps = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tuple = line
            .split(',')
            .map(|field| {
                field.trim().parse::<usize>().map_err(|e| ScriptError {
                    line: i + 1,
                    message: format!("{:?}: {e}", field.trim()),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        steps.push(tuple);
    }
    Ok(steps)
}
