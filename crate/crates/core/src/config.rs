//! Flat `key = value` configuration text.

use crate::error::{OramError, Result};

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        if line.trim().is_empty() {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(OramError::Parse {
                line: i + 1,
                column: line.len() - line.trim_start().len() + 1,
                message: "expected `key = value`".into(),
            });
        };
        let key = line[..eq].trim();
        let value = line[eq + 1..].trim();
        if key.is_empty() || value.is_empty() {
            return Err(OramError::Parse {
                line: i + 1,
                column: if key.is_empty() { 1 } else { eq + 2 },
                message: "empty key or value".into(),
            });
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_position() {
        let kv = parse_kv("# comment\nmode = ehap\n\nlevels=5 # trailing\n").unwrap();
        assert_eq!(
            kv,
            vec![("mode".into(), "ehap".into()), ("levels".into(), "5".into())]
        );
        match parse_kv("z = 4\n  oops\n") {
            Err(OramError::Parse { line, column, .. }) => assert_eq!((line, column), (2, 3)),
            other => panic!("{other:?}"),
        }
    }
}
