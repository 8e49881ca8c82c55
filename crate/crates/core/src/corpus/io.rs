use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{CorpusError, FactTriple, RelationTemplate, Result};

/// One JSON object per line; blank lines are skipped.
pub fn read_facts(path: &Path) -> Result<Vec<FactTriple>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fact = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(fact);
    }
    Ok(out)
}

pub fn write_facts(path: &Path, facts: &[FactTriple]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for f in facts {
        let line = serde_json::to_string(f).map_err(std::io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_templates(path: &Path) -> Result<Vec<RelationTemplate>> {
    let text = std::fs::read_to_string(path)?;
    let t: Vec<RelationTemplate> = serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    for tpl in &t {
        tpl.validate()?;
    }
    Ok(t)
}

pub fn write_templates(path: &Path, templates: &[RelationTemplate]) -> Result<()> {
    let text = serde_json::to_string_pretty(templates).map_err(std::io::Error::other)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::standard_templates;

    #[test]
    fn round_trip_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = FactTriple::new("Sweden", "capital", "Stockholm");
        f.aliases.push("stockholm city".into());
        let facts = vec![f, FactTriple::new("Italy", "capital", "Rome")];
        let p = dir.path().join("facts.jsonl");
        write_facts(&p, &facts).unwrap();
        assert_eq!(read_facts(&p).unwrap(), facts);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(!text.lines().nth(1).unwrap().contains("aliases"));

        let t = dir.path().join("templates.json");
        write_templates(&t, &standard_templates()).unwrap();
        assert_eq!(read_templates(&t).unwrap(), standard_templates());
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("facts.jsonl");
        std::fs::write(&p, "{\"subject\":\"a\",\"relation\":\"r\",\"object\":\"b\"}\n{oops\n").unwrap();
        match read_facts(&p) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
