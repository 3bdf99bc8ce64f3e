use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use super::{Triple, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default)]
pub struct TripleLoadOptions {
    /// Reject relations missing from the relation vocabulary.
    pub strict: bool,
}

fn fields<'a>(path: &Path, line_no: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != n || f.iter().any(|s| s.is_empty()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!(
                "expected {n} non-empty tab-separated fields, got {:?}",
                line
            ),
        });
    }
    Ok(f)
}

fn for_each_line(path: &Path, mut f: impl FnMut(usize, &str) -> Result<()>) -> Result<()> {
    let file = std::fs::File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        f(n + 1, line)?;
    }
    Ok(())
}

/// Reads `<user>\t<item>` lines. Repeated pairs keep their first occurrence.
pub fn load_interactions(
    path: &Path,
    users: &mut Vocab,
    entities: &mut Vocab,
) -> Result<Vec<(usize, usize)>> {
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for_each_line(path, |n, line| {
        let f = fields(path, n, line, 2)?;
        let pair = (users.intern(f[0]), entities.intern(f[1]));
        if seen.insert(pair) {
            pairs.push(pair);
        }
        Ok(())
    })?;
    Ok(pairs)
}

/// Reads `<head>\t<relation>\t<tail>` lines. Repeated triples keep their
/// first occurrence.
pub fn load_triples(
    path: &Path,
    entities: &mut Vocab,
    relations: &mut Vocab,
    opts: TripleLoadOptions,
) -> Result<Vec<Triple>> {
    let mut seen = HashSet::new();
    let mut triples = Vec::new();
    for_each_line(path, |n, line| {
        let f = fields(path, n, line, 3)?;
        let relation = if opts.strict {
            relations
                .get(f[1])
                .ok_or_else(|| Error::UnknownRelation(f[1].to_owned()))?
        } else {
            relations.intern(f[1])
        };
        let t = Triple {
            head: entities.intern(f[0]),
            relation,
            tail: entities.intern(f[2]),
        };
        if seen.insert(t) {
            triples.push(t);
        }
        Ok(())
    })?;
    Ok(triples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn empty_file_is_empty() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "i.tsv", "");
        let (mut u, mut e) = (Vocab::default(), Vocab::default());
        assert!(load_interactions(&p, &mut u, &mut e).unwrap().is_empty());
        assert!(u.is_empty() && e.is_empty());
    }

    #[test]
    fn duplicate_pair_dropped() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "i.tsv", "u1\ti1\nu1\ti2\nu1\ti1\n");
        let (mut u, mut e) = (Vocab::default(), Vocab::default());
        let pairs = load_interactions(&p, &mut u, &mut e).unwrap();
        assert_eq!(pairs, vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn triple_schema() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "t.tsv", "i1\tdirected_by\tp9\n");
        let (mut e, mut r) = (Vocab::default(), Vocab::default());
        let t = load_triples(&p, &mut e, &mut r, TripleLoadOptions::default()).unwrap();
        assert_eq!(
            t,
            vec![Triple {
                head: e.get("i1").unwrap(),
                relation: r.get("directed_by").unwrap(),
                tail: e.get("p9").unwrap()
            }]
        );
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "i.tsv", "u1\ti1\nu2 i2\n");
        let (mut u, mut e) = (Vocab::default(), Vocab::default());
        match load_interactions(&p, &mut u, &mut e) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_relation_only_in_strict_mode() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "t.tsv", "a\tr1\tb\n");
        let mut e = Vocab::default();
        let mut r = Vocab::from_names(["r0".to_string()]);
        let strict = TripleLoadOptions { strict: true };
        assert!(matches!(
            load_triples(&p, &mut e, &mut r, strict),
            Err(Error::UnknownRelation(n)) if n == "r1"
        ));
        let t = load_triples(&p, &mut e, &mut r, TripleLoadOptions::default()).unwrap();
        assert_eq!(t[0].relation, 1);
    }

    #[test]
    fn missing_file_is_io_error() {
        let (mut u, mut e) = (Vocab::default(), Vocab::default());
        let r = load_interactions(Path::new("/nonexistent/x.tsv"), &mut u, &mut e);
        assert!(matches!(r, Err(Error::Io(_))));
    }
}
