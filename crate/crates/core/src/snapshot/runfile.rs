//! Run files: one manifest object on the first line, then one record per line.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::norm::{network_lipschitz, LipschitzConfig};
use crate::run::{RunManifest, RunRecord};

use super::layers::read_network;

/// Streaming reader over the records of a run file. Blank lines are skipped.
pub struct RunReader<R> {
    lines: std::io::Lines<R>,
    line: usize,
    seen: HashSet<u64>,
}

fn parse_err(line: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn with_line(line: usize, e: Error) -> Error {
    match e {
        Error::Validation { field, message } => Error::Validation {
            field,
            message: format!("line {line}: {message}"),
        },
        other => other,
    }
}

impl<R: BufRead> RunReader<R> {
    /// Reads and validates the manifest line.
    pub fn new(reader: R) -> Result<(RunManifest, Self)> {
        let mut me = RunReader {
            lines: reader.lines(),
            line: 0,
            seen: HashSet::new(),
        };
        let (line, text) = me
            .next_line()?
            .ok_or_else(|| parse_err(1, "empty run file: the first line must be the manifest"))?;
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| parse_err(line, e))?;
        manifest.validate().map_err(|e| with_line(line, e))?;
        Ok((manifest, me))
    }

    fn next_line(&mut self) -> Result<Option<(usize, String)>> {
        for text in self.lines.by_ref() {
            self.line += 1;
            let text = text.map_err(|e| parse_err(self.line, e))?;
            if !text.trim().is_empty() {
                return Ok(Some((self.line, text)));
            }
        }
        Ok(None)
    }

    fn read_record(&mut self) -> Result<Option<RunRecord>> {
        let Some((line, text)) = self.next_line()? else {
            return Ok(None);
        };
        let rec: RunRecord = serde_json::from_str(&text).map_err(|e| parse_err(line, e))?;
        rec.validate().map_err(|e| with_line(line, e))?;
        if !self.seen.insert(rec.epoch) {
            return Err(Error::validation(
                "epoch",
                format!("line {line}: duplicate epoch {}", rec.epoch),
            ));
        }
        Ok(Some(rec))
    }
}

impl<R: BufRead> Iterator for RunReader<R> {
    type Item = Result<RunRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        self.read_record().transpose()
    }
}

pub fn open_run(path: impl AsRef<Path>) -> Result<(RunManifest, RunReader<BufReader<File>>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    RunReader::new(BufReader::new(file))
}

pub fn read_run(path: impl AsRef<Path>) -> Result<(RunManifest, Vec<RunRecord>)> {
    let (manifest, reader) = open_run(path)?;
    Ok((manifest, reader.collect::<Result<_>>()?))
}

pub fn write_run_to(
    w: &mut dyn Write,
    manifest: &RunManifest,
    records: &[RunRecord],
) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, manifest)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_run(
    path: impl AsRef<Path>,
    manifest: &RunManifest,
    records: &[RunRecord],
) -> Result<()> {
    super::write_atomic(path.as_ref(), |w| write_run_to(w, manifest, records))
}

/// Fills in `lipschitz` for records that only name a `weights` directory,
/// resolved relative to `base`.
pub fn resolve_lipschitz(
    records: &mut [RunRecord],
    base: &Path,
    config: &LipschitzConfig,
) -> Result<()> {
    for rec in records.iter_mut().filter(|r| r.lipschitz.is_none()) {
        let Some(dir) = &rec.weights else {
            return Err(Error::validation(
                "lipschitz",
                format!("epoch {} has neither lipschitz nor weights", rec.epoch),
            ));
        };
        let net = read_network(base.join(dir))?;
        rec.lipschitz = Some(network_lipschitz(&net, config)?.value);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (RunManifest, Vec<RunRecord>) {
        let m = RunManifest::new(3, 2, 1, "l1");
        let r = vec![
            RunRecord::new(1, 2.0, vec![0.5, -0.25]).with_test(vec![1.0]),
            RunRecord::new(2, 2.5, vec![0.75, 0.1]),
        ];
        (m, r)
    }

    fn read_str(s: &str) -> Result<(RunManifest, Vec<RunRecord>)> {
        let (m, r) = RunReader::new(s.as_bytes())?;
        Ok((m, r.collect::<Result<_>>()?))
    }

    #[test]
    fn round_trip() {
        let (m, r) = sample();
        let mut buf = Vec::new();
        write_run_to(&mut buf, &m, &r).unwrap();
        let (m2, r2) = read_str(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!((m, r), (m2, r2));
    }

    #[test]
    fn manifest_only_is_an_empty_run() {
        let (_, r) = read_str("{\"schema_version\":1,\"num_classes\":2,\"n_train\":0,\"n_test\":0,\"normalization_method\":\"l1\"}\n").unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn unknown_fields_survive() {
        let text = "{\"schema_version\":1,\"num_classes\":2,\"n_train\":1,\"n_test\":0,\"normalization_method\":\"l1\",\"lab\":\"x\"}\n{\"epoch\":0,\"lipschitz\":1.0,\"train_margins\":[1.0],\"lr\":0.1}\n";
        let (m, r) = read_str(text).unwrap();
        assert_eq!(m.extra["lab"], "x");
        assert_eq!(r[0].extra["lr"], 0.1);
        let mut buf = Vec::new();
        write_run_to(&mut buf, &m, &r).unwrap();
        assert_eq!(
            read_str(std::str::from_utf8(&buf).unwrap()).unwrap(),
            (m, r)
        );
    }

    #[test]
    fn malformed_line_is_cited() {
        let (m, r) = sample();
        let mut buf = Vec::new();
        write_run_to(&mut buf, &m, &r).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("{\"epoch\": 3, \"train_margins\": [1.0,\n");
        match read_str(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_violations_name_the_field() {
        let head = "{\"schema_version\":1,\"num_classes\":2,\"n_train\":1,\"n_test\":0,\"normalization_method\":\"l1\"}\n";
        let cases = [
            (
                "{\"epoch\":0,\"lipschitz\":1.0,\"train_margins\":[]}",
                "train_margins",
            ),
            (
                "{\"epoch\":0,\"lipschitz\":-1.0,\"train_margins\":[1.0]}",
                "lipschitz",
            ),
            ("{\"epoch\":0,\"train_margins\":[1.0]}", "lipschitz"),
            (
                "{\"epoch\":0,\"lipschitz\":1.0,\"train_margins\":[1.0],\"test_margins\":[]}",
                "test_margins",
            ),
        ];
        for (line, field) in cases {
            match read_str(&format!("{head}{line}\n")) {
                Err(Error::Validation { field: f, message }) => {
                    assert_eq!(f, field);
                    assert!(message.starts_with("line 2"), "{message}");
                }
                other => panic!("{line}: unexpected {other:?}"),
            }
        }
        let dup = format!(
            "{head}{{\"epoch\":0,\"lipschitz\":1.0,\"train_margins\":[1.0]}}\n{{\"epoch\":0,\"lipschitz\":1.0,\"train_margins\":[1.0]}}\n"
        );
        assert!(matches!(read_str(&dup), Err(Error::Validation { field, .. }) if field == "epoch"));
        let bad_version = "{\"schema_version\":2,\"num_classes\":2,\"n_train\":1,\"n_test\":0,\"normalization_method\":\"l1\"}\n";
        assert!(
            matches!(read_str(bad_version), Err(Error::Validation { field, .. }) if field == "schema_version")
        );
        assert!(matches!(read_str(""), Err(Error::Parse { line: 1, .. })));
    }
}
