use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Dataset, Task};
use crate::error::{Error, Result};
use crate::linalg::SparseVec;

/// Options for [`parse_libsvm`].
#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    /// Explicit ambient dimension; must be at least the largest index seen.
    pub dim: Option<usize>,
    /// Expected task. When absent, labels that are all ±1 select
    /// classification and anything else selects regression.
    pub task: Option<Task>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses `<label> <idx>:<val> ...` lines with 1-based, strictly increasing
/// indices. Blank lines and `#` comments are skipped.
pub fn parse_libsvm<R: BufRead>(reader: R, opts: &ParseOptions) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut max_index = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let content = match line.find('#') {
            Some(pos) => &line[..pos],
            None => line.as_str(),
        };
        let mut tokens = content.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue;
        };
        let label: f64 = label_tok
            .parse()
            .map_err(|_| parse_err(lineno, format!("invalid label '{label_tok}'")))?;
        if !label.is_finite() {
            return Err(parse_err(lineno, "label is not finite"));
        }

        let mut indices = Vec::new();
        let mut values = Vec::new();
        for tok in tokens {
            let (idx_s, val_s) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(lineno, format!("malformed token '{tok}'")))?;
            let idx: usize = idx_s
                .parse()
                .map_err(|_| parse_err(lineno, format!("invalid index '{idx_s}'")))?;
            if idx < 1 {
                return Err(parse_err(lineno, "indices are 1-based; found 0"));
            }
            let val: f64 = val_s
                .parse()
                .map_err(|_| parse_err(lineno, format!("invalid value '{val_s}'")))?;
            if !val.is_finite() {
                return Err(parse_err(lineno, format!("non-finite value '{val_s}'")));
            }
            let zero_based = idx - 1;
            if let Some(&prev) = indices.last() {
                if zero_based <= prev {
                    return Err(parse_err(
                        lineno,
                        format!("non-increasing index {idx} after {}", prev + 1),
                    ));
                }
            }
            max_index = max_index.max(idx);
            indices.push(zero_based);
            values.push(val);
        }
        // Indices were validated above.
        rows.push(SparseVec::new(indices, values).expect("validated indices"));
        labels.push(label);
    }

    if rows.is_empty() {
        return Err(Error::EmptyInput("no data lines in libsvm input".into()));
    }

    let dim = match opts.dim {
        Some(d) if d < max_index => {
            return Err(Error::InvalidArgument(format!(
                "dimension override {d} is smaller than largest index {max_index}"
            )))
        }
        Some(d) => d,
        None => max_index.max(1),
    };
    let task = opts.task.unwrap_or_else(|| {
        if labels.iter().all(|&b| b == 1.0 || b == -1.0) {
            Task::Classification
        } else {
            Task::Regression
        }
    });
    Dataset::new(dim, rows, labels, task)
}

pub fn read_libsvm_file(path: impl AsRef<Path>, opts: &ParseOptions) -> Result<Dataset> {
    let file = File::open(path)?;
    parse_libsvm(BufReader::new(file), opts)
}

/// Writes a dataset in libsvm format (1-based indices). Values are printed
/// with the shortest representation that parses back to the same `f64`.
pub fn write_libsvm<W: Write>(ds: &Dataset, mut out: W) -> std::io::Result<()> {
    for (row, &label) in ds.rows().iter().zip(ds.labels()) {
        match ds.task() {
            Task::Classification if label > 0.0 => write!(out, "+1")?,
            Task::Classification => write!(out, "-1")?,
            Task::Regression => write!(out, "{label}")?,
        }
        for (j, v) in row.iter() {
            write!(out, " {}:{}", j + 1, v)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn write_libsvm_file(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_libsvm(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Dataset> {
        parse_libsvm(text.as_bytes(), &ParseOptions::default())
    }

    #[test]
    fn single_line() {
        let ds = parse("+1 3:0.5").unwrap();
        assert_eq!(ds.n(), 1);
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.row(0).indices(), &[2]);
        assert_eq!(ds.row(0).values(), &[0.5]);
        assert_eq!(ds.label(0), 1.0);
        assert_eq!(ds.task(), Task::Classification);
    }

    #[test]
    fn non_increasing_indices_name_the_line() {
        match parse("1 2:1 1:1") {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 1);
                assert!(message.contains("non-increasing"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn errors_report_line_numbers() {
        let cases = [
            ("1 1:1\n-1 0:2\n", 2),
            ("1 1:1\n\n# c\n-1 1:x\n", 4),
            ("abc 1:1\n", 1),
            ("1 1:1\n1 5\n", 2),
            ("1 1:1 1:2\n", 1),
        ];
        for (text, want) in cases {
            match parse(text) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn empty_stream_is_an_error() {
        assert!(matches!(parse(""), Err(Error::EmptyInput(_))));
        assert!(matches!(parse("\n# only a comment\n  \n"), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn comments_blank_lines_and_dim_override() {
        let text = "# header\n-1 1:1 4:2 # trailing\n\n+1\n";
        let ds = parse_libsvm(
            text.as_bytes(),
            &ParseOptions {
                dim: Some(10),
                task: None,
            },
        )
        .unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.dim(), 10);
        assert_eq!(ds.row(1).nnz(), 0);
        assert!(parse_libsvm(
            text.as_bytes(),
            &ParseOptions {
                dim: Some(3),
                task: None
            }
        )
        .is_err());
    }

    #[test]
    fn regression_labels_infer_task() {
        let ds = parse("0.25 1:1\n-3 2:1\n").unwrap();
        assert_eq!(ds.task(), Task::Regression);
        let forced = parse_libsvm(
            "0.25 1:1\n".as_bytes(),
            &ParseOptions {
                dim: None,
                task: Some(Task::Classification),
            },
        );
        assert!(forced.is_err());
    }

    fn arb_line(dim: usize) -> impl Strategy<Value = (f64, Vec<(usize, f64)>)> {
        (
            prop_oneof![Just(1.0), Just(-1.0), -100.0f64..100.0],
            proptest::collection::btree_map(0..dim, -1e6f64..1e6, 0..8),
        )
            .prop_map(|(label, m)| (label, m.into_iter().collect()))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn write_then_parse_round_trips(lines in proptest::collection::vec(arb_line(30), 100)) {
            let regression = lines.iter().any(|(b, _)| b.abs() != 1.0);
            let task = if regression { Task::Regression } else { Task::Classification };
            let rows = lines
                .iter()
                .map(|(_, e)| {
                    let (i, v): (Vec<_>, Vec<_>) = e.iter().copied().unzip();
                    SparseVec::new(i, v).unwrap()
                })
                .collect();
            let labels = lines.iter().map(|(b, _)| *b).collect();
            let ds = Dataset::new(30, rows, labels, task).unwrap();
            let mut buf = Vec::new();
            write_libsvm(&ds, &mut buf).unwrap();
            let back = parse_libsvm(
                buf.as_slice(),
                &ParseOptions { dim: Some(30), task: Some(task) },
            )
            .unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
