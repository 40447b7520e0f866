//! Result persistence: CSV writers (comma delimiter, header row, LF line
//! endings, 6-significant-digit floats) and the summary JSON.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::train::TrainingTrace;

pub const FLOAT_SIG_DIGITS: usize = 6;

/// Format with a fixed number of significant digits, trimming trailing
/// zeros; switches to scientific notation outside a readable range
/// (printf %g semantics).
pub fn fmt_sig(x: f64, sig: usize) -> String {
    assert!(sig >= 1);
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let formatted = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp) = formatted.split_once('e').expect("exponent format");
    let exp: i32 = exp.parse().expect("exponent parses");
    let neg = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let mut out = String::new();
    if neg {
        out.push('-');
    }
    if exp >= 0 && (exp as usize) < sig {
        let int_len = exp as usize + 1;
        out.push_str(&digits[..int_len]);
        let frac = digits[int_len..].trim_end_matches('0');
        if !frac.is_empty() {
            out.push('.');
            out.push_str(frac);
        }
    } else if (-4..0).contains(&exp) {
        out.push_str("0.");
        for _ in 0..(-exp - 1) {
            out.push('0');
        }
        out.push_str(digits.trim_end_matches('0'));
    } else {
        let d = digits.trim_end_matches('0');
        let d = if d.is_empty() { "0" } else { d };
        out.push_str(&d[..1]);
        if d.len() > 1 {
            out.push('.');
            out.push_str(&d[1..]);
        }
        out.push('e');
        let _ = write!(out, "{exp}");
    }
    out
}

pub fn f(x: f64) -> String {
    fmt_sig(x, FLOAT_SIG_DIGITS)
}

pub fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.into(),
            source,
        })?;
    }
    std::fs::write(path, content).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

/// conf,correct rows for later recomputation of every metric.
pub fn raw_csv(conf: &[f64], correct: &[bool]) -> String {
    let mut out = String::from("conf,correct\n");
    for (&c, &k) in conf.iter().zip(correct) {
        let _ = writeln!(out, "{},{}", f(c), u8::from(k));
    }
    out
}

pub fn parse_raw_csv(text: &str, path: &Path) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut conf = Vec::new();
    let mut correct = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "conf,correct" {
                return Err(Error::Parse {
                    path: path.into(),
                    row: 1,
                    column: "<header>".into(),
                    message: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (c, k) = line.split_once(',').ok_or_else(|| Error::Parse {
            path: path.into(),
            row: i + 1,
            column: "<row>".into(),
            message: "expected two cells".into(),
        })?;
        conf.push(c.parse().map_err(|_| Error::Parse {
            path: path.into(),
            row: i + 1,
            column: "conf".into(),
            message: format!("bad float {c:?}"),
        })?);
        correct.push(match k {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    path: path.into(),
                    row: i + 1,
                    column: "correct".into(),
                    message: format!("bad flag {other:?}"),
                })
            }
        });
    }
    Ok((conf, correct))
}

/// epoch,loss,mean_reward,mean_conf,std_conf,train_acc,stage.
pub fn trace_csv(trace: &TrainingTrace) -> String {
    let mut out = String::from("epoch,loss,mean_reward,mean_conf,std_conf,train_acc,stage\n");
    for r in &trace.epochs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            f(r.loss),
            f(r.mean_reward),
            f(r.mean_conf),
            f(r.std_conf),
            f(r.train_acc),
            r.stage
        );
    }
    out
}

/// bin_lo,bin_hi,count,avg_conf,avg_acc.
pub fn reliability_csv(report: &EvalReport) -> String {
    let mut out = String::from("bin_lo,bin_hi,count,avg_conf,avg_acc\n");
    for b in &report.bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            f(b.lo),
            f(b.hi),
            b.count,
            f(b.avg_conf),
            f(b.avg_acc)
        );
    }
    out
}

/// Standard output layout of one run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path, run_id: &str) -> Self {
        RunPaths {
            root: out_dir.join(run_id),
        }
    }

    pub fn config_copy(&self) -> PathBuf {
        self.root.join("config.copy")
    }

    pub fn rows_csv(&self) -> PathBuf {
        self.root.join("rows.csv")
    }

    pub fn summary_json(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn raw(&self, method: &str, seed: u64, split: &str) -> PathBuf {
        self.root
            .join("raw")
            .join(format!("{method}_{seed}_{split}.csv"))
    }

    pub fn trace(&self, method: &str, seed: u64) -> PathBuf {
        self.root
            .join("traces")
            .join(format!("{method}_{seed}.csv"))
    }

    pub fn reliability(&self, method: &str, seed: u64) -> PathBuf {
        self.root
            .join("reliability")
            .join(format!("{method}_{seed}.csv"))
    }

    pub fn table(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.csv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig(0.947, 6), "0.947");
        assert_eq!(fmt_sig(1900.0, 6), "1900");
        assert_eq!(fmt_sig(0.0001234567, 6), "0.000123457");
        assert_eq!(fmt_sig(1234567.0, 6), "1.23457e6");
        assert_eq!(fmt_sig(-0.5, 6), "-0.5");
        assert_eq!(fmt_sig(0.0, 6), "0");
        assert_eq!(fmt_sig(1e-7, 6), "1e-7");
        assert_eq!(fmt_sig(0.9999999, 6), "1");
        assert_eq!(fmt_sig(123456.0, 6), "123456");
        assert_eq!(fmt_sig(0.6931471805599453, 6), "0.693147");
    }

    #[test]
    fn formatted_floats_reparse_close() {
        let mut rng = crate::rng::Rng::new(1);
        for _ in 0..1000 {
            let x = (rng.uniform() - 0.5) * 10f64.powi(rng.below(12) as i32 - 6);
            let s = fmt_sig(x, 6);
            let back: f64 = s.parse().unwrap();
            if x != 0.0 {
                assert!(((back - x) / x).abs() < 1e-5, "{x} -> {s} -> {back}");
            }
        }
    }

    #[test]
    fn raw_csv_roundtrip() {
        let conf = vec![0.25, 0.5, 0.875];
        let correct = vec![true, false, true];
        let text = raw_csv(&conf, &correct);
        let (c, k) = parse_raw_csv(&text, Path::new("test.csv")).unwrap();
        assert_eq!(c, conf);
        assert_eq!(k, correct);
    }
}
