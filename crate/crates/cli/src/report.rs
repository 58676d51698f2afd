//! Benchmark results as tab-separated rows:
//! `experiment<TAB>k=v;k=v<TAB>metric<TAB>value`.

use std::fmt;

use statrs::statistics::{Data, Distribution, OrderStatistics, Statistics};

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub params: Vec<(String, String)>,
    pub metric: String,
    pub value: f64,
}

impl Row {
    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub experiment: String,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("report line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

fn clean(s: &str) -> bool {
    !s.is_empty() && !s.contains(['\t', '\n', '\r', ';', '='])
}

impl BenchReport {
    pub fn new(experiment: impl Into<String>) -> Self {
        BenchReport {
            experiment: experiment.into(),
            rows: Vec::new(),
        }
    }

    /// Panics on names that would not survive the row format.
    pub fn push(&mut self, params: &[(&str, String)], metric: &str, value: f64) {
        assert!(clean(&self.experiment) && clean(metric), "unencodable name");
        for (k, v) in params {
            assert!(clean(k) && clean(v), "unencodable param {k}={v}");
        }
        self.rows.push(Row {
            params: params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            metric: metric.into(),
            value,
        });
    }

    pub fn get(&self, params: &[(&str, &str)], metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && params.iter().all(|(k, v)| r.param(k) == Some(v)))
            .map(|r| r.value)
    }

    pub fn to_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let params: Vec<String> = r.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            // `{}` on f64 prints the shortest string that parses back exactly.
            out += &format!("{}\t{}\t{}\t{}\n", self.experiment, params.join(";"), r.metric, r.value);
        }
        out
    }

    /// Parses rows of one or more experiments, grouped in order of first
    /// appearance.
    pub fn parse_rows(text: &str) -> Result<Vec<BenchReport>, ParseError> {
        let mut out: Vec<BenchReport> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let fail = |m: &str| ParseError {
                line: i + 1,
                message: m.into(),
            };
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [exp, params, metric, value] = cols[..] else {
                return Err(fail("expected 4 tab-separated columns"));
            };
            let params = if params.is_empty() {
                Vec::new()
            } else {
                params
                    .split(';')
                    .map(|kv| {
                        kv.split_once('=')
                            .map(|(k, v)| (k.to_owned(), v.to_owned()))
                            .ok_or_else(|| fail("parameter without '='"))
                    })
                    .collect::<Result<_, _>>()?
            };
            let value: f64 = value.parse().map_err(|_| fail("value is not a number"))?;
            let row = Row {
                params,
                metric: metric.to_owned(),
                value,
            };
            match out.iter_mut().find(|r| r.experiment == exp) {
                Some(r) => r.rows.push(row),
                None => out.push(BenchReport {
                    experiment: exp.to_owned(),
                    rows: vec![row],
                }),
            }
        }
        Ok(out)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "== {} ==", self.experiment)?;
        for r in &self.rows {
            let params: Vec<String> = r.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            writeln!(f, "  {:<40} {:<24} {:.4}", params.join(" "), r.metric, r.value)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

pub fn summarize(samples: &[f64]) -> Summary {
    if samples.is_empty() {
        return Summary {
            mean: f64::NAN,
            median: f64::NAN,
            p95: f64::NAN,
        };
    }
    let mut d = Data::new(samples.to_vec());
    Summary {
        mean: d.mean().unwrap_or(f64::NAN),
        median: d.median(),
        p95: d.percentile(95),
    }
}

/// Coefficient of determination of the least-squares line through
/// `(x, y)`; for a simple linear fit this is the squared Pearson
/// correlation.
pub fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return f64::NAN;
    }
    let cov = x.iter().copied().covariance(y.iter().copied());
    let r = cov / (x.std_dev() * y.std_dev());
    r * r
}

/// Slope and intercept of the least-squares line.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let slope = x.iter().copied().covariance(y.iter().copied()) / x.variance();
    (slope, y.mean() - slope * x.mean())
}
