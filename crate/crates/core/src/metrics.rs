//! Per-epoch training log and its tab-separated text form.
//!
//! ```text
//! # nice-metrics v1 task=classification
//! # flags noise_gradual=true clamp_learning=true bits_w=4 bits_a=4
//! epoch	stage	modes	loss	metric	c_a:1	c_a:2
//! 0	0	NFFF	NaN	71.2	3.1	2.4
//! 1	0	NFFF	0.91	73.0	3.0	2.4
//! ```
//!
//! `modes` has one letter per layer (`F`, `N`, `Q`). Row 0 is the calibrated
//! state before training. Floats are written in shortest round-trip form.

#![allow(clippy::tabs_in_doc_comments)]

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::Task;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub stage: usize,
    pub modes: String,
    pub loss: f64,
    pub metric: f64,
    pub c_a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub task: Task,
    pub noise_gradual: bool,
    pub clamp_learning: bool,
    pub bits_w: u32,
    pub bits_a: u32,
    /// Activation site index of each `c_a` column.
    pub sites: Vec<usize>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn final_metric(&self) -> Option<f64> {
        self.rows.last().map(|r| r.metric)
    }

    pub fn to_tsv(&self) -> String {
        let task = match self.task {
            Task::Classification => "classification",
            Task::Regression => "regression",
        };
        let mut s = format!("# nice-metrics v1 task={task}\n");
        let _ = writeln!(
            s,
            "# flags noise_gradual={} clamp_learning={} bits_w={} bits_a={}",
            self.noise_gradual, self.clamp_learning, self.bits_w, self.bits_a
        );
        s.push_str("epoch\tstage\tmodes\tloss\tmetric");
        for site in &self.sites {
            let _ = write!(s, "\tc_a:{site}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{}\t{}\t{}\t{:?}\t{:?}", r.epoch, r.stage, r.modes, r.loss, r.metric);
            for c in &r.c_a {
                let _ = write!(s, "\t{c:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, msg: &str| Error::Parse { line, msg: msg.into() };

        let (n, first) = lines.next().ok_or_else(|| err(1, "empty log"))?;
        let task = match first.strip_prefix("# nice-metrics v1 task=") {
            Some("classification") => Task::Classification,
            Some("regression") => Task::Regression,
            _ => return Err(err(n, "expected '# nice-metrics v1 task=...' header")),
        };

        let (n, flags) = lines.next().ok_or_else(|| err(2, "missing flags line"))?;
        let flags = flags
            .strip_prefix("# flags ")
            .ok_or_else(|| err(n, "expected '# flags ...' line"))?;
        let mut kv = std::collections::HashMap::new();
        for item in flags.split_whitespace() {
            let (k, v) = item.split_once('=').ok_or_else(|| err(n, "flag without '='"))?;
            kv.insert(k, v);
        }
        let flag = |k: &str| -> Result<&str> {
            kv.get(k).copied().ok_or_else(|| err(n, &format!("missing flag {k}")))
        };
        let parse_bool = |k: &str| -> Result<bool> { flag(k)?.parse().map_err(|_| err(n, &format!("bad flag {k}"))) };
        let parse_u32 = |k: &str| -> Result<u32> { flag(k)?.parse().map_err(|_| err(n, &format!("bad flag {k}"))) };
        let noise_gradual = parse_bool("noise_gradual")?;
        let clamp_learning = parse_bool("clamp_learning")?;
        let bits_w = parse_u32("bits_w")?;
        let bits_a = parse_u32("bits_a")?;

        let (n, header) = lines.next().ok_or_else(|| err(3, "missing column header"))?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.len() < 5 || cols[..5] != ["epoch", "stage", "modes", "loss", "metric"] {
            return Err(err(n, "unexpected column header"));
        }
        let sites = cols[5..]
            .iter()
            .map(|c| {
                c.strip_prefix("c_a:")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err(n, &format!("bad clamp column '{c}'")))
            })
            .collect::<Result<Vec<usize>>>()?;

        let mut rows = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != cols.len() {
                return Err(err(n, &format!("expected {} fields, got {}", cols.len(), f.len())));
            }
            let num = |i: usize| -> Result<f64> {
                f[i].parse().map_err(|_| err(n, &format!("bad number '{}' in column {}", f[i], cols[i])))
            };
            let int = |i: usize| -> Result<usize> {
                f[i].parse().map_err(|_| err(n, &format!("bad integer '{}' in column {}", f[i], cols[i])))
            };
            if !f[2].chars().all(|c| matches!(c, 'F' | 'N' | 'Q')) {
                return Err(err(n, &format!("bad modes '{}'", f[2])));
            }
            rows.push(MetricsRow {
                epoch: int(0)?,
                stage: int(1)?,
                modes: f[2].to_string(),
                loss: num(3)?,
                metric: num(4)?,
                c_a: (5..f.len()).map(num).collect::<Result<_>>()?,
            });
        }
        Ok(Self {
            task,
            noise_gradual,
            clamp_learning,
            bits_w,
            bits_a,
            sites,
            rows,
        })
    }
}
