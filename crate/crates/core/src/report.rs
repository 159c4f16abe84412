//! CSV outputs: per-iteration metrics, refresh records, per-sample weight dumps and the
//! β/α analysis tables derived from them. Reals are written with 17 significant digits.

use std::io::{Read, Write};
use std::path::Path;

use crate::aten::AlphaMode;
use crate::bank::write_atomic;
use crate::error::{Error, Result};
use crate::train::{beta_table, column_means, Evaluation, MetricsRow, RefreshRecord};

pub const METRICS_FILE: &str = "metrics.csv";
pub const REFRESH_FILE: &str = "refreshes.csv";
pub const BETA_DUMP_FILE: &str = "beta.csv";
pub const ALPHA_DUMP_FILE: &str = "alpha.csv";
pub const MEAN_BETA_FILE: &str = "mean_beta.csv";
pub const BETA_DEVIATION_FILE: &str = "beta_deviation.csv";
pub const MEAN_ALPHA_FILE: &str = "mean_alpha.csv";

const METRICS_COLUMNS: [&str; 12] = [
    "epoch",
    "iter",
    "alpha_mode",
    "lr",
    "l_total",
    "l_inter",
    "l_intra",
    "l_ce",
    "l_ent",
    "l_div",
    "pseudo_label_agreement",
    "accuracy",
];

/// Column schemas, for `--help` texts.
pub const SCHEMAS: &str = "\
metrics.csv         epoch,iter,alpha_mode,lr,l_total,l_inter,l_intra,l_ce,l_ent,l_div,pseudo_label_agreement,accuracy,beta_0..beta_{n-1}
refreshes.csv       epoch,iter,alpha_mode,accuracy,pseudo_label_accuracy,agreement
beta.csv            sample,label,prediction,beta_0..beta_{n-1}
alpha.csv           sample,domain,alpha_0..alpha_{n-1}   (row i holds the weights bottleneck i puts on each classifier)
mean_beta.csv       domain,mean_beta
beta_deviation.csv  class,count,dev_0..dev_{n-1}   (class mean beta minus domain mean beta)
mean_alpha.csv      domain,alpha_0..alpha_{n-1}
Empty fields mean the value is undefined (no labels, or no previous refresh).";

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_real(v: Option<f64>) -> String {
    v.map(real).unwrap_or_default()
}

pub fn alpha_mode_name(mode: AlphaMode) -> &'static str {
    match mode {
        AlphaMode::Learned => "learned",
        AlphaMode::OneHot => "one_hot",
    }
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}_{i}"))
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush()?;
    Ok(())
}

pub fn write_metrics<W: Write>(out: W, rows: &[MetricsRow], n_domains: usize) -> Result<()> {
    let mut w = writer(out);
    let header: Vec<String> = METRICS_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(indexed("beta", n_domains))
        .collect();
    w.write_record(&header)?;
    for r in rows {
        if r.mean_beta.len() != n_domains {
            return Err(Error::contract("write_metrics", "row has the wrong number of β means"));
        }
        let mut rec = vec![
            r.epoch.to_string(),
            r.iter.to_string(),
            alpha_mode_name(r.alpha_mode).to_string(),
            real(r.lr),
            real(r.l_total),
            real(r.l_inter),
            real(r.l_intra),
            real(r.l_ce),
            real(r.l_ent),
            real(r.l_div),
            opt_real(r.pseudo_label_agreement),
            opt_real(r.accuracy),
        ];
        rec.extend(r.mean_beta.iter().map(|&v| real(v)));
        w.write_record(&rec)?;
    }
    finish(w)
}

pub fn write_refreshes<W: Write>(out: W, rows: &[RefreshRecord]) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["epoch", "iter", "alpha_mode", "accuracy", "pseudo_label_accuracy", "agreement"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.iter.to_string(),
            alpha_mode_name(r.alpha_mode).to_string(),
            opt_real(r.accuracy),
            opt_real(r.pseudo_label_accuracy),
            opt_real(r.agreement),
        ])?;
    }
    finish(w)
}

/// Per-sample weights of a final evaluation pass, as dumped to `beta.csv` / `alpha.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightDump {
    pub labels: Option<Vec<usize>>,
    pub predictions: Vec<usize>,
    /// `[m][i]`
    pub beta: Vec<Vec<f64>>,
    /// `[i][m][j]`
    pub alpha: Vec<Vec<Vec<f64>>>,
}

impl WeightDump {
    pub fn from_evaluation(eval: &Evaluation, labels: Option<&[usize]>) -> Self {
        Self {
            labels: labels.map(<[usize]>::to_vec),
            predictions: eval.predictions.clone(),
            beta: eval.beta.clone(),
            alpha: eval.alpha.clone(),
        }
    }

    pub fn n_domains(&self) -> usize {
        self.alpha.len()
    }

    pub fn n_samples(&self) -> usize {
        self.predictions.len()
    }

    fn validate(&self) -> Result<()> {
        let (n, m) = (self.n_domains(), self.n_samples());
        let bad = |msg: &str| Err(Error::contract("WeightDump", msg));
        if self.beta.len() != m || self.beta.iter().any(|r| r.len() != n) {
            return bad("β rows must be samples × domains");
        }
        if self.alpha.iter().any(|d| d.len() != m || d.iter().any(|r| r.len() != n)) {
            return bad("α blocks must be samples × domains for every domain");
        }
        if self.labels.as_ref().is_some_and(|l| l.len() != m) {
            return bad("label count differs from sample count");
        }
        Ok(())
    }

    pub fn write_beta<W: Write>(&self, out: W) -> Result<()> {
        self.validate()?;
        let mut w = writer(out);
        let header: Vec<String> = ["sample", "label", "prediction"]
            .iter()
            .map(|s| s.to_string())
            .chain(indexed("beta", self.n_domains()))
            .collect();
        w.write_record(&header)?;
        for (m, row) in self.beta.iter().enumerate() {
            let label = self.labels.as_ref().map(|l| l[m].to_string()).unwrap_or_default();
            let mut rec = vec![m.to_string(), label, self.predictions[m].to_string()];
            rec.extend(row.iter().map(|&v| real(v)));
            w.write_record(&rec)?;
        }
        finish(w)
    }

    pub fn write_alpha<W: Write>(&self, out: W) -> Result<()> {
        self.validate()?;
        let mut w = writer(out);
        let header: Vec<String> = ["sample", "domain"]
            .iter()
            .map(|s| s.to_string())
            .chain(indexed("alpha", self.n_domains()))
            .collect();
        w.write_record(&header)?;
        for m in 0..self.n_samples() {
            for (i, block) in self.alpha.iter().enumerate() {
                let mut rec = vec![m.to_string(), i.to_string()];
                rec.extend(block[m].iter().map(|&v| real(v)));
                w.write_record(&rec)?;
            }
        }
        finish(w)
    }

    pub fn read<R: Read, S: Read>(beta_csv: R, alpha_csv: S) -> Result<Self> {
        let mut labels = Vec::new();
        let mut any_label = false;
        let mut predictions = Vec::new();
        let mut beta_rows = Vec::new();
        let mut r = csv::Reader::from_reader(beta_csv);
        let n = expect_header(r.headers()?, &["sample", "label", "prediction"], "beta", "beta.csv")?;
        for (m, rec) in r.records().enumerate() {
            let rec = rec?;
            if parse_index(&rec[0], "beta.csv")? != m {
                return Err(dump_error("beta.csv", format!("row {m} is out of order")));
            }
            if rec[1].is_empty() {
                labels.push(0);
            } else {
                any_label = true;
                labels.push(parse_index(&rec[1], "beta.csv")?);
            }
            predictions.push(parse_index(&rec[2], "beta.csv")?);
            beta_rows.push(parse_reals(rec.iter().skip(3), n, "beta.csv")?);
        }
        let m_count = predictions.len();
        let mut alpha = vec![Vec::with_capacity(m_count); n];
        let mut r = csv::Reader::from_reader(alpha_csv);
        let width = expect_header(r.headers()?, &["sample", "domain"], "alpha", "alpha.csv")?;
        if width != n {
            return Err(dump_error("alpha.csv", format!("{width} weight columns, β dump has {n} domains")));
        }
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            let (m, i) = (parse_index(&rec[0], "alpha.csv")?, parse_index(&rec[1], "alpha.csv")?);
            if m != k / n || i != k % n {
                return Err(dump_error("alpha.csv", format!("row {k} is out of order")));
            }
            alpha[i].push(parse_reals(rec.iter().skip(2), n, "alpha.csv")?);
        }
        let dump = Self {
            labels: any_label.then_some(labels),
            predictions,
            beta: beta_rows,
            alpha,
        };
        dump.validate()?;
        Ok(dump)
    }
}

fn dump_error(file: &str, msg: String) -> Error {
    Error::contract("read dump", format!("{file}: {msg}"))
}

fn expect_header(h: &csv::StringRecord, fixed: &[&str], prefix: &str, file: &str) -> Result<usize> {
    let n = h.len().saturating_sub(fixed.len());
    let want: Vec<String> = fixed.iter().map(|s| s.to_string()).chain(indexed(prefix, n)).collect();
    if n == 0 || h.iter().ne(want.iter().map(String::as_str)) {
        return Err(dump_error(file, format!("unexpected header {:?}", h.iter().collect::<Vec<_>>())));
    }
    Ok(n)
}

fn parse_index(s: &str, file: &str) -> Result<usize> {
    s.parse().map_err(|_| dump_error(file, format!("bad index {s:?}")))
}

fn parse_reals<'a>(fields: impl Iterator<Item = &'a str>, n: usize, file: &str) -> Result<Vec<f64>> {
    let v = fields
        .map(|s| s.parse::<f64>().map_err(|_| dump_error(file, format!("bad number {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if v.len() != n {
        return Err(dump_error(file, format!("expected {n} values, found {}", v.len())));
    }
    Ok(v)
}

/// Domain-level β means, per-class β deviations and per-domain mean α.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisTables {
    pub mean_beta: Vec<f64>,
    /// `[c][i]`
    pub beta_deviation: Vec<Vec<f64>>,
    pub class_counts: Vec<usize>,
    /// `[i][j]`
    pub mean_alpha: Vec<Vec<f64>>,
}

impl AnalysisTables {
    pub fn from_evaluation(eval: &Evaluation) -> Self {
        Self {
            mean_beta: eval.mean_beta.clone(),
            beta_deviation: eval.beta_deviation.clone(),
            class_counts: eval.class_counts.clone(),
            mean_alpha: eval.mean_alpha.clone(),
        }
    }

    /// Recomputes the tables from dumped weights. Samples are grouped by label when the dump has
    /// labels, otherwise by prediction.
    pub fn from_dump(dump: &WeightDump, n_classes: usize) -> Result<Self> {
        dump.validate()?;
        let groups = dump.labels.as_ref().unwrap_or(&dump.predictions);
        if groups.iter().any(|&c| c >= n_classes) {
            return Err(Error::contract("AnalysisTables", "class index outside the class count"));
        }
        let table = beta_table(&dump.beta, groups, n_classes);
        Ok(Self {
            mean_beta: table.mean,
            beta_deviation: table.deviation,
            class_counts: table.counts,
            mean_alpha: dump.alpha.iter().map(|rows| column_means(rows, dump.n_domains())).collect(),
        })
    }

    pub fn write_mean_beta<W: Write>(&self, out: W) -> Result<()> {
        let mut w = writer(out);
        w.write_record(["domain", "mean_beta"])?;
        for (i, &v) in self.mean_beta.iter().enumerate() {
            w.write_record([i.to_string(), real(v)])?;
        }
        finish(w)
    }

    pub fn write_beta_deviation<W: Write>(&self, out: W) -> Result<()> {
        let mut w = writer(out);
        let header: Vec<String> = ["class", "count"]
            .iter()
            .map(|s| s.to_string())
            .chain(indexed("dev", self.mean_beta.len()))
            .collect();
        w.write_record(&header)?;
        for (c, (row, count)) in self.beta_deviation.iter().zip(&self.class_counts).enumerate() {
            let mut rec = vec![c.to_string(), count.to_string()];
            rec.extend(row.iter().map(|&v| real(v)));
            w.write_record(&rec)?;
        }
        finish(w)
    }

    pub fn write_mean_alpha<W: Write>(&self, out: W) -> Result<()> {
        let mut w = writer(out);
        let header: Vec<String> = std::iter::once("domain".to_string())
            .chain(indexed("alpha", self.mean_alpha.len()))
            .collect();
        w.write_record(&header)?;
        for (i, row) in self.mean_alpha.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|&v| real(v)));
            w.write_record(&rec)?;
        }
        finish(w)
    }

    /// Writes the three table files into `dir`, each atomically.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        save(&dir.join(MEAN_BETA_FILE), |b| self.write_mean_beta(b))?;
        save(&dir.join(BETA_DEVIATION_FILE), |b| self.write_beta_deviation(b))?;
        save(&dir.join(MEAN_ALPHA_FILE), |b| self.write_mean_alpha(b))
    }
}

/// Renders into memory and writes the file atomically.
pub fn save(path: &Path, render: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    render(&mut buf)?;
    write_atomic(path, &buf)
}
