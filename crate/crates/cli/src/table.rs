//! Per-run CSV logs.

use ccbf_core::SimLog;

/// Column names in file order.
pub fn header(n: usize, m: usize, c: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    cols.extend((0..n).map(|i| format!("x_{i}")));
    cols.extend((0..m).map(|i| format!("u_{i}")));
    cols.extend((0..c).map(|i| format!("w_{i}")));
    cols.push("H".into());
    cols.push("b_ccbf".into());
    cols.extend((0..c).map(|i| format!("h_{i}")));
    for name in ["feasible", "eta_mu_margin", "eta_nu_margin", "min_eig_phi"] {
        cols.push(name.into());
    }
    cols
}

/// Nine significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn to_csv(log: &SimLog) -> Result<Vec<u8>, csv::Error> {
    let first = log.records.first();
    let (n, m, c) = first.map_or((0, 0, 0), |r| (r.x.len(), r.u.len(), r.h.len()));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(n, m, c))?;
    for r in &log.records {
        let mut row: Vec<String> = Vec::with_capacity(2 * c + n + m + 7);
        row.push(fmt_float(r.t));
        row.extend(r.x.iter().chain(&r.u).chain(&r.w).map(|v| fmt_float(*v)));
        row.push(fmt_float(r.big_h));
        row.push(fmt_float(r.b_ccbf));
        row.extend(r.h.iter().map(|v| fmt_float(*v)));
        row.push(if r.feasible { "1" } else { "0" }.into());
        row.push(fmt_float(r.eta_mu_margin));
        row.push(fmt_float(r.eta_nu_margin));
        row.push(fmt_float(r.min_eig));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

/// A CSV log read back as columns.
#[derive(Debug, Clone)]
pub struct Table {
    pub columns: Vec<String>,
    pub data: Vec<Vec<f64>>,
}

impl Table {
    pub fn from_csv(bytes: &[u8]) -> Result<Self, csv::Error> {
        let mut r = csv::Reader::from_reader(bytes);
        let columns: Vec<String> = r.headers()?.iter().map(String::from).collect();
        let mut data = vec![Vec::new(); columns.len()];
        for rec in r.records() {
            for (col, field) in data.iter_mut().zip(rec?.iter()) {
                col.push(field.parse().unwrap_or(f64::NAN));
            }
        }
        Ok(Self { columns, data })
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().position(|c| c == name).map(|i| self.data[i].as_slice())
    }

    /// Columns named `<prefix>_<index>`, in file order.
    pub fn family(&self, prefix: &str) -> Vec<(&str, &[f64])> {
        self.columns
            .iter()
            .zip(&self.data)
            .filter(|(name, _)| {
                name.strip_prefix(prefix)
                    .and_then(|r| r.strip_prefix('_'))
                    .is_some_and(|i| i.chars().all(|ch| ch.is_ascii_digit()))
            })
            .map(|(name, col)| (name.as_str(), col.as_slice()))
            .collect()
    }
}
