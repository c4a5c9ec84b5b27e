//! Transaction ingestion: parse raw retail transaction logs, clean them,
//! and trim to a catalog plus a time-indexed daily sales panel.
//!
//! The expected input layout is the Online Retail II CSV export with
//! columns `Invoice, StockCode, Description, Quantity, InvoiceDate,
//! Price, Customer ID, Country`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const CANCELLATION_MARKER: char = 'C';

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing required column '{0}'")]
    MissingColumn(String),
    #[error("row {row}: unparseable date '{value}'")]
    BadDate { row: usize, value: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("no transactions fall inside window {start}..{end}")]
    EmptyWindow { start: NaiveDate, end: NaiveDate },
    #[error("top_n={requested} exceeds the {available} distinct SKUs in the window")]
    NotEnoughSkus { requested: usize, available: usize },
    #[error("invalid cost ratio {0}: must lie in (0, 1)")]
    BadCostRatio(f64),
    #[error("malformed artifact: {0}")]
    BadArtifact(String),
}

/// One cleaned transaction line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub invoice_id: String,
    pub sku: String,
    pub quantity: i64,
    pub unit_price: f64,
    pub timestamp: NaiveDateTime,
    pub customer_id: Option<String>,
    pub country: String,
}

/// Why a raw row was routed to the rejects report instead of parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    MissingCustomerId,
    BadQuantity,
    BadPrice,
    MissingField,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::MissingCustomerId => "missing_customer_id",
            RejectReason::BadQuantity => "bad_quantity",
            RejectReason::BadPrice => "bad_price",
            RejectReason::MissingField => "missing_field",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectedRow {
    /// 1-based data row index (header excluded).
    pub row: usize,
    pub reason: RejectReason,
}

#[derive(Debug, Default)]
pub struct LoadResult {
    pub transactions: Vec<Transaction>,
    pub rejects: Vec<RejectedRow>,
}

/// Fixed SKU universe for a run. The SKU ordering defines the agent index
/// and is deterministic: descending activity, ties broken by SKU id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Catalog {
    pub skus: Vec<String>,
    pub reference_price: Vec<f64>,
    pub unit_cost: Vec<f64>,
    pub window_start: NaiveDate,
    pub window_end: NaiveDate,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.skus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skus.is_empty()
    }

    pub fn index_of(&self, sku: &str) -> Option<usize> {
        self.skus.iter().position(|s| s == sku)
    }
}

/// Daily per-SKU aggregates over the trimmed window. Days with no sales
/// are materialized as explicit zero rows so lag/EMA features are well
/// defined everywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SalesPanel {
    pub skus: Vec<String>,
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// quantity[sku][day_offset]
    pub quantity: Vec<Vec<f64>>,
    /// mean observed unit price; 0.0 on days with no sales
    pub mean_price: Vec<Vec<f64>>,
    /// distinct invoices touching the SKU that day
    pub invoice_count: Vec<Vec<u32>>,
}

impl SalesPanel {
    pub fn num_days(&self) -> usize {
        (self.end - self.start).num_days() as usize + 1
    }

    pub fn date_of(&self, day: usize) -> NaiveDate {
        self.start + chrono::Duration::days(day as i64)
    }

    pub fn day_of(&self, date: NaiveDate) -> Option<usize> {
        if date < self.start || date > self.end {
            return None;
        }
        Some((date - self.start).num_days() as usize)
    }
}

#[derive(Debug, Clone)]
pub struct TrimOutput {
    pub catalog: Catalog,
    pub panel: SalesPanel,
    /// Cleaned rows restricted to the window and catalog SKUs, order preserved.
    pub rows: Vec<Transaction>,
}

fn parse_timestamp(value: &str) -> Option<NaiveDateTime> {
    const FORMATS: &[&str] = &[
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%m/%d/%Y %H:%M:%S",
        "%m/%d/%Y %H:%M",
        "%d/%m/%Y %H:%M",
    ];
    for fmt in FORMATS {
        if let Ok(ts) = NaiveDateTime::parse_from_str(value.trim(), fmt) {
            return Some(ts);
        }
    }
    // Date-only rows come from hand-built fixtures.
    NaiveDate::parse_from_str(value.trim(), "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

/// Parse a raw transaction CSV. Malformed rows are collected into a
/// rejects report, not silently dropped; an unparseable date is a hard
/// error naming the row.
pub fn load_transactions(path: &Path) -> Result<LoadResult, IngestError> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(std::io::BufReader::new(file));

    let headers = reader.headers()?.clone();
    let col = |names: &[&str]| -> Option<usize> {
        headers
            .iter()
            .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
    };
    let required = [
        ("Invoice", col(&["Invoice", "InvoiceNo"])),
        ("StockCode", col(&["StockCode"])),
        ("Quantity", col(&["Quantity"])),
        ("InvoiceDate", col(&["InvoiceDate"])),
        ("Price", col(&["Price", "UnitPrice"])),
        ("Customer ID", col(&["Customer ID", "CustomerID"])),
    ];
    for (name, idx) in &required {
        if idx.is_none() {
            return Err(IngestError::MissingColumn(name.to_string()));
        }
    }
    let [invoice_c, sku_c, qty_c, date_c, price_c, cust_c] =
        [0, 1, 2, 3, 4, 5].map(|i| required[i].1.unwrap());
    let country_c = col(&["Country"]);

    let mut result = LoadResult::default();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("").trim();

        let date_raw = field(date_c);
        if date_raw.is_empty() {
            result.rejects.push(RejectedRow { row, reason: RejectReason::MissingField });
            continue;
        }
        let timestamp = parse_timestamp(date_raw).ok_or_else(|| IngestError::BadDate {
            row,
            value: date_raw.to_string(),
        })?;

        let customer = field(cust_c);
        if customer.is_empty() {
            result.rejects.push(RejectedRow { row, reason: RejectReason::MissingCustomerId });
            continue;
        }
        let Ok(quantity) = field(qty_c).parse::<i64>() else {
            result.rejects.push(RejectedRow { row, reason: RejectReason::BadQuantity });
            continue;
        };
        let Ok(unit_price) = field(price_c).parse::<f64>() else {
            result.rejects.push(RejectedRow { row, reason: RejectReason::BadPrice });
            continue;
        };
        let invoice_id = field(invoice_c).to_string();
        let sku = field(sku_c).to_string();
        if invoice_id.is_empty() || sku.is_empty() {
            result.rejects.push(RejectedRow { row, reason: RejectReason::MissingField });
            continue;
        }

        result.transactions.push(Transaction {
            invoice_id,
            sku,
            quantity,
            unit_price,
            timestamp,
            customer_id: Some(customer.to_string()),
            country: country_c.map(|c| field(c).to_string()).unwrap_or_default(),
        });
    }
    Ok(result)
}

/// Drop cancelled lines ('C'-prefixed invoices), non-positive quantities
/// or prices, and rows with a missing customer id. Never errors; order
/// is preserved. Idempotent.
pub fn clean(rows: Vec<Transaction>) -> Vec<Transaction> {
    rows.into_iter()
        .filter(|t| {
            !t.invoice_id.starts_with(CANCELLATION_MARKER)
                && t.quantity > 0
                && t.unit_price > 0.0
                && t.customer_id.as_deref().is_some_and(|c| !c.is_empty())
        })
        .collect()
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Restrict cleaned rows to a calendar window, keep the `top_n` SKUs by
/// activity (transaction line count, ties by SKU id ascending), and build
/// the daily sales panel. Reference price is the median observed unit
/// price; unit cost is `cost_ratio` times the reference price.
pub fn trim(
    rows: &[Transaction],
    window: (NaiveDate, NaiveDate),
    top_n: usize,
    cost_ratio: f64,
) -> Result<TrimOutput, IngestError> {
    let (start, end) = window;
    if !(cost_ratio > 0.0 && cost_ratio < 1.0) {
        return Err(IngestError::BadCostRatio(cost_ratio));
    }
    assert!(top_n >= 1, "top_n must be >= 1");

    let in_window: Vec<&Transaction> = rows
        .iter()
        .filter(|t| {
            let d = t.timestamp.date();
            d >= start && d <= end
        })
        .collect();
    if in_window.is_empty() {
        return Err(IngestError::EmptyWindow { start, end });
    }

    let mut activity: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &in_window {
        *activity.entry(t.sku.as_str()).or_default() += 1;
    }
    if activity.len() < top_n {
        return Err(IngestError::NotEnoughSkus {
            requested: top_n,
            available: activity.len(),
        });
    }
    let mut ranked: Vec<(&str, usize)> = activity.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(top_n);
    let skus: Vec<String> = ranked.iter().map(|(s, _)| s.to_string()).collect();
    let index: HashMap<&str, usize> = skus.iter().map(|s| s.as_str()).zip(0..).collect();

    let kept: Vec<Transaction> = in_window
        .iter()
        .filter(|t| index.contains_key(t.sku.as_str()))
        .map(|t| (*t).clone())
        .collect();

    let n = skus.len();
    let num_days = (end - start).num_days() as usize + 1;
    let mut quantity = vec![vec![0.0; num_days]; n];
    let mut price_sum = vec![vec![0.0; num_days]; n];
    let mut line_count = vec![vec![0u32; num_days]; n];
    let mut invoices: Vec<Vec<BTreeSet<&str>>> = vec![vec![BTreeSet::new(); num_days]; n];
    let mut prices_by_sku: Vec<Vec<f64>> = vec![Vec::new(); n];

    for t in &kept {
        let i = index[t.sku.as_str()];
        let d = (t.timestamp.date() - start).num_days() as usize;
        quantity[i][d] += t.quantity as f64;
        price_sum[i][d] += t.unit_price;
        line_count[i][d] += 1;
        invoices[i][d].insert(t.invoice_id.as_str());
        prices_by_sku[i].push(t.unit_price);
    }

    let mean_price: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..num_days)
                .map(|d| {
                    if line_count[i][d] > 0 {
                        price_sum[i][d] / line_count[i][d] as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let invoice_count: Vec<Vec<u32>> = invoices
        .iter()
        .map(|per_day| per_day.iter().map(|s| s.len() as u32).collect())
        .collect();

    let reference_price: Vec<f64> = prices_by_sku.iter_mut().map(|p| median(p)).collect();
    let unit_cost: Vec<f64> = reference_price.iter().map(|p| cost_ratio * p).collect();

    Ok(TrimOutput {
        catalog: Catalog {
            skus: skus.clone(),
            reference_price,
            unit_cost,
            window_start: start,
            window_end: end,
        },
        panel: SalesPanel {
            skus,
            start,
            end,
            quantity,
            mean_price,
            invoice_count,
        },
        rows: kept,
    })
}

pub fn write_catalog_csv<W: Write>(catalog: &Catalog, mut w: W) -> std::io::Result<()> {
    writeln!(w, "agent_index,sku,reference_price,unit_cost,window_start,window_end")?;
    for (i, sku) in catalog.skus.iter().enumerate() {
        writeln!(
            w,
            "{i},{sku},{:.6},{:.6},{},{}",
            catalog.reference_price[i], catalog.unit_cost[i], catalog.window_start, catalog.window_end
        )?;
    }
    Ok(())
}

pub fn write_panel_csv<W: Write>(panel: &SalesPanel, mut w: W) -> std::io::Result<()> {
    writeln!(w, "date,sku,quantity,mean_price,invoice_count")?;
    for d in 0..panel.num_days() {
        let date = panel.date_of(d);
        for (i, sku) in panel.skus.iter().enumerate() {
            writeln!(
                w,
                "{date},{sku},{},{:.6},{}",
                panel.quantity[i][d], panel.mean_price[i][d], panel.invoice_count[i][d]
            )?;
        }
    }
    Ok(())
}

/// Inverse of [`write_catalog_csv`].
pub fn read_catalog_csv<R: std::io::Read>(r: R) -> Result<Catalog, IngestError> {
    let mut reader = csv::Reader::from_reader(r);
    let mut catalog = Catalog {
        skus: Vec::new(),
        reference_price: Vec::new(),
        unit_cost: Vec::new(),
        window_start: NaiveDate::MIN,
        window_end: NaiveDate::MIN,
    };
    let bad = |d: &str| IngestError::BadArtifact(format!("catalog csv: {d}"));
    for record in reader.records() {
        let rec = record?;
        if rec.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        catalog.skus.push(rec[1].to_string());
        catalog.reference_price.push(rec[2].parse().map_err(|_| bad("bad reference_price"))?);
        catalog.unit_cost.push(rec[3].parse().map_err(|_| bad("bad unit_cost"))?);
        catalog.window_start = rec[4].parse().map_err(|_| bad("bad window_start"))?;
        catalog.window_end = rec[5].parse().map_err(|_| bad("bad window_end"))?;
    }
    if catalog.skus.is_empty() {
        return Err(bad("no rows"));
    }
    Ok(catalog)
}

/// Inverse of [`write_panel_csv`]; the panel window comes from the row
/// dates themselves.
pub fn read_panel_csv<R: std::io::Read>(r: R, catalog: &Catalog) -> Result<SalesPanel, IngestError> {
    let mut reader = csv::Reader::from_reader(r);
    let bad = |d: String| IngestError::BadArtifact(format!("panel csv: {d}"));
    let index: BTreeMap<&str, usize> =
        catalog.skus.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut rows: Vec<(NaiveDate, usize, f64, f64, u32)> = Vec::new();
    for record in reader.records() {
        let rec = record?;
        if rec.len() != 5 {
            return Err(bad("expected 5 columns".into()));
        }
        let date: NaiveDate = rec[0].parse().map_err(|_| bad(format!("bad date '{}'", &rec[0])))?;
        let sku = *index
            .get(&rec[1])
            .ok_or_else(|| bad(format!("unknown sku '{}'", &rec[1])))?;
        rows.push((
            date,
            sku,
            rec[2].parse().map_err(|_| bad("bad quantity".into()))?,
            rec[3].parse().map_err(|_| bad("bad mean_price".into()))?,
            rec[4].parse().map_err(|_| bad("bad invoice_count".into()))?,
        ));
    }
    if rows.is_empty() {
        return Err(bad("no rows".into()));
    }
    let start = rows.iter().map(|r| r.0).min().unwrap();
    let end = rows.iter().map(|r| r.0).max().unwrap();
    let n = catalog.len();
    let days = (end - start).num_days() as usize + 1;
    let mut panel = SalesPanel {
        skus: catalog.skus.clone(),
        start,
        end,
        quantity: vec![vec![0.0; days]; n],
        mean_price: vec![vec![0.0; days]; n],
        invoice_count: vec![vec![0; days]; n],
    };
    for (date, sku, qty, price, count) in rows {
        let d = (date - start).num_days() as usize;
        panel.quantity[sku][d] = qty;
        panel.mean_price[sku][d] = price;
        panel.invoice_count[sku][d] = count;
    }
    Ok(panel)
}

/// Persist cleaned, trimmed transaction rows so downstream stages do not
/// reparse the raw file. Floats use shortest-roundtrip formatting, so the
/// reader recovers them exactly.
pub fn write_rows_csv<W: Write>(rows: &[Transaction], mut w: W) -> std::io::Result<()> {
    writeln!(w, "invoice_id,sku,quantity,unit_price,timestamp,customer_id,country")?;
    for t in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            t.invoice_id,
            t.sku,
            t.quantity,
            t.unit_price,
            t.timestamp.format("%Y-%m-%d %H:%M:%S"),
            t.customer_id.as_deref().unwrap_or(""),
            t.country
        )?;
    }
    Ok(())
}

/// Inverse of [`write_rows_csv`].
pub fn read_rows_csv<R: std::io::Read>(r: R) -> Result<Vec<Transaction>, IngestError> {
    let mut reader = csv::Reader::from_reader(r);
    let bad = |d: String| IngestError::BadArtifact(format!("rows csv: {d}"));
    let mut rows = Vec::new();
    for record in reader.records() {
        let rec = record?;
        if rec.len() != 7 {
            return Err(bad("expected 7 columns".into()));
        }
        rows.push(Transaction {
            invoice_id: rec[0].to_string(),
            sku: rec[1].to_string(),
            quantity: rec[2].parse().map_err(|_| bad("bad quantity".into()))?,
            unit_price: rec[3].parse().map_err(|_| bad("bad unit_price".into()))?,
            timestamp: NaiveDateTime::parse_from_str(&rec[4], "%Y-%m-%d %H:%M:%S")
                .map_err(|_| bad(format!("bad timestamp '{}'", &rec[4])))?,
            customer_id: if rec[5].is_empty() { None } else { Some(rec[5].to_string()) },
            country: rec[6].to_string(),
        });
    }
    Ok(rows)
}

pub fn write_rejects_csv<W: Write>(rejects: &[RejectedRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "row,reason")?;
    for r in rejects {
        writeln!(w, "{},{}", r.row, r.reason.code())?;
    }
    Ok(())
}

/// Distinct (invoice, customer) counts used by the pipeline sanity report.
pub fn summarize(rows: &[Transaction]) -> (usize, usize, usize) {
    let invoices: BTreeSet<&str> = rows.iter().map(|t| t.invoice_id.as_str()).collect();
    let customers: BTreeSet<&str> = rows
        .iter()
        .filter_map(|t| t.customer_id.as_deref())
        .collect();
    (rows.len(), invoices.len(), customers.len())
}
