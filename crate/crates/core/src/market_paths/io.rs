use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{DailySeries, RateTable};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct SeriesRow {
    date: NaiveDate,
    close: f64,
    is_trading_day: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct RateRow {
    date: NaiveDate,
    tenor_days: u32,
    rate: f64,
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    Ok(csv::Reader::from_reader(file))
}

fn check_header(reader: &mut csv::Reader<std::fs::File>, path: &Path, expected: &[&str]) -> Result<()> {
    let header = reader.headers()?;
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!(
            "{}: expected header `{}`, found `{}`",
            path.display(),
            expected.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

/// Read `date,close,is_trading_day`.
pub fn read_series_csv(path: impl AsRef<Path>) -> Result<DailySeries> {
    let path = path.as_ref();
    let mut reader = open_reader(path)?;
    check_header(&mut reader, path, &["date", "close", "is_trading_day"])?;
    let mut dates = Vec::new();
    let mut closes = Vec::new();
    let mut flags = Vec::new();
    for row in reader.deserialize::<SeriesRow>() {
        let row = row?;
        if row.is_trading_day > 1 {
            return Err(Error::Data(format!(
                "{}: is_trading_day must be 0 or 1 on {}",
                path.display(),
                row.date
            )));
        }
        dates.push(row.date);
        closes.push(row.close);
        flags.push(row.is_trading_day == 1);
    }
    DailySeries::new(dates, closes, flags)
}

pub fn write_series_csv(path: impl AsRef<Path>, series: &DailySeries) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for ((date, close), t) in series.dates().iter().zip(series.closes()).zip(series.is_trading_day()) {
        w.serialize(SeriesRow {
            date: *date,
            close: *close,
            is_trading_day: u8::from(*t),
        })?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

/// Read `date,tenor_days,rate` into one table per tenor.
pub fn read_rates_csv(path: impl AsRef<Path>) -> Result<Vec<RateTable>> {
    let path = path.as_ref();
    let mut reader = open_reader(path)?;
    check_header(&mut reader, path, &["date", "tenor_days", "rate"])?;
    let mut by_tenor: BTreeMap<u32, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for row in reader.deserialize::<RateRow>() {
        let row = row?;
        by_tenor.entry(row.tenor_days).or_default().push((row.date, row.rate));
    }
    by_tenor
        .into_iter()
        .map(|(tenor, obs)| RateTable::new(tenor, obs))
        .collect()
}

pub fn write_rates_csv(path: impl AsRef<Path>, tables: &[RateTable]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for t in tables {
        for (date, rate) in t.observations() {
            w.serialize(RateRow {
                date: *date,
                tenor_days: t.tenor_days,
                rate: *rate,
            })?;
        }
    }
    w.flush().map_err(|e| Error::file(path, e))
}
