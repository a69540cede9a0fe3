//! Reference data: which exchange-local symbols list which ISIN.
//!
//! The bulk-load grammar (one instrument per line, `#` comments and blank
//! lines ignored):
//!
//! ```text
//! ISIN|display_name|MIC:SYMBOL,MIC:SYMBOL|vendor=alias,vendor=alias
//! ```
//!
//! The vendor field may be empty (and its trailing `|` omitted). Display
//! names may not contain `|`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;

use thiserror::Error;

use crate::model::{Isin, Mic, SymbolRef};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SymbologyError {
    #[error("{symbol} is already listed under {owner}")]
    ConflictingListing { symbol: SymbolRef, owner: Isin },
    #[error("invalid ISIN {0:?}")]
    InvalidIsin(String),
    #[error("unknown symbol {0}")]
    UnknownSymbol(SymbolRef),
    #[error("unknown ISIN {0}")]
    UnknownIsin(Isin),
    #[error("instrument record for {0} has no listings")]
    NoListings(Isin),
    #[error("malformed reference line: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentRecord {
    pub isin: Isin,
    pub listings: BTreeSet<SymbolRef>,
    /// vendor -> alias, at most one alias per vendor.
    pub vendor_aliases: BTreeMap<String, String>,
    pub display_name: String,
}

impl InstrumentRecord {
    pub fn new(isin: Isin, display_name: impl Into<String>, listings: impl IntoIterator<Item = SymbolRef>) -> Self {
        InstrumentRecord {
            isin,
            listings: listings.into_iter().collect(),
            vendor_aliases: BTreeMap::new(),
            display_name: display_name.into(),
        }
    }

    pub fn with_alias(mut self, vendor: impl Into<String>, alias: impl Into<String>) -> Self {
        self.vendor_aliases.insert(vendor.into(), alias.into());
        self
    }
}

/// A listing whose index entry disagrees with the instrument records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Discrepancy {
    MissingIndex { symbol: SymbolRef, isin: Isin },
    WrongIndex { symbol: SymbolRef, indexed: Isin, actual: Isin },
    StaleIndex { symbol: SymbolRef, indexed: Isin },
}

#[derive(Debug, Clone, Default)]
pub struct SymbologyStore {
    by_isin: BTreeMap<Isin, InstrumentRecord>,
    by_symbol: HashMap<SymbolRef, Isin>,
}

impl SymbologyStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.by_isin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_isin.is_empty()
    }

    /// Registers or replaces the record for `record.isin`.
    ///
    /// Listings dropped from a replaced record are unindexed. A listing owned
    /// by another ISIN is a conflict: moving a listing requires an explicit
    /// [`unregister`](Self::unregister) first.
    pub fn register(&mut self, record: InstrumentRecord) -> Result<(), SymbologyError> {
        if record.listings.is_empty() {
            return Err(SymbologyError::NoListings(record.isin));
        }
        for symbol in &record.listings {
            if let Some(owner) = self.by_symbol.get(symbol) {
                if *owner != record.isin {
                    return Err(SymbologyError::ConflictingListing {
                        symbol: symbol.clone(),
                        owner: *owner,
                    });
                }
            }
        }
        if let Some(old) = self.by_isin.get(&record.isin) {
            if *old == record {
                return Ok(());
            }
            for symbol in old.listings.difference(&record.listings) {
                self.by_symbol.remove(symbol);
            }
        }
        for symbol in &record.listings {
            self.by_symbol.insert(symbol.clone(), record.isin);
        }
        self.by_isin.insert(record.isin, record);
        Ok(())
    }

    pub fn unregister(&mut self, isin: &Isin) -> Result<InstrumentRecord, SymbologyError> {
        let record = self.by_isin.remove(isin).ok_or(SymbologyError::UnknownIsin(*isin))?;
        for symbol in &record.listings {
            self.by_symbol.remove(symbol);
        }
        Ok(record)
    }

    pub fn resolve(&self, symbol: &SymbolRef) -> Result<Isin, SymbologyError> {
        self.by_symbol
            .get(symbol)
            .copied()
            .ok_or_else(|| SymbologyError::UnknownSymbol(symbol.clone()))
    }

    pub fn listings_of(&self, isin: &Isin) -> BTreeSet<SymbolRef> {
        self.by_isin
            .get(isin)
            .map(|r| r.listings.clone())
            .unwrap_or_default()
    }

    pub fn record(&self, isin: &Isin) -> Option<&InstrumentRecord> {
        self.by_isin.get(isin)
    }

    pub fn records(&self) -> impl Iterator<Item = &InstrumentRecord> {
        self.by_isin.values()
    }

    /// Looks up an instrument by a vendor alias such as a RIC.
    pub fn resolve_alias(&self, vendor: &str, alias: &str) -> Option<Isin> {
        self.by_isin
            .values()
            .find(|r| r.vendor_aliases.get(vendor).is_some_and(|a| a == alias))
            .map(|r| r.isin)
    }

    /// Recomputes the symbol index from the records and reports every difference.
    pub fn audit(&self) -> Vec<Discrepancy> {
        let mut expected: HashMap<&SymbolRef, Isin> = HashMap::new();
        for record in self.by_isin.values() {
            for symbol in &record.listings {
                expected.insert(symbol, record.isin);
            }
        }
        let mut out = Vec::new();
        for (symbol, isin) in &expected {
            match self.by_symbol.get(*symbol) {
                None => out.push(Discrepancy::MissingIndex {
                    symbol: (*symbol).clone(),
                    isin: *isin,
                }),
                Some(indexed) if indexed != isin => out.push(Discrepancy::WrongIndex {
                    symbol: (*symbol).clone(),
                    indexed: *indexed,
                    actual: *isin,
                }),
                Some(_) => {}
            }
        }
        for (symbol, indexed) in &self.by_symbol {
            if !expected.contains_key(symbol) {
                out.push(Discrepancy::StaleIndex {
                    symbol: symbol.clone(),
                    indexed: *indexed,
                });
            }
        }
        out
    }

    /// Bulk-loads reference data. Valid lines are registered; rejected
    /// lines are reported with their 1-based line number.
    pub fn load<R: BufRead>(&mut self, reader: R) -> std::io::Result<LoadReport> {
        let mut report = LoadReport::default();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            match parse_reference_line(trimmed).and_then(|rec| self.register(rec)) {
                Ok(()) => report.loaded += 1,
                Err(e) => report.rejected.push((idx + 1, e)),
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub loaded: usize,
    pub rejected: Vec<(usize, SymbologyError)>,
}

pub fn parse_reference_line(line: &str) -> Result<InstrumentRecord, SymbologyError> {
    let malformed = |m: &str| SymbologyError::Malformed(format!("{m}: {line:?}"));
    let fields: Vec<&str> = line.split('|').collect();
    if !(3..=4).contains(&fields.len()) {
        return Err(malformed("expected 3 or 4 '|'-separated fields"));
    }
    let isin = Isin::parse(fields[0].trim()).map_err(|_| SymbologyError::InvalidIsin(fields[0].trim().to_string()))?;
    let display_name = fields[1].trim();
    let mut listings = BTreeSet::new();
    for entry in fields[2].split(',').map(str::trim).filter(|e| !e.is_empty()) {
        let (mic, sym) = entry.split_once(':').ok_or_else(|| malformed("listing must be MIC:SYMBOL"))?;
        let mic = Mic::new(mic).map_err(|e| malformed(&e.to_string()))?;
        let symbol = SymbolRef::new(sym, mic).map_err(|e| malformed(&e.to_string()))?;
        listings.insert(symbol);
    }
    let mut record = InstrumentRecord {
        isin,
        listings,
        vendor_aliases: BTreeMap::new(),
        display_name: display_name.to_string(),
    };
    if let Some(aliases) = fields.get(3) {
        for entry in aliases.split(',').map(str::trim).filter(|e| !e.is_empty()) {
            let (vendor, alias) = entry.split_once('=').ok_or_else(|| malformed("alias must be vendor=alias"))?;
            if record.vendor_aliases.insert(vendor.to_string(), alias.to_string()).is_some() {
                return Err(malformed("duplicate vendor alias"));
            }
        }
    }
    if record.listings.is_empty() {
        return Err(SymbologyError::NoListings(isin));
    }
    Ok(record)
}

pub fn format_reference_line(record: &InstrumentRecord) -> String {
    let listings: Vec<String> = record
        .listings
        .iter()
        .map(|s| format!("{}:{}", s.mic(), s.local_symbol()))
        .collect();
    let aliases: Vec<String> = record
        .vendor_aliases
        .iter()
        .map(|(v, a)| format!("{v}={a}"))
        .collect();
    format!(
        "{}|{}|{}|{}",
        record.isin,
        record.display_name,
        listings.join(","),
        aliases.join(",")
    )
}
