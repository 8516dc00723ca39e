//! Point-source catalogue tables: comma-separated text with a named-column
//! header (`ra,dec,mag,flag`), `#` comment lines, and per-survey quality
//! filtering on the flag column.

use std::fmt;

/// Which archive's star/probable-star convention applies to the flag column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Survey {
    /// mergedClass: -1 (star) or -2 (probable star) kept.
    Ukidss,
    /// read-flag: values 1 through 6 kept.
    TwoMass,
}

impl Survey {
    pub fn accepts(self, flag: i64) -> bool {
        match self {
            Survey::Ukidss => flag == -1 || flag == -2,
            Survey::TwoMass => (1..=6).contains(&flag),
        }
    }

    /// A flag value that passes this survey's filter; used when
    /// synthesizing catalogues.
    pub fn representative_flag(self) -> i64 {
        match self {
            Survey::Ukidss => -1,
            Survey::TwoMass => 1,
        }
    }

    pub fn parse(name: &str) -> Option<Survey> {
        match name.to_ascii_lowercase().as_str() {
            "ukidss" => Some(Survey::Ukidss),
            "2mass" | "twomass" => Some(Survey::TwoMass),
            _ => None,
        }
    }
}

impl fmt::Display for Survey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Survey::Ukidss => write!(f, "ukidss"),
            Survey::TwoMass => write!(f, "2mass"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub ra_deg: f64,
    pub dec_deg: f64,
    pub mag: f64,
    pub class_flag: i64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Catalogue {
    pub sources: Vec<Source>,
}

/// A row that failed to parse; the row is dropped, not fatal.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedRow {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogueParse {
    pub catalogue: Catalogue,
    pub skipped: Vec<SkippedRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CatalogueError {
    MissingHeader,
    MissingColumn(&'static str),
}

impl fmt::Display for CatalogueError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CatalogueError::MissingHeader => write!(f, "catalogue has no header row"),
            CatalogueError::MissingColumn(c) => write!(f, "catalogue header lacks column '{c}'"),
        }
    }
}

impl std::error::Error for CatalogueError {}

fn parse_row(fields: &[&str], idx: [usize; 4]) -> Result<Source, String> {
    let need = idx.iter().max().unwrap() + 1;
    if fields.len() < need {
        return Err(format!("expected at least {need} fields, got {}", fields.len()));
    }
    let ra_deg: f64 = fields[idx[0]]
        .trim()
        .parse()
        .map_err(|_| format!("bad ra '{}'", fields[idx[0]].trim()))?;
    let dec_deg: f64 = fields[idx[1]]
        .trim()
        .parse()
        .map_err(|_| format!("bad dec '{}'", fields[idx[1]].trim()))?;
    let mag: f64 = fields[idx[2]]
        .trim()
        .parse()
        .map_err(|_| format!("bad mag '{}'", fields[idx[2]].trim()))?;
    let class_flag: i64 = fields[idx[3]]
        .trim()
        .parse()
        .map_err(|_| format!("bad flag '{}'", fields[idx[3]].trim()))?;
    if !(0.0..360.0).contains(&ra_deg) {
        return Err(format!("ra {ra_deg} outside [0, 360)"));
    }
    if !(-90.0..=90.0).contains(&dec_deg) {
        return Err(format!("dec {dec_deg} outside [-90, 90]"));
    }
    if !mag.is_finite() {
        return Err(format!("mag {mag} not finite"));
    }
    Ok(Source {
        ra_deg,
        dec_deg,
        mag,
        class_flag,
    })
}

/// Parses a catalogue, keeping only rows whose flag passes the survey
/// filter. Unparsable rows are skipped and reported with their 1-based
/// line number; a missing required column is fatal.
pub fn parse_catalogue(text: &str, survey: Survey) -> Result<CatalogueParse, CatalogueError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));

    let (_, header) = lines.next().ok_or(CatalogueError::MissingHeader)?;
    let columns: Vec<String> = header
        .split(',')
        .map(|c| c.trim().to_ascii_lowercase())
        .collect();
    let col = |name: &'static str| -> Result<usize, CatalogueError> {
        columns
            .iter()
            .position(|c| c == name)
            .ok_or(CatalogueError::MissingColumn(name))
    };
    let idx = [col("ra")?, col("dec")?, col("mag")?, col("flag")?];

    let mut sources = Vec::new();
    let mut skipped = Vec::new();
    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        match parse_row(&fields, idx) {
            Ok(src) => {
                if survey.accepts(src.class_flag) {
                    sources.push(src);
                }
            }
            Err(reason) => skipped.push(SkippedRow {
                line: line_no + 1,
                reason,
            }),
        }
    }
    Ok(CatalogueParse {
        catalogue: Catalogue { sources },
        skipped,
    })
}

/// Serializes a catalogue in the same format [`parse_catalogue`] reads.
/// f64 Display round-trips exactly, so write-then-parse is lossless.
pub fn write_catalogue(cat: &Catalogue) -> String {
    let mut out = String::from("ra,dec,mag,flag\n");
    for s in &cat.sources {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.ra_deg, s.dec_deg, s.mag, s.class_flag
        ));
    }
    out
}
