//! Input tables, missing-value rules and categorical encodings.
//!
//! Missing values arrive as the literal `-`. Categorical fields turn it into
//! their own category ([`MISSING`]); numeric fields turn it into `0`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, HORIZON_DAYS};

/// Internal name of the synthetic missing category.
pub const MISSING: &str = "__MISSING__";
/// Missing-value marker in CSV files.
pub const MISSING_CSV: &str = "-";

/// Interned categorical token.
pub type Token = Arc<str>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Geo {
    pub x: f64,
    pub y: f64,
}

impl Geo {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Euclidean distance on raw coordinates.
    pub fn dist(&self, other: &Geo) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub user_id: u64,
    pub age_cat: Token,
    pub loc_cat: Token,
    pub geo: Geo,
    pub cc_months: [u8; 6],
    pub wealth_months: [u8; 6],
    pub task2_label: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivityEvent {
    pub user_id: u64,
    /// 1-based day within the observation window.
    pub day: u32,
    pub time_slot: Token,
    pub channel: Token,
    pub card: Token,
    pub amt_cat: Token,
    pub loc_cat: Token,
    pub mc_cat: Token,
    pub geo: Geo,
    /// Set when either coordinate was missing and zero-filled.
    pub geo_missing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchInfo {
    pub branch_id: u32,
    pub geo: Geo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisitTarget {
    pub user_id: u64,
    pub branch_id: u32,
    pub visits: u32,
}

/// Categorical columns, in manifest order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatColumn {
    AgeCat,
    UserLocCat,
    TimeSlot,
    Channel,
    Card,
    AmtCat,
    LocCat,
    McCat,
}

pub const USER_CAT_COLUMNS: [CatColumn; 2] = [CatColumn::AgeCat, CatColumn::UserLocCat];
pub const ACTIVITY_CAT_COLUMNS: [CatColumn; 6] = [
    CatColumn::TimeSlot,
    CatColumn::Channel,
    CatColumn::Card,
    CatColumn::AmtCat,
    CatColumn::LocCat,
    CatColumn::McCat,
];

pub const AGE_DOMAIN: &[&str] = &["a", "b", "c"];
pub const TIME_SLOT_DOMAIN: &[&str] = &["a", "b", "c", "d", "e", "f"];
pub const CHANNEL_DOMAIN: &[&str] = &["pos", "web"];
pub const CARD_DOMAIN: &[&str] = &["credit", "debit"];
pub const AMT_DOMAIN: &[&str] = &["a", "b", "c"];
pub const MC_DOMAIN: &[&str] = &["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];

impl CatColumn {
    pub fn name(self) -> &'static str {
        match self {
            CatColumn::AgeCat => "age_cat",
            CatColumn::UserLocCat => "user_loc_cat",
            CatColumn::TimeSlot => "time_slot",
            CatColumn::Channel => "channel",
            CatColumn::Card => "card",
            CatColumn::AmtCat => "amt_cat",
            CatColumn::LocCat => "loc_cat",
            CatColumn::McCat => "mc_cat",
        }
    }

    /// Closed token domain, `None` for open location categories.
    pub fn domain(self) -> Option<&'static [&'static str]> {
        match self {
            CatColumn::AgeCat => Some(AGE_DOMAIN),
            CatColumn::TimeSlot => Some(TIME_SLOT_DOMAIN),
            CatColumn::Channel => Some(CHANNEL_DOMAIN),
            CatColumn::Card => Some(CARD_DOMAIN),
            CatColumn::AmtCat => Some(AMT_DOMAIN),
            CatColumn::McCat => Some(MC_DOMAIN),
            CatColumn::UserLocCat | CatColumn::LocCat => None,
        }
    }

    pub fn user_value(self, u: &UserProfile) -> &Token {
        match self {
            CatColumn::AgeCat => &u.age_cat,
            CatColumn::UserLocCat => &u.loc_cat,
            _ => panic!("{} is not a user column", self.name()),
        }
    }

    pub fn event_value(self, e: &ActivityEvent) -> &Token {
        match self {
            CatColumn::TimeSlot => &e.time_slot,
            CatColumn::Channel => &e.channel,
            CatColumn::Card => &e.card,
            CatColumn::AmtCat => &e.amt_cat,
            CatColumn::LocCat => &e.loc_cat,
            CatColumn::McCat => &e.mc_cat,
            _ => panic!("{} is not an activity column", self.name()),
        }
    }
}

pub fn is_missing(t: &str) -> bool {
    t == MISSING
}

/// Ordinal code of an amount category: a,b,c -> 1,2,3; missing -> 0.
pub fn amt_ordinal(t: &str) -> u8 {
    ordinal_in(AMT_DOMAIN, t)
}

/// Ordinal code of a marketing category: a..j -> 1..10; missing -> 0.
pub fn mc_ordinal(t: &str) -> u8 {
    ordinal_in(MC_DOMAIN, t)
}

fn ordinal_in(domain: &[&str], t: &str) -> u8 {
    domain
        .iter()
        .position(|d| *d == t)
        .map_or(0, |p| (p + 1) as u8)
}

/// Converts a calendar date to its 1-based day index inside the window.
pub fn day_index(date: NaiveDate) -> Option<u32> {
    let start = window_start();
    let d = (date - start).num_days() + 1;
    (1..=HORIZON_DAYS as i64).contains(&d).then_some(d as u32)
}

pub fn day_to_date(day: u32) -> NaiveDate {
    window_start() + chrono::Days::new(u64::from(day.saturating_sub(1)))
}

fn window_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2014, 1, 1).expect("valid date")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrityReport {
    /// Activities whose user id is not in the users table; these are dropped.
    pub dropped_unknown_user: usize,
    /// Activity rows with a zero-filled coordinate.
    pub missing_geo_rows: usize,
    /// Total number of `-` fields replaced during parsing.
    pub missing_values: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    /// Sorted by `user_id`.
    pub users: Vec<UserProfile>,
    pub activities: Vec<ActivityEvent>,
    pub branches: Vec<BranchInfo>,
    pub visits: Option<Vec<VisitTarget>>,
    pub report: IntegrityReport,
}

#[derive(Debug, Clone)]
pub struct DataPaths {
    pub users: PathBuf,
    pub activities: PathBuf,
    pub branches: PathBuf,
    pub visits: Option<PathBuf>,
}

impl DataPaths {
    /// Standard file names inside `dir`; `visits.csv` is optional.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let visits = dir.join("visits.csv");
        Self {
            users: dir.join("users.csv"),
            activities: dir.join("activities.csv"),
            branches: dir.join("branches.csv"),
            visits: visits.exists().then_some(visits),
        }
    }
}

const USER_HEADER: [&str; 17] = [
    "user_id", "age_cat", "loc_cat", "geo_x", "geo_y", "c1", "c2", "c3", "c4", "c5", "c6", "w1",
    "w2", "w3", "w4", "w5", "w6",
];
const ACTIVITY_HEADER: [&str; 10] = [
    "user_id",
    "date",
    "time_slot",
    "channel",
    "card",
    "amt_cat",
    "loc_cat",
    "mc_cat",
    "geo_x",
    "geo_y",
];
const BRANCH_HEADER: [&str; 3] = ["branch_id", "geo_x", "geo_y"];
const VISIT_HEADER: [&str; 3] = ["user_id", "branch_id", "visits"];

struct Parser<'a> {
    file: &'a str,
    header: Vec<String>,
    interner: HashMap<String, Token>,
    missing: usize,
}

impl<'a> Parser<'a> {
    fn new(file: &'a str, header: &csv::StringRecord) -> Self {
        Self {
            file,
            header: header.iter().map(str::to_owned).collect(),
            interner: HashMap::new(),
            missing: 0,
        }
    }

    fn err(&self, line: u64, col: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.to_owned(),
            line,
            column: self
                .header
                .get(col)
                .cloned()
                .unwrap_or_else(|| format!("#{col}")),
            message: message.into(),
        }
    }

    fn intern(&mut self, s: &str) -> Token {
        if let Some(t) = self.interner.get(s) {
            return t.clone();
        }
        let t: Token = Arc::from(s);
        self.interner.insert(s.to_owned(), t.clone());
        t
    }

    fn id(&self, rec: &csv::StringRecord, line: u64, col: usize) -> Result<u64> {
        rec[col]
            .trim()
            .parse::<u64>()
            .map_err(|_| self.err(line, col, format!("invalid id `{}`", &rec[col])))
    }

    fn category(
        &mut self,
        rec: &csv::StringRecord,
        line: u64,
        col: usize,
        domain: Option<&[&str]>,
    ) -> Result<Token> {
        let raw = rec[col].trim();
        if raw == MISSING_CSV {
            self.missing += 1;
            return Ok(self.intern(MISSING));
        }
        if raw.is_empty() || raw == MISSING {
            return Err(self.err(line, col, format!("invalid category token `{raw}`")));
        }
        if let Some(d) = domain {
            if !d.contains(&raw) {
                return Err(self.err(line, col, format!("unknown category token `{raw}`")));
            }
        }
        Ok(self.intern(raw))
    }

    /// Returns the value and whether it was missing.
    fn number(&mut self, rec: &csv::StringRecord, line: u64, col: usize) -> Result<(f64, bool)> {
        let raw = rec[col].trim();
        if raw == MISSING_CSV {
            self.missing += 1;
            return Ok((0.0, true));
        }
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok((v, false)),
            _ => Err(self.err(line, col, format!("invalid number `{raw}`"))),
        }
    }

    fn flag(&mut self, rec: &csv::StringRecord, line: u64, col: usize) -> Result<u8> {
        let raw = rec[col].trim();
        match raw {
            MISSING_CSV => {
                self.missing += 1;
                Ok(0)
            }
            "0" => Ok(0),
            "1" => Ok(1),
            _ => Err(self.err(line, col, format!("flag must be 0 or 1, got `{raw}`"))),
        }
    }
}

fn open_csv<R: Read>(rdr: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(rdr)
}

fn check_header(
    file: &str,
    header: &csv::StringRecord,
    expected: &[&str],
    optional_tail: Option<&str>,
) -> Result<()> {
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    let ok = got == expected
        || optional_tail.is_some_and(|t| {
            got.len() == expected.len() + 1 && got[..expected.len()] == *expected && got[expected.len()] == t
        });
    if ok {
        Ok(())
    } else {
        Err(Error::Parse {
            file: file.to_owned(),
            line: 1,
            column: "<header>".into(),
            message: format!("expected header {:?}, got {:?}", expected, got),
        })
    }
}

fn check_width(p: &Parser<'_>, rec: &csv::StringRecord, line: u64, want: usize) -> Result<()> {
    if rec.len() != want {
        return Err(p.err(
            line,
            rec.len().min(want),
            format!("expected {want} columns, found {}", rec.len()),
        ));
    }
    Ok(())
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

pub fn read_users<R: Read>(rdr: R, file: &str) -> Result<(Vec<UserProfile>, usize)> {
    let mut rdr = open_csv(rdr);
    let header = rdr.headers()?.clone();
    check_header(file, &header, &USER_HEADER, Some("target"))?;
    let width = header.len();
    let has_target = width == USER_HEADER.len() + 1;
    let mut p = Parser::new(file, &header);
    let mut users = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        check_width(&p, &rec, line, width)?;
        let user_id = p.id(&rec, line, 0)?;
        if !seen.insert(user_id) {
            return Err(Error::Integrity(format!(
                "{file}:{line}: duplicate user_id {user_id}"
            )));
        }
        let age_cat = p.category(&rec, line, 1, Some(AGE_DOMAIN))?;
        let loc_cat = p.category(&rec, line, 2, None)?;
        let (gx, _) = p.number(&rec, line, 3)?;
        let (gy, _) = p.number(&rec, line, 4)?;
        let mut cc_months = [0u8; 6];
        let mut wealth_months = [0u8; 6];
        for m in 0..6 {
            cc_months[m] = p.flag(&rec, line, 5 + m)?;
            wealth_months[m] = p.flag(&rec, line, 11 + m)?;
        }
        let task2_label = if has_target {
            match rec[17].trim() {
                MISSING_CSV | "" => None,
                "0" => Some(0),
                "1" => Some(1),
                other => return Err(p.err(line, 17, format!("target must be 0, 1 or -, got `{other}`"))),
            }
        } else {
            None
        };
        users.push(UserProfile {
            user_id,
            age_cat,
            loc_cat,
            geo: Geo::new(gx, gy),
            cc_months,
            wealth_months,
            task2_label,
        });
    }
    users.sort_by_key(|u| u.user_id);
    Ok((users, p.missing))
}

pub fn read_activities<R: Read>(rdr: R, file: &str) -> Result<(Vec<ActivityEvent>, usize)> {
    let mut rdr = open_csv(rdr);
    let header = rdr.headers()?.clone();
    check_header(file, &header, &ACTIVITY_HEADER, None)?;
    let mut p = Parser::new(file, &header);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        check_width(&p, &rec, line, ACTIVITY_HEADER.len())?;
        let user_id = p.id(&rec, line, 0)?;
        let raw_date = rec[1].trim();
        let date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d")
            .map_err(|_| p.err(line, 1, format!("invalid date `{raw_date}`")))?;
        let day = day_index(date).ok_or_else(|| {
            p.err(
                line,
                1,
                format!("date {raw_date} outside the 1..{HORIZON_DAYS} day window"),
            )
        })?;
        let time_slot = p.category(&rec, line, 2, Some(TIME_SLOT_DOMAIN))?;
        let channel = p.category(&rec, line, 3, Some(CHANNEL_DOMAIN))?;
        let card = p.category(&rec, line, 4, Some(CARD_DOMAIN))?;
        let amt_cat = p.category(&rec, line, 5, Some(AMT_DOMAIN))?;
        let loc_cat = p.category(&rec, line, 6, None)?;
        let mc_cat = p.category(&rec, line, 7, Some(MC_DOMAIN))?;
        let (gx, mx) = p.number(&rec, line, 8)?;
        let (gy, my) = p.number(&rec, line, 9)?;
        out.push(ActivityEvent {
            user_id,
            day,
            time_slot,
            channel,
            card,
            amt_cat,
            loc_cat,
            mc_cat,
            geo: Geo::new(gx, gy),
            geo_missing: mx || my,
        });
    }
    Ok((out, p.missing))
}

pub fn read_branches<R: Read>(rdr: R, file: &str) -> Result<(Vec<BranchInfo>, usize)> {
    let mut rdr = open_csv(rdr);
    let header = rdr.headers()?.clone();
    check_header(file, &header, &BRANCH_HEADER, None)?;
    let mut p = Parser::new(file, &header);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        check_width(&p, &rec, line, BRANCH_HEADER.len())?;
        let id = p.id(&rec, line, 0)?;
        let branch_id = u32::try_from(id).map_err(|_| p.err(line, 0, "branch id too large"))?;
        if !seen.insert(branch_id) {
            return Err(Error::Integrity(format!(
                "{file}:{line}: duplicate branch_id {branch_id}"
            )));
        }
        let (gx, _) = p.number(&rec, line, 1)?;
        let (gy, _) = p.number(&rec, line, 2)?;
        out.push(BranchInfo {
            branch_id,
            geo: Geo::new(gx, gy),
        });
    }
    out.sort_by_key(|b| b.branch_id);
    Ok((out, p.missing))
}

pub fn read_visits<R: Read>(rdr: R, file: &str) -> Result<(Vec<VisitTarget>, usize)> {
    let mut rdr = open_csv(rdr);
    let header = rdr.headers()?.clone();
    check_header(file, &header, &VISIT_HEADER, None)?;
    let mut p = Parser::new(file, &header);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        check_width(&p, &rec, line, VISIT_HEADER.len())?;
        let user_id = p.id(&rec, line, 0)?;
        let branch_id = u32::try_from(p.id(&rec, line, 1)?)
            .map_err(|_| p.err(line, 1, "branch id too large"))?;
        if !seen.insert((user_id, branch_id)) {
            return Err(Error::Integrity(format!(
                "{file}:{line}: duplicate (user_id, branch_id) = ({user_id}, {branch_id})"
            )));
        }
        let (v, _) = p.number(&rec, line, 2)?;
        if v < 0.0 || v.fract() != 0.0 || v > f64::from(u32::MAX) {
            return Err(p.err(line, 2, format!("visits must be a non-negative integer, got {v}")));
        }
        out.push(VisitTarget {
            user_id,
            branch_id,
            visits: v as u32,
        });
    }
    Ok((out, p.missing))
}

fn open_file(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Loads and validates all tables. Activities of unknown users are dropped
/// and counted in the integrity report.
pub fn load_dataset(paths: &DataPaths) -> Result<Dataset> {
    let (users_res, rest) = rayon::join(
        || read_users(open_file(&paths.users)?, &file_label(&paths.users)),
        || {
            let acts = read_activities(
                open_file(&paths.activities)?,
                &file_label(&paths.activities),
            )?;
            let br = read_branches(open_file(&paths.branches)?, &file_label(&paths.branches))?;
            let visits = match &paths.visits {
                Some(v) => Some(read_visits(open_file(v)?, &file_label(v))?),
                None => None,
            };
            Ok::<_, Error>((acts, br, visits))
        },
    );
    let (users, mu) = users_res?;
    let ((activities, ma), (branches, mb), visits) = rest?;
    Dataset::assemble(users, activities, branches, visits, mu + ma + mb)
}

impl Dataset {
    fn assemble(
        users: Vec<UserProfile>,
        activities: Vec<ActivityEvent>,
        branches: Vec<BranchInfo>,
        visits: Option<(Vec<VisitTarget>, usize)>,
        missing: usize,
    ) -> Result<Self> {
        let known: HashSet<u64> = users.iter().map(|u| u.user_id).collect();
        let before = activities.len();
        let activities: Vec<ActivityEvent> = activities
            .into_iter()
            .filter(|a| known.contains(&a.user_id))
            .collect();
        let dropped = before - activities.len();
        if dropped > 0 {
            log::warn!("dropped {dropped} activities referencing unknown users");
        }
        let missing_geo_rows = activities.iter().filter(|a| a.geo_missing).count();
        if missing_geo_rows > 0 {
            log::warn!("{missing_geo_rows} activity rows have a missing coordinate (zero-filled)");
        }
        let (visits, mv) = match visits {
            Some((v, m)) => (Some(v), m),
            None => (None, 0),
        };
        Ok(Dataset {
            users,
            activities,
            branches,
            visits,
            report: IntegrityReport {
                dropped_unknown_user: dropped,
                missing_geo_rows,
                missing_values: missing + mv,
            },
        })
    }

    /// Builds a dataset from in-memory tables with the same validation as the
    /// CSV path (sorting, duplicate ids, unknown-user filtering).
    pub fn from_parts(
        mut users: Vec<UserProfile>,
        activities: Vec<ActivityEvent>,
        mut branches: Vec<BranchInfo>,
        visits: Option<Vec<VisitTarget>>,
    ) -> Result<Self> {
        users.sort_by_key(|u| u.user_id);
        if let Some(w) = users.windows(2).find(|w| w[0].user_id == w[1].user_id) {
            return Err(Error::Integrity(format!("duplicate user_id {}", w[0].user_id)));
        }
        branches.sort_by_key(|b| b.branch_id);
        if let Some(w) = branches.windows(2).find(|w| w[0].branch_id == w[1].branch_id) {
            return Err(Error::Integrity(format!(
                "duplicate branch_id {}",
                w[0].branch_id
            )));
        }
        if let Some(a) = activities
            .iter()
            .find(|a| !(1..=HORIZON_DAYS).contains(&a.day))
        {
            return Err(Error::invalid(format!(
                "activity of user {} has day {} outside 1..{HORIZON_DAYS}",
                a.user_id, a.day
            )));
        }
        Self::assemble(users, activities, branches, visits.map(|v| (v, 0)), 0)
    }

    pub fn user_index(&self) -> HashMap<u64, usize> {
        self.users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.user_id, i))
            .collect()
    }

    /// Activities grouped per user (aligned with `users`), each group ordered
    /// by day with input order kept for same-day events.
    pub fn events_by_user(&self) -> Vec<Vec<&ActivityEvent>> {
        let idx = self.user_index();
        let mut groups: Vec<Vec<&ActivityEvent>> = vec![Vec::new(); self.users.len()];
        for a in &self.activities {
            if let Some(&i) = idx.get(&a.user_id) {
                groups[i].push(a);
            }
        }
        for g in &mut groups {
            g.sort_by_key(|a| a.day);
        }
        groups
    }

    /// Restriction to the given users (order of `self.users` is kept).
    pub fn subset(&self, user_ids: &[u64]) -> Dataset {
        let keep: HashSet<u64> = user_ids.iter().copied().collect();
        let users: Vec<UserProfile> = self
            .users
            .iter()
            .filter(|u| keep.contains(&u.user_id))
            .cloned()
            .collect();
        let activities = self
            .activities
            .iter()
            .filter(|a| keep.contains(&a.user_id))
            .cloned()
            .collect();
        let visits = self.visits.as_ref().map(|v| {
            v.iter()
                .filter(|t| keep.contains(&t.user_id))
                .copied()
                .collect()
        });
        Dataset {
            users,
            activities,
            branches: self.branches.clone(),
            visits,
            report: IntegrityReport::default(),
        }
    }

    /// Writes the four tables in their CSV schemas to `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> Result<()>| -> Result<()> {
            let mut buf = Vec::new();
            f(&mut buf)?;
            let p = dir.join(name);
            std::fs::write(&p, buf).map_err(|e| Error::io(&p, e))
        };
        write("users.csv", &|b| write_users(b, &self.users))?;
        write("activities.csv", &|b| write_activities(b, &self.activities))?;
        write("branches.csv", &|b| write_branches(b, &self.branches))?;
        if let Some(v) = &self.visits {
            write("visits.csv", &|b| write_visits(b, v))?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical CSV serialization.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        write_users(&mut buf, &self.users).expect("in-memory write");
        write_activities(&mut buf, &self.activities).expect("in-memory write");
        write_branches(&mut buf, &self.branches).expect("in-memory write");
        if let Some(v) = &self.visits {
            write_visits(&mut buf, v).expect("in-memory write");
        }
        h.update(&buf);
        hex::encode(h.finalize())
    }
}

fn tok_out(t: &str) -> &str {
    if is_missing(t) {
        MISSING_CSV
    } else {
        t
    }
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

fn flush<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::io("<csv output>", e))
}

pub fn write_users<W: Write>(w: W, users: &[UserProfile]) -> Result<()> {
    let labelled = users.iter().any(|u| u.task2_label.is_some());
    let mut w = csv_writer(w);
    let mut header: Vec<&str> = USER_HEADER.to_vec();
    if labelled {
        header.push("target");
    }
    w.write_record(&header)?;
    for u in users {
        let mut rec = vec![
            u.user_id.to_string(),
            tok_out(&u.age_cat).to_owned(),
            tok_out(&u.loc_cat).to_owned(),
            u.geo.x.to_string(),
            u.geo.y.to_string(),
        ];
        rec.extend(u.cc_months.iter().map(u8::to_string));
        rec.extend(u.wealth_months.iter().map(u8::to_string));
        if labelled {
            rec.push(u.task2_label.map_or_else(|| MISSING_CSV.to_owned(), |l| l.to_string()));
        }
        w.write_record(&rec)?;
    }
    flush(w)
}

pub fn write_activities<W: Write>(w: W, acts: &[ActivityEvent]) -> Result<()> {
    let mut w = csv_writer(w);
    w.write_record(ACTIVITY_HEADER)?;
    for a in acts {
        let geo = |v: f64| {
            if a.geo_missing && v == 0.0 {
                MISSING_CSV.to_owned()
            } else {
                v.to_string()
            }
        };
        w.write_record([
            a.user_id.to_string(),
            day_to_date(a.day).format("%Y-%m-%d").to_string(),
            tok_out(&a.time_slot).to_owned(),
            tok_out(&a.channel).to_owned(),
            tok_out(&a.card).to_owned(),
            tok_out(&a.amt_cat).to_owned(),
            tok_out(&a.loc_cat).to_owned(),
            tok_out(&a.mc_cat).to_owned(),
            geo(a.geo.x),
            geo(a.geo.y),
        ])?;
    }
    flush(w)
}

pub fn write_branches<W: Write>(w: W, branches: &[BranchInfo]) -> Result<()> {
    let mut w = csv_writer(w);
    w.write_record(BRANCH_HEADER)?;
    for b in branches {
        w.write_record([
            b.branch_id.to_string(),
            b.geo.x.to_string(),
            b.geo.y.to_string(),
        ])?;
    }
    flush(w)
}

pub fn write_visits<W: Write>(w: W, visits: &[VisitTarget]) -> Result<()> {
    let mut w = csv_writer(w);
    w.write_record(VISIT_HEADER)?;
    for v in visits {
        w.write_record([
            v.user_id.to_string(),
            v.branch_id.to_string(),
            v.visits.to_string(),
        ])?;
    }
    flush(w)
}

/// Most frequent non-missing age category; ties go to the lexicographically
/// smallest token.
pub fn age_mode<'a, I>(users: I) -> Result<Token>
where
    I: IntoIterator<Item = &'a UserProfile>,
{
    let mut counts: BTreeMap<&Token, usize> = BTreeMap::new();
    for u in users {
        if !is_missing(&u.age_cat) {
            *counts.entry(&u.age_cat).or_default() += 1;
        }
    }
    // BTreeMap iterates in token order, so `>` keeps the smallest on ties.
    let mut best: Option<(&Token, usize)> = None;
    for (tok, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((tok, c));
        }
    }
    best.map(|(t, _)| t.clone())
        .ok_or_else(|| Error::invalid("every age_cat is missing; no mode defined"))
}

/// Replaces missing `age_cat` with the given category.
pub fn apply_age_mode(users: &mut [UserProfile], mode: &Token) {
    for u in users.iter_mut().filter(|u| is_missing(&u.age_cat)) {
        u.age_cat = mode.clone();
    }
}

pub fn impute_age_cat(mut users: Vec<UserProfile>) -> Result<Vec<UserProfile>> {
    let mode = age_mode(&users)?;
    apply_age_mode(&mut users, &mode);
    Ok(users)
}

/// Token-to-code tables for every categorical column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingMap {
    columns: Vec<ColumnEncoding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnEncoding {
    pub column: CatColumn,
    /// Sorted; position is the code.
    pub tokens: Vec<String>,
}

impl ColumnEncoding {
    pub fn code(&self, token: &str) -> Option<usize> {
        self.tokens
            .binary_search_by(|t| t.as_str().cmp(token))
            .ok()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn fit_encoding(ds: &Dataset) -> Result<EncodingMap> {
    fit_encoding_parts(&ds.users, &ds.activities)
}

pub fn fit_encoding_parts(users: &[UserProfile], acts: &[ActivityEvent]) -> Result<EncodingMap> {
    let mut columns = Vec::new();
    let mut build = |col: CatColumn, observed: BTreeSet<&str>| -> Result<()> {
        if observed.iter().all(|t| is_missing(t)) {
            return Err(Error::invalid(format!(
                "column `{}` has an empty category domain",
                col.name()
            )));
        }
        let mut set = observed;
        set.insert(MISSING);
        columns.push(ColumnEncoding {
            column: col,
            tokens: set.into_iter().map(str::to_owned).collect(),
        });
        Ok(())
    };
    for col in USER_CAT_COLUMNS {
        build(col, users.iter().map(|u| &*col.user_value(u).as_ref()).collect())?;
    }
    for col in ACTIVITY_CAT_COLUMNS {
        build(col, acts.iter().map(|a| &*col.event_value(a).as_ref()).collect())?;
    }
    Ok(EncodingMap { columns })
}

impl EncodingMap {
    pub fn columns(&self) -> &[ColumnEncoding] {
        &self.columns
    }

    pub fn column(&self, col: CatColumn) -> &ColumnEncoding {
        self.columns
            .iter()
            .find(|c| c.column == col)
            .expect("encoding covers every categorical column")
    }

    pub fn code(&self, col: CatColumn, token: &str) -> Result<usize> {
        self.column(col)
            .code(token)
            .ok_or_else(|| Error::UnknownCategory {
                column: col.name().to_owned(),
                token: token.to_owned(),
            })
    }

    /// Like [`EncodingMap::code`], but maps unseen tokens to the missing
    /// category. Used when applying a map fitted on other rows.
    pub fn code_or_missing(&self, col: CatColumn, token: &str) -> usize {
        let c = self.column(col);
        c.code(token)
            .or_else(|| c.code(MISSING))
            .expect("missing token always encoded")
    }

    /// Length of the encoded activity vector: indicator blocks plus 2 geo values.
    pub fn event_width(&self) -> usize {
        ACTIVITY_CAT_COLUMNS
            .iter()
            .map(|c| self.column(*c).len())
            .sum::<usize>()
            + 2
    }

    /// Column names of the encoded activity vector, in order.
    pub fn event_column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.event_width());
        for col in ACTIVITY_CAT_COLUMNS {
            for t in &self.column(col).tokens {
                names.push(format!("{}={}", col.name(), display_token(t)));
            }
        }
        names.push("geo_x".into());
        names.push("geo_y".into());
        names
    }

    fn encode_event(&self, e: &ActivityEvent, strict: bool) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.event_width()];
        let mut off = 0;
        for col in ACTIVITY_CAT_COLUMNS {
            let tok = col.event_value(e);
            let code = if strict {
                self.code(col, tok)?
            } else {
                self.code_or_missing(col, tok)
            };
            v[off + code] = 1.0;
            off += self.column(col).len();
        }
        v[off] = e.geo.x;
        v[off + 1] = e.geo.y;
        Ok(v)
    }

    /// Encoded activity vector that maps unseen tokens to the missing code.
    pub fn encode_event_lenient(&self, e: &ActivityEvent) -> Vec<f64> {
        self.encode_event(e, false).expect("lenient encoding cannot fail")
    }
}

pub fn display_token(t: &str) -> &str {
    if is_missing(t) {
        "MISSING"
    } else {
        t
    }
}

/// One indicator block per activity categorical column followed by the two
/// coordinates.
pub fn one_hot(event: &ActivityEvent, map: &EncodingMap) -> Result<Vec<f64>> {
    map.encode_event(event, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    const USERS: &str = "user_id,age_cat,loc_cat,geo_x,geo_y,c1,c2,c3,c4,c5,c6,w1,w2,w3,w4,w5,w6,target
1,a,l1,1.5,2,0,1,1,1,0,0,1,1,-,0,0,0,1
2,-,-,-,3,0,0,0,0,0,0,0,0,0,0,0,0,0
3,b,l2,0,0,1,1,1,1,1,1,1,1,1,1,1,1,-
";
    const ACTS: &str = "user_id,date,time_slot,channel,card,amt_cat,loc_cat,mc_cat,geo_x,geo_y
1,2014-01-01,a,pos,credit,a,l1,-,1,2
1,2014-06-30,-,web,debit,c,l3,j,-,4
9,2014-02-01,a,pos,credit,a,l1,a,0,0
";

    fn tok(s: &str) -> Token {
        Arc::from(s)
    }

    fn user(id: u64, age: &str) -> UserProfile {
        UserProfile {
            user_id: id,
            age_cat: tok(age),
            loc_cat: tok("l"),
            geo: Geo::default(),
            cc_months: [0; 6],
            wealth_months: [0; 6],
            task2_label: None,
        }
    }

    #[test]
    fn missing_categorical_becomes_missing_token() {
        let (acts, missing) = read_activities(ACTS.as_bytes(), "activities.csv").unwrap();
        assert_eq!(&*acts[0].mc_cat, MISSING);
        assert_eq!(&*acts[1].time_slot, MISSING);
        assert_eq!(missing, 3);
        assert!(acts[1].geo_missing);
        assert_eq!(acts[1].geo, Geo::new(0.0, 4.0));
        assert_eq!(acts[0].day, 1);
        assert_eq!(acts[1].day, 181);
    }

    #[test]
    fn missing_numeric_becomes_zero() {
        let (users, _) = read_users(USERS.as_bytes(), "users.csv").unwrap();
        assert_eq!(users[0].wealth_months, [1, 1, 0, 0, 0, 0]);
        assert_eq!(users[1].geo, Geo::new(0.0, 3.0));
        assert_eq!(&*users[1].age_cat, MISSING);
        assert_eq!(&*users[1].loc_cat, MISSING);
        assert_eq!(users[0].task2_label, Some(1));
        assert_eq!(users[2].task2_label, None);
    }

    #[test]
    fn day_200_is_rejected() {
        let src = "user_id,date,time_slot,channel,card,amt_cat,loc_cat,mc_cat,geo_x,geo_y
1,2014-07-19,a,pos,credit,a,l1,a,1,2
";
        match read_activities(src.as_bytes(), "activities.csv") {
            Err(Error::Parse { file, line, column, .. }) => {
                assert_eq!(file, "activities.csv");
                assert_eq!(line, 2);
                assert_eq!(column, "date");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert_eq!(day_index(NaiveDate::from_ymd_opt(2014, 7, 19).unwrap()), None);
    }

    #[test]
    fn malformed_rows_name_their_location() {
        let wrong_width = "user_id,branch_id,visits\n1,2\n";
        assert!(matches!(
            read_visits(wrong_width.as_bytes(), "visits.csv"),
            Err(Error::Parse { line: 2, .. })
        ));
        let bad_token = "user_id,date,time_slot,channel,card,amt_cat,loc_cat,mc_cat,geo_x,geo_y
1,2014-01-05,a,atm,credit,a,l1,a,1,2
";
        match read_activities(bad_token.as_bytes(), "a.csv") {
            Err(Error::Parse { column, .. }) => assert_eq!(column, "channel"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_user_is_integrity_error() {
        let src = "user_id,age_cat,loc_cat,geo_x,geo_y,c1,c2,c3,c4,c5,c6,w1,w2,w3,w4,w5,w6
1,a,l,0,0,0,0,0,0,0,0,0,0,0,0,0,0
1,b,l,0,0,0,0,0,0,0,0,0,0,0,0,0,0
";
        assert!(matches!(
            read_users(src.as_bytes(), "users.csv"),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn unknown_user_activities_are_dropped() {
        let (users, _) = read_users(USERS.as_bytes(), "users.csv").unwrap();
        let (acts, _) = read_activities(ACTS.as_bytes(), "activities.csv").unwrap();
        let ds = Dataset::from_parts(users, acts, vec![], None).unwrap();
        assert_eq!(ds.activities.len(), 2);
        assert_eq!(ds.report.dropped_unknown_user, 1);
        assert_eq!(ds.report.missing_geo_rows, 1);
    }

    #[test]
    fn imputation_uses_the_mode() {
        let mut users = Vec::new();
        let mut id = 0;
        for (cat, n) in [("a", 58), ("b", 104), ("c", 26), (MISSING, 6)] {
            for _ in 0..n {
                users.push(user(id, cat));
                id += 1;
            }
        }
        let out = impute_age_cat(users).unwrap();
        assert!(out[188..].iter().all(|u| &*u.age_cat == "b"));
        assert_eq!(out.iter().filter(|u| &*u.age_cat == "b").count(), 110);
    }

    #[test]
    fn imputation_tie_breaks_lexicographically() {
        let mut users: Vec<_> = (0..5).map(|i| user(i, "b")).collect();
        users.extend((5..10).map(|i| user(i, "a")));
        users.push(user(10, MISSING));
        let out = impute_age_cat(users).unwrap();
        assert_eq!(&*out[10].age_cat, "a");
    }

    #[test]
    fn imputation_without_missing_is_identity_and_idempotent() {
        let users: Vec<_> = (0..4).map(|i| user(i, ["a", "c"][i as usize % 2])).collect();
        let once = impute_age_cat(users.clone()).unwrap();
        assert_eq!(once, users);
        let mut with_missing = users.clone();
        with_missing.push(user(9, MISSING));
        let a = impute_age_cat(with_missing).unwrap();
        let b = impute_age_cat(a.clone()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_missing_age_is_an_error() {
        assert!(impute_age_cat(vec![user(1, MISSING)]).is_err());
    }

    #[test]
    fn encoding_is_lexicographic_and_includes_missing() {
        let mk = |slot: &str| ActivityEvent {
            user_id: 1,
            day: 1,
            time_slot: tok(slot),
            channel: tok("pos"),
            card: tok("credit"),
            amt_cat: tok("a"),
            loc_cat: tok("x"),
            mc_cat: tok("a"),
            geo: Geo::new(0.5, -1.0),
            geo_missing: false,
        };
        let acts = vec![mk("c"), mk("a"), mk("b")];
        let users = vec![user(1, "a")];
        let map = fit_encoding_parts(&users, &acts).unwrap();
        let ts = map.column(CatColumn::TimeSlot);
        assert_eq!(ts.tokens, vec![MISSING, "a", "b", "c"]);
        assert_eq!(ts.code("a"), Some(1));
        assert_eq!(ts.code("c"), Some(3));
        assert_eq!(map.code(CatColumn::TimeSlot, MISSING).unwrap(), 0);

        let again = fit_encoding_parts(&users, &[mk("b"), mk("c"), mk("a")]).unwrap();
        assert_eq!(map, again);

        let v = one_hot(&acts[0], &map).unwrap();
        assert_eq!(v.len(), map.event_width());
        assert_eq!(v.len(), 4 + 2 + 2 + 2 + 2 + 2 + 2);
        // channel block: [MISSING, pos, web]
        let ch_off = 4;
        assert_eq!(&v[ch_off..ch_off + 3], &[0.0, 1.0, 0.0]);
        assert_eq!(&v[v.len() - 2..], &[0.5, -1.0]);

        let mut odd = mk("a");
        odd.loc_cat = tok("zzz");
        assert!(matches!(
            one_hot(&odd, &map),
            Err(Error::UnknownCategory { .. })
        ));
        let lenient = map.encode_event_lenient(&odd);
        let loc_off = map.event_width() - 2 - 2 - 2;
        assert_eq!(lenient[loc_off], 1.0);
    }

    #[test]
    fn empty_domain_is_an_error() {
        assert!(fit_encoding_parts(&[user(1, "a")], &[]).is_err());
    }
}
