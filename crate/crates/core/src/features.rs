//! Per-user fixed-length feature vectors.
//!
//! Feature sets are cumulative: `FSk` holds every column of `FS1..FSk` in
//! order, so a user's `FSk` row is a prefix of its `FS(k+1)` row. `FS9` and
//! `FS10` depend on the branch being predicted; they are declared in the
//! manifest but filled in by the branch bank at training time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::KMeansModel;
use crate::data::{
    amt_ordinal, display_token, is_missing, mc_ordinal, ActivityEvent, BranchInfo, CatColumn,
    Dataset, EncodingMap, Geo, UserProfile, USER_CAT_COLUMNS,
};
use crate::matrix::Matrix;
use crate::{Error, Result, HORIZON_DAYS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureSetId {
    FS1,
    FS2,
    FS3,
    FS4,
    FS5,
    FS6,
    FS7,
    FS8,
    FS9,
    FS10,
}

impl FeatureSetId {
    pub const ALL: [FeatureSetId; 10] = [
        FeatureSetId::FS1,
        FeatureSetId::FS2,
        FeatureSetId::FS3,
        FeatureSetId::FS4,
        FeatureSetId::FS5,
        FeatureSetId::FS6,
        FeatureSetId::FS7,
        FeatureSetId::FS8,
        FeatureSetId::FS9,
        FeatureSetId::FS10,
    ];

    pub fn level(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_level(level: u8) -> Option<Self> {
        Self::ALL.get(usize::from(level).checked_sub(1)?).copied()
    }

    pub fn includes(self, other: FeatureSetId) -> bool {
        other <= self
    }

    pub fn needs_clusters(self) -> bool {
        self >= FeatureSetId::FS8
    }

    /// FS9 and FS10 only exist inside the per-branch training loop.
    pub fn is_branch_parameterized(self) -> bool {
        self >= FeatureSetId::FS9
    }
}

impl fmt::Display for FeatureSetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FS{}", self.level())
    }
}

impl FromStr for FeatureSetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let digits = t
            .strip_prefix("FS")
            .or_else(|| t.strip_prefix("fs"))
            .unwrap_or(t);
        digits
            .parse::<u8>()
            .ok()
            .and_then(Self::from_level)
            .ok_or_else(|| Error::invalid(format!("unknown feature set `{s}` (expected FS1..FS10)")))
    }
}

/// Distinct activity days of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityTimeline {
    pub user_id: u64,
    /// Sorted, with duplicates for same-day events.
    pub event_days: Vec<u32>,
    /// Sorted and deduplicated.
    pub distinct_days: Vec<u32>,
    pub horizon: u32,
}

impl ActivityTimeline {
    pub fn new(user_id: u64, days: impl IntoIterator<Item = u32>, horizon: u32) -> Result<Self> {
        let mut event_days: Vec<u32> = days.into_iter().collect();
        if let Some(d) = event_days.iter().find(|d| !(1..=horizon).contains(*d)) {
            return Err(Error::invalid(format!(
                "day {d} outside 1..{horizon} for user {user_id}"
            )));
        }
        event_days.sort_unstable();
        let mut distinct_days = event_days.clone();
        distinct_days.dedup();
        Ok(Self {
            user_id,
            event_days,
            distinct_days,
            horizon,
        })
    }

    pub fn from_events(user_id: u64, events: &[&ActivityEvent]) -> Self {
        Self::new(user_id, events.iter().map(|e| e.day), HORIZON_DAYS)
            .expect("parsed events lie inside the window")
    }

    /// Number of events.
    pub fn n(&self) -> usize {
        self.event_days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.event_days.is_empty()
    }
}

/// Element-wise mean; zeros when there are no rows.
pub fn fs1_mean_activity(vectors: &[Vec<f64>], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    if vectors.is_empty() {
        return out;
    }
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Mean weighted by `ln(1 + day)`, where `day` counts from the window start.
pub fn recency_weighted_mean(events: &[(u32, Vec<f64>)], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    if events.is_empty() {
        return out;
    }
    let mut total = 0.0;
    for (day, v) in events {
        let w = (f64::from(*day)).ln_1p();
        total += w;
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    out
}

pub fn min_branch_distance(point: Geo, branches: &[BranchInfo]) -> Result<f64> {
    branches
        .iter()
        .map(|b| point.dist(&b.geo))
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::invalid("no branches to measure distance against"))
}

/// Activity counters of a single user.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterSet {
    pub n_pos: u32,
    pub n_web: u32,
    pub n_credit: u32,
    pub n_debit: u32,
    pub n_distinct_amt: u32,
    /// 0 when no known amount, otherwise a,b,c -> 1,2,3.
    pub max_amt: u8,
    pub days_since_last: u32,
    pub n_distinct_locations: u32,
    pub n_distinct_time_slots: u32,
    pub n_distinct_mc: u32,
    pub n_total: u32,
    /// 1 + encoding code of the modal slot; 0 for no activity.
    pub mode_time_slot: u32,
    /// 1 + encoding code of the modal location category; 0 for no activity.
    pub mode_loc_cat: u32,
    pub months_credit_card: u8,
    pub months_wealthy: u8,
}

pub const COUNTER_NAMES: [&str; 15] = [
    "n_pos",
    "n_web",
    "n_credit",
    "n_debit",
    "n_distinct_amt",
    "max_amt",
    "days_since_last",
    "n_distinct_locations",
    "n_distinct_time_slots",
    "n_distinct_mc",
    "n_total",
    "mode_time_slot",
    "mode_loc_cat",
    "months_credit_card",
    "months_wealthy",
];

impl CounterSet {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            f64::from(self.n_pos),
            f64::from(self.n_web),
            f64::from(self.n_credit),
            f64::from(self.n_debit),
            f64::from(self.n_distinct_amt),
            f64::from(self.max_amt),
            f64::from(self.days_since_last),
            f64::from(self.n_distinct_locations),
            f64::from(self.n_distinct_time_slots),
            f64::from(self.n_distinct_mc),
            f64::from(self.n_total),
            f64::from(self.mode_time_slot),
            f64::from(self.mode_loc_cat),
            f64::from(self.months_credit_card),
            f64::from(self.months_wealthy),
        ]
    }
}

fn mode_code(
    events: &[&ActivityEvent],
    col: CatColumn,
    encoding: &EncodingMap,
) -> u32 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for e in events {
        *counts
            .entry(encoding.code_or_missing(col, col.event_value(e)))
            .or_default() += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (code, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((code, c));
        }
    }
    best.map_or(0, |(code, _)| code as u32 + 1)
}

/// Counters over one user's events. Events with a missing channel (card)
/// count toward neither `n_pos`/`n_web` (`n_credit`/`n_debit`); distinct
/// counts treat the missing category as a category of its own.
pub fn fs3_counters(
    user: &UserProfile,
    events: &[&ActivityEvent],
    encoding: &EncodingMap,
) -> CounterSet {
    let months_credit_card = user.cc_months.iter().sum();
    let months_wealthy = user.wealth_months.iter().sum();
    if events.is_empty() {
        return CounterSet {
            months_credit_card,
            months_wealthy,
            ..CounterSet::default()
        };
    }
    let count = |f: &dyn Fn(&ActivityEvent) -> bool| events.iter().filter(|e| f(e)).count() as u32;
    let distinct = |col: CatColumn| {
        events
            .iter()
            .map(|e| col.event_value(e).as_ref())
            .collect::<BTreeSet<&str>>()
            .len() as u32
    };
    let last = events.iter().map(|e| e.day).max().unwrap_or(HORIZON_DAYS);
    CounterSet {
        n_pos: count(&|e| &*e.channel == "pos"),
        n_web: count(&|e| &*e.channel == "web"),
        n_credit: count(&|e| &*e.card == "credit"),
        n_debit: count(&|e| &*e.card == "debit"),
        n_distinct_amt: distinct(CatColumn::AmtCat),
        max_amt: events.iter().map(|e| amt_ordinal(&e.amt_cat)).max().unwrap_or(0),
        days_since_last: HORIZON_DAYS - last,
        n_distinct_locations: distinct(CatColumn::LocCat),
        n_distinct_time_slots: distinct(CatColumn::TimeSlot),
        n_distinct_mc: distinct(CatColumn::McCat),
        n_total: events.len() as u32,
        mode_time_slot: mode_code(events, CatColumn::TimeSlot, encoding),
        mode_loc_cat: mode_code(events, CatColumn::LocCat, encoding),
        months_credit_card,
        months_wealthy,
    }
}

/// Mean and population standard deviation of gaps between consecutive
/// distinct activity days; `(0, 0)` with fewer than two distinct days.
pub fn inter_activity_stats(timeline: &ActivityTimeline) -> (f64, f64) {
    let d = &timeline.distinct_days;
    if d.len() < 2 {
        return (0.0, 0.0);
    }
    let gaps: Vec<f64> = d.windows(2).map(|w| f64::from(w[1] - w[0])).collect();
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Entropy-style burstiness of the distinct activity days, in `[0, 1)`.
///
/// Gaps run from day 0 to the first active day, between active days, and
/// from the last active day to `horizon + 1`; each is normalized by
/// `horizon + 1` so they sum to one. Returns 0 for an empty timeline.
pub fn clumpiness(timeline: &ActivityTimeline) -> f64 {
    if timeline.distinct_days.is_empty() {
        log::debug!("user {} has no activity; clumpiness = 0", timeline.user_id);
        return 0.0;
    }
    let span = f64::from(timeline.horizon + 1);
    let mut prev = 0u32;
    let mut acc = 0.0;
    let mut add_gap = |g: u32| {
        if g > 0 {
            let x = f64::from(g) / span;
            acc += x * x.ln();
        }
    };
    for &d in &timeline.distinct_days {
        add_gap(d - prev);
        prev = d;
    }
    add_gap(timeline.horizon + 1 - prev);
    1.0 + acc / span.ln()
}

/// Average distance from home to activity locations, and that average per
/// activity. Both zero without activity.
pub fn fs5_geo_features(user: &UserProfile, events: &[&ActivityEvent]) -> (f64, f64) {
    if events.is_empty() {
        return (0.0, 0.0);
    }
    let n = events.len() as f64;
    let avg = events.iter().map(|e| user.geo.dist(&e.geo)).sum::<f64>() / n;
    (avg, avg / n)
}

/// Shares of strictly increasing and strictly decreasing consecutive pairs.
pub fn trend_ratios(seq: &[u8]) -> (f64, f64) {
    if seq.len() < 2 {
        return (0.0, 0.0);
    }
    let (mut up, mut down) = (0usize, 0usize);
    for w in seq.windows(2) {
        match w[1].cmp(&w[0]) {
            std::cmp::Ordering::Greater => up += 1,
            std::cmp::Ordering::Less => down += 1,
            std::cmp::Ordering::Equal => {}
        }
    }
    let pairs = (seq.len() - 1) as f64;
    (up as f64 / pairs, down as f64 / pairs)
}

/// Mean activity location, or the home location when there is no activity.
pub fn mean_activity_geo(user: &UserProfile, events: &[&ActivityEvent]) -> Geo {
    if events.is_empty() {
        return user.geo;
    }
    let n = events.len() as f64;
    let (sx, sy) = events
        .iter()
        .fold((0.0, 0.0), |(sx, sy), e| (sx + e.geo.x, sy + e.geo.y));
    Geo::new(sx / n, sy / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    /// One-hot indicator, or an average of indicators.
    Indicator,
    Numeric,
    /// Depends on the branch being predicted; not stored in matrix rows.
    BranchParameterized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub feature_set: FeatureSetId,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub feature_set: FeatureSetId,
    pub columns: Vec<ColumnSpec>,
}

impl Manifest {
    /// Columns stored in matrix rows.
    pub fn materialized(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns
            .iter()
            .filter(|c| c.kind != ColumnKind::BranchParameterized)
    }

    pub fn width(&self) -> usize {
        self.materialized().count()
    }

    pub fn branch_columns(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns
            .iter()
            .filter(|c| c.kind == ColumnKind::BranchParameterized)
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Home and mean-activity location of a user, kept for branch distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub home: Geo,
    pub activity: Geo,
}

/// Rows are users in `user_id` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub user_ids: Vec<u64>,
    pub manifest: Manifest,
    pub values: Matrix,
    pub anchors: Vec<Anchors>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembleOptions {
    /// Average activity vectors with `ln(1 + day)` weights instead of uniformly.
    pub recency_weighted: bool,
}

struct ColumnsBuilder {
    fs: FeatureSetId,
    cols: Vec<ColumnSpec>,
}

impl ColumnsBuilder {
    fn push(&mut self, name: impl Into<String>, kind: ColumnKind) {
        self.cols.push(ColumnSpec {
            name: name.into(),
            feature_set: self.fs,
            kind,
        });
    }
}

/// Column manifest for a feature set.
pub fn build_manifest(
    fs: FeatureSetId,
    encoding: &EncodingMap,
    clusters: Option<&KMeansModel>,
) -> Result<Manifest> {
    use ColumnKind::*;
    let mut b = ColumnsBuilder {
        fs: FeatureSetId::FS1,
        cols: Vec::new(),
    };
    for col in USER_CAT_COLUMNS {
        for t in &encoding.column(col).tokens {
            b.push(format!("{}={}", col.name(), display_token(t)), Indicator);
        }
    }
    b.push("user_geo_x", Numeric);
    b.push("user_geo_y", Numeric);
    for m in 1..=6 {
        b.push(format!("c{m}"), Indicator);
    }
    for m in 1..=6 {
        b.push(format!("w{m}"), Indicator);
    }
    let ev_names = encoding.event_column_names();
    let n_ev = ev_names.len();
    for (i, name) in ev_names.into_iter().enumerate() {
        let kind = if i + 2 >= n_ev { Numeric } else { Indicator };
        b.push(format!("mean:{name}"), kind);
    }
    let stage = |id: FeatureSetId, b: &mut ColumnsBuilder, f: &dyn Fn(&mut ColumnsBuilder)| {
        if fs.includes(id) {
            b.fs = id;
            f(b);
        }
    };
    stage(FeatureSetId::FS2, &mut b, &|b| b.push("min_branch_dist_user", Numeric));
    stage(FeatureSetId::FS3, &mut b, &|b| {
        COUNTER_NAMES.iter().for_each(|n| b.push(*n, Numeric))
    });
    stage(FeatureSetId::FS4, &mut b, &|b| {
        ["iat_mean", "iat_std", "clumpiness"]
            .iter()
            .for_each(|n| b.push(*n, Numeric))
    });
    stage(FeatureSetId::FS5, &mut b, &|b| {
        b.push("avg_activity_dist", Numeric);
        b.push("avg_activity_dist_per_activity", Numeric);
    });
    stage(FeatureSetId::FS6, &mut b, &|b| {
        ["amt_pos_ratio", "amt_neg_ratio", "mc_pos_ratio", "mc_neg_ratio"]
            .iter()
            .for_each(|n| b.push(*n, Numeric))
    });
    stage(FeatureSetId::FS7, &mut b, &|b| b.push("min_branch_dist_activity", Numeric));
    if fs.needs_clusters() {
        let k = clusters
            .ok_or_else(|| Error::invalid(format!("{fs} requires a fitted k-means model")))?
            .k();
        b.fs = FeatureSetId::FS8;
        b.push("cluster_id", Numeric);
        for c in 0..k {
            b.push(format!("cluster={c}"), Indicator);
        }
    }
    stage(FeatureSetId::FS9, &mut b, &|b| b.push("dist_user_branch", BranchParameterized));
    stage(FeatureSetId::FS10, &mut b, &|b| {
        b.push("dist_activity_branch", BranchParameterized)
    });
    Ok(Manifest {
        feature_set: fs,
        columns: b.cols,
    })
}

fn user_row(
    fs: FeatureSetId,
    user: &UserProfile,
    events: &[&ActivityEvent],
    ds: &Dataset,
    encoding: &EncodingMap,
    clusters: Option<&KMeansModel>,
    opts: AssembleOptions,
) -> Result<(Vec<f64>, Anchors)> {
    let mut row = Vec::new();
    for col in USER_CAT_COLUMNS {
        let enc = encoding.column(col);
        let mut block = vec![0.0; enc.len()];
        block[encoding.code_or_missing(col, col.user_value(user))] = 1.0;
        row.extend(block);
    }
    row.push(user.geo.x);
    row.push(user.geo.y);
    row.extend(user.cc_months.iter().map(|&f| f64::from(f)));
    row.extend(user.wealth_months.iter().map(|&f| f64::from(f)));

    let width = encoding.event_width();
    if opts.recency_weighted {
        let encoded: Vec<(u32, Vec<f64>)> = events
            .iter()
            .map(|e| (e.day, encoding.encode_event_lenient(e)))
            .collect();
        row.extend(recency_weighted_mean(&encoded, width));
    } else {
        let encoded: Vec<Vec<f64>> = events
            .iter()
            .map(|e| encoding.encode_event_lenient(e))
            .collect();
        row.extend(fs1_mean_activity(&encoded, width));
    }

    let activity_geo = mean_activity_geo(user, events);
    let anchors = Anchors {
        home: user.geo,
        activity: activity_geo,
    };
    if fs.includes(FeatureSetId::FS2) {
        row.push(min_branch_distance(user.geo, &ds.branches)?);
    }
    if fs.includes(FeatureSetId::FS3) {
        row.extend(fs3_counters(user, events, encoding).to_vec());
    }
    if fs.includes(FeatureSetId::FS4) {
        let tl = ActivityTimeline::from_events(user.user_id, events);
        let (m, s) = inter_activity_stats(&tl);
        row.extend([m, s, clumpiness(&tl)]);
    }
    if fs.includes(FeatureSetId::FS5) {
        let (a, r) = fs5_geo_features(user, events);
        row.extend([a, r]);
    }
    if fs.includes(FeatureSetId::FS6) {
        let amt: Vec<u8> = events
            .iter()
            .filter(|e| !is_missing(&e.amt_cat))
            .map(|e| amt_ordinal(&e.amt_cat))
            .collect();
        let mc: Vec<u8> = events
            .iter()
            .filter(|e| !is_missing(&e.mc_cat))
            .map(|e| mc_ordinal(&e.mc_cat))
            .collect();
        let (ap, an) = trend_ratios(&amt);
        let (mp, mn) = trend_ratios(&mc);
        row.extend([ap, an, mp, mn]);
    }
    if fs.includes(FeatureSetId::FS7) {
        row.push(min_branch_distance(activity_geo, &ds.branches)?);
    }
    if fs.needs_clusters() {
        let model = clusters.expect("checked by build_manifest");
        let c = model.assign(user.geo);
        row.push(c as f64);
        let mut block = vec![0.0; model.k()];
        block[c] = 1.0;
        row.extend(block);
    }
    Ok((row, anchors))
}

pub fn assemble(
    fs: FeatureSetId,
    ds: &Dataset,
    encoding: &EncodingMap,
    clusters: Option<&KMeansModel>,
) -> Result<FeatureMatrix> {
    assemble_with(fs, ds, encoding, clusters, AssembleOptions::default())
}

/// Builds the feature matrix for every user of `ds`.
///
/// Categorical tokens that `encoding` has not seen map to the missing
/// category, so a map fitted on training rows applies to held-out rows.
pub fn assemble_with(
    fs: FeatureSetId,
    ds: &Dataset,
    encoding: &EncodingMap,
    clusters: Option<&KMeansModel>,
    opts: AssembleOptions,
) -> Result<FeatureMatrix> {
    let manifest = build_manifest(fs, encoding, clusters)?;
    let groups = ds.events_by_user();
    let rows: Vec<(Vec<f64>, Anchors)> = ds
        .users
        .par_iter()
        .zip(groups.par_iter())
        .map(|(u, ev)| user_row(fs, u, ev, ds, encoding, clusters, opts))
        .collect::<Result<_>>()?;
    let width = manifest.width();
    let mut data = Vec::with_capacity(rows.len() * width);
    let mut anchors = Vec::with_capacity(rows.len());
    for (r, a) in rows {
        debug_assert_eq!(r.len(), width);
        if let Some(bad) = r.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value in column `{}`",
                manifest.materialized().nth(bad).map_or("?", |c| c.name.as_str())
            )));
        }
        data.extend(r);
        anchors.push(a);
    }
    Ok(FeatureMatrix {
        user_ids: ds.users.iter().map(|u| u.user_id).collect(),
        values: Matrix::new(anchors.len(), width, data)?,
        manifest,
        anchors,
    })
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.n_rows()
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            user_ids: idx.iter().map(|&i| self.user_ids[i]).collect(),
            manifest: self.manifest.clone(),
            values: self.values.select_rows(idx),
            anchors: idx.iter().map(|&i| self.anchors[i]).collect(),
        }
    }

    /// Drops materialized columns matching any pattern: an exact name, a
    /// prefix ending in `*`, or a group from [`column_group`].
    pub fn without_columns(&self, patterns: &[String]) -> FeatureMatrix {
        if patterns.is_empty() {
            return self.clone();
        }
        let mut expanded: Vec<String> = Vec::new();
        for p in patterns {
            match column_group(p) {
                Some(g) => expanded.extend(g),
                None => expanded.push(p.clone()),
            }
        }
        let hit = |name: &str| {
            expanded.iter().any(|p| match p.strip_suffix('*') {
                Some(prefix) => name.starts_with(prefix),
                None => name == p,
            })
        };
        let keep: Vec<usize> = self
            .manifest
            .materialized()
            .enumerate()
            .filter(|(_, c)| !hit(&c.name))
            .map(|(i, _)| i)
            .collect();
        let mut data = Vec::with_capacity(self.n_rows() * keep.len());
        for r in self.values.rows() {
            data.extend(keep.iter().map(|&j| r[j]));
        }
        let columns = self
            .manifest
            .columns
            .iter()
            .filter(|c| c.kind == ColumnKind::BranchParameterized || !hit(&c.name))
            .cloned()
            .collect();
        FeatureMatrix {
            user_ids: self.user_ids.clone(),
            manifest: Manifest {
                feature_set: self.manifest.feature_set,
                columns,
            },
            values: Matrix::new(self.n_rows(), keep.len(), data).expect("consistent shape"),
            anchors: self.anchors.clone(),
        }
    }

    /// Rows as CSV: `user_id` followed by the materialized columns.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header = vec!["user_id".to_owned()];
        header.extend(self.manifest.materialized().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for (uid, r) in self.user_ids.iter().zip(self.values.rows()) {
            let mut rec = Vec::with_capacity(r.len() + 1);
            rec.push(uid.to_string());
            rec.extend(r.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<features csv>", e))
    }
}

/// Named column groups: `geo` (raw coordinates) and `monthly` (credit-card
/// and wealth flags).
pub fn column_group(name: &str) -> Option<Vec<String>> {
    match name {
        "geo" => Some(
            ["user_geo_x", "user_geo_y", "mean:geo_x", "mean:geo_y"]
                .map(String::from)
                .to_vec(),
        ),
        "monthly" => Some(
            (1..=6)
                .map(|m| format!("c{m}"))
                .chain((1..=6).map(|m| format!("w{m}")))
                .collect(),
        ),
        _ => None,
    }
}

/// `ln(1 + max(x, 0))` on numeric columns; indicators pass through.
pub fn log_transform(m: &FeatureMatrix) -> FeatureMatrix {
    let numeric: Vec<bool> = m
        .manifest
        .materialized()
        .map(|c| c.kind == ColumnKind::Numeric)
        .collect();
    let mut out = m.clone();
    for i in 0..out.n_rows() {
        for (v, &is_num) in out.values.row_mut(i).iter_mut().zip(&numeric) {
            if is_num {
                *v = v.max(0.0).ln_1p();
            }
        }
    }
    out
}

/// Per-column standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub means: Vec<f64>,
    /// Population standard deviations; 0 marks a constant column.
    pub stds: Vec<f64>,
}

impl StandardScaler {
    pub fn fit(m: &Matrix) -> Self {
        let n = m.n_rows().max(1) as f64;
        let d = m.n_cols();
        let mut means = vec![0.0; d];
        for r in m.rows() {
            for (s, v) in means.iter_mut().zip(r) {
                *s += v;
            }
        }
        means.iter_mut().for_each(|s| *s /= n);
        let mut stds = vec![0.0; d];
        for r in m.rows() {
            for ((s, v), mu) in stds.iter_mut().zip(r).zip(&means) {
                *s += (v - mu) * (v - mu);
            }
        }
        for (s, mu) in stds.iter_mut().zip(&means) {
            *s = (*s / n).sqrt();
            // float noise on a constant column must not be amplified
            if !s.is_finite() || *s <= 1e-12 * mu.abs().max(1.0) {
                *s = 0.0;
            }
        }
        Self { means, stds }
    }

    pub fn transform_row(&self, row: &mut [f64]) {
        for ((v, mu), sd) in row.iter_mut().zip(&self.means).zip(&self.stds) {
            *v = if *sd > 0.0 { (*v - mu) / sd } else { 0.0 };
        }
    }

    pub fn transform(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for i in 0..out.n_rows() {
            self.transform_row(out.row_mut(i));
        }
        out
    }
}

pub fn scale_features(m: &FeatureMatrix) -> (FeatureMatrix, StandardScaler) {
    let scaler = StandardScaler::fit(&m.values);
    let mut out = m.clone();
    out.values = scaler.transform(&m.values);
    (out, scaler)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn timeline(days: &[u32]) -> ActivityTimeline {
        ActivityTimeline::new(1, days.iter().copied(), HORIZON_DAYS).unwrap()
    }

    /// Direct formula: sum over the boundary-padded gap sequence.
    fn clumpiness_oracle(days: &[u32], horizon: u32) -> f64 {
        let mut t: Vec<u32> = days.to_vec();
        t.sort_unstable();
        t.dedup();
        let pts: Vec<f64> = std::iter::once(0.0)
            .chain(t.iter().map(|&d| f64::from(d)))
            .chain(std::iter::once(f64::from(horizon) + 1.0))
            .collect();
        let n1 = f64::from(horizon) + 1.0;
        1.0 + pts
            .windows(2)
            .map(|w| (w[1] - w[0]) / n1)
            .map(|x| if x == 0.0 { 0.0 } else { x.ln() * x })
            .sum::<f64>()
            / n1.ln()
    }

    #[test]
    fn clumpiness_daily_is_zero() {
        let c = clumpiness(&timeline(&(1..=181).collect::<Vec<_>>()));
        assert!(c.abs() < 1e-12, "{c}");
    }

    #[test]
    fn clumpiness_single_day_one() {
        let c = clumpiness(&timeline(&[1]));
        assert_abs_diff_eq!(c, clumpiness_oracle(&[1], 181), epsilon = 1e-9);
        assert_abs_diff_eq!(c, 0.9935, epsilon = 5e-5);
    }

    #[test]
    fn clumpiness_two_days_matches_oracle() {
        let c = clumpiness(&timeline(&[60, 120]));
        // gaps 60, 60, 62 over 182
        let expected = 1.0
            + (2.0 * (60.0f64 / 182.0) * (60.0f64 / 182.0).ln()
                + (62.0f64 / 182.0) * (62.0f64 / 182.0).ln())
                / 182f64.ln();
        assert_abs_diff_eq!(c, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(c, clumpiness_oracle(&[60, 120], 181), epsilon = 1e-12);
    }

    #[test]
    fn clumpiness_empty_is_zero() {
        assert_eq!(clumpiness(&timeline(&[])), 0.0);
    }

    #[test]
    fn inter_activity_examples() {
        assert_eq!(inter_activity_stats(&timeline(&[1, 3, 7])), (3.0, 1.0));
        assert_eq!(inter_activity_stats(&timeline(&[5, 5])), (0.0, 0.0));
        assert_eq!(inter_activity_stats(&timeline(&[2, 12, 22, 32])).1, 0.0);
    }

    #[test]
    fn trend_examples() {
        assert_eq!(trend_ratios(&[1, 2, 3]), (1.0, 0.0));
        assert_eq!(trend_ratios(&[1, 2, 2, 3, 1]), (0.5, 0.25));
        assert_eq!(trend_ratios(&[2]), (0.0, 0.0));
    }

    #[test]
    fn mean_examples() {
        let v = fs1_mean_activity(&[vec![1.0, 0.0, 2.0], vec![0.0, 0.0, 4.0]], 3);
        assert_eq!(v, vec![0.5, 0.0, 3.0]);
        assert_eq!(fs1_mean_activity(&[], 3), vec![0.0; 3]);
        assert_eq!(fs1_mean_activity(&[vec![7.0, 1.0]], 2), vec![7.0, 1.0]);
    }

    #[test]
    fn recency_weighted_examples() {
        let v1 = vec![1.0, 0.0];
        let v2 = vec![3.0, 2.0];
        let w = recency_weighted_mean(&[(1, v1.clone()), (181, v2.clone())], 2);
        let (a, b) = (2f64.ln(), 182f64.ln());
        assert_abs_diff_eq!(w[0], (a * 1.0 + b * 3.0) / (a + b), epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], (b * 2.0) / (a + b), epsilon = 1e-12);
        let same = recency_weighted_mean(&[(9, v1.clone()), (9, v2.clone())], 2);
        let plain = fs1_mean_activity(&[v1, v2], 2);
        assert_abs_diff_eq!(same[0], plain[0], epsilon = 1e-12);
        assert_abs_diff_eq!(same[1], plain[1], epsilon = 1e-12);
        assert_eq!(recency_weighted_mean(&[], 2), vec![0.0, 0.0]);
    }

    #[test]
    fn branch_distance_examples() {
        let b = |id, x, y| BranchInfo {
            branch_id: id,
            geo: Geo::new(x, y),
        };
        assert_eq!(min_branch_distance(Geo::new(3.0, 4.0), &[b(0, 0.0, 0.0)]).unwrap(), 5.0);
        assert_eq!(
            min_branch_distance(Geo::new(1.0, 1.0), &[b(0, 5.0, 5.0), b(1, 1.0, 1.0)]).unwrap(),
            0.0
        );
        assert!(min_branch_distance(Geo::new(0.0, 0.0), &[]).is_err());
    }

    #[test]
    fn feature_set_parsing() {
        assert_eq!("FS7".parse::<FeatureSetId>().unwrap(), FeatureSetId::FS7);
        assert_eq!("fs10".parse::<FeatureSetId>().unwrap(), FeatureSetId::FS10);
        assert!("FS11".parse::<FeatureSetId>().is_err());
        assert_eq!(FeatureSetId::FS10.to_string(), "FS10");
    }

    #[test]
    fn scaler_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 3.0], vec![2.0, 3.0]]).unwrap();
        let s = StandardScaler::fit(&m);
        let t = s.transform(&m);
        assert_eq!(t.column(0), vec![-1.0, 1.0]);
        assert_eq!(t.column(1), vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn clumpiness_in_unit_interval_and_matches_oracle(days in prop::collection::vec(1u32..=181, 1..60)) {
            let c = clumpiness(&timeline(&days));
            prop_assert!((0.0..1.0).contains(&c) || c.abs() < 1e-12);
            prop_assert!((c - clumpiness_oracle(&days, 181)).abs() < 1e-9);
        }

        #[test]
        fn trend_ratio_sum_bounded(seq in prop::collection::vec(0u8..11, 0..40)) {
            let (p, n) = trend_ratios(&seq);
            prop_assert!(p + n <= 1.0 + 1e-12);
            prop_assert!(p >= 0.0 && n >= 0.0);
        }

        #[test]
        fn min_distance_is_a_lower_bound(
            px in -50.0f64..50.0, py in -50.0f64..50.0,
            pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..12),
        ) {
            let branches: Vec<BranchInfo> = pts.iter().enumerate()
                .map(|(i, &(x, y))| BranchInfo { branch_id: i as u32, geo: Geo::new(x, y) })
                .collect();
            let p = Geo::new(px, py);
            let d = min_branch_distance(p, &branches).unwrap();
            let mut brute = f64::INFINITY;
            for b in &branches {
                let e = ((p.x - b.geo.x).powi(2) + (p.y - b.geo.y).powi(2)).sqrt();
                prop_assert!(d <= e);
                brute = brute.min(e);
            }
            prop_assert_eq!(d, brute);
        }
    }
}
