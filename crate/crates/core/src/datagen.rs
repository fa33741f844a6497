//! Seeded synthetic data with planted, recoverable signal.
//!
//! Users live in Gaussian geo clusters. Each user has an activity anchor near
//! home, an activity intensity and a burstiness that mixes uniform days with a
//! few short active windows. Branch visits are Poisson with a rate that decays
//! with distance from the user's mobility point (mostly the activity anchor).
//! The up-sell label is Bernoulli on a logistic score of activity count,
//! wealthy months and credit-card months.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    ActivityEvent, BranchInfo, Dataset, Geo, Token, UserProfile, VisitTarget, AGE_DOMAIN,
    AMT_DOMAIN, MC_DOMAIN, MISSING, TIME_SLOT_DOMAIN,
};
use crate::models::gbt::sigmoid;
use crate::rng::substream;
use crate::{Error, Result, HORIZON_DAYS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_branches: usize,
    pub n_days: u32,
    pub k_true: usize,
    /// Side of the square the clusters and branches live in.
    pub area: f64,
    pub cluster_spread: f64,
    /// Spread of the activity anchor around home.
    pub anchor_spread: f64,
    /// Median and log-scale spread of the per-user event count.
    pub events_median: f64,
    pub events_sigma: f64,
    /// Share of users with no activity at all.
    pub inactive_rate: f64,
    /// Distance scale of the visit-rate decay.
    pub visit_decay: f64,
    /// Branch attractiveness is `exp(U(-s, s))`.
    pub attractiveness_spread: f64,
    pub visits_median: f64,
    /// Logistic label score: `bias + activity * ln(1 + n) + wealth * W + credit * C`.
    pub label_bias: f64,
    pub label_activity: f64,
    pub label_wealth: f64,
    pub label_credit: f64,
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_users: 5000,
            n_branches: 40,
            n_days: HORIZON_DAYS,
            k_true: 5,
            area: 100.0,
            cluster_spread: 6.0,
            anchor_spread: 5.0,
            events_median: 14.0,
            events_sigma: 0.9,
            inactive_rate: 0.05,
            visit_decay: 4.0,
            attractiveness_spread: 0.1,
            visits_median: 4.0,
            label_bias: -5.2,
            label_activity: 1.1,
            label_wealth: 0.35,
            label_credit: -0.3,
            missing_rate: 0.02,
            seed: 0,
        }
    }
}

impl GenConfig {
    /// User and branch counts of the original challenge.
    pub fn full_scale(seed: u64) -> Self {
        Self {
            n_users: 191_238,
            n_branches: 323,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.n_users == 0 || self.n_branches == 0 || self.k_true == 0 {
            return bad("n_users, n_branches and k_true must be positive");
        }
        if self.n_days == 0 || self.n_days > HORIZON_DAYS {
            return bad("n_days must lie in 1..=181");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.inactive_rate) {
            return bad("inactive_rate must lie in [0, 1)");
        }
        let positive = [
            self.area,
            self.cluster_spread,
            self.anchor_spread,
            self.events_median,
            self.events_sigma,
            self.visit_decay,
            self.visits_median,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("scales and medians must be positive");
        }
        if !(self.attractiveness_spread >= 0.0) {
            return bad("attractiveness_spread must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: u64,
    pub cluster: usize,
    pub n_events: usize,
    pub burstiness: f64,
    /// Bayes-optimal up-sell probability.
    pub p_label: f64,
    pub mobility: Geo,
    /// Expected visits summed over all branches.
    pub expected_visits: f64,
}

/// Everything needed to recompute each user's per-branch visit rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub cluster_centers: Vec<Geo>,
    pub visit_decay: f64,
    /// Aligned with the branch list.
    pub attractiveness: Vec<f64>,
    pub branches: Vec<BranchInfo>,
    pub users: Vec<UserTruth>,
}

impl PlantedTruth {
    /// Expected visits of `user` to every branch, in branch order.
    pub fn rates(&self, user: &UserTruth) -> Vec<f64> {
        visit_rates(
            user.mobility,
            user.expected_visits,
            &self.branches,
            &self.attractiveness,
            self.visit_decay,
        )
    }

    pub fn user(&self, user_id: u64) -> Option<&UserTruth> {
        self.users
            .binary_search_by_key(&user_id, |u| u.user_id)
            .ok()
            .map(|i| &self.users[i])
    }
}

fn visit_rates(m: Geo, total: f64, branches: &[BranchInfo], attract: &[f64], decay: f64) -> Vec<f64> {
    let d: Vec<f64> = branches.iter().map(|b| m.dist(&b.geo)).collect();
    let d0 = d.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = d
        .iter()
        .zip(attract)
        .map(|(d, a)| a * (-(d - d0) / decay).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| total * v / s).collect()
}

pub struct Generated {
    pub dataset: Dataset,
    pub truth: PlantedTruth,
}

const KEY_CLUSTERS: u64 = u64::MAX;
const KEY_BRANCHES: u64 = u64::MAX - 1;

fn tok(s: &str) -> Token {
    Arc::from(s)
}

struct Tokens {
    missing: Token,
    age: Vec<Token>,
    slot: Vec<Token>,
    pos: Token,
    web: Token,
    credit: Token,
    debit: Token,
    amt: Vec<Token>,
    mc: Vec<Token>,
    region: Vec<Token>,
    grid: Vec<Token>,
}

const GRID: usize = 4;

impl Tokens {
    fn new(k: usize) -> Self {
        let all = |d: &[&str]| d.iter().map(|s| tok(s)).collect();
        Self {
            missing: tok(MISSING),
            age: all(AGE_DOMAIN),
            slot: all(TIME_SLOT_DOMAIN),
            pos: tok("pos"),
            web: tok("web"),
            credit: tok("credit"),
            debit: tok("debit"),
            amt: all(AMT_DOMAIN),
            mc: all(MC_DOMAIN),
            region: (0..k).map(|i| tok(&format!("r{i:02}"))).collect(),
            grid: (0..GRID * GRID).map(|i| tok(&format!("g{i:02}"))).collect(),
        }
    }
}

struct UserDraw {
    profile: UserProfile,
    events: Vec<ActivityEvent>,
    visits: Vec<VisitTarget>,
    truth: UserTruth,
}

pub fn generate(cfg: &GenConfig) -> Result<Generated> {
    cfg.validate()?;
    let tokens = Tokens::new(cfg.k_true);
    let mut crng = substream(cfg.seed, KEY_CLUSTERS);
    let margin = 0.15 * cfg.area;
    let centers: Vec<Geo> = (0..cfg.k_true)
        .map(|_| {
            Geo::new(
                crng.random_range(margin..cfg.area - margin),
                crng.random_range(margin..cfg.area - margin),
            )
        })
        .collect();

    let mut brng = substream(cfg.seed, KEY_BRANCHES);
    let near = Normal::new(0.0, 2.0 * cfg.cluster_spread).expect("positive spread");
    let branches: Vec<BranchInfo> = (0..cfg.n_branches)
        .map(|i| {
            let geo = if brng.random::<f64>() < 0.6 {
                let c = centers[brng.random_range(0..centers.len())];
                Geo::new(c.x + near.sample(&mut brng), c.y + near.sample(&mut brng))
            } else {
                Geo::new(brng.random_range(0.0..cfg.area), brng.random_range(0.0..cfg.area))
            };
            BranchInfo { branch_id: i as u32, geo }
        })
        .collect();
    let s = cfg.attractiveness_spread;
    let attractiveness: Vec<f64> = (0..cfg.n_branches)
        .map(|_| if s > 0.0 { brng.random_range(-s..s).exp() } else { 1.0 })
        .collect();

    let draws: Vec<UserDraw> = (0..cfg.n_users)
        .into_par_iter()
        .map(|i| {
            let user_id = i as u64 + 1;
            let mut rng = substream(cfg.seed, user_id);
            draw_user(cfg, user_id, &centers, &branches, &attractiveness, &tokens, &mut rng)
        })
        .collect();

    let mut users = Vec::with_capacity(draws.len());
    let mut activities = Vec::new();
    let mut visits = Vec::new();
    let mut truths = Vec::with_capacity(draws.len());
    for d in draws {
        users.push(d.profile);
        activities.extend(d.events);
        visits.extend(d.visits);
        truths.push(d.truth);
    }
    let dataset = Dataset::from_parts(users, activities, branches.clone(), Some(visits))?;
    Ok(Generated {
        dataset,
        truth: PlantedTruth {
            cluster_centers: centers,
            visit_decay: cfg.visit_decay,
            attractiveness,
            branches,
            users: truths,
        },
    })
}

fn draw_user(
    cfg: &GenConfig,
    user_id: u64,
    centers: &[Geo],
    branches: &[BranchInfo],
    attract: &[f64],
    t: &Tokens,
    rng: &mut ChaCha8Rng,
) -> UserDraw {
    let unit = Normal::new(0.0, 1.0).expect("valid");
    let miss = |rng: &mut ChaCha8Rng| cfg.missing_rate > 0.0 && rng.random::<f64>() < cfg.missing_rate;

    let cluster = rng.random_range(0..centers.len());
    let c = centers[cluster];
    let home = Geo::new(
        c.x + cfg.cluster_spread * unit.sample(rng),
        c.y + cfg.cluster_spread * unit.sample(rng),
    );
    let anchor = Geo::new(
        home.x + cfg.anchor_spread * unit.sample(rng),
        home.y + cfg.anchor_spread * unit.sample(rng),
    );

    let age_idx = match rng.random::<f64>() {
        p if p < 0.31 => 0,
        p if p < 0.86 => 1,
        _ => 2,
    };
    let wealthy = rng.random::<f64>() < 0.25;
    let wealth_months: [u8; 6] = std::array::from_fn(|_| {
        let p = if wealthy { 0.85 } else { 0.05 };
        u8::from(rng.random::<f64>() < p)
    });
    let cc_start = if rng.random::<f64>() < 0.3 { rng.random_range(0..6) } else { 6 };
    let cc_months: [u8; 6] = std::array::from_fn(|m| u8::from(m >= cc_start));

    let inactive = rng.random::<f64>() < cfg.inactive_rate;
    let n_events = if inactive {
        0
    } else {
        let ln = LogNormal::new(cfg.events_median.ln(), cfg.events_sigma).expect("valid");
        (ln.sample(rng).round() as usize).clamp(1, 2000)
    };
    let burstiness: f64 = rng.random();
    let windows: Vec<u32> = (0..rng.random_range(1..=3))
        .map(|_| rng.random_range(1..=cfg.n_days))
        .collect();
    let mut days: Vec<u32> = (0..n_events)
        .map(|_| {
            if rng.random::<f64>() < burstiness {
                let w = windows[rng.random_range(0..windows.len())] as i64;
                (w + rng.random_range(-3..=3)).clamp(1, i64::from(cfg.n_days)) as u32
            } else {
                rng.random_range(1..=cfg.n_days)
            }
        })
        .collect();
    days.sort_unstable();

    let slot_pref = rng.random_range(0..t.slot.len());
    let p_web = rng.random_range(0.05..0.6);
    let mc_base: f64 = rng.random_range(0.0..9.0);
    let mc_drift: f64 = rng.random_range(-2.0..2.0);
    let amt_shift: f64 = if wealthy { 0.8 } else { 0.0 };
    let events: Vec<ActivityEvent> = days
        .iter()
        .map(|&day| {
            let frac = f64::from(day) / f64::from(cfg.n_days);
            let slot = if rng.random::<f64>() < 0.6 { slot_pref } else { rng.random_range(0..t.slot.len()) };
            let month = ((day - 1) / 31).min(5) as usize;
            let credit = cc_months[month] == 1 && rng.random::<f64>() < 0.7;
            let amt = (rng.random_range(0.0..2.2) + amt_shift).floor().min(2.0) as usize;
            let mc = (mc_base + mc_drift * frac + rng.random_range(-1.5..1.5)).round().clamp(0.0, 9.0) as usize;
            let gx = anchor.x + 2.0 * unit.sample(rng);
            let gy = anchor.y + 2.0 * unit.sample(rng);
            let cell = |v: f64| ((v / cfg.area * GRID as f64).floor().max(0.0) as usize).min(GRID - 1);
            let mut e = ActivityEvent {
                user_id,
                day,
                time_slot: t.slot[slot].clone(),
                channel: if rng.random::<f64>() < p_web { t.web.clone() } else { t.pos.clone() },
                card: if credit { t.credit.clone() } else { t.debit.clone() },
                amt_cat: t.amt[amt].clone(),
                loc_cat: t.grid[cell(gx) * GRID + cell(gy)].clone(),
                mc_cat: t.mc[mc].clone(),
                geo: Geo::new(gx, gy),
                geo_missing: false,
            };
            for f in [&mut e.time_slot, &mut e.channel, &mut e.card, &mut e.amt_cat, &mut e.loc_cat, &mut e.mc_cat] {
                if miss(rng) {
                    *f = t.missing.clone();
                }
            }
            if miss(rng) {
                e.geo = Geo::new(0.0, 0.0);
                e.geo_missing = true;
            }
            e
        })
        .collect();

    let w_sum: f64 = wealth_months.iter().map(|&v| f64::from(v)).sum();
    let c_sum: f64 = cc_months.iter().map(|&v| f64::from(v)).sum();
    let score = cfg.label_bias
        + cfg.label_activity * (n_events as f64).ln_1p()
        + cfg.label_wealth * w_sum
        + cfg.label_credit * c_sum;
    let p_label = sigmoid(score);
    let label = u8::from(rng.random::<f64>() < p_label);

    let mobility = Geo::new(0.3 * home.x + 0.7 * anchor.x, 0.3 * home.y + 0.7 * anchor.y);
    let vl = LogNormal::new(cfg.visits_median.ln(), 0.5).expect("valid");
    let expected_visits = vl.sample(rng);
    let rates = visit_rates(mobility, expected_visits, branches, attract, cfg.visit_decay);
    let visits: Vec<VisitTarget> = branches
        .iter()
        .zip(&rates)
        .filter_map(|(b, &r)| {
            let v = if r > 0.0 { Poisson::new(r).expect("positive rate").sample(rng) as u32 } else { 0 };
            (v > 0).then_some(VisitTarget { user_id, branch_id: b.branch_id, visits: v })
        })
        .collect();

    let mut profile = UserProfile {
        user_id,
        age_cat: t.age[age_idx].clone(),
        loc_cat: t.region[cluster].clone(),
        geo: home,
        cc_months,
        wealth_months,
        task2_label: Some(label),
    };
    if miss(rng) {
        profile.age_cat = t.missing.clone();
    }
    if miss(rng) {
        profile.loc_cat = t.missing.clone();
    }
    if miss(rng) {
        profile.geo.x = 0.0;
    }
    if miss(rng) {
        profile.geo.y = 0.0;
    }
    for f in profile.cc_months.iter_mut().chain(profile.wealth_months.iter_mut()) {
        if miss(rng) {
            *f = 0;
        }
    }

    UserDraw {
        profile,
        events,
        visits,
        truth: UserTruth {
            user_id,
            cluster,
            n_events,
            burstiness,
            p_label,
            mobility,
            expected_visits,
        },
    }
}

/// Writes the four CSVs plus `truth.json` and `genconfig.json` into `dir`.
pub fn write_generated(g: &Generated, cfg: &GenConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    g.dataset.write_dir(dir)?;
    let truth = dir.join("truth.json");
    fs::write(&truth, serde_json::to_vec(&g.truth)?).map_err(|e| Error::io(&truth, e))?;
    let gc = dir.join("genconfig.json");
    let mut s = serde_json::to_string_pretty(cfg)?;
    s.push('\n');
    fs::write(&gc, s).map_err(|e| Error::io(&gc, e))
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<PlantedTruth> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
