//! Zero-shot evaluation across domain variants, adaptation tables,
//! relative-improvement arithmetic and smoothed learning curves.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::envsim::{make_domain, ActionId, EnvError, Observation, StriderWorld, Variant, EPISODE_LENGTH};
use crate::models::{ModelBundle, ModelError};
use crate::seed;
use crate::trainer::{Method, MetricsRow};

/// Largest absolute return an episode can reach (`|reward| ≤ 1` per step).
pub const RETURN_BOUND: f64 = EPISODE_LENGTH as f64;
pub const DEFAULT_EVAL_EPISODES: usize = 10;
pub const DEFAULT_SMOOTHING_WINDOW: usize = 10;
pub const TABLE_CSV_HEADER: &str = "method,train,color_easy,color_hard,video_easy,video_hard";
pub const CURVE_CSV_HEADER: &str = "episode,raw_return,smoothed_return";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("at least one evaluation episode is required")]
    NoEpisodes,
    #[error("relative improvement against a zero baseline")]
    ZeroBaseline,
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("cell {method}/{variant} = {value} is outside [-{RETURN_BOUND}, {RETURN_BOUND}]")]
    OutOfBounds { method: String, variant: Variant, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

type Result<T> = std::result::Result<T, EvalError>;

/// Anything that maps an observation to an action without side effects.
pub trait Policy: Sync {
    fn act(&self, obs: &Observation) -> Result<ActionId>;
}

impl Policy for ModelBundle {
    fn act(&self, obs: &Observation) -> Result<ActionId> {
        Ok(self.greedy_action(obs)?)
    }
}

/// Always plays the same action.
#[derive(Clone, Copy, Debug)]
pub struct FixedAction(pub ActionId);

impl Policy for FixedAction {
    fn act(&self, _: &Observation) -> Result<ActionId> {
        Ok(self.0)
    }
}

/// Return of one full episode in a domain drawn from `(seed, episode)`.
pub fn episode_return(policy: &dyn Policy, variant: Variant, episode: usize, seed: u64) -> Result<f64> {
    let ep_seed = seed::derive(seed, episode as u64);
    let mut world = StriderWorld::new(make_domain(variant, ep_seed), ep_seed);
    let mut ret = 0.0f64;
    while !world.is_done() {
        let a = policy.act(world.observation())?;
        ret += world.step(a)?.reward as f64;
    }
    Ok(ret)
}

/// Mean greedy return over `episodes` episodes. Episodes run in parallel;
/// returns are summed in episode order, so the result does not depend on
/// the thread count.
pub fn evaluate(policy: &dyn Policy, variant: Variant, episodes: usize, seed: u64) -> Result<f64> {
    if episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    let returns = (0..episodes)
        .into_par_iter()
        .map(|ep| episode_return(policy, variant, ep, seed))
        .collect::<Result<Vec<f64>>>()?;
    Ok(returns.iter().sum::<f64>() / episodes as f64)
}

/// One row of an adaptation table: mean return per domain variant, in
/// [`Variant::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub returns: [f64; 5],
}

impl TableRow {
    pub fn get(&self, v: Variant) -> f64 {
        self.returns[v as usize]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptationTable {
    pub rows: Vec<TableRow>,
}

impl AdaptationTable {
    pub fn row(&self, method: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Checks every cell against the per-episode return bound.
    pub fn check_bounds(&self) -> Result<()> {
        for r in &self.rows {
            for v in Variant::ALL {
                let value = r.get(v);
                if !(value.abs() <= RETURN_BOUND) {
                    return Err(EvalError::OutOfBounds {
                        method: r.method.clone(),
                        variant: v,
                        value,
                    });
                }
            }
        }
        Ok(())
    }

    /// Floats use the shortest representation that parses back exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TABLE_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.method);
            for v in r.returns {
                write!(out, ",{v}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == TABLE_CSV_HEADER => {}
            _ => {
                return Err(EvalError::Csv {
                    line: 1,
                    reason: format!("expected header `{TABLE_CSV_HEADER}`"),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| EvalError::Csv { line: i + 1, reason };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", fields.len())));
            }
            let mut returns = [0.0; 5];
            for (slot, f) in returns.iter_mut().zip(&fields[1..]) {
                *slot = f.parse().map_err(|_| err(format!("`{f}` is not a number")))?;
            }
            rows.push(TableRow {
                method: fields[0].to_string(),
                returns,
            });
        }
        Ok(Self { rows })
    }
}

/// Evaluates each policy on all five variants. The same episode seeds are
/// used for every method, so rows are compared on identical domains.
pub fn adaptation_table(policies: &[(Method, &dyn Policy)], episodes: usize, seed: u64) -> Result<AdaptationTable> {
    if policies.is_empty() {
        return Err(EvalError::Empty("method list"));
    }
    let mut rows = Vec::with_capacity(policies.len());
    for (method, policy) in policies {
        let mut returns = [0.0; 5];
        for v in Variant::ALL {
            returns[v as usize] = evaluate(*policy, v, episodes, seed::derive(seed, v as u64))?;
        }
        rows.push(TableRow {
            method: method.name().to_string(),
            returns,
        });
    }
    Ok(AdaptationTable { rows })
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// `100 (a - b) / b`, rounded to one decimal.
pub fn relative_improvement(a: f64, b: f64) -> Result<f64> {
    if b == 0.0 {
        return Err(EvalError::ZeroBaseline);
    }
    Ok(round1(100.0 * (a - b) / b))
}

/// Mean of the unrounded relative improvements of `a` over `b` on the four
/// shifted variants (train excluded), rounded to one decimal.
pub fn mean_improvement(a: &TableRow, b: &TableRow) -> Result<f64> {
    let mut total = 0.0;
    for v in &Variant::ALL[1..] {
        let base = b.get(*v);
        if base == 0.0 {
            return Err(EvalError::ZeroBaseline);
        }
        total += 100.0 * (a.get(*v) - base) / base;
    }
    Ok(round1(total / 4.0))
}

/// Centered moving average. The window spans `(w - 1) / 2` points before and
/// `w / 2` after each index and is truncated at both ends.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let (before, after) = ((w - 1) / 2, w / 2);
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after).min(values.len() - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub episode: usize,
    pub raw: f64,
    pub smoothed: f64,
}

pub fn learning_curve(log: &[MetricsRow], window: usize) -> Result<Vec<CurvePoint>> {
    if log.is_empty() {
        return Err(EvalError::Empty("metrics log"));
    }
    let raw: Vec<f64> = log.iter().map(|r| r.train_return).collect();
    Ok(log
        .iter()
        .zip(smooth(&raw, window))
        .map(|(r, s)| CurvePoint {
            episode: r.episode,
            raw: r.train_return,
            smoothed: s,
        })
        .collect())
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_CSV_HEADER);
    out.push('\n');
    for p in curve {
        writeln!(out, "{},{:.6},{:.6}", p.episode, p.raw, p.smoothed).expect("write to string");
    }
    out
}

/// Parses `all` or a single variant name.
pub fn parse_domains(s: &str) -> std::result::Result<Vec<Variant>, EnvError> {
    if s == "all" {
        Ok(Variant::ALL.to_vec())
    } else {
        Variant::from_str(s).map(|v| vec![v])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::QInput;

    fn push() -> FixedAction {
        FixedAction(ActionId::new(4).unwrap())
    }

    fn row(method: &str, returns: [f64; 5]) -> TableRow {
        TableRow {
            method: method.into(),
            returns,
        }
    }

    #[test]
    fn always_push_matches_recurrence() {
        // f32 replica of the dynamics, summed in f64
        let mut v = 0.0f32;
        let mut oracle = 0.0f64;
        for _ in 0..EPISODE_LENGTH {
            v = (0.95 * v + 0.1).clamp(-1.0, 1.0);
            oracle += v as f64;
        }
        assert!((oracle - 194.506_999_41).abs() < 1e-6, "{oracle}");
        let mean = evaluate(&push(), Variant::Train, 3, 11).unwrap();
        assert!((mean - oracle).abs() < 1e-6, "{mean} vs {oracle}");
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let b = ModelBundle::new(5, QInput::Latent);
        for v in [Variant::Train, Variant::VideoHard] {
            let a = evaluate(&b, v, 2, 9).unwrap();
            assert_eq!(a, evaluate(&b, v, 2, 9).unwrap());
            assert!(a.abs() <= RETURN_BOUND);
        }
        assert!(matches!(evaluate(&b, Variant::Train, 0, 9), Err(EvalError::NoEpisodes)));
    }

    #[test]
    fn evaluation_leaves_bundle_untouched() {
        let b = ModelBundle::new(6, QInput::GeneralMean);
        let before = b.clone();
        evaluate(&b, Variant::ColorHard, 1, 2).unwrap();
        assert_eq!(b, before);
    }

    #[test]
    fn table_has_one_row_per_method() {
        let p = push();
        let t = adaptation_table(
            &[(Method::Usra, &p as &dyn Policy), (Method::Svea, &p), (Method::Lusr, &p)],
            1,
            4,
        )
        .unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows[2].method, "lusr");
        t.check_bounds().unwrap();
        // the fixed push ignores colours, so every domain scores the same
        assert!(t.rows[0].returns.iter().all(|&r| r == t.rows[0].returns[0]));
        assert!(adaptation_table(&[], 1, 4).is_err());
    }

    #[test]
    fn reference_rows_round_trip_through_csv() {
        let t = AdaptationTable {
            rows: vec![
                row("usra", [949.0, 949.0, 948.0, 862.0, 245.0]),
                row("lusr", [374.0, 273.0, 150.0, 165.0, 43.0]),
            ],
        };
        let csv = t.to_csv();
        assert!(csv.starts_with("method,train,color_easy,color_hard,video_easy,video_hard\nusra,949,949,948,862,245\n"));
        assert_eq!(AdaptationTable::from_csv(&csv).unwrap(), t);
        // full-scale returns exceed the desk-scale episode bound
        assert!(matches!(t.check_bounds(), Err(EvalError::OutOfBounds { .. })));
    }

    #[test]
    fn table_parse_errors_name_the_line() {
        let bad = format!("{TABLE_CSV_HEADER}\nusra,1,2,3,4,5\nsvea,1,2,x,4,5\n");
        match AdaptationTable::from_csv(&bad) {
            Err(EvalError::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(AdaptationTable::from_csv("a,b\n").is_err());
        assert!(AdaptationTable::from_csv(&format!("{TABLE_CSV_HEADER}\nusra,1,2\n")).is_err());
    }

    #[test]
    fn relative_improvement_reference_values() {
        assert_eq!(relative_improvement(862.0, 703.0).unwrap(), 22.6);
        assert_eq!(relative_improvement(948.0, 871.0).unwrap(), 8.8);
        assert_eq!(relative_improvement(-3.5, -3.5).unwrap(), 0.0);
        assert!(matches!(relative_improvement(1.0, 0.0), Err(EvalError::ZeroBaseline)));
    }

    #[test]
    fn mean_improvement_over_shifted_domains() {
        let usra = row("usra", [949.0, 949.0, 948.0, 862.0, 245.0]);
        let svea = row("svea", [892.0, 888.0, 871.0, 703.0, 202.0]);
        // (6.869 + 8.840 + 22.617 + 21.287) / 4
        assert_eq!(mean_improvement(&usra, &svea).unwrap(), 14.9);
    }

    #[test]
    fn smoothing_oracles() {
        let raw: Vec<f64> = (0..10).map(f64::from).collect();
        let want = [2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0];
        assert_eq!(smooth(&raw, 10), want);
        assert_eq!(smooth(&raw, 1), raw);
        assert_eq!(smooth(&[4.0; 7], 3), vec![4.0; 7]);
    }

    #[test]
    fn curve_csv_layout() {
        let log: Vec<MetricsRow> = (1..=3)
            .map(|e| MetricsRow {
                episode: e,
                phase: "p2".into(),
                train_return: e as f64,
                loss_forward: 0.0,
                loss_reverse: 0.0,
                loss_svea: 0.0,
                epsilon: 0.0,
                env_steps: 0,
                wall_time_s: 0.0,
            })
            .collect();
        let csv = curve_csv(&learning_curve(&log, 3).unwrap());
        assert_eq!(
            csv,
            "episode,raw_return,smoothed_return\n1,1.000000,1.500000\n2,2.000000,2.000000\n3,3.000000,2.500000\n"
        );
        assert!(learning_curve(&[], 3).is_err());
    }

    #[test]
    fn domain_list_parsing() {
        assert_eq!(parse_domains("all").unwrap().len(), 5);
        assert_eq!(parse_domains("video_easy").unwrap(), vec![Variant::VideoEasy]);
        assert!(parse_domains("snow").is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn improvement_sign_follows_ordering(b in 1.0f64..1000.0, d in 0.1f64..500.0) {
            prop_assert!(relative_improvement(b + d, b).unwrap() >= 0.0);
            prop_assert_eq!(relative_improvement(b, b).unwrap(), 0.0);
        }

        #[test]
        fn table_csv_round_trips(cells in proptest::collection::vec(proptest::array::uniform5(-200.0f64..200.0), 1..4)) {
            let t = AdaptationTable {
                rows: cells.into_iter().zip(["usra", "svea", "lusr"]).map(|(returns, m)| TableRow { method: m.into(), returns }).collect(),
            };
            prop_assert_eq!(AdaptationTable::from_csv(&t.to_csv()).unwrap(), t);
        }

        #[test]
        fn smoothing_stays_within_range(values in proptest::collection::vec(-200.0f64..200.0, 1..40), w in 1usize..15) {
            let (lo, hi) = values.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            for s in smooth(&values, w) {
                prop_assert!(s >= lo - 1e-9 && s <= hi + 1e-9);
            }
        }
    }
}
