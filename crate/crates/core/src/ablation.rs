//! Ablation grids: named config variants trained over several seeds, with
//! per-run metrics collected into a CSV table and summarized per variant.

use std::fs;
use std::path::Path;

use dte_autograd::par;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{DteError, Result};
use crate::eval::evaluate_state;
use crate::losses::RoutingFlags;
use crate::trainer::{prepare_data, run_epochs, TrainState};

/// One named override set applied on top of the grid's base config.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    seeds: Vec<u64>,
    #[serde(default)]
    base: toml::Table,
    #[serde(default)]
    variant: Vec<toml::Table>,
}

fn config_from_tables(base: &toml::Table, over: &toml::Table) -> Result<TrainConfig> {
    let mut merged = base.clone();
    let mut row = None;
    for (k, v) in over {
        match k.as_str() {
            "name" => {}
            "row" => {
                row = Some(
                    v.as_integer()
                        .ok_or_else(|| DteError::Config("`row` must be an integer".into()))?,
                )
            }
            _ => {
                merged.insert(k.clone(), v.clone());
            }
        }
    }
    let mut cfg: TrainConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| DteError::Config(e.to_string()))?;
    if let Some(r) = row {
        let r = usize::try_from(r).map_err(|_| DteError::Config(format!("row {r} is out of range")))?;
        cfg.set_flags(&RoutingFlags::table5_row(r)?);
    }
    cfg.validate()?;
    Ok(cfg)
}

impl AblationGrid {
    /// Parses a grid file:
    ///
    /// ```toml
    /// seeds = [0, 1, 2]
    /// [base]
    /// resolution = 32
    /// [[variant]]
    /// name = "row 5"
    /// row = 5          # routing flags of a preset row
    /// magp = true      # any other config key overrides the base
    /// ```
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let file: GridFile = toml::from_str(s).map_err(|e| DteError::Config(e.to_string()))?;
        if file.seeds.is_empty() || file.variant.is_empty() {
            return Err(DteError::Config(
                "ablation grid needs at least one seed and one variant".into(),
            ));
        }
        let mut variants = Vec::with_capacity(file.variant.len());
        for (i, v) in file.variant.iter().enumerate() {
            let name = match v.get("name") {
                Some(n) => n
                    .as_str()
                    .ok_or_else(|| DteError::Config(format!("variant {i}: `name` must be a string")))?
                    .to_owned(),
                None => format!("variant{i}"),
            };
            if variants.iter().any(|u: &Variant| u.name == name) {
                return Err(DteError::Config(format!("duplicate variant name `{name}`")));
            }
            let config =
                config_from_tables(&file.base, v).map_err(|e| DteError::Config(format!("variant `{name}`: {e}")))?;
            variants.push(Variant { name, config });
        }
        Ok(Self {
            seeds: file.seeds,
            variants,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DteError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| DteError::Config(format!("{}: {e}", path.display())))
    }

    /// The five routing rows over `base`, named `row1` to `row5`.
    pub fn table5(base: &TrainConfig, seeds: Vec<u64>) -> Result<Self> {
        let variants = (1..=5)
            .map(|r| {
                let mut config = base.clone();
                config.set_flags(&RoutingFlags::table5_row(r)?);
                config.validate()?;
                Ok(Variant {
                    name: format!("row{r}"),
                    config,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { seeds, variants })
    }
}

/// Outcome of one (variant, seed) run. Failed runs keep their error text
/// and leave the metric columns empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub variant: String,
    pub seed: u64,
    pub r_precision: Option<f64>,
    pub fid: Option<f64>,
    pub is_mean: Option<f64>,
    pub config_hash: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub records: Vec<AblationRecord>,
}

/// Mean and sample standard deviation of one metric over successful seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn stat(xs: &[f64]) -> Option<Stat> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Stat { mean, std, n })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub r_precision: Option<Stat>,
    pub fid: Option<Stat>,
    pub is_mean: Option<Stat>,
    pub failures: usize,
}

impl AblationTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| DteError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<AblationRecord>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Self { records })
    }

    /// Per-variant aggregates in first-appearance order.
    pub fn summarize(&self) -> Vec<VariantSummary> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.records {
            if !names.contains(&r.variant.as_str()) {
                names.push(&r.variant);
            }
        }
        names
            .into_iter()
            .map(|name| {
                let rows: Vec<&AblationRecord> = self.records.iter().filter(|r| r.variant == name).collect();
                let collect =
                    |f: fn(&AblationRecord) -> Option<f64>| stat(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
                VariantSummary {
                    variant: name.to_owned(),
                    r_precision: collect(|r| r.r_precision),
                    fid: collect(|r| r.fid),
                    is_mean: collect(|r| r.is_mean),
                    failures: rows.iter().filter(|r| r.error.is_some()).count(),
                }
            })
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let cell = |s: Option<Stat>, digits: usize| match s {
            Some(s) if s.n > 1 => format!("{:.*} ± {:.*}", digits, s.mean, digits, s.std),
            Some(s) => format!("{:.*}", digits, s.mean),
            None => "n/a".to_owned(),
        };
        let mut out =
            String::from("| variant | seeds | R-precision | FID | IS | failed |\n|---|---|---|---|---|---|\n");
        for s in self.summarize() {
            let seeds = s.r_precision.map_or(0, |x| x.n);
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                s.variant,
                seeds,
                cell(s.r_precision, 3),
                cell(s.fid, 2),
                cell(s.is_mean, 3),
                s.failures
            ));
        }
        out
    }
}

fn csv_err(path: &Path, e: csv::Error) -> DteError {
    DteError::Io {
        path: path.to_owned(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Trains a config in memory from scratch to `config.epochs`.
pub fn train_in_memory(config: &TrainConfig) -> Result<TrainState> {
    let (train_set, _) = prepare_data(config)?;
    let mut state = TrainState::new(config.clone(), train_set.vocab.clone())?;
    run_epochs(&mut state, &train_set, |_, _| Ok(()), |_| Ok(()))?;
    Ok(state)
}

fn run_one(config: &TrainConfig) -> Result<crate::eval::MetricsReport> {
    let (train_set, eval_set) = prepare_data(config)?;
    let mut state = TrainState::new(config.clone(), train_set.vocab.clone())?;
    run_epochs(&mut state, &train_set, |_, _| Ok(()), |_| Ok(()))?;
    evaluate_state(&state, &eval_set)
}

fn run_record(v: &Variant, seed: u64) -> AblationRecord {
    let config = TrainConfig {
        seed,
        ..v.config.clone()
    };
    match run_one(&config) {
        Ok(m) => AblationRecord {
            variant: v.name.clone(),
            seed,
            r_precision: Some(m.r_precision),
            fid: Some(m.fid),
            is_mean: m.is_mean,
            config_hash: m.config_hash,
            error: None,
        },
        Err(e) => AblationRecord {
            variant: v.name.clone(),
            seed,
            r_precision: None,
            fid: None,
            is_mean: None,
            config_hash: config.hash(),
            error: Some(e.to_string()),
        },
    }
}

fn check_nonempty(grid: &AblationGrid) -> Result<()> {
    if grid.seeds.is_empty() || grid.variants.is_empty() {
        return Err(DteError::Config("ablation grid is empty".into()));
    }
    Ok(())
}

/// Runs every (variant, seed) pair. A failing run is recorded and the grid
/// continues. When `csv_out` is given the table is rewritten after each run
/// so partial results survive an interruption.
pub fn run_ablation(
    grid: &AblationGrid,
    csv_out: Option<&Path>,
    mut progress: impl FnMut(&AblationRecord),
) -> Result<AblationTable> {
    check_nonempty(grid)?;
    let mut table = AblationTable::default();
    for v in &grid.variants {
        for &seed in &grid.seeds {
            let rec = run_record(v, seed);
            progress(&rec);
            table.records.push(rec);
            if let Some(p) = csv_out {
                table.write_csv(p)?;
            }
        }
    }
    Ok(table)
}

/// Like [`run_ablation`] but runs the (variant, seed) pairs concurrently.
/// Each run owns its data, model and RNG streams, so the table equals the
/// sequential one. The CSV is written once at the end.
pub fn run_ablation_parallel(grid: &AblationGrid, csv_out: Option<&Path>) -> Result<AblationTable> {
    check_nonempty(grid)?;
    let pairs: Vec<(&Variant, u64)> = grid
        .variants
        .iter()
        .flat_map(|v| grid.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let records = par::map_collect(pairs.len(), |i| run_record(pairs[i].0, pairs[i].1));
    let table = AblationTable { records };
    if let Some(p) = csv_out {
        table.write_csv(p)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parses_rows_and_overrides() {
        let g = AblationGrid::from_toml_str(
            r#"
            seeds = [1, 2]
            [base]
            resolution = 32
            [[variant]]
            name = "a"
            row = 2
            [[variant]]
            name = "b"
            row = 5
            magp = true
            "#,
        )
        .unwrap();
        assert_eq!(g.variants.len(), 2);
        assert_eq!(g.variants[0].config.resolution, 32);
        assert!(!g.variants[0].config.sd_to_g);
        assert!(g.variants[1].config.magp);
        assert_eq!(g.variants[1].config.flags(), RoutingFlags::table5_row(5).unwrap());
    }

    #[test]
    fn empty_or_bad_grids_rejected() {
        assert!(AblationGrid::from_toml_str("seeds = []\n[[variant]]\nname='a'").is_err());
        assert!(AblationGrid::from_toml_str("seeds = [1]").is_err());
        assert!(AblationGrid::from_toml_str("seeds = [1]\n[[variant]]\nrow = 9").is_err());
        assert!(AblationGrid::from_toml_str("seeds = [1]\n[[variant]]\nname='a'\n[[variant]]\nname='a'").is_err());
        let empty = AblationGrid {
            seeds: vec![],
            variants: vec![],
        };
        assert!(run_ablation(&empty, None, |_| {}).is_err());
    }

    #[test]
    fn table5_grid_has_five_variants() {
        let g = AblationGrid::table5(&TrainConfig::default(), vec![0]).unwrap();
        assert_eq!(g.variants.len(), 5);
    }

    #[test]
    fn csv_round_trip_and_markdown() {
        let dir = tempfile::tempdir().unwrap();
        let rec = |v: &str, seed, r: Option<f64>| AblationRecord {
            variant: v.into(),
            seed,
            r_precision: r,
            fid: r.map(|x| 10.0 * x),
            is_mean: None,
            config_hash: "h".into(),
            error: r.is_none().then(|| "boom".into()),
        };
        let t = AblationTable {
            records: vec![rec("x", 0, Some(0.5)), rec("x", 1, Some(0.7)), rec("y", 0, None)],
        };
        let p = dir.path().join("t.csv");
        t.write_csv(&p).unwrap();
        let back = AblationTable::read_csv(&p).unwrap();
        assert_eq!(back, t);
        let s = back.summarize();
        assert!((s[0].r_precision.unwrap().mean - 0.6).abs() < 1e-12);
        assert_eq!(s[1].failures, 1);
        let md = back.to_markdown();
        assert_eq!(md.lines().count(), 4);
        assert!(md.contains("| y | 0 | n/a | n/a | n/a | 1 |"));
    }
}
