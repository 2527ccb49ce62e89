//! Ablation runner: the base config plus named deviations from it, trained
//! with identical seeds on each dataset.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use taxoseq::corpus::Dataset;
use taxoseq::RunConfig;

use crate::commands::{resolve_config, train_and_report};
use crate::{AblateArgs, Global};

pub struct Variant {
    pub key: &'static str,
    pub display: &'static str,
    pub overrides: &'static [&'static str],
}

pub const BASE: &str = "base";
pub const LABEL_SEMANTICS: &str = "label-semantics";

pub const VARIANTS: &[Variant] = &[
    Variant {
        key: BASE,
        display: "full model",
        overrides: &[],
    },
    Variant {
        key: "parent-to-child",
        display: "parent-to-child level order",
        overrides: &["codec.strategy=parent-to-child-levelwise"],
    },
    Variant {
        key: "no-separators",
        display: "no level separators",
        overrides: &["codec.strategy=child-to-parent-no-sep"],
    },
    Variant {
        key: "path-separators",
        display: "separators between paths, not levels",
        overrides: &["codec.strategy=path-separated"],
    },
    Variant {
        key: "shuffled",
        display: "shuffled labels, no separators",
        overrides: &["codec.strategy=shuffled"],
    },
    Variant {
        key: "minimal",
        display: "deepest labels only, ancestors restored",
        overrides: &["codec.strategy=minimal-children-levelwise"],
    },
    Variant {
        key: "focal-per-token",
        display: "focal loss per label token",
        overrides: &["loss.variant=focal-per-token"],
    },
    Variant {
        key: "plain-ce",
        display: "no focal modulation",
        overrides: &["loss.variant=plain-ce"],
    },
    Variant {
        key: LABEL_SEMANTICS,
        display: "label-embedding initialization",
        overrides: &[],
    },
];

pub fn find(key: &str) -> Option<&'static Variant> {
    VARIANTS.iter().find(|v| v.key == key)
}

/// Variant config derived from the resolved base config.
fn variant_config(base: &RunConfig, v: &Variant, label_init: Option<&PathBuf>) -> Result<RunConfig> {
    let mut cfg = base.with_overrides(v.overrides)?;
    if v.key == LABEL_SEMANTICS {
        let dir = label_init.context("the label-semantics variant needs --label-init")?;
        cfg.data.label_init = Some(dir.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

pub struct Row {
    pub variant: &'static Variant,
    /// (micro, macro) per dataset, in input order.
    pub scores: Vec<(f64, f64)>,
}

/// Markdown table with F1 values in percent.
pub fn render(datasets: &[String], rows: &[Row]) -> String {
    let mut s = String::from("| variant |");
    for d in datasets {
        let _ = write!(s, " {d} Micro-F1 | {d} Macro-F1 |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---|---|".repeat(datasets.len()));
    s.push('\n');
    for r in rows {
        let _ = write!(s, "| {} |", r.variant.display);
        for (mi, ma) in &r.scores {
            let _ = write!(s, " {:.2} | {:.2} |", 100.0 * mi, 100.0 * ma);
        }
        s.push('\n');
    }
    s
}

fn tsv(datasets: &[String], rows: &[Row]) -> String {
    let mut s = String::from("variant\tdataset\tmicro_f1\tmacro_f1\n");
    for r in rows {
        for (d, (mi, ma)) in datasets.iter().zip(&r.scores) {
            let _ = writeln!(s, "{}\t{d}\t{mi}\t{ma}", r.variant.key);
        }
    }
    s
}

pub fn run(g: &Global, a: AblateArgs) -> Result<()> {
    if a.variants.iter().any(|v| v == "list") {
        for v in VARIANTS {
            println!("{:<18} {}", v.key, v.display);
        }
        return Ok(());
    }
    let mut selected = vec![find(BASE).expect("base variant")];
    for key in &a.variants {
        let v =
            find(key.trim()).with_context(|| format!("unknown variant {key:?}; `--variants list` shows the keys"))?;
        if !selected.iter().any(|s| s.key == v.key) {
            selected.push(v);
        }
    }
    if a.parallel == 0 {
        bail!("--parallel must be at least 1");
    }
    let base = resolve_config(g)?;
    let configs = selected
        .iter()
        .map(|v| variant_config(&base, v, a.label_init.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = a
        .data
        .iter()
        .map(|p| {
            p.file_name()
                .map_or_else(|| "data".into(), |n| n.to_string_lossy().into_owned())
        })
        .collect();
    let datasets = a
        .data
        .iter()
        .map(|p| Dataset::load(p, base.data.strict).with_context(|| format!("loading dataset {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let root = g.out.join(&a.run_name);

    let jobs: Vec<(usize, usize)> = (0..selected.len())
        .flat_map(|v| (0..datasets.len()).map(move |d| (v, d)))
        .collect();
    let run_job = |&(v, d): &(usize, usize)| -> Result<(f64, f64)> {
        let dir = root.join(&names[d]).join(selected[v].key);
        let report = train_and_report(&configs[v], &datasets[d], &dir, false)
            .with_context(|| format!("variant {} on {}", selected[v].key, names[d]))?;
        Ok((report.micro_f1, report.macro_f1))
    };
    let results: Vec<(f64, f64)> = if a.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(a.parallel)
            .build()
            .context("building the ablation pool")?;
        pool.install(|| jobs.par_iter().map(run_job).collect::<Result<_>>())?
    } else {
        jobs.iter().map(run_job).collect::<Result<_>>()?
    };

    let rows: Vec<Row> = selected
        .iter()
        .enumerate()
        .map(|(v, variant)| Row {
            variant,
            scores: (0..datasets.len()).map(|d| results[v * datasets.len() + d]).collect(),
        })
        .collect();
    let table = render(&names, &rows);
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    fs::write(root.join("ablation.md"), &table).context("writing ablation.md")?;
    fs::write(root.join("ablation.tsv"), tsv(&names, &rows)).context("writing ablation.tsv")?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_keys_are_unique_and_apply() {
        let base = RunConfig::default();
        for (i, v) in VARIANTS.iter().enumerate() {
            assert!(VARIANTS[..i].iter().all(|w| w.key != v.key), "duplicate {}", v.key);
            if v.key != LABEL_SEMANTICS {
                variant_config(&base, v, None).unwrap();
            }
        }
        let shuffled = variant_config(&base, find("shuffled").unwrap(), None).unwrap();
        assert_eq!(shuffled.codec.strategy.as_str(), "shuffled");
        assert_eq!(shuffled.train, base.train);
    }

    #[test]
    fn label_semantics_needs_a_directory() {
        let base = RunConfig::default();
        assert!(variant_config(&base, find(LABEL_SEMANTICS).unwrap(), None).is_err());
    }

    #[test]
    fn table_has_one_row_per_variant() {
        let rows = vec![
            Row {
                variant: find(BASE).unwrap(),
                scores: vec![(0.9, 0.8)],
            },
            Row {
                variant: find("shuffled").unwrap(),
                scores: vec![(0.5, 0.25)],
            },
        ];
        let t = render(&["synth".into()], &rows);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("| full model | 90.00 | 80.00 |"));
        assert!(t.contains("| shuffled labels, no separators | 50.00 | 25.00 |"));
    }
}
