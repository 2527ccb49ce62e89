//! Synthetic hierarchical corpus.
//!
//! A complete `branching`-ary tree of depth `depth`. Every label owns a
//! disjoint pool of words; a document for a leaf draws `signal_strength`
//! words from the pool of each label on its path, then noise words drawn
//! uniformly from the whole word list until they make up `noise_rate` of the
//! text. Documents are split 70/15/15, stratified by leaf.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Dataset, Sample};
use crate::taxonomy::{LabelHierarchy, LabelId, LabelSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub depth: u32,
    pub branching: u32,
    /// Distinct words in total; words beyond the label pools act as filler.
    pub vocab_size: usize,
    /// Words per label pool.
    pub pool_size: usize,
    pub docs_per_leaf: usize,
    /// When set, this many documents are spread evenly over the leaves
    /// instead of `docs_per_leaf` each.
    pub total_docs: Option<usize>,
    pub noise_rate: f64,
    /// Indicative words per path label.
    pub signal_strength: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            branching: 4,
            vocab_size: 2000,
            pool_size: 8,
            docs_per_leaf: 60,
            total_docs: None,
            noise_rate: 0.3,
            signal_strength: 3,
            seed: 0,
        }
    }
}

/// Number of labels in a complete tree: `b + b^2 + ... + b^D`.
pub fn label_count(depth: u32, branching: u32) -> usize {
    (1..=depth).map(|l| (branching as usize).pow(l)).sum()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidSynth(m));
        if self.depth < 2 || self.branching < 2 {
            return bad(format!(
                "depth {} and branching {} must be at least 2",
                self.depth, self.branching
            ));
        }
        if self.depth > 12 || label_count(self.depth, self.branching) > 1_000_000 {
            return bad("tree too large".into());
        }
        let labels = label_count(self.depth, self.branching);
        if self.pool_size == 0 || self.signal_strength == 0 {
            return bad("pool_size and signal_strength must be positive".into());
        }
        if self.vocab_size < labels * self.pool_size {
            return bad(format!(
                "vocab_size {} cannot hold {labels} pools of {}",
                self.vocab_size, self.pool_size
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 1)", self.noise_rate));
        }
        let leaves = (self.branching as usize).pow(self.depth);
        let docs = self.total_docs.unwrap_or(self.docs_per_leaf * leaves);
        if docs < leaves {
            return bad(format!("{docs} documents cannot cover {leaves} leaves"));
        }
        Ok(())
    }

    /// Noise words per document so that noise makes up `noise_rate`.
    pub fn noise_words(&self) -> usize {
        let signal = (self.depth as usize * self.signal_strength) as f64;
        (signal * self.noise_rate / (1.0 - self.noise_rate)).round() as usize
    }
}

/// Complete tree with labels named by their path, e.g. `n2` at level 1 and
/// `n2.0.3` at level 3; ids follow breadth-first order.
pub fn complete_tree(depth: u32, branching: u32) -> LabelHierarchy {
    let mut edges: Vec<(Option<String>, String)> = Vec::new();
    let mut frontier: Vec<String> = Vec::new();
    for i in 0..branching {
        let name = format!("n{i}");
        edges.push((None, name.clone()));
        frontier.push(name);
    }
    for _ in 1..depth {
        let mut next = Vec::new();
        for parent in &frontier {
            for i in 0..branching {
                let name = format!("{parent}.{i}");
                edges.push((Some(parent.clone()), name.clone()));
                next.push(name);
            }
        }
        frontier = next;
    }
    let borrowed: Vec<(Option<&str>, &str)> = edges.iter().map(|(p, c)| (p.as_deref(), c.as_str())).collect();
    LabelHierarchy::from_edges(&borrowed).expect("complete tree is valid")
}

/// Split sizes for each group: every cell is the floor or ceiling of its
/// proportional share, so each group is within one document of it, and every
/// split total stays below the ceiling of its own share.
///
/// The round-ups form a bipartite assignment (group needs `r_g` of them,
/// split `s` accepts at most `ceil(total_s) - floor_sum_s`), solved with
/// augmenting paths. A fractional solution always exists, hence an integral
/// one does too.
fn stratified_counts(group_sizes: &[usize], fractions: &[f64]) -> Vec<Vec<usize>> {
    const SNAP: f64 = 1e-9;
    let k = fractions.len();
    let ideal: Vec<Vec<f64>> = group_sizes
        .iter()
        .map(|&n| {
            fractions
                .iter()
                .map(|&f| {
                    let x = n as f64 * f;
                    if (x - x.round()).abs() < SNAP {
                        x.round()
                    } else {
                        x
                    }
                })
                .collect()
        })
        .collect();
    let mut out: Vec<Vec<usize>> = ideal
        .iter()
        .map(|row| row.iter().map(|x| x.floor() as usize).collect())
        .collect();
    let mut cap: Vec<usize> = (0..k)
        .map(|s| {
            let col: f64 = ideal.iter().map(|row| row[s]).sum();
            let floors: usize = out.iter().map(|row| row[s]).sum();
            ((col - SNAP).ceil() as usize).saturating_sub(floors)
        })
        .collect();
    // Preferred splits per group: largest remainder first, ties rotated by
    // group so that no split collects every tie.
    let prefs: Vec<Vec<usize>> = ideal
        .iter()
        .enumerate()
        .map(|(g, row)| {
            let mut order: Vec<usize> = (0..k).filter(|&s| row[s].fract() > 0.0).collect();
            order.sort_by(|&a, &b| {
                row[b]
                    .fract()
                    .partial_cmp(&row[a].fract())
                    .expect("finite")
                    .then(((a + k - g % k) % k).cmp(&((b + k - g % k) % k)))
            });
            order
        })
        .collect();
    let mut up = vec![vec![false; k]; group_sizes.len()];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); k];

    fn augment(
        g: usize,
        prefs: &[Vec<usize>],
        up: &mut [Vec<bool>],
        users: &mut [Vec<usize>],
        cap: &mut [usize],
        seen: &mut [bool],
    ) -> bool {
        for &s in &prefs[g] {
            if up[g][s] || seen[s] {
                continue;
            }
            seen[s] = true;
            if cap[s] > 0 {
                cap[s] -= 1;
                up[g][s] = true;
                users[s].push(g);
                return true;
            }
            for i in 0..users[s].len() {
                let other = users[s][i];
                if augment(other, prefs, up, users, cap, seen) {
                    // `other` found a new split; hand its slot in `s` to `g`.
                    let pos = users[s].iter().position(|&u| u == other).expect("user present");
                    users[s][pos] = g;
                    up[other][s] = false;
                    up[g][s] = true;
                    return true;
                }
            }
        }
        false
    }

    for (g, &n) in group_sizes.iter().enumerate() {
        let short = n - out[g].iter().sum::<usize>();
        for _ in 0..short {
            let mut seen = vec![false; k];
            let found = augment(g, &prefs, &mut up, &mut users, &mut cap, &mut seen);
            assert!(found, "controlled rounding is always feasible");
        }
    }
    for (row, ups) in out.iter_mut().zip(&up) {
        for (c, &u) in row.iter_mut().zip(ups) {
            *c += usize::from(u);
        }
    }
    out
}

/// Generates the hierarchy and the three splits. Identical configs produce
/// identical datasets.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset, CorpusError> {
    cfg.validate()?;
    let h = complete_tree(cfg.depth, cfg.branching);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut word_ids: Vec<usize> = (0..cfg.vocab_size).collect();
    word_ids.shuffle(&mut rng);
    let word = |i: usize| format!("w{}", word_ids[i]);
    let pool = |label: LabelId, j: usize| word(label.index() * cfg.pool_size + j);

    let leaves: Vec<LabelId> = h.ids().filter(|&l| h.is_leaf(l)).collect();
    let total = cfg.total_docs.unwrap_or(cfg.docs_per_leaf * leaves.len());
    let per_leaf: Vec<usize> = (0..leaves.len())
        .map(|i| total / leaves.len() + usize::from(i < total % leaves.len()))
        .collect();
    let counts = stratified_counts(&per_leaf, &[0.70, 0.15, 0.15]);
    let noise = cfg.noise_words();

    let mut splits: [Vec<Sample>; 3] = Default::default();
    let mut serial = 0usize;
    for (li, &leaf) in leaves.iter().enumerate() {
        let mut path = vec![leaf];
        path.extend(h.ancestors(leaf)?);
        let labels: LabelSet = path.iter().copied().collect();
        for (s, &n) in counts[li].iter().enumerate() {
            for _ in 0..n {
                let mut words = Vec::with_capacity(path.len() * cfg.signal_strength + noise);
                for &l in &path {
                    for _ in 0..cfg.signal_strength {
                        words.push(pool(l, rng.random_range(0..cfg.pool_size)));
                    }
                }
                for _ in 0..noise {
                    words.push(word(rng.random_range(0..cfg.vocab_size)));
                }
                words.shuffle(&mut rng);
                splits[s].push(Sample {
                    id: format!("syn-{serial:06}"),
                    text: words.join(" "),
                    labels: labels.clone(),
                });
                serial += 1;
            }
        }
    }
    for split in &mut splits {
        split.shuffle(&mut rng);
    }
    let [train, dev, test] = splits;
    Ok(Dataset {
        hierarchy: h,
        train,
        dev,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::split_words;
    use std::collections::{HashMap, HashSet};

    #[test]
    fn wos_shaped_tree() {
        let h = complete_tree(2, 5);
        assert_eq!(h.len(), 30);
        let cfg = SynthConfig {
            depth: 2,
            branching: 5,
            docs_per_leaf: 4,
            vocab_size: 400,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        assert!(ds.all_samples().all(|s| s.labels.len() == 2));
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let cfg = SynthConfig {
            total_docs: Some(6000),
            ..SynthConfig::default()
        };
        assert_eq!(label_count(3, 4), 84);
        let ds = generate(&cfg).unwrap();
        assert_eq!([ds.train.len(), ds.dev.len(), ds.test.len()], [4200, 900, 900]);
    }

    #[test]
    fn stratification_within_one() {
        let fractions = [0.7, 0.15, 0.15];
        for sizes in [
            vec![10, 11, 13, 7, 9],
            vec![4; 4],
            vec![1, 2, 3, 1, 1],
            vec![94, 93, 94, 93],
        ] {
            let counts = stratified_counts(&sizes, &fractions);
            let total: usize = sizes.iter().sum();
            for (g, c) in counts.iter().enumerate() {
                assert_eq!(c.iter().sum::<usize>(), sizes[g]);
                for (s, f) in fractions.iter().enumerate() {
                    assert!(
                        (c[s] as f64 - sizes[g] as f64 * f).abs() < 1.0,
                        "{sizes:?} {g} {s} {c:?}"
                    );
                }
            }
            for (s, f) in fractions.iter().enumerate() {
                let col: usize = counts.iter().map(|c| c[s]).sum();
                assert!(
                    col as f64 <= (total as f64 * f).ceil() + 1e-9,
                    "{sizes:?} split {s}: {col}"
                );
            }
        }
    }

    #[test]
    fn noise_free_pools_separate_labels() {
        let cfg = SynthConfig {
            depth: 2,
            branching: 3,
            vocab_size: 200,
            docs_per_leaf: 5,
            noise_rate: 0.0,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let mut owner: HashMap<String, LabelSet> = HashMap::new();
        for s in ds.all_samples() {
            for w in split_words(&s.text) {
                let e = owner.entry(w).or_insert_with(|| s.labels.clone());
                *e = e.intersection(&s.labels).copied().collect();
            }
        }
        // Every word is specific to at least one label.
        assert!(owner.values().all(|l| !l.is_empty()));
    }

    #[test]
    fn noise_rate_is_respected() {
        let cfg = SynthConfig::default();
        let signal = cfg.depth as usize * cfg.signal_strength;
        let n = cfg.noise_words();
        assert!(((n as f64) / ((n + signal) as f64) - cfg.noise_rate).abs() < 0.05);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let cfg = SynthConfig {
            docs_per_leaf: 3,
            ..SynthConfig::default()
        };
        let (a, b) = (generate(&cfg).unwrap(), generate(&cfg).unwrap());
        assert_eq!(a.train, b.train);
        let c = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.train, c.train);
        let ids: HashSet<&str> = a.all_samples().map(|s| s.id.as_str()).collect();
        assert_eq!(ids.len(), a.train.len() + a.dev.len() + a.test.len());
    }
}
