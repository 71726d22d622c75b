//! N-way K-shot episode construction.
//!
//! Two constructors: [`sample_episodes`] draws randomized training/validation
//! tasks; [`build_test_tasks`] builds the fixed evaluation tasks in which
//! every class holds out one whole case as the query set, so no case id ever
//! appears on both sides of the same task.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetIndex, ImageEntry};
use crate::seeds;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("n_way {n_way} exceeds the {available} classes in the index")]
    TooFewClasses { n_way: usize, available: usize },
    #[error("n_way must be >= 2, got {0}")]
    InvalidWays(usize),
    #[error("k_shot and q_queries_per_class must be >= 1")]
    InvalidCounts,
    #[error("class {class:?} has {available} images, needs {needed} for the spec (no room for a disjoint query set)")]
    ClassTooSmall {
        class: String,
        available: usize,
        needed: usize,
    },
    #[error("class {class:?} has a single case; case-disjoint support/query split is impossible")]
    SingleCase { class: String },
    #[error("class {class:?}: support pool outside case {case_id:?} has {available} images, needs {needed}")]
    SupportPoolTooSmall {
        class: String,
        case_id: String,
        available: usize,
        needed: usize,
    },
    #[error("episode record line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error("image_id {0:?} not found in the index")]
    UnknownImage(String),
    #[error("image_id {0:?} is ambiguous in this index; episode replay requires unique image ids")]
    AmbiguousImage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// N-way K-shot episode shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    /// Queries drawn per class. Fixed test tasks set this to 0: their query
    /// side is "every image of the held-out case", which varies by class.
    pub q_queries_per_class: usize,
}

/// One task: a labeled support set and a query set to score.
///
/// Episode-local labels run 0..n_way-1 and map bijectively onto the chosen
/// global classes, consistently between support and query.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<(ImageEntry, usize)>,
    pub query: Vec<(ImageEntry, usize)>,
    pub spec: EpisodeSpec,
    pub seed_tag: u64,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|(_, l)| *l).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|(_, l)| *l).collect()
    }
}

/// Draw `count` randomized episodes. Episode `i` uses an RNG stream derived
/// from `(seed, i)`, so any single episode is reproducible in isolation.
pub fn sample_episodes(
    index: &DatasetIndex,
    spec: EpisodeSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>, EpisodeError> {
    if spec.n_way < 2 {
        return Err(EpisodeError::InvalidWays(spec.n_way));
    }
    if spec.k_shot < 1 || spec.q_queries_per_class < 1 {
        return Err(EpisodeError::InvalidCounts);
    }
    if spec.n_way > index.n_classes() {
        return Err(EpisodeError::TooFewClasses {
            n_way: spec.n_way,
            available: index.n_classes(),
        });
    }
    let by_class = index.entries_by_class();
    let needed = spec.k_shot + spec.q_queries_per_class;
    for (ci, entries) in by_class.iter().enumerate() {
        if entries.len() < needed {
            return Err(EpisodeError::ClassTooSmall {
                class: index.classes[ci].clone(),
                available: entries.len(),
                needed,
            });
        }
    }

    let mut episodes = Vec::with_capacity(count);
    for i in 0..count {
        let tag = seeds::derive(seed, &[seeds::domain::EPISODE, i as u64]);
        let mut rng = seeds::stream(seed, &[seeds::domain::EPISODE, i as u64]);

        let mut class_ids: Vec<usize> = (0..index.n_classes()).collect();
        class_ids.shuffle(&mut rng);
        class_ids.truncate(spec.n_way);

        let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
        let mut query = Vec::with_capacity(spec.n_way * spec.q_queries_per_class);
        for (local, &class_idx) in class_ids.iter().enumerate() {
            let mut pool = by_class[class_idx].clone();
            pool.shuffle(&mut rng);
            for &entry_idx in &pool[..spec.k_shot] {
                support.push((index.entries[entry_idx].clone(), local));
            }
            for &entry_idx in &pool[spec.k_shot..needed] {
                query.push((index.entries[entry_idx].clone(), local));
            }
        }
        episodes.push(Episode {
            support,
            query,
            spec,
            seed_tag: tag,
        });
    }
    Ok(episodes)
}

/// Build `n_tasks` fixed, case-disjoint test tasks over every class of the
/// index. Per task and class, one case is held out as the query set (all of
/// its images) and `support_per_class` images are drawn without replacement
/// from the remaining cases. Query cases are distinct across tasks wherever a
/// class has at least `n_tasks` cases; with fewer, assignment wraps around.
pub fn build_test_tasks(
    index: &DatasetIndex,
    support_per_class: usize,
    n_tasks: usize,
    seed: u64,
) -> Result<Vec<Episode>, EpisodeError> {
    let cases = index.cases_by_class();
    for (ci, class_cases) in cases.iter().enumerate() {
        if class_cases.len() < 2 {
            return Err(EpisodeError::SingleCase {
                class: index.classes[ci].clone(),
            });
        }
        let total: usize = class_cases.values().map(Vec::len).sum();
        for (case_id, members) in class_cases {
            if total - members.len() < support_per_class {
                return Err(EpisodeError::SupportPoolTooSmall {
                    class: index.classes[ci].clone(),
                    case_id: case_id.clone(),
                    available: total - members.len(),
                    needed: support_per_class,
                });
            }
        }
    }

    // Per class, a seeded case order; task t holds out the case at t mod n.
    let query_case_order: Vec<Vec<&String>> = cases
        .iter()
        .enumerate()
        .map(|(ci, class_cases)| {
            let mut order: Vec<&String> = class_cases.keys().collect();
            let mut rng = seeds::stream(seed, &[seeds::domain::TEST_TASK, 0, ci as u64]);
            order.shuffle(&mut rng);
            order
        })
        .collect();

    let spec = EpisodeSpec {
        n_way: index.n_classes(),
        k_shot: support_per_class,
        q_queries_per_class: 0,
    };

    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let tag = seeds::derive(seed, &[seeds::domain::TEST_TASK, 1, t as u64]);
        let mut support = Vec::new();
        let mut query = Vec::new();
        for (ci, class_cases) in cases.iter().enumerate() {
            let query_case = query_case_order[ci][t % query_case_order[ci].len()];
            for &entry_idx in &class_cases[query_case] {
                query.push((index.entries[entry_idx].clone(), ci));
            }
            let mut pool: Vec<usize> = class_cases
                .iter()
                .filter(|(case_id, _)| *case_id != query_case)
                .flat_map(|(_, members)| members.iter().copied())
                .collect();
            let mut rng =
                seeds::stream(seed, &[seeds::domain::TEST_TASK, 2, t as u64, ci as u64]);
            pool.shuffle(&mut rng);
            for &entry_idx in &pool[..support_per_class] {
                support.push((index.entries[entry_idx].clone(), ci));
            }
        }
        tasks.push(Episode {
            support,
            query,
            spec,
            seed_tag: tag,
        });
    }
    Ok(tasks)
}

/// Serialized form of one episode: spec, seed tag, and (image_id, label)
/// pairs for both sides. One JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct EpisodeRecord {
    pub spec: EpisodeSpec,
    pub seed_tag: u64,
    pub support: Vec<(String, usize)>,
    pub query: Vec<(String, usize)>,
}

impl EpisodeRecord {
    pub fn from_episode(ep: &Episode) -> Self {
        EpisodeRecord {
            spec: ep.spec,
            seed_tag: ep.seed_tag,
            support: ep
                .support
                .iter()
                .map(|(e, l)| (e.image_id.clone(), *l))
                .collect(),
            query: ep
                .query
                .iter()
                .map(|(e, l)| (e.image_id.clone(), *l))
                .collect(),
        }
    }

    /// Resolve image ids against an index. Requires unique image ids.
    pub fn resolve(&self, index: &DatasetIndex) -> Result<Episode, EpisodeError> {
        let mut by_id: HashMap<&str, Option<usize>> = HashMap::new();
        for (i, e) in index.entries.iter().enumerate() {
            by_id
                .entry(e.image_id.as_str())
                .and_modify(|v| *v = None)
                .or_insert(Some(i));
        }
        let look = |id: &str| -> Result<ImageEntry, EpisodeError> {
            match by_id.get(id) {
                Some(Some(i)) => Ok(index.entries[*i].clone()),
                Some(None) => Err(EpisodeError::AmbiguousImage(id.to_string())),
                None => Err(EpisodeError::UnknownImage(id.to_string())),
            }
        };
        let mut support = Vec::with_capacity(self.support.len());
        for (id, l) in &self.support {
            support.push((look(id)?, *l));
        }
        let mut query = Vec::with_capacity(self.query.len());
        for (id, l) in &self.query {
            query.push((look(id)?, *l));
        }
        Ok(Episode {
            support,
            query,
            spec: self.spec,
            seed_tag: self.seed_tag,
        })
    }
}

/// Write episodes as JSON-lines.
pub fn write_episodes<W: Write>(episodes: &[Episode], mut w: W) -> Result<(), EpisodeError> {
    for ep in episodes {
        let record = EpisodeRecord::from_episode(ep);
        serde_json::to_writer(&mut w, &record)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parse a JSON-lines episode file. Pure with respect to the filesystem.
pub fn parse_episode_records<R: BufRead>(r: R) -> Result<Vec<EpisodeRecord>, EpisodeError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| EpisodeError::BadRecord {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::path::PathBuf;

    /// In-memory index: `counts[class][case]` images per case.
    pub fn synthetic_index(counts: &[Vec<usize>]) -> DatasetIndex {
        let mut entries = Vec::new();
        let mut classes = Vec::new();
        for (ci, case_counts) in counts.iter().enumerate() {
            classes.push(format!("class{ci:02}"));
            for (ki, &n) in case_counts.iter().enumerate() {
                for img in 0..n {
                    entries.push(ImageEntry {
                        image_id: format!("c{ci:02}_k{ki:02}_i{img:03}"),
                        class_index: ci,
                        case_id: format!("class{ci:02}_case{ki:02}"),
                        path: PathBuf::from(format!("c{ci:02}_k{ki:02}_i{img:03}.png")),
                    });
                }
            }
        }
        DatasetIndex::new(entries, classes, PathBuf::from(".")).unwrap()
    }

    fn uniform_index(n_classes: usize, cases: usize, per_case: usize) -> DatasetIndex {
        synthetic_index(&vec![vec![per_case; cases]; n_classes])
    }

    #[test]
    fn sampled_episode_shape_matches_spec() {
        let index = uniform_index(8, 4, 10);
        let spec = EpisodeSpec {
            n_way: 5,
            k_shot: 5,
            q_queries_per_class: 15,
        };
        let eps = sample_episodes(&index, spec, 20, 7).unwrap();
        assert_eq!(eps.len(), 20);
        for ep in &eps {
            assert_eq!(ep.support.len(), 25);
            assert_eq!(ep.query.len(), 75);
            let classes: HashSet<usize> =
                ep.support.iter().map(|(e, _)| e.class_index).collect();
            assert_eq!(classes.len(), 5);
        }
    }

    #[test]
    fn local_labels_are_a_consistent_bijection() {
        let index = uniform_index(6, 3, 8);
        let spec = EpisodeSpec {
            n_way: 4,
            k_shot: 2,
            q_queries_per_class: 3,
        };
        for ep in sample_episodes(&index, spec, 10, 3).unwrap() {
            let mut map: HashMap<usize, usize> = HashMap::new();
            for (e, l) in ep.support.iter().chain(&ep.query) {
                assert!(*l < 4);
                let prev = map.insert(e.class_index, *l);
                if let Some(prev) = prev {
                    assert_eq!(prev, *l, "global class maps to two local labels");
                }
            }
            assert_eq!(map.len(), 4);
            let locals: HashSet<usize> = map.values().copied().collect();
            assert_eq!(locals.len(), 4);
        }
    }

    #[test]
    fn support_and_query_never_share_an_entry() {
        let index = uniform_index(5, 2, 9);
        let spec = EpisodeSpec {
            n_way: 3,
            k_shot: 4,
            q_queries_per_class: 5,
        };
        for ep in sample_episodes(&index, spec, 50, 99).unwrap() {
            let support: HashSet<_> = ep
                .support
                .iter()
                .map(|(e, _)| (e.class_index, e.case_id.clone(), e.image_id.clone()))
                .collect();
            for (e, _) in &ep.query {
                assert!(!support.contains(&(
                    e.class_index,
                    e.case_id.clone(),
                    e.image_id.clone()
                )));
            }
        }
    }

    #[test]
    fn spec_consuming_entire_class_is_rejected() {
        let index = uniform_index(3, 1, 6);
        let spec = EpisodeSpec {
            n_way: 3,
            k_shot: 6,
            q_queries_per_class: 1,
        };
        let err = sample_episodes(&index, spec, 1, 0).unwrap_err();
        assert!(matches!(err, EpisodeError::ClassTooSmall { .. }));
    }

    #[test]
    fn equal_seeds_give_equal_episode_sequences() {
        let index = uniform_index(6, 3, 10);
        let spec = EpisodeSpec {
            n_way: 5,
            k_shot: 5,
            q_queries_per_class: 15,
        };
        let a = sample_episodes(&index, spec, 25, 1234).unwrap();
        let b = sample_episodes(&index, spec, 25, 1234).unwrap();
        assert_eq!(a, b);
        let c = sample_episodes(&index, spec, 25, 1235).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn test_tasks_hold_out_whole_cases() {
        let index = uniform_index(3, 6, 12);
        let tasks = build_test_tasks(&index, 50, 5, 77).unwrap();
        assert_eq!(tasks.len(), 5);
        for task in &tasks {
            assert_eq!(task.support.len(), 150);
            // Query = one whole case per class.
            assert_eq!(task.query.len(), 36);
            let support_cases: HashSet<_> =
                task.support.iter().map(|(e, _)| e.case_id.clone()).collect();
            let query_cases: HashSet<_> =
                task.query.iter().map(|(e, _)| e.case_id.clone()).collect();
            assert_eq!(query_cases.len(), 3);
            assert!(support_cases.is_disjoint(&query_cases));
        }
    }

    #[test]
    fn test_tasks_use_distinct_query_cases_when_possible() {
        let index = uniform_index(3, 6, 12);
        let tasks = build_test_tasks(&index, 10, 5, 3).unwrap();
        for ci in 0..3 {
            let mut seen = HashSet::new();
            for task in &tasks {
                let case = task
                    .query
                    .iter()
                    .find(|(e, _)| e.class_index == ci)
                    .map(|(e, _)| e.case_id.clone())
                    .unwrap();
                assert!(seen.insert(case), "query case reused with 6 cases available");
            }
        }
    }

    #[test]
    fn single_case_class_is_rejected() {
        let index = synthetic_index(&[vec![10, 10], vec![20]]);
        let err = build_test_tasks(&index, 5, 5, 0).unwrap_err();
        assert!(matches!(err, EpisodeError::SingleCase { class } if class == "class01"));
    }

    #[test]
    fn undersized_support_pool_is_rejected() {
        // Class 0: two cases of 4; holding out either leaves 4 < 5.
        let index = synthetic_index(&[vec![4, 4], vec![10, 10]]);
        let err = build_test_tasks(&index, 5, 2, 0).unwrap_err();
        assert!(matches!(err, EpisodeError::SupportPoolTooSmall { .. }));
    }

    #[test]
    fn jsonl_round_trip_reproduces_episodes() {
        let index = uniform_index(5, 3, 8);
        let spec = EpisodeSpec {
            n_way: 3,
            k_shot: 2,
            q_queries_per_class: 4,
        };
        let eps = sample_episodes(&index, spec, 6, 5).unwrap();
        let mut buf = Vec::new();
        write_episodes(&eps, &mut buf).unwrap();
        let records = parse_episode_records(buf.as_slice()).unwrap();
        assert_eq!(records.len(), 6);
        let restored: Vec<Episode> = records
            .iter()
            .map(|r| r.resolve(&index).unwrap())
            .collect();
        assert_eq!(eps, restored);
    }

    #[test]
    fn bad_record_reports_line() {
        let text = "{\"spec\":{\"n_way\":2,\"k_shot\":1,\"q_queries_per_class\":1},\"seed_tag\":0,\"support\":[],\"query\":[]}\nnot json\n";
        let err = parse_episode_records(text.as_bytes()).unwrap_err();
        assert!(matches!(err, EpisodeError::BadRecord { line: 2, .. }));
    }
}
