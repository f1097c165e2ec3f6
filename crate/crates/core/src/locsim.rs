//! Phrase-localization similarity from externally produced scores.
//!
//! Each entity comes with a ranked list of candidate regions. Scores are
//! truncated to the top C candidates, normalized into per-entity
//! localization probabilities, and the similarity of two entities is the
//! probability mass they put on shared regions.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use crate::error::{Error, Result};

/// Default candidate cap.
pub const DEFAULT_TOP_C: usize = 30;

/// Entity key within its image: `(image_id, entity_key)`.
pub type EntityRef = (String, String);

#[derive(Debug, Clone, Default)]
pub struct LocalizationTable {
    /// Per entity: region id -> localization probability, over the kept
    /// top-C candidates.
    probs: BTreeMap<EntityRef, BTreeMap<String, f64>>,
}

impl LocalizationTable {
    /// Load TSV lines `<image_id>\t<entity_key>\t<region_id>\t<score>`.
    ///
    /// Candidates are truncated to the top `c` by score (ties broken toward
    /// the lexicographically smaller region id) and normalized to
    /// probabilities. A populated `known` set makes unknown entity keys a
    /// load error.
    pub fn from_reader<R: BufRead>(
        reader: R,
        c: usize,
        known: Option<&BTreeSet<EntityRef>>,
    ) -> Result<Self> {
        if c == 0 {
            return Err(Error::invalid("candidate cap must be positive"));
        }
        let mut raw: BTreeMap<EntityRef, Vec<(String, f64)>> = BTreeMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::parse(lineno, "expected 4 tab-separated fields"));
            }
            let score: f64 = fields[3]
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad score '{}'", fields[3])))?;
            if score < 0.0 {
                return Err(Error::parse(lineno, format!("negative score {score}")));
            }
            let key = (fields[0].to_string(), fields[1].to_string());
            if let Some(known) = known {
                if !known.contains(&key) {
                    return Err(Error::parse(
                        lineno,
                        format!("unknown entity key {}/{}", key.0, key.1),
                    ));
                }
            }
            raw.entry(key).or_default().push((fields[2].to_string(), score));
        }

        let mut probs = BTreeMap::new();
        for (key, mut candidates) in raw {
            candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            candidates.truncate(c);
            let total: f64 = candidates.iter().map(|(_, s)| s).sum();
            let map: BTreeMap<String, f64> = if total > 0.0 {
                candidates
                    .into_iter()
                    .map(|(r, s)| (r, s / total))
                    .collect()
            } else {
                // all-zero scores: uniform over the kept candidates
                let u = 1.0 / candidates.len() as f64;
                candidates.into_iter().map(|(r, _)| (r, u)).collect()
            };
            probs.insert(key, map);
        }
        Ok(LocalizationTable { probs })
    }

    pub fn contains(&self, image_id: &str, entity_key: &str) -> bool {
        self.probs
            .contains_key(&(image_id.to_string(), entity_key.to_string()))
    }

    pub fn probabilities(&self, image_id: &str, entity_key: &str) -> Option<&BTreeMap<String, f64>> {
        self.probs
            .get(&(image_id.to_string(), entity_key.to_string()))
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// s(i, j) = sum over shared regions of p(i|r) * p(j|r); zero with a
/// warning when either entity is absent from the table.
pub fn localization_similarity(
    image_id: &str,
    key_i: &str,
    key_j: &str,
    table: &LocalizationTable,
) -> f64 {
    let (Some(pi), Some(pj)) = (
        table.probabilities(image_id, key_i),
        table.probabilities(image_id, key_j),
    ) else {
        log::warn!("localization scores missing for {image_id}:{key_i} or {image_id}:{key_j}");
        return 0.0;
    };
    let (small, large) = if pi.len() <= pj.len() { (pi, pj) } else { (pj, pi) };
    small
        .iter()
        .filter_map(|(r, &p)| large.get(r).map(|&q| p * q))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn load(tsv: &str, c: usize) -> LocalizationTable {
        LocalizationTable::from_reader(tsv.as_bytes(), c, None).unwrap()
    }

    #[test]
    fn equal_scores_normalize_evenly() {
        let t = load("img\te1\tr1\t2\nimg\te1\tr2\t2\n", 30);
        let p = t.probabilities("img", "e1").unwrap();
        assert_abs_diff_eq!(p["r1"], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p["r2"], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.values().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn truncates_to_top_c() {
        let mut tsv = String::new();
        for r in 0..40 {
            tsv.push_str(&format!("img\te1\tr{r:02}\t{}\n", 40 - r));
        }
        let t = load(&tsv, 30);
        let p = t.probabilities("img", "e1").unwrap();
        assert_eq!(p.len(), 30);
        // highest scores survive
        assert!(p.contains_key("r00"));
        assert!(!p.contains_key("r39"));
        assert_abs_diff_eq!(p.values().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn single_candidate_gets_probability_one() {
        let t = load("img\te1\tr7\t0.3\n", 30);
        assert_abs_diff_eq!(t.probabilities("img", "e1").unwrap()["r7"], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn negative_score_is_a_load_error() {
        let err = LocalizationTable::from_reader("img\te1\tr1\t-1\n".as_bytes(), 30, None)
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn unknown_entity_key_is_a_load_error() {
        let known: BTreeSet<EntityRef> = [("img".to_string(), "e1".to_string())].into();
        assert!(LocalizationTable::from_reader(
            "img\te1\tr1\t1\n".as_bytes(),
            30,
            Some(&known)
        )
        .is_ok());
        let err = LocalizationTable::from_reader(
            "img\teX\tr1\t1\n".as_bytes(),
            30,
            Some(&known),
        )
        .unwrap_err();
        assert!(err.to_string().contains("unknown entity key"));
    }

    #[test]
    fn point_masses_on_same_region_score_one() {
        let t = load("img\te1\tr1\t5\nimg\te2\tr1\t9\n", 30);
        assert_abs_diff_eq!(
            localization_similarity("img", "e1", "e2", &t),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn disjoint_candidates_score_zero() {
        let t = load("img\te1\tr1\t5\nimg\te2\tr2\t9\n", 30);
        assert_eq!(localization_similarity("img", "e1", "e2", &t), 0.0);
    }

    #[test]
    fn mixed_distribution_example() {
        let t = load(
            "img\te1\tr1\t1\nimg\te1\tr2\t1\nimg\te2\tr1\t1\nimg\te2\tr2\t3\n",
            30,
        );
        // p_i = {0.5, 0.5}, p_j = {0.25, 0.75} -> 0.5*0.25 + 0.5*0.75 = 0.5
        assert_abs_diff_eq!(
            localization_similarity("img", "e1", "e2", &t),
            0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn absent_entity_scores_zero() {
        let t = load("img\te1\tr1\t5\n", 30);
        assert_eq!(localization_similarity("img", "e1", "missing", &t), 0.0);
    }

    #[test]
    fn similarity_is_symmetric_bounded_with_self_bound() {
        let t = load(
            "img\te1\tr1\t2\nimg\te1\tr2\t1\nimg\te2\tr2\t4\nimg\te2\tr3\t4\n",
            30,
        );
        let ij = localization_similarity("img", "e1", "e2", &t);
        let ji = localization_similarity("img", "e2", "e1", &t);
        assert_abs_diff_eq!(ij, ji, epsilon = 1e-12);
        assert!((0.0..=1.0).contains(&ij));
        // s(i,i) = sum p^2 <= 1, equality only for a point mass
        let self_sim = localization_similarity("img", "e1", "e1", &t);
        assert!(self_sim < 1.0);
        let point = load("img\te3\tr1\t1\n", 30);
        assert_abs_diff_eq!(
            localization_similarity("img", "e3", "e3", &point),
            1.0,
            epsilon = 1e-12
        );
    }
}
