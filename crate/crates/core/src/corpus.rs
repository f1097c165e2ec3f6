//! Entity-annotated multi-caption corpora.
//!
//! Annotation files are UTF-8 lines `<image_id>\t<caption_index>\t<text>`,
//! where entity mentions in the text are marked up as
//! `[/EN#<chain_id>/<type>(/<type>)* <phrase>]`. A regions sidecar of lines
//! `<image_id>\t<chain_id>\t<x1>,<y1>,<x2>,<y2>` says which coreference
//! chains have an image region; without a sidecar every entity is assumed
//! to have one.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One caption line, kept both with markup and as plain tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCaption {
    pub image_id: String,
    pub caption_index: u32,
    /// Original text field, markup included.
    pub markup: String,
    /// Whitespace tokens with markup stripped.
    pub tokens: Vec<String>,
}

/// One noun-phrase occurrence in one caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub image_id: String,
    pub caption_index: u32,
    /// Gold coreference chain id.
    pub chain_id: u64,
    /// Type labels; the first one is the primary type.
    pub types: Vec<String>,
    pub surface_tokens: Vec<String>,
    /// Case-folded surface tokens minus stop words (surface form kept when
    /// removal would empty the phrase). Empty until [`normalize_entity`] runs.
    pub normalized_tokens: Vec<String>,
    pub has_region: bool,
    /// Token range in the markup-stripped caption, end exclusive.
    pub span: (usize, usize),
}

impl Entity {
    /// Stable within-image key: `<caption_index>:<span_start>:<span_end>`.
    pub fn key(&self) -> String {
        format!("{}:{}:{}", self.caption_index, self.span.0, self.span.1)
    }

    pub fn primary_type(&self) -> &str {
        &self.types[0]
    }

    /// Normalized tokens joined by a single space.
    pub fn normalized_form(&self) -> String {
        self.normalized_tokens.join(" ")
    }

    pub fn is_single_token(&self) -> bool {
        self.normalized_tokens.len() == 1
    }
}

/// Fixed lowercase stop-word list.
#[derive(Debug, Clone)]
pub struct StopWordList {
    words: BTreeSet<String>,
}

impl StopWordList {
    /// The versioned list bundled with the crate.
    pub fn bundled() -> Self {
        let words = include_str!("../assets/stopwords.txt")
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect();
        StopWordList { words }
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut words = BTreeSet::new();
        for line in reader.lines() {
            let line = line?;
            let w = line.trim();
            if !w.is_empty() {
                words.insert(w.to_lowercase());
            }
        }
        if words.is_empty() {
            return Err(Error::invalid("stop-word list is empty"));
        }
        Ok(StopWordList { words })
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Gold partition of one image's evaluable entities, keyed by
/// (chain id, primary type).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldClustering {
    pub image_id: String,
    /// Disjoint index lists covering 0..n over the evaluable entity slice.
    pub clusters: Vec<Vec<usize>>,
}

impl GoldClustering {
    /// Cluster label per entity index.
    pub fn labels(&self) -> Vec<usize> {
        let n: usize = self.clusters.iter().map(Vec::len).sum();
        let mut labels = vec![0usize; n];
        for (c, members) in self.clusters.iter().enumerate() {
            for &m in members {
                labels[m] = c;
            }
        }
        labels
    }

    pub fn n_entities(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    /// True if entities `i` and `j` share a cluster.
    pub fn same_cluster(&self, i: usize, j: usize) -> bool {
        let labels = self.labels();
        labels[i] == labels[j]
    }
}

/// Parse annotation lines into captions and entities.
///
/// Line numbers in errors are 1-based over the reader's lines.
pub fn parse_annotations<R: BufRead>(reader: R) -> Result<(Vec<RawCaption>, Vec<Entity>)> {
    let mut captions = Vec::new();
    let mut entities = Vec::new();
    let mut seen: HashSet<(String, u32)> = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let image_id = fields
            .next()
            .ok_or_else(|| Error::parse(lineno, "missing image id"))?
            .to_string();
        let caption_index: u32 = fields
            .next()
            .ok_or_else(|| Error::parse(lineno, "missing caption index"))?
            .parse()
            .map_err(|_| Error::parse(lineno, "caption index is not an integer"))?;
        let text = fields
            .next()
            .ok_or_else(|| Error::parse(lineno, "missing caption text"))?;

        if !seen.insert((image_id.clone(), caption_index)) {
            return Err(Error::parse(
                lineno,
                format!("duplicate caption index {caption_index} for image {image_id}"),
            ));
        }

        let (tokens, spans) = parse_caption_text(text, lineno)?;
        for span in spans {
            entities.push(Entity {
                image_id: image_id.clone(),
                caption_index,
                chain_id: span.chain_id,
                types: span.types,
                surface_tokens: tokens[span.start..span.end].to_vec(),
                normalized_tokens: Vec::new(),
                has_region: true,
                span: (span.start, span.end),
            });
        }
        captions.push(RawCaption {
            image_id,
            caption_index,
            markup: text.to_string(),
            tokens,
        });
    }
    Ok((captions, entities))
}

struct ParsedSpan {
    chain_id: u64,
    types: Vec<String>,
    start: usize,
    end: usize,
}

/// Tokenize one caption, extracting entity markup spans.
fn parse_caption_text(text: &str, lineno: usize) -> Result<(Vec<String>, Vec<ParsedSpan>)> {
    let mut tokens: Vec<String> = Vec::new();
    let mut spans: Vec<ParsedSpan> = Vec::new();
    // (chain_id, types, start) of the currently open bracket
    let mut open: Option<(u64, Vec<String>, usize)> = None;

    for raw in text.split_whitespace() {
        let mut tok = raw;
        if let Some(header) = tok.strip_prefix('[') {
            if open.is_some() {
                return Err(Error::parse(lineno, "nested '[' in entity markup"));
            }
            let (chain_id, types) = parse_entity_header(header, lineno)?;
            open = Some((chain_id, types, tokens.len()));
            continue;
        }
        let mut closed = false;
        if let Some(stripped) = tok.strip_suffix(']') {
            if open.is_none() {
                return Err(Error::parse(lineno, "']' without matching '['"));
            }
            tok = stripped;
            closed = true;
        }
        if !tok.is_empty() {
            tokens.push(tok.to_string());
        } else if !closed {
            continue;
        }
        if closed {
            let (chain_id, types, start) = open.take().unwrap();
            let end = tokens.len();
            if end == start {
                return Err(Error::parse(lineno, "entity markup has an empty phrase"));
            }
            spans.push(ParsedSpan {
                chain_id,
                types,
                start,
                end,
            });
        }
    }
    if open.is_some() {
        return Err(Error::parse(lineno, "unclosed '[' in entity markup"));
    }
    Ok((tokens, spans))
}

/// Parse `/EN#<chain_id>/<type>(/<type>)*` (the `[` is already stripped).
fn parse_entity_header(header: &str, lineno: usize) -> Result<(u64, Vec<String>)> {
    let rest = header
        .strip_prefix("/EN#")
        .ok_or_else(|| Error::parse(lineno, format!("malformed entity header '[{header}'")))?;
    let mut parts = rest.split('/');
    let chain_str = parts
        .next()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::parse(lineno, "missing chain id in entity header"))?;
    let chain_id: u64 = chain_str
        .parse()
        .map_err(|_| Error::parse(lineno, format!("chain id '{chain_str}' is not an integer")))?;
    let types: Vec<String> = parts
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if types.is_empty() {
        return Err(Error::parse(lineno, "entity header has no type label"));
    }
    Ok((chain_id, types))
}

/// Strip entity markup from a caption, keeping the plain tokens.
pub fn strip_markup(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter(|t| !t.starts_with('['))
        .map(|t| t.strip_suffix(']').unwrap_or(t))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Case-fold and drop stop words; fall back to the case-folded surface form
/// when every token is a stop word.
pub fn normalize_entity(e: &Entity, stops: &StopWordList) -> Entity {
    let folded: Vec<String> = e.surface_tokens.iter().map(|t| t.to_lowercase()).collect();
    let kept: Vec<String> = folded
        .iter()
        .filter(|t| !stops.contains(t))
        .cloned()
        .collect();
    let normalized_tokens = if kept.is_empty() { folded } else { kept };
    Entity {
        normalized_tokens,
        ..e.clone()
    }
}

/// Result of collapsing same-form entities within an image.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    /// Surviving representatives, ordered by (caption_index, span start).
    pub entities: Vec<Entity>,
    /// Original entity key -> representative entity key.
    pub mapping: BTreeMap<String, String>,
}

/// Collapse entities with identical normalized form to one representative:
/// lowest caption index, then leftmost span.
pub fn merge_duplicates(entities: &[Entity]) -> MergeOutcome {
    let mut order: Vec<usize> = (0..entities.len()).collect();
    order.sort_by_key(|&i| (entities[i].caption_index, entities[i].span.0, entities[i].span.1));

    let mut rep_by_form: HashMap<String, usize> = HashMap::new();
    let mut survivors: Vec<usize> = Vec::new();
    let mut mapping = BTreeMap::new();
    for &i in &order {
        let form = entities[i].normalized_form();
        let rep = *rep_by_form.entry(form).or_insert_with(|| {
            survivors.push(i);
            i
        });
        mapping.insert(entities[i].key(), entities[rep].key());
    }
    MergeOutcome {
        entities: survivors.iter().map(|&i| entities[i].clone()).collect(),
        mapping,
    }
}

/// Drop entities typed `notvisual` or lacking an image region.
pub fn filter_evaluable(entities: &[Entity]) -> Vec<Entity> {
    entities
        .iter()
        .filter(|e| e.has_region && !e.types.iter().any(|t| t == "notvisual"))
        .cloned()
        .collect()
}

/// Partition evaluable entities of one image by (chain id, primary type).
pub fn build_gold_clusters(image_id: &str, entities: &[Entity]) -> GoldClustering {
    let mut by_key: BTreeMap<(u64, String), Vec<usize>> = BTreeMap::new();
    for (i, e) in entities.iter().enumerate() {
        by_key
            .entry((e.chain_id, e.primary_type().to_string()))
            .or_default()
            .push(i);
    }
    GoldClustering {
        image_id: image_id.to_string(),
        clusters: by_key.into_values().collect(),
    }
}

/// Chains that have at least one region, per image.
#[derive(Debug, Clone, Default)]
pub struct RegionSet {
    chains: HashSet<(String, u64)>,
}

impl RegionSet {
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut chains = HashSet::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(lineno, "expected image, chain and box fields"));
            }
            let chain: u64 = fields[1]
                .parse()
                .map_err(|_| Error::parse(lineno, "chain id is not an integer"))?;
            let coords: Vec<&str> = fields[2].split(',').collect();
            if coords.len() != 4 || coords.iter().any(|c| c.parse::<f64>().is_err()) {
                return Err(Error::parse(lineno, "box is not x1,y1,x2,y2"));
            }
            chains.insert((fields[0].to_string(), chain));
        }
        Ok(RegionSet { chains })
    }

    pub fn has_region(&self, image_id: &str, chain_id: u64) -> bool {
        self.chains.contains(&(image_id.to_string(), chain_id))
    }
}

/// Set `has_region` from an optional sidecar; no sidecar means every entity
/// keeps a region.
pub fn apply_regions(entities: &mut [Entity], regions: Option<&RegionSet>) {
    if let Some(set) = regions {
        for e in entities.iter_mut() {
            e.has_region = set.has_region(&e.image_id, e.chain_id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse_one(text: &str) -> (Vec<String>, Vec<Entity>) {
        let line = format!("img1\t0\t{text}");
        let (caps, ents) = parse_annotations(line.as_bytes()).unwrap();
        (caps[0].tokens.clone(), ents)
    }

    #[test]
    fn parses_single_entity_markup() {
        let (_, ents) = parse_one("[/EN#19026/clothing a red jersey] on a player");
        assert_eq!(ents.len(), 1);
        assert_eq!(ents[0].chain_id, 19026);
        assert_eq!(ents[0].types, vec!["clothing"]);
        assert_eq!(ents[0].surface_tokens, vec!["a", "red", "jersey"]);
        assert_eq!(ents[0].span, (0, 3));
    }

    #[test]
    fn caption_without_markup_yields_no_entities() {
        let (tokens, ents) = parse_one("a plain caption with no markup");
        assert!(ents.is_empty());
        assert_eq!(tokens.len(), 6);
    }

    #[test]
    fn multi_type_tag_keeps_primary_first() {
        let (_, ents) = parse_one("[/EN#7/people/male the pitcher] throws");
        assert_eq!(ents[0].types, vec!["people", "male"]);
        assert_eq!(ents[0].primary_type(), "people");
    }

    #[test]
    fn rejects_malformed_markup() {
        for bad in [
            "[/EN#19026/clothing a red jersey",  // unclosed
            "a red jersey]",                     // stray close
            "[/EN#x/clothing a red jersey]",     // non-integer chain
            "[/EN#5 phrase]",                    // no type
            "[/EN#5/clothing ]",                 // empty phrase
            "[EN#5/clothing a hat]",             // missing slash
            "[/EN#1/a [/EN#2/b nested] thing]",  // nested
        ] {
            let line = format!("img\t0\t{bad}");
            let err = parse_annotations(line.as_bytes()).unwrap_err();
            assert!(
                matches!(err, Error::Parse { line: 1, .. }),
                "expected parse error for {bad:?}, got {err:?}"
            );
        }
    }

    #[test]
    fn rejects_duplicate_caption_index() {
        let data = "img\t0\tone cat\nimg\t0\tanother cat\n";
        assert!(parse_annotations(data.as_bytes()).is_err());
    }

    #[test]
    fn stripping_markup_matches_parsed_tokens() {
        let text = "[/EN#1/people a man] wearing [/EN#2/clothing a red jersey] smiles";
        let (tokens, _) = parse_one(text);
        assert_eq!(tokens, strip_markup(text));
        assert_eq!(
            tokens,
            vec!["a", "man", "wearing", "a", "red", "jersey", "smiles"]
        );
    }

    #[test]
    fn normalization_removes_stop_words() {
        let stops = StopWordList::bundled();
        let (_, ents) = parse_one("[/EN#1/clothing a red jersey]");
        let e = normalize_entity(&ents[0], &stops);
        assert_eq!(e.normalized_tokens, vec!["red", "jersey"]);
    }

    #[test]
    fn normalization_case_folds() {
        let stops = StopWordList::bundled();
        let (_, ents) = parse_one("[/EN#1/people Man]");
        let e = normalize_entity(&ents[0], &stops);
        assert_eq!(e.normalized_tokens, vec!["man"]);
    }

    #[test]
    fn normalization_falls_back_on_all_stop_words() {
        let stops = StopWordList::bundled();
        let (_, ents) = parse_one("[/EN#1/other The]");
        let e = normalize_entity(&ents[0], &stops);
        assert_eq!(e.normalized_tokens, vec!["the"]);
    }

    #[test]
    fn bundled_stop_words_cover_articles_and_prepositions() {
        let stops = StopWordList::bundled();
        for w in ["a", "an", "the", "of", "in", "on"] {
            assert!(stops.contains(w), "missing stop word {w}");
        }
    }

    fn toy_entities() -> Vec<Entity> {
        let data = "img\t0\t[/EN#1/people a man] holds [/EN#3/animals a dog]\n\
                    img\t1\t[/EN#1/people the man] pets [/EN#3/animals a dog]\n\
                    img\t2\t[/EN#2/people a woman] and [/EN#3/animals a dog]\n";
        let (_, ents) = parse_annotations(data.as_bytes()).unwrap();
        let stops = StopWordList::bundled();
        ents.iter().map(|e| normalize_entity(e, &stops)).collect()
    }

    #[test]
    fn merge_collapses_same_form() {
        let merged = merge_duplicates(&toy_entities());
        let forms: Vec<String> = merged.entities.iter().map(|e| e.normalized_form()).collect();
        assert_eq!(forms, vec!["man", "dog", "woman"]);
        // "the man" in caption 1 maps to "a man" in caption 0
        assert_eq!(merged.mapping.get("1:0:2"), Some(&"0:0:2".to_string()));
    }

    #[test]
    fn merge_keeps_distinct_forms() {
        let ents = toy_entities();
        let distinct: Vec<Entity> = ents
            .iter()
            .filter(|e| e.caption_index != 1)
            .cloned()
            .collect();
        let kept_dog: Vec<&Entity> = distinct.iter().filter(|e| e.chain_id == 3).collect();
        assert_eq!(kept_dog.len(), 2); // "a dog" twice, still merges
        let merged = merge_duplicates(&distinct);
        assert_eq!(merged.entities.len(), 3);
    }

    #[test]
    fn merge_tie_break_prefers_lowest_caption_then_leftmost() {
        let data = "img\t0\tsees [/EN#3/animals a dog]\n\
                    img\t2\t[/EN#3/animals the dog] runs\n\
                    img\t4\tchases [/EN#3/animals that dog]\n";
        let (_, ents) = parse_annotations(data.as_bytes()).unwrap();
        let stops = StopWordList::bundled();
        let norm: Vec<Entity> = ents.iter().map(|e| normalize_entity(e, &stops)).collect();
        let merged = merge_duplicates(&norm);
        assert_eq!(merged.entities.len(), 1);
        assert_eq!(merged.entities[0].caption_index, 0);
    }

    #[test]
    fn filter_drops_notvisual_and_regionless() {
        let data = "img\t0\t[/EN#1/notvisual the batter] swings at [/EN#2/other a ball]\n";
        let (_, mut ents) = parse_annotations(data.as_bytes()).unwrap();
        ents[1].has_region = false;
        let kept = filter_evaluable(&ents);
        assert!(kept.is_empty());
        ents[1].has_region = true;
        let kept = filter_evaluable(&ents);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].chain_id, 2);
    }

    #[test]
    fn filter_then_merge_is_idempotent() {
        let ents = toy_entities();
        let once = filter_evaluable(&merge_duplicates(&ents).entities);
        let twice = filter_evaluable(&merge_duplicates(&once).entities);
        assert_eq!(once, twice);
    }

    #[test]
    fn gold_clusters_group_by_chain_and_type() {
        let data = "img\t0\t[/EN#19026/clothing a red jersey]\n\
                    img\t1\t[/EN#19026/clothing a red shirt]\n\
                    img\t2\t[/EN#19026/clothing a red uniform shirt]\n";
        let (_, ents) = parse_annotations(data.as_bytes()).unwrap();
        let gold = build_gold_clusters("img", &ents);
        assert_eq!(gold.clusters.len(), 1);
        assert_eq!(gold.clusters[0].len(), 3);
    }

    #[test]
    fn gold_clusters_split_same_chain_different_type() {
        let data = "img\t0\t[/EN#5/people a rider]\nimg\t1\t[/EN#5/vehicles a bike]\n";
        let (_, ents) = parse_annotations(data.as_bytes()).unwrap();
        let gold = build_gold_clusters("img", &ents);
        assert_eq!(gold.clusters.len(), 2);
    }

    #[test]
    fn gold_clusters_all_singletons_for_distinct_chains() {
        let data = "img\t0\t[/EN#1/people a man] and [/EN#2/animals a dog]\n";
        let (_, ents) = parse_annotations(data.as_bytes()).unwrap();
        let gold = build_gold_clusters("img", &ents);
        assert_eq!(gold.clusters.len(), 2);
        assert!(gold.clusters.iter().all(|c| c.len() == 1));
    }

    #[test]
    fn empty_entity_list_gives_empty_clustering() {
        let gold = build_gold_clusters("img", &[]);
        assert!(gold.clusters.is_empty());
        assert_eq!(gold.n_entities(), 0);
    }

    #[test]
    fn gold_clusters_partition_entities() {
        let ents = filter_evaluable(&merge_duplicates(&toy_entities()).entities);
        let gold = build_gold_clusters("img", &ents);
        let mut seen = HashSet::new();
        for c in &gold.clusters {
            assert!(!c.is_empty());
            for &m in c {
                assert!(seen.insert(m), "index {m} in two clusters");
            }
        }
        assert_eq!(seen.len(), ents.len());
    }

    #[test]
    fn regions_sidecar_controls_has_region() {
        let sidecar = "img\t1\t0,0,10,10\n";
        let set = RegionSet::from_reader(sidecar.as_bytes()).unwrap();
        let data = "img\t0\t[/EN#1/people a man] and [/EN#2/animals a dog]\n";
        let (_, mut ents) = parse_annotations(data.as_bytes()).unwrap();
        apply_regions(&mut ents, Some(&set));
        assert!(ents[0].has_region);
        assert!(!ents[1].has_region);
        // no sidecar: everything keeps a region
        let (_, mut ents) = parse_annotations(data.as_bytes()).unwrap();
        apply_regions(&mut ents, None);
        assert!(ents.iter().all(|e| e.has_region));
    }

    proptest! {
        /// Markup-stripped parse output always matches plain tokenization,
        /// and normalization never returns an empty token list.
        #[test]
        fn parse_and_normalize_properties(
            phrases in proptest::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,2}", 1..4),
            fillers in proptest::collection::vec("[a-z]{1,6}", 0..3),
        ) {
            let mut text = String::new();
            for (i, p) in phrases.iter().enumerate() {
                if i < fillers.len() {
                    text.push_str(&fillers[i]);
                    text.push(' ');
                }
                text.push_str(&format!("[/EN#{}/misc {}] ", i + 1, p));
            }
            let line = format!("img\t0\t{}", text.trim());
            let (caps, ents) = parse_annotations(line.as_bytes()).unwrap();
            prop_assert_eq!(&caps[0].tokens, &strip_markup(&text));
            let stops = StopWordList::bundled();
            for e in &ents {
                let n = normalize_entity(e, &stops);
                prop_assert!(!n.normalized_tokens.is_empty());
            }
        }
    }
}
