//! Synthetic toy datasets with planted paraphrase clusters.
//!
//! Each image shows a few concepts; every caption mentions a concept with
//! one of several surface forms ("a red jersey", "the red top"). Word
//! vectors place each concept's content tokens around an orthogonal
//! centroid, localization scores put most mass on the concept's gold
//! region, feature maps are random grids, and region vectors are noisy
//! linear images of the entity vectors. Everything is deterministic in the
//! seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor;

/// One concept: a type label plus the content part of each surface form
/// (stop words excluded). Content vocabularies are disjoint across
/// concepts.
struct Concept {
    type_label: &'static str,
    contents: &'static [&'static str],
}

const CONCEPTS: &[Concept] = &[
    Concept {
        type_label: "people",
        contents: &["man", "guy", "person", "fellow", "gentleman"],
    },
    Concept {
        type_label: "people",
        contents: &["woman", "lady", "girl", "female"],
    },
    Concept {
        type_label: "animals",
        contents: &["dog", "puppy", "hound", "pooch"],
    },
    Concept {
        type_label: "animals",
        contents: &["cat", "kitten", "feline"],
    },
    Concept {
        type_label: "clothing",
        contents: &["red jersey", "red shirt", "red top", "red uniform"],
    },
    Concept {
        type_label: "clothing",
        contents: &["blue hat", "blue cap", "blue bonnet"],
    },
    Concept {
        type_label: "vehicles",
        contents: &["steel bike", "steel bicycle", "steel cycle"],
    },
    Concept {
        type_label: "vehicles",
        contents: &["green car", "green sedan", "green wagon"],
    },
    Concept {
        type_label: "other",
        contents: &["ball", "baseball", "beachball"],
    },
    Concept {
        type_label: "scene",
        contents: &["tall tree", "tall oak", "tall pine"],
    },
];

const VERBS: &[&str] = &[
    "rides", "holds", "wears", "watches", "carries", "sees", "chases", "throws", "walks", "kicks",
];

/// Connectors drawn from the stop-word list so they vanish from the
/// alignment corpus.
const CONNECTORS: &[&str] = &["near", "beside", "under", "over", "behind", "with"];

const DETERMINERS: &[&str] = &["a", "the", "this", "that"];

const NOTVISUAL_FORMS: &[&str] = &["game", "match", "party"];

#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub images: usize,
    pub captions_per_image: usize,
    /// Word vector dimension.
    pub word_dim: usize,
    /// Feature maps are grid x grid positions.
    pub feature_grid: usize,
    pub feature_channels: usize,
    /// Region vector dimension.
    pub region_dim: usize,
    /// Fractions of images for train and validation; the rest is test.
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            images: 20,
            captions_per_image: 5,
            word_dim: 16,
            feature_grid: 4,
            feature_channels: 8,
            region_dim: 12,
            train_fraction: 0.6,
            validation_fraction: 0.2,
            seed: 7,
        }
    }
}

/// Generated dataset, in memory; [`ToyDataset::write_to`] lays it out on
/// disk in the pipeline's file formats.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub corpus_lines: Vec<String>,
    pub regions_lines: Vec<String>,
    pub word_vector_lines: Vec<String>,
    pub locscore_lines: Vec<String>,
    /// (image_id, grid*grid x channels map).
    pub feature_maps: Vec<(String, Array2<f64>)>,
    /// Region vectors, one row per paired train entity.
    pub region_vectors: Array2<f64>,
    /// `<image_id>\t<entity_key>\t<row>` pairing lines for region vectors.
    pub region_pairing_lines: Vec<String>,
    pub train_images: Vec<String>,
    pub validation_images: Vec<String>,
    pub test_images: Vec<String>,
}

pub fn generate(cfg: &ToyConfig) -> Result<ToyDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // near-orthogonal concept centroids
    let centroids = orthogonal_centroids(CONCEPTS.len(), cfg.word_dim, &mut rng);

    // word vectors: content tokens near their concept centroid, filler
    // vocabulary small and random
    let mut word_vector_lines = Vec::new();
    let mut seen_tokens = std::collections::BTreeSet::new();
    for (ci, concept) in CONCEPTS.iter().enumerate() {
        for form in concept.contents {
            for tok in form.split_whitespace() {
                if seen_tokens.insert(tok.to_string()) {
                    let mut line = tok.to_string();
                    for d in 0..cfg.word_dim {
                        let v = 4.0 * centroids[(ci, d)] + 0.08 * rng.gen_range(-1.0..1.0);
                        write!(line, " {v:.6}").unwrap();
                    }
                    word_vector_lines.push(line);
                }
            }
        }
    }
    for tok in VERBS
        .iter()
        .chain(CONNECTORS)
        .chain(DETERMINERS)
        .chain(NOTVISUAL_FORMS)
    {
        if seen_tokens.insert(tok.to_string()) {
            let mut line = tok.to_string();
            for _ in 0..cfg.word_dim {
                let v = 0.2 * rng.gen_range(-1.0f64..1.0);
                write!(line, " {v:.6}").unwrap();
            }
            word_vector_lines.push(line);
        }
    }

    let mut corpus_lines = Vec::new();
    let mut regions_lines = Vec::new();
    let mut locscore_lines = Vec::new();
    let mut feature_maps = Vec::new();
    let mut entity_records: Vec<(String, String, usize)> = Vec::new(); // image, key, concept

    for img in 0..cfg.images {
        let image_id = format!("toy{img:03}");
        // 2 or 3 distinct concepts per image
        let n_concepts = 2 + rng.gen_range(0..2usize);
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < n_concepts {
            let c = rng.gen_range(0..CONCEPTS.len());
            if !picked.contains(&c) {
                picked.push(c);
            }
        }
        // some images carry a notvisual mention; some have an entity whose
        // chain is left out of the regions sidecar
        let add_notvisual = rng.gen_bool(0.2);
        let drop_region_slot = if rng.gen_bool(0.15) {
            Some(rng.gen_range(0..picked.len()))
        } else {
            None
        };

        for slot in 0..picked.len() {
            let chain = (img * 10 + slot + 1) as u64;
            if drop_region_slot != Some(slot) {
                regions_lines.push(format!(
                    "{image_id}\t{chain}\t{},{},{},{}",
                    slot * 10,
                    slot * 10,
                    slot * 10 + 9,
                    slot * 10 + 9
                ));
            }
        }

        let mut image_caption_lines = Vec::new();
        for cap in 0..cfg.captions_per_image {
            let mut text = String::new();
            for (slot, &ci) in picked.iter().enumerate() {
                let concept = &CONCEPTS[ci];
                let chain = (img * 10 + slot + 1) as u64;
                let det = DETERMINERS[(cap + slot) % DETERMINERS.len()];
                let content = concept.contents[(img + 2 * cap + slot) % concept.contents.len()];
                if slot > 0 {
                    let joint = if slot == 1 {
                        VERBS[(3 * img + cap) % VERBS.len()]
                    } else {
                        CONNECTORS[(img + cap) % CONNECTORS.len()]
                    };
                    write!(text, " {joint}").unwrap();
                }
                write!(
                    text,
                    "{}[/EN#{chain}/{} {det} {content}]",
                    if slot == 0 { "" } else { " " },
                    concept.type_label
                )
                .unwrap();
            }
            if add_notvisual && cap == 0 {
                let nv = NOTVISUAL_FORMS[img % NOTVISUAL_FORMS.len()];
                let chain = (img * 10 + 9) as u64;
                write!(text, " during [/EN#{chain}/notvisual the {nv}]").unwrap();
            }
            image_caption_lines.push(format!("{image_id}\t{cap}\t{text}"));
        }

        // parse our own lines back so the entity keys match the corpus
        // module's spans exactly
        let joined: String = image_caption_lines
            .iter()
            .map(|l| format!("{l}\n"))
            .collect();
        let (_, ents) = crate::corpus::parse_annotations(joined.as_bytes())?;
        for e in &ents {
            if e.types.iter().any(|t| t == "notvisual") {
                continue;
            }
            let slot = (e.chain_id as usize % 10) - 1;
            entity_records.push((image_id.clone(), e.key(), picked[slot]));
            // gold region gets the bulk of the mass, distractors the rest
            locscore_lines.push(format!("{image_id}\t{}\tr{}\t0.9", e.key(), e.chain_id));
            for other_slot in 0..picked.len() {
                if other_slot != slot {
                    let other_chain = img * 10 + other_slot + 1;
                    locscore_lines.push(format!(
                        "{image_id}\t{}\tr{other_chain}\t{:.4}",
                        e.key(),
                        0.1 / (picked.len() - 1) as f64
                    ));
                }
            }
        }
        corpus_lines.extend(image_caption_lines);

        let n = cfg.feature_grid * cfg.feature_grid;
        let map = Array2::from_shape_fn((n, cfg.feature_channels), |_| rng.gen_range(-1.0..1.0));
        feature_maps.push((image_id.clone(), map));
    }

    // splits by image order
    let n_train = ((cfg.images as f64) * cfg.train_fraction).round() as usize;
    let n_val = ((cfg.images as f64) * cfg.validation_fraction).round() as usize;
    let ids: Vec<String> = (0..cfg.images).map(|i| format!("toy{i:03}")).collect();
    let train_images = ids[..n_train.min(ids.len())].to_vec();
    let validation_images = ids[n_train.min(ids.len())..(n_train + n_val).min(ids.len())].to_vec();
    let test_images = ids[(n_train + n_val).min(ids.len())..].to_vec();

    // region vectors: noisy linear images of the concept centroids, for
    // train-split entities
    let map_a =
        Array2::from_shape_fn((cfg.region_dim, cfg.word_dim), |_| rng.gen_range(-1.0..1.0));
    let mut region_rows: Vec<Array1<f64>> = Vec::new();
    let mut region_pairing_lines = Vec::new();
    for (image_id, key, ci) in &entity_records {
        if !train_images.contains(image_id) {
            continue;
        }
        let centroid = centroids.row(*ci).mapv(|v| 4.0 * v);
        let mut row = map_a.dot(&centroid);
        for v in row.iter_mut() {
            *v += 0.05 * rng.gen_range(-1.0..1.0);
        }
        region_pairing_lines.push(format!("{image_id}\t{key}\t{}", region_rows.len()));
        region_rows.push(row);
    }
    let region_vectors = if region_rows.is_empty() {
        Array2::zeros((0, cfg.region_dim))
    } else {
        let mut m = Array2::zeros((region_rows.len(), cfg.region_dim));
        for (i, r) in region_rows.iter().enumerate() {
            m.row_mut(i).assign(r);
        }
        m
    };

    Ok(ToyDataset {
        corpus_lines,
        regions_lines,
        word_vector_lines,
        locscore_lines,
        feature_maps,
        region_vectors,
        region_pairing_lines,
        train_images,
        validation_images,
        test_images,
    })
}

fn orthogonal_centroids(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    assert!(k <= dim, "need at least as many dimensions as concepts");
    let mut m = Array2::<f64>::zeros((k, dim));
    for i in 0..k {
        let mut v = Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0f64..1.0));
        for j in 0..i {
            let proj = v.dot(&m.row(j));
            let mr = m.row(j).to_owned();
            v.scaled_add(-proj, &mr);
        }
        let norm = v.dot(&v).sqrt().max(1e-9);
        v /= norm;
        m.row_mut(i).assign(&v);
    }
    m
}

/// File paths produced by [`ToyDataset::write_to`].
#[derive(Debug, Clone)]
pub struct ToyPaths {
    pub corpus: std::path::PathBuf,
    pub regions: std::path::PathBuf,
    pub word_vectors: std::path::PathBuf,
    pub locscores: std::path::PathBuf,
    pub feature_index: std::path::PathBuf,
    pub region_vectors: std::path::PathBuf,
    pub region_pairing: std::path::PathBuf,
}

impl ToyDataset {
    /// Write the dataset under `dir` in the pipeline's file formats.
    pub fn write_to(&self, dir: &Path) -> Result<ToyPaths> {
        fs::create_dir_all(dir)?;
        let corpus = dir.join("corpus.tsv");
        fs::write(&corpus, self.corpus_lines.join("\n") + "\n")?;
        let regions = dir.join("regions.tsv");
        fs::write(&regions, self.regions_lines.join("\n") + "\n")?;
        let word_vectors = dir.join("wordvecs.txt");
        fs::write(&word_vectors, self.word_vector_lines.join("\n") + "\n")?;
        let locscores = dir.join("locscores.tsv");
        fs::write(&locscores, self.locscore_lines.join("\n") + "\n")?;

        let fm_dir = dir.join("featmaps");
        fs::create_dir_all(&fm_dir)?;
        let mut index = String::new();
        for (image_id, map) in &self.feature_maps {
            let file = format!("{image_id}.vgpt");
            tensor::write_matrix_file(&fm_dir.join(&file), map)?;
            writeln!(index, "{image_id}\tfeatmaps/{file}").unwrap();
        }
        let feature_index = dir.join("featmaps.tsv");
        fs::write(&feature_index, index)?;

        let region_vectors = dir.join("regionvecs.vgpt");
        tensor::write_matrix_file(&region_vectors, &self.region_vectors)?;
        let region_pairing = dir.join("regionpairs.tsv");
        fs::write(&region_pairing, self.region_pairing_lines.join("\n") + "\n")?;

        Ok(ToyPaths {
            corpus,
            regions,
            word_vectors,
            locscores,
            feature_index,
            region_vectors,
            region_pairing,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    #[test]
    fn generator_is_deterministic() {
        let cfg = ToyConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.corpus_lines, b.corpus_lines);
        assert_eq!(a.word_vector_lines, b.word_vector_lines);
        assert_eq!(a.locscore_lines, b.locscore_lines);
        assert_eq!(a.region_pairing_lines, b.region_pairing_lines);
    }

    #[test]
    fn corpus_parses_with_planted_clusters() {
        let cfg = ToyConfig::default();
        let data = generate(&cfg).unwrap();
        let joined = data.corpus_lines.join("\n");
        let (caps, ents) = corpus::parse_annotations(joined.as_bytes()).unwrap();
        assert_eq!(caps.len(), cfg.images * cfg.captions_per_image);
        assert!(!ents.is_empty());
        // test images keep at least two gold clusters among evaluable
        // entities
        let stops = corpus::StopWordList::bundled();
        let regions =
            corpus::RegionSet::from_reader(data.regions_lines.join("\n").as_bytes()).unwrap();
        for img in &data.test_images {
            let mut img_ents: Vec<corpus::Entity> = ents
                .iter()
                .filter(|e| &e.image_id == img)
                .map(|e| corpus::normalize_entity(e, &stops))
                .collect();
            corpus::apply_regions(&mut img_ents, Some(&regions));
            let kept = corpus::filter_evaluable(&img_ents);
            let merged = corpus::merge_duplicates(&kept);
            let gold = corpus::build_gold_clusters(img, &merged.entities);
            assert!(
                gold.clusters.len() >= 2,
                "image {img} has {} clusters",
                gold.clusters.len()
            );
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let data = generate(&ToyConfig::default()).unwrap();
        let total =
            data.train_images.len() + data.validation_images.len() + data.test_images.len();
        assert_eq!(total, 20);
        for v in &data.validation_images {
            assert!(!data.train_images.contains(v));
            assert!(!data.test_images.contains(v));
        }
    }

    #[test]
    fn word_vectors_separate_concepts() {
        let data = generate(&ToyConfig::default()).unwrap();
        let table = crate::embed::WordVectorTable::from_reader(
            data.word_vector_lines.join("\n").as_bytes(),
        )
        .unwrap();
        let man = table.get("man").unwrap().to_owned();
        let guy = table.get("guy").unwrap().to_owned();
        let dog = table.get("dog").unwrap().to_owned();
        let same = crate::embed::cosine_similarity(&man.view(), &guy.view()).unwrap();
        let cross = crate::embed::cosine_similarity(&man.view(), &dog.view()).unwrap();
        assert!(same > 0.95, "within-concept cosine {same}");
        assert!(cross < 0.3, "cross-concept cosine {cross}");
    }

    #[test]
    fn dataset_writes_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&ToyConfig::default()).unwrap();
        let paths = data.write_to(dir.path()).unwrap();
        assert!(paths.corpus.exists());
        let (shape, _) = tensor::read_tensor_file(&paths.region_vectors).unwrap();
        assert_eq!(shape[0], data.region_vectors.nrows());
        let loc = std::fs::read_to_string(&paths.locscores).unwrap();
        assert!(loc.lines().count() > 20);
    }
}
