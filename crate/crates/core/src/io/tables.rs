//! CSV interchange: score import, prompt lists, co-occurrence tables and
//! refined-score tables. All numerals use a period decimal separator.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Result, SparcError};
use crate::model::{
    validate_bundle, ClassVocabulary, CooccurrenceStats, LabelMatrix, PromptKind, PromptSpec,
    ScoreBundle, ScoreMatrix, PROVENANCE_COMPOUND_KIND, RANDOMIZED,
};

/// Separator between class names in the `classes` column of a prompts file.
pub const CLASS_SEPARATOR: char = '|';

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| SparcError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file))
}

fn parse_f64(s: &str, what: impl FnOnce() -> String) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| SparcError::Csv(format!("{}: cannot parse {s:?} as a number", what())))
}

fn write_csv(
    path: &Path,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| SparcError::Csv(e.to_string()))?;
    super::write_atomic(path, &bytes)
}

/// One class name per line; blank lines and `#` comments are skipped.
pub fn read_vocabulary(path: &Path) -> Result<ClassVocabulary> {
    let text = fs::read_to_string(path).map_err(|e| SparcError::io(path, e))?;
    ClassVocabulary::new(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string),
    )
}

struct RawPrompt {
    id: u32,
    kind: PromptKind,
    classes: Vec<String>,
    text: String,
}

fn read_raw_prompts(path: &Path) -> Result<Vec<RawPrompt>> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["id", "kind", "classes", "text"] {
        return Err(SparcError::Csv(format!(
            "{}: expected header id,kind,classes,text, found {}",
            path.display(),
            header.join(",")
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id: u32 = rec[0].trim().parse().map_err(|_| {
            SparcError::Csv(format!(
                "{} row {}: bad prompt id {:?}",
                path.display(),
                line + 1,
                &rec[0]
            ))
        })?;
        if !seen.insert(id) {
            return Err(SparcError::Csv(format!(
                "{}: duplicate prompt id {id}",
                path.display()
            )));
        }
        out.push(RawPrompt {
            id,
            kind: rec[1].trim().parse()?,
            classes: rec[2]
                .split(CLASS_SEPARATOR)
                .map(|s| s.trim().to_string())
                .collect(),
            text: rec[3].to_string(),
        });
    }
    Ok(out)
}

fn resolve_classes(vocab: &ClassVocabulary, names: &[String], id: u32) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            vocab.index_of(n).ok_or_else(|| {
                SparcError::invalid(format!("prompt {id} mentions unknown class {n:?}"))
            })
        })
        .collect()
}

/// Read a prompts file (`id,kind,classes,text`) against a known vocabulary.
pub fn read_prompts_csv(path: &Path, vocab: &ClassVocabulary) -> Result<Vec<PromptSpec>> {
    read_raw_prompts(path)?
        .into_iter()
        .map(|r| {
            let classes = resolve_classes(vocab, &r.classes, r.id)?;
            Ok(PromptSpec::new(r.id, r.text, r.kind, &classes))
        })
        .collect()
}

pub fn write_prompts_csv(
    path: &Path,
    prompts: &[PromptSpec],
    vocab: &ClassVocabulary,
) -> Result<()> {
    let header = ["id", "kind", "classes", "text"].map(String::from);
    let sep = CLASS_SEPARATOR.to_string();
    write_csv(
        path,
        &header,
        prompts.iter().map(|p| {
            vec![
                p.id.to_string(),
                p.kind.to_string(),
                p.class_set
                    .iter()
                    .map(|&c| vocab.name(c))
                    .collect::<Vec<_>>()
                    .join(&sep),
                p.text.clone(),
            ]
        }),
    )
}

/// Import a bundle from CSV.
///
/// * `prompts.csv`: `id,kind,classes,text`. The vocabulary is the classes of
///   the singleton rows in order of appearance; each class needs exactly one
///   singleton and one auxiliary prompt.
/// * `scores.csv`: `image_id,<prompt id>,...`, one row per image.
/// * `labels.csv` (optional): `image_id,<class name>,...` with 0/1 cells;
///   rows are matched to score rows by image id.
pub fn import_csv(scores: &Path, prompts: &Path, labels: Option<&Path>) -> Result<ScoreBundle> {
    let raw = read_raw_prompts(prompts)?;
    let mut names = Vec::new();
    for r in raw.iter().filter(|r| r.kind == PromptKind::Singleton) {
        if r.classes.len() != 1 {
            return Err(SparcError::invalid(format!(
                "singleton prompt {} must name exactly one class",
                r.id
            )));
        }
        names.push(r.classes[0].clone());
    }
    let vocab = ClassVocabulary::new(names)?;
    let specs: Vec<PromptSpec> = raw
        .into_iter()
        .map(|r| {
            let classes = resolve_classes(&vocab, &r.classes, r.id)?;
            Ok(PromptSpec::new(r.id, r.text, r.kind, &classes))
        })
        .collect::<Result<_>>()?;
    let by_id: HashMap<u32, &PromptSpec> = specs.iter().map(|p| (p.id, p)).collect();

    let mut rdr = reader(scores)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("image_id") {
        return Err(SparcError::Csv(format!(
            "{}: first column must be image_id",
            scores.display()
        )));
    }
    let mut col_ids = Vec::with_capacity(header.len() - 1);
    let mut seen = HashSet::new();
    for h in &header[1..] {
        let id: u32 = h.trim().parse().map_err(|_| {
            SparcError::Csv(format!(
                "{}: column {h:?} is not a prompt id",
                scores.display()
            ))
        })?;
        if !seen.insert(id) {
            return Err(SparcError::Csv(format!(
                "{}: duplicate prompt column {id}",
                scores.display()
            )));
        }
        if !by_id.contains_key(&id) {
            return Err(SparcError::invalid(format!(
                "score column {id} has no prompt record"
            )));
        }
        col_ids.push(id);
    }
    let mut image_ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut seen_images = HashSet::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let image = rec[0].to_string();
        if !seen_images.insert(image.clone()) {
            return Err(SparcError::Csv(format!(
                "{}: duplicate image id {image:?}",
                scores.display()
            )));
        }
        let values = rec
            .iter()
            .skip(1)
            .enumerate()
            .map(|(c, s)| {
                parse_f64(s, || {
                    format!("{} row {} column {}", scores.display(), line + 1, c + 1)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        image_ids.push(image);
        rows.push(values);
    }

    let column_of: HashMap<u32, usize> =
        col_ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
    let per_class = |kind: PromptKind| -> Result<Vec<u32>> {
        (0..vocab.len())
            .map(|c| {
                let ids: Vec<u32> = specs
                    .iter()
                    .filter(|p| {
                        p.kind == kind && p.class_set == [c] && column_of.contains_key(&p.id)
                    })
                    .map(|p| p.id)
                    .collect();
                match ids.as_slice() {
                    [id] => Ok(*id),
                    _ => Err(SparcError::invalid(format!(
                        "class {:?} needs exactly one {kind} prompt with a score column, found {}",
                        vocab.name(c),
                        ids.len()
                    ))),
                }
            })
            .collect()
    };
    let singleton_ids = per_class(PromptKind::Singleton)?;
    let auxiliary_ids = per_class(PromptKind::Auxiliary)?;
    let compound_ids: Vec<u32> = col_ids
        .iter()
        .copied()
        .filter(|id| by_id[id].kind == PromptKind::Compound)
        .collect();
    let unscored = specs
        .iter()
        .filter(|p| p.kind == PromptKind::Compound && !column_of.contains_key(&p.id))
        .count();
    if unscored > 0 {
        log::warn!(
            "{unscored} compound prompts have no score column and are left out of the fusion"
        );
    }
    let gather = |ids: Vec<u32>| {
        let cols: Vec<usize> = ids.iter().map(|id| column_of[id]).collect();
        ScoreMatrix::from_fn(image_ids.clone(), ids, |r, c| rows[r][cols[c]])
    };
    let singleton = gather(singleton_ids);
    let auxiliary = gather(auxiliary_ids);
    let compound = gather(compound_ids);

    let labels = labels
        .map(|path| read_labels_csv(path, &vocab, &image_ids))
        .transpose()?;

    let mut provenance = BTreeMap::new();
    provenance.insert("source".to_string(), "csv".to_string());
    // prompts from the randomized generator mention a single class each
    let compounds: Vec<&PromptSpec> = specs
        .iter()
        .filter(|p| p.kind == PromptKind::Compound)
        .collect();
    if !compounds.is_empty() && compounds.iter().all(|p| p.class_set.len() == 1) {
        provenance.insert(PROVENANCE_COMPOUND_KIND.to_string(), RANDOMIZED.to_string());
    }
    let bundle = ScoreBundle::new(
        vocab, specs, singleton, auxiliary, compound, labels, provenance,
    );
    let problems = validate_bundle(&bundle);
    if problems.is_empty() {
        Ok(bundle)
    } else {
        Err(SparcError::Validation(problems))
    }
}

fn read_labels_csv(
    path: &Path,
    vocab: &ClassVocabulary,
    image_ids: &[String],
) -> Result<LabelMatrix> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("image_id") {
        return Err(SparcError::Csv(format!(
            "{}: first column must be image_id",
            path.display()
        )));
    }
    let mut class_cols = vec![usize::MAX; vocab.len()];
    for (c, name) in header.iter().enumerate().skip(1) {
        let idx = vocab
            .index_of(name)
            .ok_or_else(|| SparcError::invalid(format!("labels column {name:?} is not a class")))?;
        if class_cols[idx] != usize::MAX {
            return Err(SparcError::Csv(format!(
                "{}: duplicate class column {name:?}",
                path.display()
            )));
        }
        class_cols[idx] = c;
    }
    if let Some(missing) = class_cols.iter().position(|&c| c == usize::MAX) {
        return Err(SparcError::invalid(format!(
            "labels file lacks class {:?}",
            vocab.name(missing)
        )));
    }
    let mut by_image: HashMap<String, Vec<u8>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = class_cols
            .iter()
            .map(|&c| match rec[c].trim() {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(SparcError::Csv(format!("label {other:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if by_image.insert(rec[0].to_string(), row).is_some() {
            return Err(SparcError::Csv(format!(
                "{}: duplicate image id {:?}",
                path.display(),
                &rec[0]
            )));
        }
    }
    let mut values = Vec::with_capacity(image_ids.len() * vocab.len());
    for id in image_ids {
        let row = by_image
            .get(id)
            .ok_or_else(|| SparcError::invalid(format!("no labels for image {id:?}")))?;
        values.extend_from_slice(row);
    }
    LabelMatrix::new(values, image_ids.to_vec(), vocab.len())
}

/// Read pairwise conditionals (`N x N`, header row and first column hold
/// class names, cell `(i, j)` is `P(j | i)`) and optional sparse triplets
/// (`i,j,k,prob` with class indices).
pub fn read_cooccurrence_csv(
    pairs: &Path,
    triplets: Option<&Path>,
    vocab: &ClassVocabulary,
) -> Result<CooccurrenceStats> {
    let n = vocab.len();
    let mut rdr = reader(pairs)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() != n + 1 {
        return Err(SparcError::Csv(format!(
            "{}: expected {} columns, found {}",
            pairs.display(),
            n + 1,
            header.len()
        )));
    }
    let col_class = header[1..]
        .iter()
        .map(|h| {
            vocab.index_of(h.trim()).ok_or_else(|| {
                SparcError::invalid(format!("co-occurrence column {h:?} is not a class"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut matrix = vec![vec![f64::NAN; n]; n];
    let mut filled = vec![false; n];
    for rec in rdr.records() {
        let rec = rec?;
        let i = vocab.index_of(rec[0].trim()).ok_or_else(|| {
            SparcError::invalid(format!("co-occurrence row {:?} is not a class", &rec[0]))
        })?;
        if std::mem::replace(&mut filled[i], true) {
            return Err(SparcError::Csv(format!(
                "duplicate co-occurrence row {:?}",
                &rec[0]
            )));
        }
        for (c, cell) in rec.iter().skip(1).enumerate() {
            matrix[i][col_class[c]] = parse_f64(cell, || format!("P(.|{})", vocab.name(i)))?;
        }
    }
    if let Some(i) = filled.iter().position(|f| !f) {
        return Err(SparcError::invalid(format!(
            "co-occurrence row for {:?} missing",
            vocab.name(i)
        )));
    }
    let mut sparse = BTreeMap::new();
    if let Some(path) = triplets {
        let mut rdr = reader(path)?;
        let header: Vec<String> = rdr
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if header != ["i", "j", "k", "prob"] {
            return Err(SparcError::Csv(format!(
                "{}: expected header i,j,k,prob",
                path.display()
            )));
        }
        for rec in rdr.records() {
            let rec = rec?;
            let idx = |s: &str| -> Result<usize> {
                s.trim()
                    .parse()
                    .map_err(|_| SparcError::Csv(format!("bad class index {s:?}")))
            };
            let key = (idx(&rec[0])?, idx(&rec[1])?, idx(&rec[2])?);
            let p = parse_f64(&rec[3], || format!("P({}|{},{})", key.2, key.0, key.1))?;
            sparse.insert(key, p);
        }
    }
    CooccurrenceStats::from_pairs(matrix, sparse)
}

/// Write an `M x N` score table as `image_id,<class>...`. Values use the
/// shortest representation that round-trips exactly.
pub fn write_score_table_csv(
    path: &Path,
    scores: &ScoreMatrix,
    vocab: &ClassVocabulary,
) -> Result<()> {
    let mut header = vec!["image_id".to_string()];
    header.extend(vocab.names().iter().cloned());
    write_csv(
        path,
        &header,
        (0..scores.rows()).map(|r| {
            let mut row = vec![scores.image_ids[r].clone()];
            row.extend(scores.row(r).iter().map(|v| v.to_string()));
            row
        }),
    )
}

/// Read a table written by [`write_score_table_csv`]; columns are matched
/// to the vocabulary by name.
pub fn read_score_table_csv(path: &Path, vocab: &ClassVocabulary) -> Result<ScoreMatrix> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("image_id") || header.len() != vocab.len() + 1 {
        return Err(SparcError::Csv(format!(
            "{}: expected image_id plus {} class columns",
            path.display(),
            vocab.len()
        )));
    }
    let cols = header[1..]
        .iter()
        .map(|h| {
            vocab
                .index_of(h)
                .ok_or_else(|| SparcError::invalid(format!("unknown class column {h:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut image_ids = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        image_ids.push(rec[0].to_string());
        let mut row = vec![0.0; vocab.len()];
        for (c, cell) in rec.iter().skip(1).enumerate() {
            row[cols[c]] = parse_f64(cell, || format!("{} column {}", path.display(), c + 1))?;
        }
        values.extend(row);
    }
    ScoreMatrix::new(values, image_ids, (0..vocab.len() as u32).collect())
}
