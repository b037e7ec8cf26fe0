//! Embedding-space evaluation: k-NN group accuracy and functional
//! dissimilarity, plus ingestion of external embedding files so third-party
//! models can be scored with the same harness.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::Serialize;

use crate::corpus::{EvalSet, LanguageRegistry};
use crate::error::{CoreError, Result};

/// Unit-cost insert/delete/substitute edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, av) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, bv) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(av != bv);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Similarity in `[0,1]`: one minus the edit distance divided by the longer
/// length. Two empty sequences count as identical (1.0).
pub fn levenshtein_complement<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / denom as f64
}

/// Normalized edit distance in `[0,1]`; zero for two empty sequences.
pub fn levenshtein_normalized<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    1.0 - levenshtein_complement(a, b)
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v.iter()).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(CoreError::invalid(format!(
            "vector dims {} and {} differ",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(CoreError::invalid("cosine of a zero vector is undefined"));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// `1 - cos(u, v)`; errors on zero vectors.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(u, v)?)
}

/// For each sentence, the indices that share its UPOS group.
#[derive(Debug, Clone)]
pub struct GoldNeighbourIndex {
    gold: Vec<Vec<usize>>,
}

impl GoldNeighbourIndex {
    pub fn new(group_ids: &[usize]) -> Self {
        let gold = (0..group_ids.len())
            .map(|i| {
                (0..group_ids.len())
                    .filter(|&j| j != i && group_ids[j] == group_ids[i])
                    .collect()
            })
            .collect();
        Self { gold }
    }

    pub fn from_eval_set(set: &EvalSet) -> Self {
        let ids: Vec<usize> = set.sentences.iter().map(|s| s.group_id).collect();
        Self::new(&ids)
    }

    pub fn gold(&self, i: usize) -> &[usize] {
        &self.gold[i]
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }
}

/// Outcome of a k-NN accuracy run.
#[derive(Debug, Clone, Serialize)]
pub struct KnnResult {
    pub k: usize,
    pub accuracy: f64,
    /// Per-item score; `None` when the item's gold set is smaller than k.
    pub per_item: Vec<Option<f64>>,
    pub included: usize,
    pub excluded: usize,
}

/// Mean fraction of each item's k nearest neighbours (ascending cosine
/// distance, ties by index) that fall in the item's UPOS group. Items whose
/// gold set has fewer than k members are excluded and counted.
pub fn knn_accuracy(
    embeddings: &[Vec<f64>],
    gold: &GoldNeighbourIndex,
    k: usize,
) -> Result<KnnResult> {
    if k == 0 {
        return Err(CoreError::invalid("k must be at least 1"));
    }
    let n = embeddings.len();
    if gold.len() != n {
        return Err(CoreError::invalid(format!(
            "{} gold sets for {n} embeddings",
            gold.len()
        )));
    }
    if n < k + 1 {
        return Err(CoreError::invalid(format!(
            "need at least {} items for k={k}, got {n}",
            k + 1
        )));
    }
    let mut per_item = vec![None; n];
    let mut sum = 0.0;
    let mut included = 0usize;
    for i in 0..n {
        if gold.gold(i).len() < k {
            continue;
        }
        let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
        for j in 0..n {
            if j != i {
                ranked.push((cosine_distance(&embeddings[i], &embeddings[j])?, j));
            }
        }
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let hits = ranked
            .iter()
            .take(k)
            .filter(|(_, j)| gold.gold(i).contains(j))
            .count();
        let score = hits as f64 / k as f64;
        per_item[i] = Some(score);
        sum += score;
        included += 1;
    }
    if included == 0 {
        return Err(CoreError::invalid(format!(
            "every item has a gold set smaller than k={k}"
        )));
    }
    Ok(KnnResult {
        k,
        accuracy: sum / included as f64,
        per_item,
        included,
        excluded: n - included,
    })
}

/// Which reading of the similarity/distance comparison to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FdConvention {
    /// Compare the Levenshtein complement against min-max-normalized cosine
    /// similarities. A perfect embedding scores exactly 0.
    Similarity,
    /// Compare the normalized Levenshtein distance against
    /// min-max-normalized cosine distances.
    Distance,
}

/// The pair of matrices behind the functional dissimilarity score.
#[derive(Debug, Clone)]
pub struct SimilarityMatrices {
    pub n: usize,
    /// Edit-based matrix (complement or normalized distance per convention),
    /// row-major.
    pub l: Vec<f64>,
    /// Min-max-normalized embedding matrix, row-major.
    pub s_hat: Vec<f64>,
}

fn fill_rows<F: Fn(usize, usize) -> Result<f64> + Sync>(
    n: usize,
    threads: usize,
    f: F,
) -> Result<Vec<f64>> {
    let mut data = vec![0.0f64; n * n];
    if threads <= 1 || n < 2 * threads {
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = f(i, j)?;
            }
        }
        return Ok(data);
    }
    let rows_per = n.div_ceil(threads);
    let mut failure: Option<CoreError> = None;
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        let mut rest: &mut [f64] = &mut data;
        let mut row0 = 0usize;
        let f = &f;
        while !rest.is_empty() {
            let take = (rows_per * n).min(rest.len());
            let (chunk, tail) = rest.split_at_mut(take);
            rest = tail;
            let start = row0;
            row0 += take / n;
            handles.push(scope.spawn(move || -> Result<()> {
                for (offset, cell) in chunk.iter_mut().enumerate() {
                    let i = start + offset / n;
                    let j = offset % n;
                    *cell = f(i, j)?;
                }
                Ok(())
            }));
        }
        for h in handles {
            if let Err(e) = h.join().expect("matrix worker panicked") {
                failure.get_or_insert(e);
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(data),
    }
}

/// Builds the edit matrix and the min-max-normalized embedding matrix for
/// `n >= 2` sentences.
pub fn similarity_matrices(
    upos_seqs: &[Vec<crate::corpus::UposTag>],
    embeddings: &[Vec<f64>],
    convention: FdConvention,
    threads: usize,
) -> Result<SimilarityMatrices> {
    let n = upos_seqs.len();
    if embeddings.len() != n {
        return Err(CoreError::invalid(format!(
            "{} embeddings for {n} UPOS sequences",
            embeddings.len()
        )));
    }
    if n < 2 {
        return Err(CoreError::invalid("need at least 2 sentences"));
    }

    let l = fill_rows(n, threads, |i, j| {
        Ok(match convention {
            FdConvention::Similarity => levenshtein_complement(&upos_seqs[i], &upos_seqs[j]),
            FdConvention::Distance => levenshtein_normalized(&upos_seqs[i], &upos_seqs[j]),
        })
    })?;
    let s = fill_rows(n, threads, |i, j| match convention {
        FdConvention::Similarity => cosine_similarity(&embeddings[i], &embeddings[j]),
        FdConvention::Distance => cosine_distance(&embeddings[i], &embeddings[j]),
    })?;

    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Err(CoreError::invalid("degenerate similarity matrix"));
    }
    let range = max - min;
    let s_hat = s.into_iter().map(|v| (v - min) / range).collect();
    Ok(SimilarityMatrices { n, l, s_hat })
}

impl SimilarityMatrices {
    /// `‖L - Ŝ‖_F / n`.
    pub fn score(&self) -> f64 {
        let sq: f64 = self
            .l
            .iter()
            .zip(self.s_hat.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        sq.sqrt() / self.n as f64
    }
}

/// Frobenius-norm discrepancy between edit-space and embedding-space
/// structure, scaled by 1/n. Lower is better; 0 means the embedding
/// geometry mirrors UPOS edit similarity exactly.
pub fn functional_dissimilarity(
    upos_seqs: &[Vec<crate::corpus::UposTag>],
    embeddings: &[Vec<f64>],
    convention: FdConvention,
    threads: usize,
) -> Result<f64> {
    Ok(similarity_matrices(upos_seqs, embeddings, convention, threads)?.score())
}

/// Accuracy summary for one language.
#[derive(Debug, Clone, Serialize)]
pub struct LangNeighbourStats {
    pub iso: String,
    pub total: usize,
    pub groups: usize,
    pub results: Vec<KnnSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct KnnSummary {
    pub k: usize,
    pub accuracy: f64,
    pub included: usize,
    pub excluded: usize,
}

/// Per-language nearest-neighbour accuracies over an evaluation set.
#[derive(Debug, Clone, Serialize)]
pub struct NeighbourReport {
    pub languages: Vec<LangNeighbourStats>,
}

impl NeighbourReport {
    /// Aligned-column rendering, one row per language.
    pub fn to_text(&self) -> String {
        let ks: Vec<usize> = self
            .languages
            .first()
            .map(|l| l.results.iter().map(|r| r.k).collect())
            .unwrap_or_default();
        let header: Vec<String> = ks.iter().map(|k| format!("{k}-NN")).collect();
        let mut out = format!("{:<6} {:>10} {:>8}", "lang", "total", "groups");
        for h in &header {
            out.push_str(&format!(" {h:>8}"));
        }
        out.push('\n');
        for lang in &self.languages {
            out.push_str(&format!(
                "{:<6} {:>10} {:>8}",
                lang.iso, lang.total, lang.groups
            ));
            for r in &lang.results {
                out.push_str(&format!(" {:>8.4}", r.accuracy));
            }
            out.push('\n');
        }
        out
    }
}

/// Neighbour search restricted within each language of the set.
pub fn neighbour_report(
    set: &EvalSet,
    registry: &LanguageRegistry,
    embeddings: &[Vec<f64>],
    ks: &[usize],
) -> Result<NeighbourReport> {
    if embeddings.len() != set.len() {
        return Err(CoreError::invalid(format!(
            "{} embeddings for {} sentences",
            embeddings.len(),
            set.len()
        )));
    }
    // Languages in first-appearance order.
    let mut langs = Vec::new();
    for s in &set.sentences {
        if !langs.contains(&s.lang) {
            langs.push(s.lang);
        }
    }
    let mut report = NeighbourReport {
        languages: Vec::new(),
    };
    for lang in langs {
        let idx: Vec<usize> = (0..set.len())
            .filter(|&i| set.sentences[i].lang == lang)
            .collect();
        let sub_emb: Vec<Vec<f64>> = idx.iter().map(|&i| embeddings[i].clone()).collect();
        let sub_groups: Vec<usize> = idx.iter().map(|&i| set.sentences[i].group_id).collect();
        let gold = GoldNeighbourIndex::new(&sub_groups);
        let mut distinct = sub_groups.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let mut results = Vec::new();
        for &k in ks {
            let r = knn_accuracy(&sub_emb, &gold, k)?;
            results.push(KnnSummary {
                k,
                accuracy: r.accuracy,
                included: r.included,
                excluded: r.excluded,
            });
        }
        report.languages.push(LangNeighbourStats {
            iso: registry.iso(lang).to_string(),
            total: idx.len(),
            groups: distinct.len(),
            results,
        });
    }
    Ok(report)
}

/// Reads `<id><TAB>v1 v2 ... vd` rows; all rows must share one dimension.
pub fn load_external_embeddings(path: impl AsRef<Path>) -> Result<Vec<(u64, Vec<f64>)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    load_external_embeddings_reader(file)
        .map_err(|e| CoreError::parse(format!("{}: {e}", path.display())))
}

pub fn load_external_embeddings_reader<R: Read>(reader: R) -> Result<Vec<(u64, Vec<f64>)>> {
    let reader = BufReader::new(reader);
    let mut out: Vec<(u64, Vec<f64>)> = Vec::new();
    let mut dim: Option<usize> = None;
    for (row, line) in reader.lines().enumerate() {
        let row = row + 1;
        let line = line.map_err(|e| CoreError::parse(format!("row {row}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| CoreError::parse(format!("row {row}: missing tab after id")))?;
        let id: u64 = id
            .trim()
            .parse()
            .map_err(|_| CoreError::parse(format!("row {row}: bad id '{id}'")))?;
        let mut vec = Vec::new();
        for tok in rest.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| CoreError::parse(format!("row {row}: bad value '{tok}'")))?;
            vec.push(v);
        }
        match dim {
            None => dim = Some(vec.len()),
            Some(d) if d != vec.len() => {
                return Err(CoreError::parse(format!(
                    "row {row}: dim {} ≠ {d}",
                    vec.len()
                )));
            }
            _ => {}
        }
        out.push((id, vec));
    }
    if out.is_empty() {
        return Err(CoreError::parse("no vectors"));
    }
    Ok(out)
}
