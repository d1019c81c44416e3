//! Whole-document runs: tokenisation, half-overlapping context windows, forward
//! passes, formulations and predictors, then aggregation to words.

use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::formulations::{residual_ln_reconstruction_error, Formulation, FormulationContext};
use crate::model::{
    surprisal, verify_head_decomposition, ForwardOptions, LayerSelector, LogBase, Model,
};
use crate::par::{self, Execution};
use crate::predictors::{
    aggregate_heads, measure, EmdMethod, HeadAggregation, Measure, PredictorTable, WordRow,
};
use crate::tensor::Scalar;
use crate::tokenizer::{BpeVocab, WordSpan};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
        }
    }

    /// Reads a UTF-8 text file; the id is the file stem.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Document { id, text })
    }
}

/// Reads a two-column TSV of `document id` and `path`. Relative paths resolve
/// against the manifest's directory; lines starting with `#` are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut docs = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, file) = line.split_once('\t').ok_or_else(|| Error::Table {
            path: path.display().to_string(),
            detail: format!("line {}: expected `id<TAB>path`", k + 1),
        })?;
        let file = PathBuf::from(file.trim());
        let file = if file.is_absolute() {
            file
        } else {
            base.join(file)
        };
        let mut doc = Document::from_file(&file)?;
        doc.id = id.trim().to_string();
        docs.push(doc);
    }
    Ok(docs)
}

/// One context window: the tokens fed to the model and the tokens it reports.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub tokens: Range<usize>,
    pub emit: Range<usize>,
}

/// Splits `n_tokens` into windows of at most `window` tokens, each starting half a
/// window after the previous one. The first window reports all of its tokens;
/// later windows report only their second half, so the reported ranges partition
/// the document and every reported token past the first has at least half a
/// window of context.
pub fn plan_windows(n_tokens: usize, window: usize) -> Result<Vec<Window>> {
    if window < 4 || !window.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!(
            "window must be even and at least 4, got {window}"
        )));
    }
    if n_tokens == 0 {
        return Ok(Vec::new());
    }
    let half = window / 2;
    let first_end = window.min(n_tokens);
    let mut plan = vec![Window {
        tokens: 0..first_end,
        emit: 0..first_end,
    }];
    let mut start = 0;
    while plan.last().expect("nonempty").tokens.end < n_tokens {
        start += half;
        let end = (start + window).min(n_tokens);
        plan.push(Window {
            tokens: start..end,
            emit: start + half..end,
        });
    }
    Ok(plan)
}

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub formulations: Vec<Formulation>,
    pub measures: Vec<Measure>,
    pub layer: LayerSelector,
    pub aggregation: HeadAggregation,
    pub log_base: LogBase,
    /// Context window in tokens; `None` uses the model's maximum context
    /// (rounded down to an even number).
    pub window: Option<usize>,
    pub emd_method: EmdMethod,
    pub exec: Execution,
    /// Also measure how well both decompositions reconstruct the layer.
    pub verify: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            formulations: Formulation::ALL.to_vec(),
            measures: Measure::ALL.to_vec(),
            layer: LayerSelector::Top,
            aggregation: HeadAggregation::Mean,
            log_base: LogBase::Two,
            window: None,
            emd_method: EmdMethod::Simplex,
            exec: Execution::Parallel,
            verify: false,
        }
    }
}

impl PipelineOptions {
    pub fn columns(&self) -> Vec<(Formulation, Measure)> {
        self.formulations
            .iter()
            .flat_map(|&f| self.measures.iter().map(move |&m| (f, m)))
            .collect()
    }

    fn resolve_window(&self, max_context: usize) -> usize {
        self.window.unwrap_or(max_context - max_context % 2)
    }
}

/// Counters gathered while running; all zero on a clean run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub documents: usize,
    pub tokens: usize,
    pub words: usize,
    pub windows: usize,
    /// Weight vectors whose norm-weighted products were all zero.
    pub degenerate_vectors: usize,
    /// Positions where a near-zero self-attention weight was clamped.
    pub clamped_self_weights: usize,
    /// Words longer than half a window, whose tokens came from different windows.
    pub split_words: usize,
    /// Largest head-decomposition residual seen (only with `verify`).
    pub max_head_residual: f64,
    /// Largest residual + LayerNorm decomposition residual seen (only with `verify`).
    pub max_residual_ln_residual: f64,
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.documents += other.documents;
        self.tokens += other.tokens;
        self.words += other.words;
        self.windows += other.windows;
        self.degenerate_vectors += other.degenerate_vectors;
        self.clamped_self_weights += other.clamped_self_weights;
        self.split_words += other.split_words;
        self.max_head_residual = self.max_head_residual.max(other.max_head_residual);
        self.max_residual_ln_residual = self
            .max_residual_ln_residual
            .max(other.max_residual_ln_residual);
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub table: PredictorTable,
    pub diagnostics: Diagnostics,
}

/// Runs every document independently and concatenates the tables in input order.
pub fn run_corpus<T: Scalar>(
    model: &Model<T>,
    vocab: &BpeVocab,
    documents: &[Document],
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    check_compatible(model, vocab, opts)?;
    let per_doc = par::try_map_range(opts.exec, documents.len(), |k| {
        run_document(model, vocab, &documents[k], opts)
    })?;
    let mut table = PredictorTable::new(opts.columns());
    let mut diagnostics = Diagnostics::default();
    for out in per_doc {
        table.extend(out.table)?;
        diagnostics.merge(&out.diagnostics);
    }
    Ok(PipelineOutput { table, diagnostics })
}

fn check_compatible<T: Scalar>(
    model: &Model<T>,
    vocab: &BpeVocab,
    opts: &PipelineOptions,
) -> Result<()> {
    let cfg = model.config();
    if vocab.vocab_size() > cfg.vocab_size {
        return Err(Error::InvalidInput(format!(
            "tokenizer has {} tokens but the model only embeds {}",
            vocab.vocab_size(),
            cfg.vocab_size
        )));
    }
    let window = opts.resolve_window(cfg.max_context);
    if window > cfg.max_context {
        return Err(Error::InvalidInput(format!(
            "window {window} exceeds the model context {}",
            cfg.max_context
        )));
    }
    opts.layer.resolve(cfg)?;
    Ok(())
}

/// Per-token values computed inside one window.
struct WindowValues {
    /// Document position of `values[0]`.
    first: usize,
    /// `(surprisal, one value per column)` per token.
    values: Vec<(Option<f64>, Vec<Option<f64>>)>,
}

impl WindowValues {
    fn get(&self, pos: usize) -> &(Option<f64>, Vec<Option<f64>>) {
        &self.values[pos - self.first]
    }
}

pub fn run_document<T: Scalar>(
    model: &Model<T>,
    vocab: &BpeVocab,
    doc: &Document,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    check_compatible(model, vocab, opts)?;
    let columns = opts.columns();
    let mut table = PredictorTable::new(columns.clone());
    let mut diag = Diagnostics {
        documents: 1,
        ..Default::default()
    };

    let (ids, words) = vocab.encode(&doc.text);
    diag.tokens = ids.len();
    diag.words = words.len();
    if words.is_empty() {
        return Ok(PipelineOutput {
            table,
            diagnostics: diag,
        });
    }
    let plan = plan_windows(ids.len(), opts.resolve_window(model.config().max_context))?;
    diag.windows = plan.len();

    // Each word is reported by the window that reports its final token.
    let emitter = |pos: usize| {
        plan.iter()
            .position(|w| w.emit.contains(&pos))
            .expect("emit ranges partition tokens")
    };
    let word_window: Vec<usize> = words.iter().map(|w| emitter(w.tokens.end - 1)).collect();

    let mut computed = Vec::with_capacity(plan.len());
    for (k, win) in plan.iter().enumerate() {
        let first = words
            .iter()
            .zip(&word_window)
            .filter(|(_, &wk)| wk == k)
            .map(|(w, _)| w.tokens.start.max(win.tokens.start))
            .min()
            .unwrap_or(win.emit.start)
            .min(win.emit.start);
        computed.push(window_values(
            model, &ids, win, first, &columns, opts, &mut diag,
        )?);
    }

    let sentences = sentence_positions(&doc.text, &words);
    for (w, span) in words.iter().enumerate() {
        let home = &computed[word_window[w]];
        let whole = span.tokens.start >= home.first
            && (span.tokens.start > plan[word_window[w]].tokens.start || span.tokens.start == 0);
        let source = |pos: usize| {
            if whole {
                home.get(pos)
            } else {
                computed[emitter(pos)].get(pos)
            }
        };
        if !whole {
            diag.split_words += 1;
        }
        let mut surprisal = Some(0.0);
        let mut values = vec![Some(0.0); columns.len()];
        for pos in span.tokens.clone() {
            let (s, v) = source(pos);
            surprisal = add(surprisal, *s);
            for (acc, x) in values.iter_mut().zip(v) {
                *acc = add(*acc, *x);
            }
        }
        let (sentence_id, sentence_pos, sentence_len) = sentences[w];
        table.push(WordRow {
            doc_id: doc.id.clone(),
            word_index: w + 1,
            sentence_id,
            sentence_pos,
            sentence_len,
            word: doc.text[span.bytes.clone()].to_string(),
            token_start: span.tokens.start,
            token_end: span.tokens.end,
            surprisal,
            values,
        })?;
    }
    Ok(PipelineOutput {
        table,
        diagnostics: diag,
    })
}

fn add(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? + b?)
}

/// Runs one window and computes per-token values for document positions
/// `first..win.tokens.end`.
fn window_values<T: Scalar>(
    model: &Model<T>,
    ids: &[u32],
    win: &Window,
    first: usize,
    columns: &[(Formulation, Measure)],
    opts: &PipelineOptions,
    diag: &mut Diagnostics,
) -> Result<WindowValues> {
    let local_ids = &ids[win.tokens.clone()];
    let out = model.forward_with(
        local_ids,
        &ForwardOptions {
            layer: opts.layer,
            exec: opts.exec,
        },
    )?;
    let trace = &out.trace;
    let token_surprisal = surprisal(&out.logits, local_ids, opts.log_base)?;
    if opts.verify {
        diag.max_head_residual = diag.max_head_residual.max(verify_head_decomposition(trace));
        for pos in 0..trace.len() {
            diag.max_residual_ln_residual = diag
                .max_residual_ln_residual
                .max(residual_ln_reconstruction_error(trace, pos));
        }
    }

    let ctx = FormulationContext::new(trace, opts.exec);
    let n_heads = trace.n_heads();
    let local_first = first - win.tokens.start;
    let local_end = trace.len();

    // One job per (formulation, head): values[pos][measure] plus flag counts.
    let jobs: Vec<(Formulation, usize)> = opts
        .formulations
        .iter()
        .flat_map(|&f| (0..n_heads).map(move |h| (f, h)))
        .collect();
    let per_job = par::try_map_range(opts.exec, jobs.len(), |j| -> Result<_> {
        let (f, h) = jobs[j];
        let mut prev = (local_first > 0).then(|| ctx.weights(f, h, local_first - 1));
        let mut rows = Vec::with_capacity(local_end - local_first);
        let (mut degenerate, mut clamped) = (0, 0);
        for pos in local_first..local_end {
            let cur = ctx.weights(f, h, pos);
            degenerate += cur.degenerate as usize;
            clamped += cur.self_weight_clamped as usize;
            let row = opts
                .measures
                .iter()
                .map(|&m| {
                    measure(
                        m,
                        prev.as_ref().map(|p| p.weights.as_slice()),
                        &cur.weights,
                        opts.emd_method,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
            prev = Some(cur);
        }
        Ok((rows, degenerate, clamped))
    })?;
    for (_, d, c) in &per_job {
        diag.degenerate_vectors += d;
        diag.clamped_self_weights += c;
    }

    let n_measures = opts.measures.len();
    let values = (local_first..local_end)
        .map(|pos| {
            let row = columns
                .iter()
                .enumerate()
                .map(|(col, _)| {
                    let (fi, mi) = (col / n_measures, col % n_measures);
                    let heads: Vec<Option<f64>> = (0..n_heads)
                        .map(|h| per_job[fi * n_heads + h].0[pos - local_first][mi])
                        .collect();
                    aggregate_heads(&heads, opts.aggregation)
                })
                .collect();
            (token_surprisal[pos], row)
        })
        .collect();
    Ok(WindowValues { first, values })
}

/// `(sentence id, position in sentence, sentence length)` per word, all 1-based.
/// Sentences are the text's non-blank lines.
pub fn sentence_positions(text: &str, words: &[WordSpan]) -> Vec<(usize, usize, usize)> {
    let mut line_of = Vec::with_capacity(words.len());
    let mut line = 0;
    let mut scanned = 0;
    for w in words {
        line += text[scanned..w.bytes.start].matches('\n').count();
        scanned = w.bytes.start;
        line_of.push(line);
    }
    let mut out = Vec::with_capacity(words.len());
    let mut sentence = 0;
    let mut k = 0;
    while k < words.len() {
        let end = (k..words.len())
            .find(|&j| line_of[j] != line_of[k])
            .unwrap_or(words.len());
        sentence += 1;
        for j in k..end {
            out.push((sentence, j - k + 1, end - k));
        }
        k = end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn single_window_when_short() {
        assert_eq!(
            plan_windows(10, 16).unwrap(),
            vec![Window {
                tokens: 0..10,
                emit: 0..10
            }]
        );
        assert_eq!(plan_windows(16, 16).unwrap().len(), 1);
        assert!(plan_windows(0, 16).unwrap().is_empty());
    }

    #[test]
    fn gpt2_sized_plan() {
        let plan = plan_windows(1536, 1024).unwrap();
        assert_eq!(
            plan,
            vec![
                Window {
                    tokens: 0..1024,
                    emit: 0..1024
                },
                Window {
                    tokens: 512..1536,
                    emit: 1024..1536
                }
            ]
        );
    }

    #[test]
    fn one_past_the_window() {
        let plan = plan_windows(17, 16).unwrap();
        assert_eq!(
            plan[1],
            Window {
                tokens: 8..17,
                emit: 16..17
            }
        );
    }

    #[test]
    fn rejects_odd_or_tiny_windows() {
        assert!(plan_windows(10, 7).is_err());
        assert!(plan_windows(10, 2).is_err());
    }

    #[test]
    fn emit_ranges_partition_tokens() {
        for window in [4, 6, 16, 64] {
            for n in 1..200 {
                let plan = plan_windows(n, window).unwrap();
                let mut next = 0;
                for w in &plan {
                    assert_eq!(w.emit.start, next);
                    assert!(w.tokens.len() <= window);
                    assert!(w.tokens.start <= w.emit.start && w.emit.end == w.tokens.end);
                    next = w.emit.end;
                }
                assert_eq!(next, n);
                for pair in plan.windows(2) {
                    assert_eq!(pair[1].tokens.start - pair[0].tokens.start, window / 2);
                }
            }
        }
    }

    #[test]
    fn sentences_follow_lines() {
        let text = "One two.\nThree\n\n four five six";
        let words: Vec<WordSpan> = crate::tokenizer::words(text)
            .into_iter()
            .enumerate()
            .map(|(index, bytes)| WordSpan {
                index,
                bytes,
                tokens: 0..0,
            })
            .collect();
        assert_eq!(
            sentence_positions(text, &words),
            vec![
                (1, 1, 2),
                (1, 2, 2),
                (2, 1, 1),
                (3, 1, 3),
                (3, 2, 3),
                (3, 3, 3)
            ]
        );
    }

    fn setup() -> (Model<f64>, BpeVocab) {
        let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
        let vocab = BpeVocab::load_dir(dir.join("toy1000")).unwrap();
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 1000,
            max_context: 64,
            ln_eps: 1e-5,
        };
        (Model::random(cfg, 5).unwrap(), vocab)
    }

    #[test]
    fn boundary_semantics_of_first_words() {
        let (model, vocab) = setup();
        let doc = Document::new("d", "The old mill stood at the edge of the village.");
        let opts = PipelineOptions {
            window: Some(16),
            ..Default::default()
        };
        let out = run_document(&model, &vocab, &doc, &opts).unwrap();
        let t = &out.table;
        assert_eq!(t.len(), 10);
        let first = &t.rows()[0];
        assert_eq!(first.token_end - first.token_start, 1);
        assert_eq!(first.surprisal, None);
        assert!(first.values.iter().all(Option::is_none));
        // Timestep 2: NAE undefined, distances defined.
        let second = &t.rows()[1];
        assert!(second.surprisal.is_some());
        for (&(_, m), v) in t.columns().iter().zip(&second.values) {
            match m {
                Measure::Nae | Measure::DeltaNae => assert!(v.is_none()),
                Measure::Md | Measure::Emd => assert!(v.is_some()),
            }
        }
        assert!(t.rows()[5].values.iter().all(Option::is_some));
        t.check_invariants().unwrap();
    }

    #[test]
    fn windowed_runs_are_deterministic_and_order_free() {
        let (model, vocab) = setup();
        let docs = vec![
            Document::new(
                "a",
                "It was late when the clerk finally arrived at the mill with his ledger.",
            ),
            Document::new(
                "b",
                "Nobody knew.\nThe river kept better records than any clerk could.",
            ),
        ];
        let opts = PipelineOptions {
            window: Some(8),
            ..Default::default()
        };
        let one = run_corpus(&model, &vocab, &docs, &opts).unwrap();
        let two = run_corpus(&model, &vocab, &docs, &opts).unwrap();
        assert_eq!(one.table.to_tsv_string(), two.table.to_tsv_string());
        let reversed: Vec<Document> = docs.iter().rev().cloned().collect();
        let three = run_corpus(&model, &vocab, &reversed, &opts).unwrap();
        let (b_rows, a_rows) = three
            .table
            .rows()
            .split_at(one.table.rows().iter().filter(|r| r.doc_id == "b").count());
        assert!(b_rows.iter().all(|r| r.doc_id == "b"));
        let rejoined: Vec<_> = a_rows.iter().chain(b_rows).cloned().collect();
        assert_eq!(rejoined, one.table.rows());
        assert!(one.diagnostics.windows > 2);
    }

    #[test]
    fn emd_methods_agree_end_to_end() {
        let (model, vocab) = setup();
        let doc = Document::new(
            "d",
            "The miller laughed and told him the river kept better records.",
        );
        let simplex = run_document(&model, &vocab, &doc, &PipelineOptions::default()).unwrap();
        let cdf = run_document(
            &model,
            &vocab,
            &doc,
            &PipelineOptions {
                emd_method: EmdMethod::Cdf,
                ..Default::default()
            },
        )
        .unwrap();
        for (a, b) in simplex.table.rows().iter().zip(cdf.table.rows()) {
            for (x, y) in a.values.iter().zip(&b.values) {
                match (x, y) {
                    (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9),
                    _ => assert_eq!(x, y),
                }
            }
        }
    }

    #[test]
    fn verify_reports_small_residuals() {
        let (model, vocab) = setup();
        let doc = Document::new("d", "Still, Tomas sat by the door each morning.");
        let out = run_document(
            &model,
            &vocab,
            &doc,
            &PipelineOptions {
                verify: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.diagnostics.max_head_residual < 1e-10);
        assert!(out.diagnostics.max_residual_ln_residual < 1e-10);
    }

    #[test]
    fn rejects_oversized_vocab_or_window() {
        let (_, vocab) = setup();
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 4,
            vocab_size: 500,
            max_context: 16,
            ln_eps: 1e-5,
        };
        let small = Model::<f64>::random(cfg, 1).unwrap();
        let doc = Document::new("d", "x");
        assert!(run_document(&small, &vocab, &doc, &PipelineOptions::default()).is_err());
        let (model, _) = setup();
        assert!(run_document(
            &model,
            &vocab,
            &doc,
            &PipelineOptions {
                window: Some(128),
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn blank_documents_give_no_rows() {
        let (model, vocab) = setup();
        for text in ["", "  \n "] {
            let out = run_document(
                &model,
                &vocab,
                &Document::new("e", text),
                &PipelineOptions::default(),
            )
            .unwrap();
            assert!(out.table.is_empty());
        }
    }

    #[test]
    fn reads_manifest() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s1.txt"), "Hello there.").unwrap();
        std::fs::write(dir.path().join("m.tsv"), "# id\tpath\nstory1\ts1.txt\n").unwrap();
        let docs = read_manifest(dir.path().join("m.tsv")).unwrap();
        assert_eq!(docs, vec![Document::new("story1", "Hello there.")]);
        std::fs::write(dir.path().join("bad.tsv"), "no tab here\n").unwrap();
        assert!(read_manifest(dir.path().join("bad.tsv")).is_err());
    }
}
