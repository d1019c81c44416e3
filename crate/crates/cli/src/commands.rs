use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use attnshift::par::{self, Execution};
use attnshift::pipeline::{read_manifest, run_document, Diagnostics, PipelineOptions};
use attnshift::selftest::{self, SelfTestOptions};
use attnshift::stats::eval::{evaluate, read_rt_table, EvalSpec, Filters};
use attnshift::stats::{grouped_mean, pearson_corr, Deletion};
use attnshift::{BpeVocab, Document, Model, Precision, PredictorTable, Scalar};

use crate::tsv::Tsv;
use crate::{
    Cli, Command, CorpusArgs, CorrArgs, EvalArgs, GroupbyArgs, PredictorArgs, SelftestArgs,
    TokenizeArgs, VocabArgs,
};

/// Runs one subcommand. `Ok(false)` means it ran but reported a failure.
pub fn run(cli: Cli) -> Result<bool> {
    let exec = match cli.threads {
        Some(0) => bail!("--threads must be at least 1"),
        Some(1) => Execution::Sequential,
        Some(n) => {
            par::configure_threads(n);
            Execution::Parallel
        }
        None => Execution::Parallel,
    };
    match cli.command {
        Command::Tokenize(a) => tokenize(a).map(|_| true),
        Command::Predictors(a) => predictors(a, exec, false).map(|_| true),
        Command::Surprisal(a) => predictors(a, exec, true).map(|_| true),
        Command::Eval(a) => eval(a, exec).map(|_| true),
        Command::Corr(a) => corr(a).map(|_| true),
        Command::Groupby(a) => groupby(a).map(|_| true),
        Command::Selftest(a) => run_selftest(a),
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_vocab(args: &VocabArgs, model_dir: Option<&Path>) -> Result<BpeVocab> {
    if let (Some(v), Some(m)) = (&args.vocab, &args.merges) {
        return Ok(BpeVocab::load(v, m)?);
    }
    let dir = args
        .vocab_dir
        .as_deref()
        .or(model_dir)
        .context("no vocabulary given: pass --vocab-dir, --vocab/--merges or --model-dir")?;
    BpeVocab::load_dir(dir).with_context(|| format!("loading vocabulary from {}", dir.display()))
}

fn load_corpus(args: &CorpusArgs) -> Result<Vec<Document>> {
    let mut docs = match &args.manifest {
        Some(m) => read_manifest(m)?,
        None => Vec::new(),
    };
    for f in &args.files {
        docs.push(Document::from_file(f)?);
    }
    if docs.is_empty() {
        bail!("no documents: pass text files or --manifest");
    }
    let mut ids: Vec<&str> = docs.iter().map(|d| d.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        bail!("document id `{}` appears twice", w[0]);
    }
    Ok(docs)
}

fn tokenize(a: TokenizeArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab, a.model_dir.as_deref())?;
    let docs = load_corpus(&a.corpus)?;
    let mut out = output(&a.output)?;
    writeln!(
        out,
        "doc_id\ttoken_index\ttoken_id\ttoken\tword_index\tword"
    )?;
    for doc in &docs {
        let (ids, words) = vocab.encode(&doc.text);
        for w in &words {
            let word = doc.text[w.bytes.clone()].trim();
            for t in w.tokens.clone() {
                let token = vocab.token_str(ids[t]).unwrap_or_default();
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    doc.id,
                    t,
                    ids[t],
                    token,
                    w.index + 1,
                    word
                )?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn predictors(a: PredictorArgs, exec: Execution, surprisal_only: bool) -> Result<()> {
    let vocab = load_vocab(&a.vocab, Some(&a.model_dir))?;
    let docs = load_corpus(&a.corpus)?;
    if !surprisal_only && (a.formulations.is_empty() || a.measures.is_empty()) {
        bail!("--formulations and --measures must each name at least one entry");
    }
    let opts = PipelineOptions {
        formulations: if surprisal_only {
            Vec::new()
        } else {
            a.formulations.clone()
        },
        measures: if surprisal_only {
            Vec::new()
        } else {
            a.measures.clone()
        },
        layer: a.layer,
        aggregation: a.aggregation,
        log_base: a.log_base,
        window: Some(a.window),
        emd_method: a.emd_method,
        exec,
        verify: !a.no_verify && !surprisal_only,
    };
    let (table, diag) = match Precision::from(a.precision) {
        Precision::F32 => {
            run_corpus_timed(&load_model::<f32>(&a.model_dir)?, &vocab, &docs, &opts)?
        }
        Precision::F64 => {
            run_corpus_timed(&load_model::<f64>(&a.model_dir)?, &vocab, &docs, &opts)?
        }
    };
    let mut out = output(&a.output)?;
    table.write_tsv(&mut out)?;
    out.flush()?;

    eprint!(
        "health: {} documents, {} tokens, {} words, {} windows, {} degenerate vectors, {} clamped self weights, {} split words",
        diag.documents,
        diag.tokens,
        diag.words,
        diag.windows,
        diag.degenerate_vectors,
        diag.clamped_self_weights,
        diag.split_words
    );
    if opts.verify {
        eprint!(
            ", head residual {:.3e}, residual+LN residual {:.3e}",
            diag.max_head_residual, diag.max_residual_ln_residual
        );
    }
    eprintln!();
    Ok(())
}

fn load_model<T: Scalar>(dir: &Path) -> Result<Model<T>> {
    Model::load_dir(dir).with_context(|| format!("loading model from {}", dir.display()))
}

fn run_corpus_timed<T: Scalar>(
    model: &Model<T>,
    vocab: &BpeVocab,
    docs: &[Document],
    opts: &PipelineOptions,
) -> Result<(PredictorTable, Diagnostics)> {
    let mut table = PredictorTable::new(opts.columns());
    let mut diag = Diagnostics::default();
    for doc in docs {
        let start = Instant::now();
        let out = run_document(model, vocab, doc, opts)
            .with_context(|| format!("document `{}`", doc.id))?;
        eprintln!(
            "{}: {} tokens, {} words in {:.3} s",
            doc.id,
            out.diagnostics.tokens,
            out.diagnostics.words,
            start.elapsed().as_secs_f64()
        );
        table.extend(out.table)?;
        diag.merge(&out.diagnostics);
    }
    Ok((table, diag))
}

fn eval(a: EvalArgs, exec: Execution) -> Result<()> {
    let table = PredictorTable::load(&a.table)?;
    let records = read_rt_table(&a.rt)?;
    let spec = EvalSpec {
        baseline: a.baseline,
        interest: a
            .interest
            .iter()
            .map(|m| m.split(',').map(|s| s.trim().to_string()).collect())
            .collect(),
        lags: a.lags,
        filters: Filters {
            drop_sentence_initial: !a.keep_initial,
            drop_sentence_final: !a.keep_final,
            duration_ms: (!a.no_duration_filter).then_some((a.min_ms, a.max_ms)),
        },
        partition: a.partition,
        scale: !a.no_scale,
        center_subjects: !a.no_center_subjects,
        n_permutations: a.permutations,
        seed: a.seed,
        exec,
    };
    let report = evaluate(&table, &records, &spec)?;
    eprintln!(
        "{} records: {} unmatched, {} filtered, {} incomplete; {} fit rows, {} evaluation rows",
        report.n_records,
        report.n_unmatched,
        report.n_filtered,
        report.n_incomplete,
        report.n_fit,
        report.n_eval
    );
    let mut out = output(&a.output)?;
    report.write_tsv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn corr(a: CorrArgs) -> Result<()> {
    let tsv = Tsv::read(&a.table)?;
    let names: Vec<String> = if a.columns.is_empty() {
        tsv.header
            .iter()
            .filter(|h| *h == "surprisal" || h.starts_with("attn_"))
            .cloned()
            .collect()
    } else {
        a.columns.clone()
    };
    if names.len() < 2 {
        bail!(
            "need at least two columns to correlate, got {}",
            names.len()
        );
    }
    let columns = names
        .iter()
        .map(|n| tsv.numbers(n))
        .collect::<Result<Vec<_>>>()?;
    let deletion = if a.complete_case {
        Deletion::CompleteCase
    } else {
        Deletion::Pairwise
    };
    let matrix = pearson_corr(&columns, deletion)?;
    let mut out = output(&a.output)?;
    writeln!(out, "column\t{}", names.join("\t"))?;
    for (name, row) in names.iter().zip(&matrix) {
        let cells: Vec<String> = row
            .iter()
            .map(|r| r.map_or_else(|| "NA".to_string(), |r| format!("{r:.6}")))
            .collect();
        writeln!(out, "{name}\t{}", cells.join("\t"))?;
    }
    out.flush()?;
    Ok(())
}

fn groupby(a: GroupbyArgs) -> Result<()> {
    let tsv = Tsv::read(&a.table)?;
    let stats = grouped_mean(&tsv.labels(&a.by)?, &tsv.numbers(&a.value)?)?;
    let mut out = output(&a.output)?;
    writeln!(out, "{}\tcount\tmean_{}", a.by, a.value)?;
    for g in stats {
        let mean = g.mean.map_or_else(|| "NA".to_string(), |m| format!("{m}"));
        writeln!(out, "{}\t{}\t{mean}", g.label, g.count)?;
    }
    out.flush()?;
    Ok(())
}

fn run_selftest(a: SelftestArgs) -> Result<bool> {
    let opts = SelfTestOptions {
        seed: a.seed,
        precision: a.precision.into(),
        n_models: a.models,
        n_pairs: a.pairs,
        n_strings: a.strings,
        corrupt: a.corrupt.map(Into::into),
    };
    let report = selftest::run(&opts)?;
    print!("{report}");
    let failed: Vec<&str> = report.failures().map(|c| c.name).collect();
    if failed.is_empty() {
        println!("all {} checks passed", report.checks.len());
        Ok(true)
    } else {
        println!("failed: {}", failed.join(", "));
        Ok(false)
    }
}
