//! Command implementations. Every file the commands emit goes through an
//! atomic write-then-rename, so a failed run leaves no partial outputs.

use std::path::{Path, PathBuf};

use seqmatch::atomic_write;
use seqmatch::checkpoint::{self, Payload};
use seqmatch::checks;
use seqmatch::config::{ModelKind, RunConfig};
use seqmatch::corpus::{
    encode_batch, load_pretrained_embeddings, parse_dataset, ranking_groups, tokenize,
    RawInstance, Vocabulary,
};
use seqmatch::error::{Error, Result};
use seqmatch::metrics::{self, bucket_run, compute_metric, LengthBucket, Report};
use seqmatch::model::{Grid, MatcherKind, MatchModel};
use seqmatch::retrieval::{
    expand_message, retrieve_candidates, tfidf_baseline_score, DfStats, InvertedIndex,
};
use seqmatch::train::score_all;

use crate::ConfigArgs;

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.out_dir.clone().unwrap_or_else(|| ".".into()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn checkpoint_target(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.checkpoint_path
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| out.join("model.ckpt"))
}

/// Context string "u1||u2||u3" to tokenized utterances.
fn parse_context(context: &str) -> Result<Vec<Vec<String>>> {
    let utterances: Vec<Vec<String>> = context.split("||").map(tokenize).collect();
    if utterances.iter().all(Vec::is_empty) {
        return Err(Error::Usage("empty context: pass utterances separated by ||".into()));
    }
    Ok(utterances)
}

pub(crate) fn train(args: &ConfigArgs) -> Result<u8> {
    let cfg = args.build()?;
    let train_path = cfg
        .train_path
        .as_ref()
        .ok_or_else(|| Error::Config("training dataset required (--train)".into()))?;
    let raw_train = parse_dataset(train_path)?;
    let out = out_dir(&cfg)?;
    let ckpt_path = checkpoint_target(&cfg, &out);
    let vocab = Vocabulary::build(&raw_train, cfg.min_count);

    if cfg.model == ModelKind::TfIdf {
        let stats = DfStats::from_training(&raw_train);
        checkpoint::save_tfidf(&ckpt_path, &cfg.without_paths(), &vocab, &stats)?;
        write_text(
            &out.join("history.txt"),
            &format!("model=tfidf\tdocuments={}\tterms={}\n", stats.n_docs, stats.df.len()),
        )?;
        write_text(&out.join("run.cfg"), &cfg.to_kv())?;
        println!("tfidf statistics saved to {}", ckpt_path.display());
        return Ok(0);
    }

    let valid_path = cfg
        .valid_path
        .as_ref()
        .ok_or_else(|| Error::Config("validation dataset required (--valid)".into()))?;
    let raw_valid = parse_dataset(valid_path)?;
    let single = cfg.model.single_turn();
    let train_set = encode_batch(&raw_train, &vocab, cfg.max_turns, cfg.max_len, single)?;
    let valid_set = encode_batch(&raw_valid, &vocab, cfg.max_turns, cfg.max_len, single)?;
    let valid_groups = ranking_groups(&raw_valid);

    let mut rng = seqmatch::seeded_rng(cfg.seed);
    let embedding_init = match &cfg.embeddings_path {
        Some(p) => Some(load_pretrained_embeddings(p, &vocab, cfg.embed_dim, &mut rng)?),
        None => None,
    };
    let model_cfg = cfg.model_config(vocab.len())?;
    let mut model = MatchModel::with_embedding(model_cfg, embedding_init, &mut rng);

    let outcome =
        seqmatch::train::train(&mut model, &train_set, &valid_set, &valid_groups, &cfg.train_config())?;

    checkpoint::save_neural(&ckpt_path, &cfg.without_paths(), &vocab, &model)?;
    let mut history = String::new();
    for r in &outcome.history {
        history.push_str(&format!(
            "epoch={}\tloss={:.6}\tvalid_r2@1={:.6}\n",
            r.epoch, r.loss, r.valid_r2_at_1
        ));
    }
    history.push_str(&format!(
        "best_epoch={}\tbest_valid_r2@1={:.6}\n",
        outcome.best_epoch, outcome.best_metric
    ));
    write_text(&out.join("history.txt"), &history)?;
    write_text(&out.join("run.cfg"), &cfg.to_kv())?;
    println!(
        "trained {} epochs; best validation R2@1 {:.4} at epoch {}; checkpoint {}",
        outcome.history.len(),
        outcome.best_metric,
        outcome.best_epoch,
        ckpt_path.display()
    );
    Ok(0)
}

fn scores_for(
    ck: &checkpoint::Checkpoint,
    cfg: &RunConfig,
    raw: &[RawInstance],
) -> Result<Vec<f64>> {
    match &ck.payload {
        Payload::Neural(_) => {
            let model = ck.build_model_as(cfg)?;
            let set = encode_batch(
                raw,
                &ck.vocab,
                cfg.max_turns,
                model.config.max_len,
                cfg.model.single_turn(),
            )?;
            Ok(score_all(&model, &set, cfg.workers))
        }
        Payload::TfIdf(stats) => Ok(raw
            .iter()
            .map(|r| tfidf_baseline_score(&r.utterances, &r.response, stats))
            .collect()),
    }
}

pub(crate) fn evaluate(args: &ConfigArgs, bucket: Option<&str>) -> Result<u8> {
    let flags = args.build()?;
    let ckpt_path = flags
        .checkpoint_path
        .as_ref()
        .ok_or_else(|| Error::Usage("checkpoint required (--checkpoint)".into()))?;
    let ck = checkpoint::load(Path::new(ckpt_path))?;
    let mut cfg = ck.config.clone();
    args.overlay(&mut cfg)?;

    let test_path = cfg
        .test_path
        .as_ref()
        .ok_or_else(|| Error::Config("test dataset required (--test)".into()))?;
    let raw = parse_dataset(test_path)?;
    let groups = ranking_groups(&raw);
    let labels: Vec<u8> = raw.iter().map(|r| r.label).collect();
    let turn_counts: Vec<usize> = raw.iter().map(|r| r.utterances.len()).collect();
    let scores = scores_for(&ck, &cfg, &raw)?;

    let protocol = cfg.mode.protocol();
    let (mut report, run) =
        metrics::evaluate(|i| scores[i], &groups, &labels, &turn_counts, protocol)?;
    if let Some(bucket) = bucket {
        let bucket = LengthBucket::parse(bucket)?;
        let bucketed = bucket_run(&run, bucket);
        if bucketed.groups.is_empty() {
            return Err(Error::Protocol("no groups fall in the requested bucket".into()));
        }
        let rows = protocol
            .metrics()
            .into_iter()
            .map(|m| compute_metric(&bucketed, m))
            .collect::<Result<Vec<_>>>()?;
        report = Report {
            rows,
            groups_evaluated: bucketed.groups.len(),
            groups_removed: report.groups_removed,
        };
    }

    print!("{}", report.table());
    let out = out_dir(&cfg)?;
    write_text(&out.join("metrics.txt"), &report.records())?;
    let mut dump = String::new();
    for (gid, range) in groups.iter().enumerate() {
        for (cid, idx) in range.clone().enumerate() {
            dump.push_str(&format!("{gid}\t{cid}\t{:.6}\t{}\n", scores[idx], labels[idx]));
        }
    }
    write_text(&out.join("scores.tsv"), &dump)?;
    Ok(0)
}

pub(crate) fn score(args: &ConfigArgs, context: &str, candidates: &[String]) -> Result<u8> {
    let flags = args.build()?;
    let ckpt_path = flags
        .checkpoint_path
        .as_ref()
        .ok_or_else(|| Error::Usage("checkpoint required (--checkpoint)".into()))?;
    let ck = checkpoint::load(Path::new(ckpt_path))?;
    let utterances = parse_context(context)?;
    let mut cfg = ck.config.clone();
    args.overlay(&mut cfg)?;
    let raw: Vec<RawInstance> = candidates
        .iter()
        .map(|c| RawInstance { label: 0, utterances: utterances.clone(), response: tokenize(c) })
        .collect();
    let scores = scores_for(&ck, &cfg, &raw)?;

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    for (rank, &i) in order.iter().enumerate() {
        println!("{}\t{:.6}\t{}", rank + 1, scores[i], candidates[i]);
    }
    Ok(0)
}

pub(crate) fn retrieve(
    args: &ConfigArgs,
    context: &str,
    build_index: Option<PathBuf>,
    save_index: Option<PathBuf>,
    index_path: Option<PathBuf>,
    k: Option<usize>,
) -> Result<u8> {
    let cfg = args.build()?;
    let index = if let Some(path) = index_path.or_else(|| cfg.index_path.as_ref().map(PathBuf::from))
    {
        InvertedIndex::load(&path)?
    } else if let Some(data) = build_index {
        let raw = parse_dataset(&data)?;
        let entries: Vec<(String, Option<String>)> = raw
            .iter()
            .map(|r| {
                let text = r.response.join(" ");
                let ctx = r
                    .utterances
                    .iter()
                    .map(|u| u.join(" "))
                    .collect::<Vec<String>>()
                    .join(" | ");
                (text, Some(ctx))
            })
            .collect();
        InvertedIndex::build(entries)?
    } else {
        return Err(Error::Usage("need --index or --build-index".into()));
    };
    if let Some(path) = save_index {
        index.save(&path)?;
        eprintln!("index with {} documents saved to {}", index.len(), path.display());
    }

    let utterances = parse_context(context)?;
    let query = expand_message(&utterances, &index);
    eprintln!(
        "expanded query: message=[{}] keywords=[{}]",
        query.message.join(" "),
        query.keywords.join(" ")
    );
    let k = k.unwrap_or(cfg.topk);
    let result = retrieve_candidates(&query.tokens(), &index, k)?;
    if result.truncated_to_corpus {
        eprintln!("note: k={k} exceeds the corpus size; returning all {} documents", index.len());
    }
    let mut tsv = String::new();
    for (rank, hit) in result.hits.iter().enumerate() {
        tsv.push_str(&format!("0\t{}\t{:.6}\t{}\n", hit.doc_id, hit.score, rank + 1));
    }
    print!("{tsv}");
    if cfg.out_dir.is_some() {
        let out = out_dir(&cfg)?;
        write_text(&out.join("retrieved.tsv"), &tsv)?;
    }
    Ok(0)
}

fn grid_block(grid: &Grid, label: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!("rows: {}\n", grid.rows));
    out.push_str(&format!("cols: {}\n", grid.cols));
    out.push_str(&format!("labels: {label}\n"));
    for i in 0..grid.rows {
        let row: Vec<String> = grid.row(i).iter().map(|v| format!("{v:.6e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub(crate) fn visualize(args: &ConfigArgs, context: &str, response: &str) -> Result<u8> {
    let flags = args.build()?;
    let ckpt_path = flags
        .checkpoint_path
        .as_ref()
        .ok_or_else(|| Error::Usage("checkpoint required (--checkpoint)".into()))?;
    let ck = checkpoint::load(Path::new(ckpt_path))?;
    let Payload::Neural(_) = ck.payload else {
        return Err(Error::Usage("visualize requires a neural checkpoint".into()));
    };
    let mut cfg = ck.config.clone();
    args.overlay(&mut cfg)?;
    let model = ck.build_model_as(&cfg)?;
    let utterances = parse_context(context)?;
    let raw = vec![RawInstance {
        label: 1,
        utterances: utterances.clone(),
        response: tokenize(response),
    }];
    let set = encode_batch(
        &raw,
        &ck.vocab,
        cfg.max_turns,
        model.config.max_len,
        cfg.model.single_turn(),
    )?;
    let inst = set.instance(0);
    let (g, trace) = model.score_traced(&inst);

    let out = out_dir(&flags)?;
    let real = inst.real_turns();
    let decode = |ids: &[u32], len: usize| {
        ids[..len].iter().map(|&id| ck.vocab.token(id).to_string()).collect::<Vec<_>>().join(" ")
    };
    let resp_text = decode(inst.response, inst.response_len);
    let mut meta = String::new();
    meta.push_str(&format!("model = {}\n", ck.config.model.as_str()));
    meta.push_str(&format!("score = {g:.6}\n"));
    meta.push_str(&format!("turns = {}\n", trace.turns.len()));
    meta.push_str(&format!("response = {resp_text}\n"));

    let (row_side, col_side) = match model.config.matcher {
        MatcherKind::Scn => ("utterance", "response"),
        MatcherKind::San => ("response", "utterance"),
    };
    for (i, turn) in trace.turns.iter().enumerate() {
        let turn_text = decode(inst.turn(real[i]), inst.turn_lens[real[i]]);
        meta.push_str(&format!("turn{:02} = {turn_text}\n", i + 1));
        let label = match model.config.matcher {
            MatcherKind::Scn => format!("rows={row_side}: {turn_text} | cols={col_side}: {resp_text}"),
            MatcherKind::San => format!("rows={row_side}: {resp_text} | cols={col_side}: {turn_text}"),
        };
        if let Some(grid) = &turn.word {
            write_text(&out.join(format!("turn{:02}_word.txt", i + 1)), &grid_block(grid, &label))?;
        }
        if let Some(grid) = &turn.segment {
            write_text(
                &out.join(format!("turn{:02}_segment.txt", i + 1)),
                &grid_block(grid, &label),
            )?;
        }
    }
    let gates = Grid {
        rows: 2,
        cols: trace.update_gates.len(),
        values: trace
            .update_gates
            .iter()
            .chain(&trace.reset_gates)
            .copied()
            .collect(),
    };
    write_text(
        &out.join("gates.txt"),
        &grid_block(&gates, "rows=update,reset | cols=turns (mean gate activation)"),
    )?;
    write_text(&out.join("meta.txt"), &meta)?;
    println!("score {g:.6}; trace for {} turns written to {}", trace.turns.len(), out.display());
    Ok(0)
}

pub(crate) fn gradcheck(fault: Option<&str>) -> Result<u8> {
    let reports = checks::run_all(fault)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<18} worst {:>12.3e}  tolerance {:>8.0e}  {}",
            r.name,
            r.worst_error,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        println!("gradient checks: all {} passed", reports.len());
        Ok(0)
    } else {
        eprintln!("gradient check FAILED for: {}", failed.join(", "));
        Ok(1)
    }
}

pub(crate) fn bench(args: &ConfigArgs) -> Result<u8> {
    let cfg = args.build()?;
    let report = seqmatch::bench::run_bench(&cfg)?;
    print!("{}", report.render());
    if cfg.out_dir.is_some() {
        let out = out_dir(&cfg)?;
        write_text(&out.join("bench.txt"), &report.render())?;
    }
    Ok(0)
}
