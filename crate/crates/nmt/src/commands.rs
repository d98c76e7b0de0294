//! Drivers behind the `nmt` binary's subcommands. Everything here is a thin
//! orchestration layer over the library: file handling in, library calls,
//! deterministic text out.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bpe::{bpe_decode_line, bpe_learn, word_frequencies, MergeTable, Segmenter};
use crate::checkpoint;
use crate::config::Config;
use crate::data::{filter_long, mark, read_lines, TrainPair, TrainPlan, Vocab, EOS_ID};
use crate::decode::{
    beam_search, force_score, rerank, BeamConfig, EnsembleSpec, NBestEntry, ScoreDirection,
};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::seq2seq::Seq2SeqModel;
use crate::train::{self, alignment_matrix, GradMode, TrainSettings};

/// Builds a vocabulary file from a corpus.
pub fn cmd_vocab(corpus: &Path, output: &Path, limit: usize) -> Result<()> {
    let lines = read_lines(corpus)?;
    let vocab = Vocab::build(lines.iter().map(|s| s.as_str()), limit)?;
    vocab.save(output)?;
    eprintln!(
        "vocab\tsize\t{}\tcorpus\t{}",
        vocab.len(),
        corpus.display()
    );
    Ok(())
}

/// Learns a BPE merge table from a corpus.
pub fn cmd_bpe_learn(corpus: &Path, output: &Path, num_merges: usize) -> Result<()> {
    let lines = read_lines(corpus)?;
    let freq = word_frequencies(lines.iter().map(|s| s.as_str()));
    let table = bpe_learn(&freq, num_merges);
    table.save(output)?;
    eprintln!("bpe-learn\tmerges\t{}", table.len());
    Ok(())
}

/// Segments text with a learned merge table.
pub fn cmd_bpe_apply(merges: &Path, input: &Path, output: &mut dyn Write) -> Result<()> {
    let table = MergeTable::load(merges)?;
    let mut seg = Segmenter::new(&table);
    for line in read_lines(input)? {
        writeln!(output, "{}", seg.segment_line(&line))?;
    }
    Ok(())
}

fn load_vocab(config: &Config, key: &str) -> Result<Vocab> {
    Vocab::load(Path::new(config.require(key)?))
}

fn maybe_merges(config: &Config, key: &str) -> Result<Option<MergeTable>> {
    config
        .get(key)
        .map(|p| MergeTable::load(Path::new(p)))
        .transpose()
}

fn encode_corpus(
    lines: &[String],
    vocab: &Vocab,
    merges: Option<&MergeTable>,
) -> Vec<Vec<usize>> {
    let mut seg = merges.map(Segmenter::new);
    lines
        .iter()
        .map(|line| match &mut seg {
            Some(seg) => vocab.encode_line(&seg.segment_line(line)),
            None => vocab.encode_line(line),
        })
        .collect()
}

fn read_parallel_corpus(
    config: &Config,
    src_key: &str,
    tgt_key: &str,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    src_merges: Option<&MergeTable>,
    tgt_merges: Option<&MergeTable>,
) -> Result<Vec<TrainPair>> {
    let src_lines = read_lines(Path::new(config.require(src_key)?))?;
    let tgt_lines = read_lines(Path::new(config.require(tgt_key)?))?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Data(format!(
            "parallel corpora disagree: {} vs {} lines",
            src_lines.len(),
            tgt_lines.len()
        )));
    }
    let src = encode_corpus(&src_lines, src_vocab, src_merges);
    let tgt = encode_corpus(&tgt_lines, tgt_vocab, tgt_merges);
    Ok(src
        .into_iter()
        .zip(tgt)
        .map(|(s, t)| TrainPair {
            src: mark(&s),
            tgt: mark(&t),
            alignment: None,
        })
        .collect())
}

/// Parses one guided-alignment line: whitespace-separated `tgt-src` index
/// pairs over the raw (unmarked) tokens.
fn parse_alignment_line(line: &str) -> Result<Vec<(usize, usize)>> {
    let mut points = Vec::new();
    for part in line.split_whitespace() {
        let (t, s) = part
            .split_once('-')
            .ok_or_else(|| Error::Data(format!("bad alignment point `{part}`")))?;
        let t = t
            .parse()
            .map_err(|_| Error::Data(format!("bad alignment point `{part}`")))?;
        let s = s
            .parse()
            .map_err(|_| Error::Data(format!("bad alignment point `{part}`")))?;
        points.push((t, s));
    }
    Ok(points)
}

fn settings_from_config(config: &Config) -> Result<TrainSettings> {
    let (optimizer, hyper) = config.optimizer()?;
    let grad_mode_name = config.get("train.grad-mode").unwrap_or("average");
    let grad_mode = GradMode::parse(grad_mode_name)
        .ok_or_else(|| Error::Config(format!("unknown train.grad-mode `{grad_mode_name}`")))?;
    Ok(TrainSettings {
        plan: TrainPlan {
            epochs: config.get_usize("train.epochs", 10)?,
            maxi_batch: config.get_usize("train.maxi-batch", 1600)?,
            mini_batch: config.get_usize("train.mini-batch", 16)?,
            shuffle_seed: config.get_u64("train.seed", 1)?,
            validation_every: config.get_usize("train.validation-every", 0)?,
            max_len: config.get_usize("data.max-len", 100)?,
        },
        optimizer,
        hyper,
        grad_mode,
        align_weight: config.get_f32("train.align-weight", 0.5)?,
        align_mode: config.align_mode()?,
        patience: config.get_usize("train.patience", 5)?,
        checkpoint_every: config.get_usize("train.checkpoint-every", 0)?,
        threads: config.get_usize("train.threads", 0)?,
    })
}

/// Runs the training pipeline: corpora in, checkpoints and a log out.
/// `init_checkpoint` continues from saved weights (fine-tuning on new data);
/// `guided_alignment` attaches external alignments to the training pairs.
pub fn cmd_train(
    config: &Config,
    out_prefix: &Path,
    init_checkpoint: Option<&Path>,
    guided_alignment: Option<&Path>,
    log: &mut dyn Write,
) -> Result<()> {
    let src_vocab = load_vocab(config, "data.src-vocab")?;
    let tgt_vocab = load_vocab(config, "data.tgt-vocab")?;
    let src_merges = maybe_merges(config, "data.merges-src")?;
    let tgt_merges = maybe_merges(config, "data.merges-tgt")?;
    let settings = settings_from_config(config)?;

    let mut pairs = read_parallel_corpus(
        config,
        "data.train-src",
        "data.train-tgt",
        &src_vocab,
        &tgt_vocab,
        src_merges.as_ref(),
        tgt_merges.as_ref(),
    )?;

    if let Some(path) = guided_alignment {
        let lines = read_lines(path)?;
        if lines.len() != pairs.len() {
            return Err(Error::Data(format!(
                "alignment file has {} lines, corpus {}",
                lines.len(),
                pairs.len()
            )));
        }
        for (pair, line) in pairs.iter_mut().zip(&lines) {
            let points = parse_alignment_line(line)?;
            pair.alignment = Some(alignment_matrix(
                &points,
                pair.tgt.len() - 2,
                pair.src.len() - 2,
            ));
        }
    }

    let (mut pairs, dropped) = filter_long(pairs, settings.plan.max_len);
    if dropped > 0 {
        eprintln!("train\tdropped-long\t{dropped}");
    }
    pairs.shrink_to_fit();

    let valid = if config.get("data.valid-src").is_some() {
        read_parallel_corpus(
            config,
            "data.valid-src",
            "data.valid-tgt",
            &src_vocab,
            &tgt_vocab,
            src_merges.as_ref(),
            tgt_merges.as_ref(),
        )?
    } else {
        Vec::new()
    };

    let mut model = match init_checkpoint {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            let (src_fp, tgt_fp) = checkpoint::fingerprints_from_meta(&ckpt.meta)?;
            if src_fp != src_vocab.fingerprint() || tgt_fp != tgt_vocab.fingerprint() {
                return Err(Error::Data(
                    "checkpoint was trained with different vocabularies".into(),
                ));
            }
            checkpoint::restore_model(&ckpt)?
        }
        None => {
            let mc = config.model_config(src_vocab.len(), tgt_vocab.len())?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.get_u64("train.seed", 1)?);
            Seq2SeqModel::new(mc, &mut rng)
        }
    };

    let meta = checkpoint::model_meta(
        &model.config,
        src_vocab.fingerprint(),
        tgt_vocab.fingerprint(),
    );
    if let Some(dir) = out_prefix.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    // initial checkpoint so a 0-epoch run still leaves a loadable model
    let initial = with_suffix(out_prefix, "-00000000");
    checkpoint::save(&initial, &meta, &model.params, None)?;

    let meta_for_cb = meta.clone();
    let prefix = out_prefix.to_path_buf();
    let report = train::train(
        &mut model,
        &pairs,
        &valid,
        &settings,
        log,
        move |update, model, optimizer: &Optimizer| {
            let path = with_suffix(&prefix, &format!("-{update:08}"));
            checkpoint::save(
                &path,
                &meta_for_cb,
                &model.params,
                Some(("optimizer", optimizer)),
            )
        },
    )?;
    checkpoint::save(out_prefix, &meta, &model.params, None)?;
    eprintln!(
        "train\tupdates\t{}\tstopped-early\t{}",
        report.updates, report.stopped_early
    );
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let stem = prefix
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = prefix
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    prefix.with_file_name(format!("{stem}{suffix}{ext}"))
}

/// Picks the k most recent periodic checkpoints written next to `prefix`.
pub fn last_checkpoints(prefix: &Path, k: usize) -> Result<Vec<PathBuf>> {
    let dir = prefix.parent().unwrap_or(Path::new("."));
    let stem = prefix
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if let Some(rest) = name.strip_prefix(&format!("{stem}-")) {
            if let Ok(update) = rest.parse::<u64>() {
                found.push((update, path));
            }
        }
    }
    found.sort();
    let start = found.len().saturating_sub(k);
    Ok(found[start..].iter().map(|(_, p)| p.clone()).collect())
}

fn load_ensemble(paths: &[PathBuf]) -> Result<Vec<Seq2SeqModel>> {
    if paths.is_empty() {
        return Err(Error::Data("no checkpoints given".into()));
    }
    let mut models = Vec::with_capacity(paths.len());
    let mut reference: Option<BTreeMap<String, String>> = None;
    for path in paths {
        let ckpt = checkpoint::load(path)?;
        match &reference {
            None => reference = Some(ckpt.meta.clone()),
            Some(m) => {
                if *m != ckpt.meta {
                    return Err(Error::Data(format!(
                        "ensemble member {} has incompatible architecture metadata",
                        path.display()
                    )));
                }
            }
        }
        models.push(checkpoint::restore_model(&ckpt)?);
    }
    Ok(models)
}

fn beam_config_from(config: &Config) -> Result<BeamConfig> {
    Ok(BeamConfig {
        beam: config.get_usize("decode.beam", 5)?,
        normalize: config.get_bool("decode.normalize", false)?,
        max_len_factor: config.get_f32("decode.max-len-factor", 2.0)?,
        coverage_over_weight: config.get_f32("decode.coverage-over-weight", 0.0)?,
        coverage_under_weight: config.get_f32("decode.coverage-under-weight", 0.0)?,
        coverage_in_search: config.get_bool("decode.coverage-in-search", false)?,
    })
}

/// Translates input lines with one model or an ensemble of checkpoints.
/// Lines are processed in parallel and written back in input order.
pub fn cmd_translate(
    config: &Config,
    checkpoints: &[PathBuf],
    input: &Path,
    output: &mut dyn Write,
    nbest: Option<usize>,
) -> Result<()> {
    let src_vocab = load_vocab(config, "data.src-vocab")?;
    let tgt_vocab = load_vocab(config, "data.tgt-vocab")?;
    let src_merges = maybe_merges(config, "data.merges-src")?;
    let models = load_ensemble(checkpoints)?;
    for m in &models {
        if m.config.src_vocab != src_vocab.len() || m.config.tgt_vocab != tgt_vocab.len() {
            return Err(Error::Data(
                "model and vocabulary sizes disagree".into(),
            ));
        }
    }
    let ensemble = EnsembleSpec::new(models.iter().collect())?;
    let cfg = beam_config_from(config)?;

    let lines = read_lines(input)?;
    let sources = encode_corpus(&lines, &src_vocab, src_merges.as_ref());

    let results: Vec<Result<Vec<NBestEntry>>> = sources
        .par_iter()
        .enumerate()
        .map(|(id, ids)| {
            let hyps = beam_search(&ensemble, &mark(ids), &cfg)?;
            let take = nbest.unwrap_or(1).min(hyps.len());
            Ok(hyps[..take]
                .iter()
                .map(|h| {
                    let content: Vec<usize> = h
                        .tokens
                        .iter()
                        .copied()
                        .filter(|&t| t != EOS_ID)
                        .collect();
                    let text = tgt_vocab.decode_ids(&content);
                    let (text, _) = bpe_decode_line(&text);
                    NBestEntry {
                        sentence_id: id,
                        tokens: text.split_whitespace().map(|s| s.to_string()).collect(),
                        score: h.final_score,
                    }
                })
                .collect())
        })
        .collect();

    for entries in results {
        let entries = entries?;
        if nbest.is_some() {
            for e in &entries {
                writeln!(output, "{}", e.to_line())?;
            }
        } else {
            writeln!(output, "{}", entries[0].tokens.join(" "))?;
        }
    }
    Ok(())
}

/// Forced decoding of a parallel file: per line, the total log-probability
/// and the token count, tab-separated.
pub fn cmd_score(
    config: &Config,
    checkpoint_path: &Path,
    src: &Path,
    tgt: &Path,
    output: &mut dyn Write,
) -> Result<()> {
    let src_vocab = load_vocab(config, "data.src-vocab")?;
    let tgt_vocab = load_vocab(config, "data.tgt-vocab")?;
    let src_merges = maybe_merges(config, "data.merges-src")?;
    let tgt_merges = maybe_merges(config, "data.merges-tgt")?;
    let model = checkpoint::restore_model(&checkpoint::load(checkpoint_path)?)?;

    let src_lines = read_lines(src)?;
    let tgt_lines = read_lines(tgt)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Data(format!(
            "line counts differ: {} vs {}",
            src_lines.len(),
            tgt_lines.len()
        )));
    }
    let sources = encode_corpus(&src_lines, &src_vocab, src_merges.as_ref());
    let targets = encode_corpus(&tgt_lines, &tgt_vocab, tgt_merges.as_ref());
    for (id, (s, t)) in sources.iter().zip(&targets).enumerate() {
        let (per_token, total) = force_score(&model, &mark(s), &mark(t))?;
        writeln!(output, "{id}\t{total:.6}\t{}", per_token.len())?;
    }
    Ok(())
}

/// Translates target-side monolingual text with a reverse-direction model,
/// producing a line-aligned synthetic parallel corpus.
pub fn cmd_backtranslate(
    config: &Config,
    reverse_checkpoint: &Path,
    mono: &Path,
    out_src: &Path,
    out_tgt: &Path,
) -> Result<()> {
    let mut synth_src = std::io::BufWriter::new(std::fs::File::create(out_src)?);
    cmd_translate(
        config,
        &[reverse_checkpoint.to_path_buf()],
        mono,
        &mut synth_src,
        None,
    )?;
    synth_src.flush()?;
    // the monolingual text is the target side, copied verbatim
    let lines = read_lines(mono)?;
    let mut tgt = std::io::BufWriter::new(std::fs::File::create(out_tgt)?);
    for line in &lines {
        writeln!(tgt, "{line}")?;
    }
    tgt.flush()?;
    Ok(())
}

/// Reranks an n-best file with additional scorers; right-to-left scorers
/// see reversed candidates.
pub fn cmd_rerank(
    config: &Config,
    nbest_path: &Path,
    source_path: &Path,
    scorers: &[(PathBuf, ScoreDirection)],
    weights: Option<Vec<f64>>,
    output: &mut dyn Write,
) -> Result<()> {
    let src_vocab = load_vocab(config, "data.src-vocab")?;
    let tgt_vocab = load_vocab(config, "data.tgt-vocab")?;
    let src_merges = maybe_merges(config, "data.merges-src")?;

    let models: Vec<Seq2SeqModel> = scorers
        .iter()
        .map(|(p, _)| checkpoint::restore_model(&checkpoint::load(p)?))
        .collect::<Result<Vec<_>>>()?;
    let scorer_refs: Vec<(&Seq2SeqModel, ScoreDirection)> = models
        .iter()
        .zip(scorers.iter().map(|(_, d)| *d))
        .collect();

    let entries: Vec<NBestEntry> = read_lines(nbest_path)?
        .iter()
        .filter(|l| !l.is_empty())
        .map(|l| NBestEntry::parse(l))
        .collect::<Result<Vec<_>>>()?;
    let src_lines = read_lines(source_path)?;
    let sources = encode_corpus(&src_lines, &src_vocab, src_merges.as_ref());

    // group candidates by sentence id, keeping file order
    let mut groups: BTreeMap<usize, Vec<&NBestEntry>> = BTreeMap::new();
    for e in &entries {
        groups.entry(e.sentence_id).or_default().push(e);
    }
    for (id, group) in groups {
        let src = sources.get(id).ok_or_else(|| {
            Error::Data(format!("n-best references sentence {id} beyond the source"))
        })?;
        let candidates: Vec<Vec<usize>> = group
            .iter()
            .map(|e| {
                let joined = e.tokens.join(" ");
                tgt_vocab.encode_line(&joined)
            })
            .collect();
        let order = rerank(&mark(src), &candidates, &scorer_refs, weights.as_deref())?;
        for (rank, (idx, score)) in order.iter().enumerate() {
            let e = group[*idx];
            writeln!(
                output,
                "{} ||| {} ||| {}",
                e.sentence_id,
                e.tokens.join(" "),
                score
            )?;
            let _ = rank;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn write_file(dir: &Path, name: &str, content: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, content).unwrap();
        path
    }

    fn toy_config(dir: &Path) -> (Config, PathBuf) {
        // a tiny copy corpus
        let lines: Vec<String> = (0..24)
            .map(|i| format!("{} {}", ["a", "b", "c"][i % 3], ["d", "e"][i % 2]))
            .collect();
        let corpus = lines.join("\n") + "\n";
        let src = write_file(dir, "train.src", &corpus);
        let tgt = write_file(dir, "train.tgt", &corpus);
        let vocab_path = dir.join("vocab.txt");
        cmd_vocab(&src, &vocab_path, 20).unwrap();

        let mut cfg = Config::new();
        cfg.set("data.train-src", src.to_str().unwrap()).unwrap();
        cfg.set("data.train-tgt", tgt.to_str().unwrap()).unwrap();
        cfg.set("data.src-vocab", vocab_path.to_str().unwrap())
            .unwrap();
        cfg.set("data.tgt-vocab", vocab_path.to_str().unwrap())
            .unwrap();
        cfg.set("model.embed-dim", "8").unwrap();
        cfg.set("model.hidden-dim", "8").unwrap();
        cfg.set("train.epochs", "2").unwrap();
        cfg.set("train.mini-batch", "8").unwrap();
        cfg.set("train.maxi-batch", "24").unwrap();
        (cfg, dir.join("model.nmtf"))
    }

    #[test]
    fn zero_epoch_training_leaves_a_loadable_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, model_path) = toy_config(dir.path());
        cfg.set("train.epochs", "0").unwrap();
        let mut log = Vec::new();
        cmd_train(&cfg, &model_path, None, None, &mut log).unwrap();
        let initial = dir.path().join("model-00000000.nmtf");
        assert!(initial.exists());
        assert!(model_path.exists());
        let ckpt = checkpoint::load(&initial).unwrap();
        checkpoint::restore_model(&ckpt).unwrap();
    }

    #[test]
    fn fine_tune_with_zero_lr_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, model_path) = toy_config(dir.path());
        let mut log = Vec::new();
        cmd_train(&cfg, &model_path, None, None, &mut log).unwrap();
        let before = checkpoint::load(&model_path).unwrap();

        // one more epoch from the checkpoint at learning rate 0
        cfg.set("train.lr", "0").unwrap();
        cfg.set("train.epochs", "1").unwrap();
        let tuned_path = dir.path().join("tuned.nmtf");
        let mut log = Vec::new();
        cmd_train(&cfg, &tuned_path, Some(&model_path), None, &mut log).unwrap();
        let after = checkpoint::load(&tuned_path).unwrap();

        assert_eq!(before.tensors.len(), after.tensors.len());
        for ((n1, t1), (n2, t2)) in before.tensors.iter().zip(&after.tensors) {
            assert_eq!(n1, n2);
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{n1} changed");
            }
        }
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, model_path) = toy_config(dir.path());
        let mut log = Vec::new();
        cmd_train(&cfg, &model_path, None, None, &mut log).unwrap();

        // swap in a different vocabulary
        let other_corpus = write_file(dir.path(), "other.txt", "x y z\nz y\n");
        let other_vocab = dir.path().join("other-vocab.txt");
        cmd_vocab(&other_corpus, &other_vocab, 10).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.set("data.src-vocab", other_vocab.to_str().unwrap())
            .unwrap();
        cfg2.set("data.train-src", other_corpus.to_str().unwrap())
            .unwrap();
        cfg2.set("data.train-tgt", other_corpus.to_str().unwrap())
            .unwrap();
        let mut log = Vec::new();
        let err = cmd_train(
            &cfg2,
            &dir.path().join("m2.nmtf"),
            Some(&model_path),
            None,
            &mut log,
        )
        .unwrap_err();
        assert!(err.to_string().contains("vocabularies"));
    }

    #[test]
    fn translate_same_checkpoint_twice_is_an_identity_ensemble() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, model_path) = toy_config(dir.path());
        cfg.set("train.epochs", "3").unwrap();
        let mut log = Vec::new();
        cmd_train(&cfg, &model_path, None, None, &mut log).unwrap();

        let input = write_file(dir.path(), "input.txt", "a d\nb e\n");
        let mut once = Vec::new();
        cmd_translate(&cfg, &[model_path.clone()], &input, &mut once, None).unwrap();
        let mut twice = Vec::new();
        cmd_translate(
            &cfg,
            &[model_path.clone(), model_path.clone()],
            &input,
            &mut twice,
            None,
        )
        .unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn backtranslate_writes_aligned_files() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, model_path) = toy_config(dir.path());
        let mut log = Vec::new();
        cmd_train(&cfg, &model_path, None, None, &mut log).unwrap();

        let mono = write_file(dir.path(), "mono.txt", "a d\nb e\nc d\n");
        let out_src = dir.path().join("synth.src");
        let out_tgt = dir.path().join("synth.tgt");
        cmd_backtranslate(&cfg, &model_path, &mono, &out_src, &out_tgt).unwrap();
        let src = read_lines(&out_src).unwrap();
        let tgt = read_lines(&out_tgt).unwrap();
        assert_eq!(src.len(), 3);
        assert_eq!(tgt, vec!["a d", "b e", "c d"]);

        // empty input: two empty outputs
        let empty = write_file(dir.path(), "empty.txt", "");
        cmd_backtranslate(&cfg, &model_path, &empty, &out_src, &out_tgt).unwrap();
        assert_eq!(read_lines(&out_src).unwrap().len(), 0);
        assert_eq!(read_lines(&out_tgt).unwrap().len(), 0);
    }

    #[test]
    fn score_reports_per_line_totals() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, model_path) = toy_config(dir.path());
        let mut log = Vec::new();
        cmd_train(&cfg, &model_path, None, None, &mut log).unwrap();

        let src = write_file(dir.path(), "s.txt", "a d\nb e\n");
        let tgt = write_file(dir.path(), "t.txt", "a d\nb e\n");
        let mut out = Vec::new();
        cmd_score(&cfg, &model_path, &src, &tgt, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for (i, line) in lines.iter().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            assert_eq!(fields.len(), 3);
            assert_eq!(fields[0], i.to_string());
            assert!(fields[1].parse::<f64>().unwrap() <= 0.0);
            assert_eq!(fields[2], "3"); // two tokens plus eos
        }

        let short = write_file(dir.path(), "short.txt", "a d\n");
        let mut out = Vec::new();
        assert!(cmd_score(&cfg, &model_path, &src, &short, &mut out).is_err());
    }

    #[test]
    fn checkpoint_every_writes_periodic_dumps() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, model_path) = toy_config(dir.path());
        cfg.set("train.checkpoint-every", "2").unwrap();
        cfg.set("train.epochs", "2").unwrap();
        let mut log = Vec::new();
        cmd_train(&cfg, &model_path, None, None, &mut log).unwrap();
        let last = last_checkpoints(&model_path, 2).unwrap();
        assert!(!last.is_empty());
        // ensemble of the last checkpoints must agree on metadata
        let input = write_file(dir.path(), "in.txt", "a d\n");
        let mut out = Cursor::new(Vec::new());
        cmd_translate(&cfg, &last, &input, &mut out, None).unwrap();
    }
}
