//! `memaudit audit`: epoch-independent memorisation measurement of one
//! checkpoint against one corpus. Writes audit.csv, audit.json and the
//! debug pair dump pairs.jsonl into the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;

use memaudit::corpus::{
    dump_pairs_jsonl, filter_collisions, load_corpus_with, sample_pairs, ByteTokenizer,
    ExtractionPair, Split,
};
use memaudit::metrics::{mem_percent_per_k, ngram_mem_percent};
use memaudit::model::ModelParams;

use crate::{AuditArgs, CmdError};

pub fn run(args: &AuditArgs) -> Result<(), CmdError> {
    if args.k.is_empty() || args.k.iter().any(|&k| k < 1) {
        return Err(CmdError::Usage("--k needs at least one value >= 1".into()));
    }
    if args.suffix_len < 1 {
        return Err(CmdError::Usage("--suffix-len must be >= 1".into()));
    }
    if args.ngrams.is_empty() || args.ngrams.iter().any(|&n| n < 1) {
        return Err(CmdError::Usage("--ngrams needs at least one value >= 1".into()));
    }

    let params = ModelParams::load_checkpoint(&args.ckpt)?;
    let tokenizer = ByteTokenizer;
    let corpus = load_corpus_with(&args.corpus, Split::Train, &tokenizer, args.max_samples)?;
    if let Some(max_id) = corpus.max_token_id() {
        if max_id as usize >= params.config().vocab_size {
            return Err(CmdError::Data(format!(
                "corpus token id {max_id} exceeds checkpoint vocabulary {}",
                params.config().vocab_size
            )));
        }
    }
    let mut ks = args.k.clone();
    ks.sort_unstable();
    ks.dedup();
    let mut all_pairs: Vec<ExtractionPair> = Vec::new();
    let mut skipped = 0usize;
    let mut dropped = 0usize;
    for &k in &ks {
        let sampled = sample_pairs(&corpus, k, args.suffix_len, args.seed);
        skipped += sampled.skipped_short;
        let filtered = filter_collisions(sampled.pairs);
        dropped += filtered.dropped;
        all_pairs.extend(filtered.pairs);
    }
    if all_pairs.is_empty() {
        return Err(CmdError::Data("no extractable pairs after collision filtering".into()));
    }

    let sizes = args.ngrams.iter().copied().collect();
    let mem = mem_percent_per_k(&params, &all_pairs, args.slack)?;
    let ngram = ngram_mem_percent(&params, &all_pairs, &sizes, args.slack)?;

    fs::create_dir_all(&args.out)?;

    let mut csv = Vec::new();
    writeln!(csv, "metric,k,value")?;
    for (k, value) in &mem {
        writeln!(csv, "mem_percent,{k},{value}")?;
    }
    writeln!(csv, "ngram_mem_percent,,{ngram}")?;
    fs::write(args.out.join("audit.csv"), csv)?;

    let json = serde_json::json!({
        "checkpoint": args.ckpt.display().to_string(),
        "corpus": args.corpus.display().to_string(),
        "k_values": ks,
        "suffix_len": args.suffix_len,
        "ngram_sizes": args.ngrams,
        "slack": args.slack,
        "seed": args.seed,
        "pairs_total": all_pairs.len(),
        "pairs_dropped_collisions": dropped,
        "samples_skipped_short": skipped,
        "mem_percent": mem.iter().map(|(k, v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>(),
        "ngram_mem_percent": ngram,
    });
    fs::write(args.out.join("audit.json"), serde_json::to_string_pretty(&json).unwrap())?;

    let mut dump = Vec::new();
    dump_pairs_jsonl(&all_pairs, &mut dump)?;
    fs::write(args.out.join("pairs.jsonl"), dump)?;

    for (k, value) in &mem {
        println!("mem_percent k={k}: {value}");
    }
    println!("ngram_mem_percent: {ngram}");
    Ok(())
}
